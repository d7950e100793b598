//! A two-layer network on the tape: forward, backward, and a
//! central-difference check of every gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slash::tensor::{finite_diff_check, Tape, Tensor, TensorError, Var};

fn main() -> Result<(), TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rand = |shape: &[usize]| Tensor::<f64>::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let x = rand(&[5, 3]);
    let target = rand(&[5, 2]);
    let params = vec![rand(&[3, 4]), rand(&[4]), rand(&[4, 2])];

    let net = |t: &mut Tape<f64>, p: &[Var]| -> Result<Var, TensorError> {
        let xv = t.constant(x.clone());
        let h = t.matmul(xv, p[0])?;
        let h = t.add_row(h, p[1])?;
        let h = t.tanh(h);
        let y = t.matmul(h, p[2])?;
        let yt = t.constant(target.clone());
        t.mse(y, yt)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = net(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    println!("loss = {:.6}", tape.value(loss).item());
    for (i, v) in vars.iter().enumerate() {
        let g = grads.get_or_zeros(*v, params[i].shape());
        println!("param {i} {:?}: |grad|_max = {:.4e}", params[i].shape(), g.data().iter().fold(0.0f64, |m, x| m.max(x.abs())));
    }

    let report = finite_diff_check(net, &params, 1e-6, None)?;
    println!("finite differences: {} entries, max relative error {:.2e}", report.checked, report.max_rel_error);
    Ok(())
}
