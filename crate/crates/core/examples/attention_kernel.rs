//! Effect of each attention kernel on a noisy logit map with one bright
//! region: the simplex kernels smooth the map without leaving its range.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slash::model::{ark_apply, effective_kernel_var, KernelKind, KernelVariant};
use slash::tensor::{Tape, Tensor, TensorError};

fn main() -> Result<(), TensorError> {
    let (h, w) = (12, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits = Tensor::<f64>::from_fn(&[h * w, 1], |i| {
        let (y, x) = (i / w, i % w);
        let inside = (3..7).contains(&y) && (4..9).contains(&x);
        let bump = if inside { 2.0 } else { 0.0 };
        bump + rng.random_range(-1.0..1.0)
    });
    let range = |d: &[f64]| (d.iter().copied().fold(f64::MAX, f64::min), d.iter().copied().fold(f64::MIN, f64::max));
    let roughness = |d: &[f64]| (0..h).flat_map(|y| (1..w).map(move |x| (y, x))).map(|(y, x)| (d[y * w + x] - d[y * w + x - 1]).abs()).sum::<f64>();
    let input = logits.to_f64_vec();
    let (lo, hi) = range(&input);
    println!("input        range [{lo:+.3}, {hi:+.3}]  roughness {:.2}", roughness(&input));

    for kind in [KernelKind::Identity, KernelKind::Gaussian, KernelKind::Wnconv] {
        let variant = KernelVariant { kind, size: 3, ..KernelVariant::default() };
        let mut tape = Tape::new();
        let raw = (kind == KernelKind::Wnconv).then(|| tape.constant(Tensor::from_fn(&[3, 3], |i| [0.0, 0.5, 0.0, 0.5, 1.5, 0.5, 0.0, 0.5, 0.0][i])));
        let kernel = effective_kernel_var(&mut tape, &variant, raw)?;
        let m = tape.constant(logits.clone());
        let out = ark_apply(&mut tape, m, kernel, h, w)?;
        let d = tape.value(out).to_f64_vec();
        let (olo, ohi) = range(&d);
        println!("{:<12} range [{olo:+.3}, {ohi:+.3}]  roughness {:.2}", kind.name(), roughness(&d));
    }
    Ok(())
}
