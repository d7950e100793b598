use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::{total_loss, LossConfig};
use super::TrainError;
use crate::model::{Bound, ForwardInput, Mode, Model, ModelConfig};
use crate::tensor::{finite_diff_check_with, FdOptions, GradCheckReport, Tape, Tensor, Var};

/// Central-difference check of the full training loss in 64-bit.
///
/// A random image with `min(2, K)` annotated points drives one forward in
/// training mode; every parameter tensor is probed, at `per_tensor` evenly
/// spaced entries or at all of them when `None`.
pub fn loss_gradient_check(
    config: ModelConfig,
    seed: u64,
    per_tensor: Option<usize>,
    fd: FdOptions,
) -> Result<GradCheckReport, TrainError> {
    let model = Model::<f64>::new(config, seed)?;
    let c = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let image = Tensor::from_fn(&[c.height, c.width, 3], |_| rng.random_range(0.0..1.0));
    let noise = model.sample_noise(&mut rng);
    let points: Vec<[f64; 2]> = (0..c.slots.min(2))
        .map(|_| [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)])
        .collect();
    let loss_cfg = LossConfig::default();
    let f = |t: &mut Tape<f64>, vars: &[Var]| {
        let p = Bound::from_vars(vars.to_vec());
        let input = ForwardInput {
            image: &image,
            noise: &noise,
            points: Some(&points),
            mode: Mode::Train,
        };
        let out = model.forward(t, &p, &input)?;
        Ok(total_loss(t, &image, &out, Some(&points), &loss_cfg)?.total)
    };
    let select = per_tensor.map(|n| {
        move |_: usize, len: usize| -> Vec<usize> {
            let stride = len.div_ceil(n).max(1);
            (0..len).step_by(stride).collect()
        }
    });
    let select_ref = select.as_ref().map(|s| s as &dyn Fn(usize, usize) -> Vec<usize>);
    Ok(finite_diff_check_with(f, model.params.tensors(), fd, select_ref)?)
}
