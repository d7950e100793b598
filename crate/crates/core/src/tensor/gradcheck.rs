use super::{Real, Tape, Tensor, TensorError, Var};

/// Worst disagreement between tape and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub tape_grad: f64,
    pub numeric_grad: f64,
    pub checked: usize,
    /// Entries re-probed at a smaller step because the first interval
    /// straddled a kink.
    pub refined: usize,
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Step control for [`finite_diff_check_with`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdOptions {
    pub h: f64,
    /// How many times an entry may be re-probed at a tenth of the step when
    /// its interval looks non-smooth.
    pub kink_retries: usize,
}

/// Departures from smooth curvature larger than this fraction of the slope,
/// and than their rounding noise, mark a kink inside `[x − h, x + h]`.
const KINK_RATIO: f64 = 1e-3;
/// A smaller step is only tried while its rounding noise stays below this
/// fraction of the slope.
const REFINE_NOISE: f64 = 1e-4;

/// Compares the tape gradient of the scalar `f(params)` against central
/// differences with step `h`.
///
/// `f` receives a fresh tape and one leaf per entry of `params` (already
/// marked `requires_grad`) and must return a scalar. `select(i, len)` lists
/// which elements of parameter `i` to probe; `None` probes every element.
/// A NaN anywhere is reported as an error.
pub fn finite_diff_check<T, F>(
    f: F,
    params: &[Tensor<T>],
    h: f64,
    select: Option<&dyn Fn(usize, usize) -> Vec<usize>>,
) -> Result<GradCheckReport, TensorError>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var, TensorError>,
{
    finite_diff_check_with(f, params, FdOptions { h, kink_retries: 0 }, select)
}

/// [`finite_diff_check`] for piecewise-smooth objectives.
///
/// Each entry is also probed at `±h/2`. An interval is treated as crossing a
/// kink when its forward and backward slopes disagree, or when that
/// disagreement is not twice the one at `h/2` as smooth curvature would
/// make it. Either way the interval may cross a kink
/// (a ReLU switching, say) and the entry is probed again at `h/10`, up to
/// `kink_retries` times. The decision never looks at the tape gradient.
pub fn finite_diff_check_with<T, F>(
    f: F,
    params: &[Tensor<T>],
    opts: FdOptions,
    select: Option<&dyn Fn(usize, usize) -> Vec<usize>>,
) -> Result<GradCheckReport, TensorError>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var, TensorError>,
{
    let h = opts.h;
    if !(h > 0.0) {
        return Err(TensorError::Config(format!("step must be positive, got {h}")));
    }
    let eval = |ps: &[Tensor<T>]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let v = tape.value(loss).item().as_f64();
        if v.is_nan() {
            return Err(TensorError::NonFinite("objective returned NaN".into()));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let base = tape.value(loss).item().as_f64();
    if base.is_nan() {
        return Err(TensorError::NonFinite("objective returned NaN".into()));
    }
    let grads = tape.backward(loss)?;
    let noise = 64.0 * f64::EPSILON * base.abs().max(f64::MIN_POSITIVE);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        tape_grad: 0.0,
        numeric_grad: 0.0,
        checked: 0,
        refined: 0,
    };
    let mut work: Vec<Tensor<T>> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, params[pi].shape());
        let indices = match select {
            Some(sel) => sel(pi, params[pi].len()),
            None => (0..params[pi].len()).collect(),
        };
        for ei in indices {
            let orig = params[pi].data()[ei];
            let mut step = h;
            let mut numeric;
            let mut tries = 0;
            loop {
                let mut at = |delta: f64| -> Result<f64, TensorError> {
                    work[pi].data_mut()[ei] = T::lit(orig.as_f64() + delta);
                    let v = eval(&work);
                    work[pi].data_mut()[ei] = orig;
                    v
                };
                let (up, down) = (at(step)?, at(-step)?);
                numeric = (up - down) / (2.0 * step);
                if opts.kink_retries == 0 {
                    break;
                }
                let (up2, down2) = (at(step / 2.0)?, at(-step / 2.0)?);
                let gap = (up - 2.0 * base + down) / step;
                let gap2 = (up2 - 2.0 * base + down2) / (step / 2.0);
                let slope = ((up - base) / step).abs().max(((base - down) / step).abs());
                let floor = KINK_RATIO * slope + 24.0 * noise / step;
                let kink = gap.abs() > floor || (gap - 2.0 * gap2).abs() > floor;
                let affordable = noise / (step / 10.0) <= REFINE_NOISE * slope;
                if !kink || !affordable || tries == opts.kink_retries {
                    break;
                }
                if tries == 0 {
                    report.refined += 1;
                }
                tries += 1;
                step /= 10.0;
            }
            let a = analytic.data()[ei].as_f64();
            if a.is_nan() || numeric.is_nan() {
                return Err(TensorError::NonFinite(format!(
                    "gradient NaN at parameter {pi} element {ei}"
                )));
            }
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err.max(report.max_rel_error);
                if err >= report.max_rel_error {
                    report.worst = Some((pi, ei));
                    report.tape_grad = a;
                    report.numeric_grad = numeric;
                }
            }
        }
    }
    Ok(report)
}
