//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor so that two near-zero gradients do not blow up the ratio.
    pub floor: f64,
    /// Check at most this many coordinates per variable (sampled); `None` checks all.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Combine central differences at `step` and `step / 2` to cancel the
    /// second-order truncation term.
    pub richardson: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, tolerance: 1e-4, floor: 1e-6, max_coords: None, seed: 0, richardson: false }
    }
}

impl GradCheckOptions {
    pub fn with_tolerance(tolerance: f64) -> Self {
        GradCheckOptions { tolerance, ..Self::default() }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_err: f64,
    /// (variable, coordinate) where the largest error occurred.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates skipped because the loss is not smooth across the step.
    pub excluded: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }

    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            Ok(self)
        } else {
            Err(Error::Numeric(format!(
                "gradient check failed for {}: max relative error {:.3e} >= {:.1e} at {:?}",
                self.op, self.max_rel_err, self.tolerance, self.worst
            )))
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `grads(vars)` against central differences of `loss(vars)`.
///
/// `vars` holds every differentiable input and parameter of the op, flattened.
pub fn grad_check<L, G>(
    op: &str,
    vars: &[Vec<f64>],
    mut loss: L,
    grads: G,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    L: FnMut(&[Vec<f64>]) -> Result<f64>,
    G: FnMut(&[Vec<f64>]) -> Result<Vec<Vec<f64>>>,
{
    grad_check_piecewise(op, vars, |v| Ok((loss(v)?, 0)), grads, opts)
}

/// Like [`grad_check`] for a piecewise-smooth loss. `loss` also returns a
/// signature of the smooth piece it was evaluated on; a coordinate whose
/// `x - step`, `x`, `x + step` signatures differ is counted as excluded.
pub fn grad_check_piecewise<L, G>(
    op: &str,
    vars: &[Vec<f64>],
    mut loss: L,
    mut grads: G,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    L: FnMut(&[Vec<f64>]) -> Result<(f64, u64)>,
    G: FnMut(&[Vec<f64>]) -> Result<Vec<Vec<f64>>>,
{
    let analytic = grads(vars)?;
    let (_, base) = loss(vars)?;
    if analytic.len() != vars.len() || analytic.iter().zip(vars).any(|(a, v)| a.len() != v.len()) {
        return Err(Error::Config(format!("{op}: gradient layout does not match variables")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = vars.to_vec();
    let mut report = GradCheckReport {
        op: op.to_string(),
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        excluded: 0,
        tolerance: opts.tolerance,
    };
    for (vi, var) in vars.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < var.len() => {
                let mut c = sample(&mut rng, var.len(), k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..var.len()).collect(),
        };
        for i in coords {
            let mut smooth = true;
            let mut central = |h: f64| -> Result<f64> {
                let orig = var[i];
                work[vi][i] = orig + h;
                let (up, up_sig) = loss(&work)?;
                work[vi][i] = orig - h;
                let (down, down_sig) = loss(&work)?;
                work[vi][i] = orig;
                smooth &= up_sig == base && down_sig == base;
                Ok((up - down) / (2.0 * h))
            };
            let numeric = if opts.richardson {
                let (coarse, fine) = (central(opts.step)?, central(opts.step / 2.0)?);
                (4.0 * fine - coarse) / 3.0
            } else {
                central(opts.step)?
            };
            if !smooth {
                report.excluded += 1;
                continue;
            }
            let err = relative_error(analytic[vi][i], numeric, opts.floor);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((vi, i));
            }
        }
    }
    Ok(report)
}
