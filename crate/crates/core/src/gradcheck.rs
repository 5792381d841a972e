//! Finite-difference verification of tape gradients.

use rand::Rng as _;

use crate::autodiff::{Tape, Var};
use crate::blocks::{Ctx, ForwardOptions, ParamStore};
use crate::error::{Error, Result};
use crate::rng::{seeded, stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// One-sided slopes that disagree by more than this (relative) mark a
    /// non-differentiable site, which is excluded from the error.
    pub kink_tolerance: f64,
    /// Check at most this many evenly strided coordinates per parameter.
    pub max_coords_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-3,
            kink_tolerance: 5e-4,
            max_coords_per_param: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateCheck {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<CoordinateCheck>,
    pub checked: usize,
    pub kinks: Vec<(usize, usize)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < self.tolerance
    }

    pub fn kink_fraction(&self) -> f64 {
        let total = self.checked + self.kinks.len();
        if total == 0 {
            0.0
        } else {
            self.kinks.len() as f64 / total as f64
        }
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    relative_error_with_floor(a, n, 1e-8)
}

fn relative_error_with_floor(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Size of a slope that cancellation in `f(x ± h)` alone can produce.
fn roundoff_floor(f0: f64, h: f64) -> f64 {
    (1e4 * f64::EPSILON * f0.abs().max(1.0) / h).max(1e-8)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares analytic gradients of the scalar `f` against central differences.
pub fn gradient_check<F>(f: F, params: &[Tensor], options: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if params.iter().any(|p| !p.all_finite()) {
        return Err(Error::invalid("gradient check needs finite parameters"));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let f0 = tape.value(out).item();

    let h = options.step;
    let floor = roundoff_floor(f0, h);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        kinks: Vec::new(),
        tolerance: options.tolerance,
    };
    let mut probe: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("leaf gradient").data().to_vec();
        let n = analytic.len();
        let stride = match options.max_coords_per_param {
            Some(m) if m > 0 && m < n => n.div_ceil(m),
            _ => 1,
        };
        for idx in (0..n).step_by(stride) {
            let orig = probe[pi].data()[idx];
            probe[pi].data_mut()[idx] = orig + h;
            let fp = evaluate(&f, &probe)?;
            probe[pi].data_mut()[idx] = orig - h;
            let fm = evaluate(&f, &probe)?;
            probe[pi].data_mut()[idx] = orig;

            let forward = (fp - f0) / h;
            let backward = (f0 - fm) / h;
            let scale = forward.abs().max(backward.abs()).max(floor);
            if (forward - backward).abs() > options.kink_tolerance * scale {
                report.kinks.push((pi, idx));
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let rel = relative_error_with_floor(analytic[idx], numeric, floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(CoordinateCheck {
                    param: pi,
                    index: idx,
                    analytic: analytic[idx],
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}

/// Checks a forward pass built from blocks over `store`.
///
/// The parameters and `inputs` are all perturbed. Each evaluation replays the
/// same noise (`seed`) on a scratch copy of the BN statistics, and the output
/// is reduced to a scalar through fixed random weights so every element
/// contributes a distinct slope.
pub fn check_module<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    opts: ForwardOptions,
    seed: u64,
    forward: F,
    options: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx, &[Var]) -> Result<Var>,
{
    let n = store.params.len();
    let mut params: Vec<Tensor> = store.params.iter().map(|p| p.value.clone()).collect();
    params.extend_from_slice(inputs);
    let opts = ForwardOptions {
        update_stats: false,
        ..opts
    };
    gradient_check(
        |tape, vars| {
            let mut stats = store.stats.clone();
            let mut rng = seeded(seed);
            let out = {
                let mut ctx = Ctx::new(tape, &vars[..n], &mut stats, opts, &mut rng);
                forward(&mut ctx, &vars[n..])?
            };
            let mut wrng = stream(seed, 1);
            let w = Tensor::from_fn(tape.value(out).shape(), |_| wrng.random_range(-1.0..1.0));
            let w = tape.constant(w);
            let weighted = tape.mul(out, w)?;
            Ok(tape.sum(weighted))
        },
        &params,
        options,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let w = Tensor::from_vec(vec![0.5, -2.0, 3.0]);
        let x = Tensor::from_vec(vec![1.0, 4.0, -0.25]);
        let report = gradient_check(
            |tape, v| {
                let c = tape.constant(w.clone());
                let p = tape.mul(v[0], c)?;
                Ok(tape.sum(p))
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.max_rel_error < 1e-10, "{report:?}");
        assert!(report.kinks.is_empty());
    }

    #[test]
    fn maxout_tie_is_flagged() {
        let x = Tensor::new(vec![1, 2], vec![3.0, 3.0]).unwrap();
        let report = gradient_check(
            |tape, v| {
                let m = tape.group_max(v[0], 2)?;
                Ok(tape.sum(m))
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.kinks.len(), 2);
        assert_eq!(report.checked, 0);
        assert!(!report.passed());
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // sigmoid(x) * x evaluated through mul_const drops the product rule
        // on purpose: the analytic gradient misses the x·σ'(x) term.
        let x = Tensor::from_vec(vec![0.3, -0.7]);
        let report = gradient_check(
            |tape, v| {
                let s = tape.sigmoid(v[0]);
                let frozen = tape.value(v[0]).clone();
                let p = tape.mul_const(s, &frozen)?;
                Ok(tape.sum(p))
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!report.passed());
    }
}
