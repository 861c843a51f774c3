//! Central-finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Binder, ParamSet};
use super::tape::{NodeId, Tape};
use super::{NumericsError, Result};

/// Controls for [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step. Sensible range is `1e-6 ..= 1e-4`.
    pub h: f64,
    /// Cap on probed elements per parameter; `None` probes every element.
    pub max_probes_per_param: Option<usize>,
    /// Seed for probe selection when sampling.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { h: 1e-5, max_probes_per_param: None, seed: 0 }
    }
}

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub probes: usize,
}

/// Compares analytic gradients of a scalar-valued graph against central
/// finite differences over the trainable parameters it actually uses.
///
/// Relative error per probe is `|analytic - fd| / max(|analytic|, |fd|, 1e-8)`;
/// the report carries the maximum. Fails with `NonFiniteGradient` when either
/// side is non-finite.
pub fn grad_check<F>(params: &ParamSet, build: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &mut Binder<'_>) -> Result<NodeId>,
{
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(p);
        let root = build(&mut tape, &mut binder)?;
        Ok(tape.value(root).item())
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let mut binder = Binder::new(params);
    let root = build(&mut tape, &mut binder)?;
    let value = tape.value(root).item();
    if !value.is_finite() {
        return Err(NumericsError::NonFiniteGradient { context: format!("loss value {value}") });
    }
    let grads = tape.backward(root)?;
    let analytic = binder.collect_grads(&tape, &grads);

    let mut work = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport { max_rel_err: 0.0, worst_param: String::new(), probes: 0 };

    for (name, grad) in &analytic {
        if !grad.is_finite() {
            return Err(NumericsError::NonFiniteGradient { context: format!("analytic grad of `{name}`") });
        }
        let numel = grad.numel();
        let indices: Vec<usize> = match cfg.max_probes_per_param {
            Some(k) if k < numel => sample(&mut rng, numel, k).into_vec(),
            _ => (0..numel).collect(),
        };
        for idx in indices {
            let orig = work.get(name)?.tensor.data()[idx];
            work.get_mut(name)?.tensor.data_mut()[idx] = orig + cfg.h;
            let fp = eval(&work)?;
            work.get_mut(name)?.tensor.data_mut()[idx] = orig - cfg.h;
            let fm = eval(&work)?;
            work.get_mut(name)?.tensor.data_mut()[idx] = orig;

            let fd = (fp - fm) / (2.0 * cfg.h);
            let a = grad.data()[idx];
            if !fd.is_finite() {
                return Err(NumericsError::NonFiniteGradient {
                    context: format!("finite difference of `{name}`[{idx}]"),
                });
            }
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            report.probes += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
            }
        }
    }
    Ok(report)
}
