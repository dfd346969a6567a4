//! Central finite-difference verification of tape gradients.
//!
//! The checker always runs in `f64`. A coordinate is skipped when the
//! perturbation moves any relu input across zero or changes a max-pool
//! argmax (detected through [`Tape::kink_signature`]), because central
//! differences are meaningless across a kink.

use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::params::{ParamId, ParamStore};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub eps: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Check at most this many coordinates per parameter (`None` = all).
    pub max_coords_per_param: Option<usize>,
    /// Seed for coordinate sampling.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-5,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoordCheck {
    pub param: ParamId,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Loss at the unperturbed parameters.
    pub loss: f64,
    pub checked: usize,
    /// Checked coordinates whose relative error is at or above `tol`, in check order.
    pub failures: Vec<CoordCheck>,
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub worst: Option<CoordCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < self.tol
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(store: &ParamStore<f64>, f: &F) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    tape.bind(store);
    let loss = f(&mut tape)?;
    let value = tape.value(loss).item().unwrap_or(f64::NAN);
    Ok((value, tape.kink_signature()))
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences over the parameters in `store`.
///
/// `f` receives a tape with `store` already bound and returns the loss node.
pub fn grad_check<F>(store: &ParamStore<f64>, f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    tape.bind(store);
    let loss = f(&mut tape)?;
    let loss_value = tape.value(loss).item().unwrap_or(f64::NAN);
    let base_sig = tape.kink_signature();
    let grads = tape.backward(loss)?.params(&tape);
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        loss: loss_value,
        checked: 0,
        failures: Vec::new(),
        skipped_kinks: 0,
        max_rel_error: 0.0,
        worst: None,
        tol: cfg.tol,
    };
    let mut probe = store.clone();
    for id in store.ids() {
        let n = store.get(id).numel();
        let coords: Vec<usize> = match cfg.max_coords_per_param {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let analytic = grads.get(id).expect("every bound parameter has a gradient");
        for idx in coords {
            let orig = store.get(id).data()[idx];
            probe.get_mut(id).data_mut()[idx] = orig + cfg.eps;
            let (plus, sig_plus) = evaluate(&probe, &f)?;
            probe.get_mut(id).data_mut()[idx] = orig - cfg.eps;
            let (minus, sig_minus) = evaluate(&probe, &f)?;
            probe.get_mut(id).data_mut()[idx] = orig;
            if sig_plus != base_sig || sig_minus != base_sig {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic.data()[idx];
            let rel = relative_error(a, numeric);
            let check = CoordCheck {
                param: id,
                index: idx,
                analytic: a,
                numeric,
                rel_error: rel,
            };
            report.checked += 1;
            if rel >= cfg.tol {
                report.failures.push(check);
            }
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(check);
            }
        }
    }
    Ok(report)
}
