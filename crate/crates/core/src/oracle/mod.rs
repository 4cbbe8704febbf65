//! Finite-difference checks of the analytic derivatives.
//!
//! Sources are treated as the smooth function `s(w; x)` defined by the
//! closed-form inverse at fixed observations `x`, following the branch that
//! starts nearest to a caller-supplied hint.

pub mod campaign;

use crate::error::{Error, Result};
use crate::likelihood::{
    djdw_explicit, djdw_total, dsdw, gradient_corrected, gradient_legacy, LikelihoodContext,
    DEFAULT_JACOBIAN_FLOOR,
};
use crate::model::{MixingParams, SamplePair, SignalBatch};
use crate::scores::SourceDensity;

/// Below this reference magnitude the absolute error is judged instead.
pub const NEAR_ZERO_REFERENCE: f64 = 1e-6;
pub const ABSOLUTE_FALLBACK: f64 = 1e-9;
/// A perturbed root further than this many steps from the base root is a branch switch.
pub const BRANCH_JUMP_FACTOR: f64 = 100.0;

/// Central differences with step `step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdConfig {
    pub step: f64,
    pub relative_tolerance: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            step: 1e-6,
            relative_tolerance: 1e-6,
        }
    }
}

impl FdConfig {
    pub fn new(step: f64, relative_tolerance: f64) -> Result<Self> {
        let cfg = FdConfig {
            step,
            relative_tolerance,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "FD step must be positive, got {}",
                self.step
            )));
        }
        if !(self.relative_tolerance > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "FD tolerance must be positive, got {}",
                self.relative_tolerance
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Over components whose reference magnitude is at least `NEAR_ZERO_REFERENCE`.
    pub max_relative_error: f64,
    /// Over the remaining components.
    pub max_absolute_error_near_zero: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Compares analytic values against a numeric reference.
pub fn compare(analytic: &[f64], numeric: &[f64], tolerance: f64) -> DerivativeReport {
    assert_eq!(
        analytic.len(),
        numeric.len(),
        "compared vectors differ in length"
    );
    let mut rel: f64 = 0.0;
    let mut abs: f64 = 0.0;
    let mut finite = true;
    for (&a, &n) in analytic.iter().zip(numeric) {
        if !(a.is_finite() && n.is_finite()) {
            finite = false;
            continue;
        }
        let err = (a - n).abs();
        if n.abs() >= NEAR_ZERO_REFERENCE {
            rel = rel.max(err / n.abs());
        } else {
            abs = abs.max(err);
        }
    }
    DerivativeReport {
        analytic: analytic.to_vec(),
        numeric: numeric.to_vec(),
        max_relative_error: rel,
        max_absolute_error_near_zero: abs,
        tolerance,
        pass: finite && rel <= tolerance && abs <= ABSOLUTE_FALLBACK,
    }
}

/// The closed-form root pair nearest (Euclidean) to `hint`.
pub fn invert_for_sources(w: &MixingParams, x: SamplePair, hint: SamplePair) -> Result<SamplePair> {
    let [a, b] = w.direct_inverse(x)?.roots();
    Ok(if a.distance(hint) <= b.distance(hint) {
        a
    } else {
        b
    })
}

fn perturbed(w: &MixingParams, k: usize, delta: f64) -> MixingParams {
    let mut a = w.to_array();
    a[k] += delta;
    MixingParams::from_array_unchecked(a)
}

/// Sources at `w ± h e_k`, tracked from `base`; also the exact step actually taken.
fn tracked_pair(
    w: &MixingParams,
    x: SamplePair,
    base: SamplePair,
    k: usize,
    h: f64,
) -> Result<(SamplePair, SamplePair, f64)> {
    let wp = perturbed(w, k, h);
    let wm = perturbed(w, k, -h);
    let sp = invert_for_sources(&wp, x, base)?;
    let sm = invert_for_sources(&wm, x, base)?;
    let jump = sp.max_abs_diff(base).max(sm.max_abs_diff(base));
    if !(jump <= BRANCH_JUMP_FACTOR * h) {
        return Err(Error::BranchCrossing { parameter: k, jump });
    }
    let span = wp.to_array()[k] - wm.to_array()[k];
    Ok((sp, sm, span))
}

fn flatten_columns(cols: &[[f64; 2]; 4]) -> [f64; 8] {
    std::array::from_fn(|i| cols[i % 4][i / 4])
}

/// Central differences of `s(w; x)` against `dsdw`, row-major 2×4.
pub fn fd_dsdw(
    w: &MixingParams,
    x: SamplePair,
    hint: SamplePair,
    cfg: &FdConfig,
) -> Result<DerivativeReport> {
    cfg.validate()?;
    let s = invert_for_sources(w, x, hint)?;
    let analytic = dsdw(w, s)?.flatten();
    let mut cols = [[0.0; 2]; 4];
    for (k, col) in cols.iter_mut().enumerate() {
        let (sp, sm, span) = tracked_pair(w, x, s, k, cfg.step)?;
        *col = [(sp.first - sm.first) / span, (sp.second - sm.second) / span];
    }
    Ok(compare(
        &analytic,
        &flatten_columns(&cols),
        cfg.relative_tolerance,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct JacobianCheck {
    pub total: DerivativeReport,
    pub explicit: DerivativeReport,
}

/// Central differences of `w ↦ J(w, s(w; x))` against both derivative forms.
pub fn fd_djdw(
    w: &MixingParams,
    x: SamplePair,
    hint: SamplePair,
    cfg: &FdConfig,
) -> Result<JacobianCheck> {
    cfg.validate()?;
    let s = invert_for_sources(w, x, hint)?;
    let mut numeric = [0.0; 4];
    for (k, slot) in numeric.iter_mut().enumerate() {
        let (sp, sm, span) = tracked_pair(w, x, s, k, cfg.step)?;
        let jp = perturbed(w, k, cfg.step).jacobian(sp);
        let jm = perturbed(w, k, -cfg.step).jacobian(sm);
        *slot = (jp - jm) / span;
    }
    Ok(JacobianCheck {
        total: compare(&djdw_total(w, s)?.0, &numeric, cfg.relative_tolerance),
        explicit: compare(&djdw_explicit(w, s).0, &numeric, cfg.relative_tolerance),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub corrected: DerivativeReport,
    pub legacy: DerivativeReport,
}

fn sample_log_likelihood(
    w: &MixingParams,
    s: SamplePair,
    d1: &dyn SourceDensity,
    d2: &dyn SourceDensity,
) -> f64 {
    d1.log_density(s.first) + d2.log_density(s.second) - w.jacobian(s).abs().ln()
}

/// Central differences of the batch log-likelihood through `s(w; x)`.
///
/// Per-sample differences are formed before averaging to keep the
/// subtraction well conditioned.
pub fn fd_gradient(
    w: &MixingParams,
    x: &SignalBatch,
    hints: &SignalBatch,
    d1: &dyn SourceDensity,
    d2: &dyn SourceDensity,
    cfg: &FdConfig,
) -> Result<GradientCheck> {
    cfg.validate()?;
    if x.len() != hints.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: hints.len(),
        });
    }
    let sources: Vec<SamplePair> = x
        .iter()
        .zip(hints)
        .map(|(xi, hi)| invert_for_sources(w, *xi, *hi))
        .collect::<Result<_>>()?;

    let n = sources.len() as f64;
    let mut numeric = [0.0; 4];
    for (k, slot) in numeric.iter_mut().enumerate() {
        let wp = perturbed(w, k, cfg.step);
        let wm = perturbed(w, k, -cfg.step);
        let mut acc = 0.0;
        let mut span = 0.0;
        for (xi, si) in x.iter().zip(&sources) {
            let (sp, sm, sp_span) = tracked_pair(w, *xi, *si, k, cfg.step)?;
            span = sp_span;
            acc += sample_log_likelihood(&wp, sp, d1, d2) - sample_log_likelihood(&wm, sm, d1, d2);
        }
        *slot = acc / span / n;
    }

    let batch = SignalBatch::new(sources)?;
    let ctx = LikelihoodContext::new(*w, &batch, d1, d2, DEFAULT_JACOBIAN_FLOOR)?;
    Ok(GradientCheck {
        corrected: compare(
            &gradient_corrected(&ctx)?.0,
            &numeric,
            cfg.relative_tolerance,
        ),
        legacy: compare(&gradient_legacy(&ctx)?.0, &numeric, cfg.relative_tolerance),
    })
}
