//! Seeded randomized derivative checks.
//!
//! Every case draws from its own ChaCha8 stream (`seed`, stream = case index),
//! so a case can be reproduced in isolation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    compare, fd_djdw, fd_dsdw, fd_gradient, DerivativeReport, FdConfig, GradientCheck,
    JacobianCheck,
};
use crate::error::{Error, Result};
use crate::likelihood::{djds, djdw_explicit, djdw_total};
use crate::model::{JacobianSignClass, MixingParams, SamplePair, SignalBatch};
use crate::recurrent::{iterate_once, recurrence_jacobian};
use crate::scores::{gaussian_score, GaussianScore};

/// Parameters and sources are drawn uniformly from `[-RANGE, RANGE]`.
pub const RANGE: f64 = 0.5;
/// Admissible draws keep `|J|` at least this far from zero.
pub const MIN_ABS_JACOBIAN: f64 = 0.1;
/// Thresholds selecting the cases where the two gradient forms must differ.
pub const MIN_QUADRATIC_FOR_SEPARATION: f64 = 0.2;
pub const MIN_MEAN_ABS_SOURCE: f64 = 0.1;
pub const SEPARATION_RATIO: f64 = 10.0;
const MAX_DRAWS: usize = 10_000;

fn case_rng(seed: u64, case: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(case as u64);
    rng
}

fn draw_params(rng: &mut ChaCha8Rng, linear_only: bool) -> MixingParams {
    let mut w: [f64; 4] = std::array::from_fn(|_| rng.random_range(-RANGE..RANGE));
    if linear_only {
        w[2] = 0.0;
        w[3] = 0.0;
    }
    MixingParams::from_array_unchecked(w)
}

fn draw_pair(rng: &mut ChaCha8Rng) -> SamplePair {
    SamplePair::new(
        rng.random_range(-RANGE..RANGE),
        rng.random_range(-RANGE..RANGE),
    )
}

/// Largest error of either kind in a report.
pub fn worst_error(r: &DerivativeReport) -> f64 {
    r.max_relative_error.max(r.max_absolute_error_near_zero)
}

/// The two source densities used by the gradient campaign.
pub fn campaign_densities() -> (GaussianScore, GaussianScore) {
    (
        gaussian_score(0.0, 0.3).expect("valid density"),
        gaussian_score(0.05, 0.4).expect("valid density"),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCampaignConfig {
    pub cases: usize,
    pub samples_per_case: usize,
    pub seed: u64,
    pub fd: FdConfig,
    pub linear_only: bool,
}

impl Default for GradientCampaignConfig {
    fn default() -> Self {
        GradientCampaignConfig {
            cases: 100,
            samples_per_case: 50,
            seed: 1,
            fd: FdConfig {
                step: 1e-6,
                relative_tolerance: 1e-5,
            },
            linear_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCase {
    pub params: MixingParams,
    pub sources: SignalBatch,
    pub outcome: std::result::Result<GradientCheck, Error>,
    /// Quadratic terms and source magnitudes large enough that the forms must differ.
    pub separation_expected: bool,
}

impl GradientCase {
    pub fn corrected_pass(&self) -> bool {
        matches!(&self.outcome, Ok(c) if c.corrected.pass)
    }

    /// Legacy error exceeds `SEPARATION_RATIO` times the corrected error.
    pub fn separated(&self) -> bool {
        match &self.outcome {
            Ok(c) => worst_error(&c.legacy) > SEPARATION_RATIO * worst_error(&c.corrected),
            Err(_) => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCampaignReport {
    pub cases: Vec<GradientCase>,
}

impl GradientCampaignReport {
    pub fn corrected_passes(&self) -> usize {
        self.cases.iter().filter(|c| c.corrected_pass()).count()
    }

    pub fn separation_eligible(&self) -> usize {
        self.cases.iter().filter(|c| c.separation_expected).count()
    }

    pub fn separated_where_expected(&self) -> usize {
        self.cases
            .iter()
            .filter(|c| c.separation_expected && c.separated())
            .count()
    }

    pub fn max_corrected_error(&self) -> f64 {
        self.cases
            .iter()
            .filter_map(|c| c.outcome.as_ref().ok())
            .map(|c| worst_error(&c.corrected))
            .fold(0.0, f64::max)
    }
}

/// Draws `(w, sources)` until `J` keeps one sign over the sample hull and
/// `|J| >= MIN_ABS_JACOBIAN` on every sample.
fn draw_batch_case(
    rng: &mut ChaCha8Rng,
    n: usize,
    linear_only: bool,
) -> Result<(MixingParams, SignalBatch)> {
    for _ in 0..MAX_DRAWS {
        let w = draw_params(rng, linear_only);
        let batch = SignalBatch::new((0..n).map(|_| draw_pair(rng)).collect())?;
        let (r1, r2) = batch.bounding_box();
        if w.classify_jacobian_sign(r1, r2) == JacobianSignClass::MixedSign {
            continue;
        }
        if batch
            .iter()
            .all(|s| w.jacobian(*s).abs() >= MIN_ABS_JACOBIAN)
        {
            return Ok((w, batch));
        }
    }
    Err(Error::InvalidParameter(
        "no admissible configuration found".into(),
    ))
}

pub fn run_gradient_campaign(cfg: &GradientCampaignConfig) -> Result<GradientCampaignReport> {
    cfg.fd.validate()?;
    if cfg.samples_per_case == 0 {
        return Err(Error::EmptyBatch);
    }
    let (d1, d2) = campaign_densities();
    let mut cases = Vec::with_capacity(cfg.cases);
    for case in 0..cfg.cases {
        let mut rng = case_rng(cfg.seed, case);
        let (w, sources) = draw_batch_case(&mut rng, cfg.samples_per_case, cfg.linear_only)?;
        let x = sources.mixed(&w)?;
        let outcome = fd_gradient(&w, &x, &sources, &d1, &d2, &cfg.fd);
        let mean_abs = sources
            .iter()
            .map(|s| s.first.abs() + s.second.abs())
            .sum::<f64>()
            / (2 * sources.len()) as f64;
        let separation_expected = w.q1.abs().max(w.q2.abs()) >= MIN_QUADRATIC_FOR_SEPARATION
            && mean_abs >= MIN_MEAN_ABS_SOURCE;
        cases.push(GradientCase {
            params: w,
            sources,
            outcome,
            separation_expected,
        });
    }
    Ok(GradientCampaignReport { cases })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointwiseCampaignConfig {
    pub cases: usize,
    pub seed: u64,
    pub fd: FdConfig,
    pub linear_only: bool,
}

impl Default for PointwiseCampaignConfig {
    fn default() -> Self {
        PointwiseCampaignConfig {
            cases: 200,
            seed: 2,
            fd: FdConfig::default(),
            linear_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseCase {
    pub params: MixingParams,
    pub sources: SamplePair,
    pub dsdw: std::result::Result<DerivativeReport, Error>,
    pub djdw: std::result::Result<JacobianCheck, Error>,
    /// The fixed-source form differs from the total derivative by more than
    /// ten times the tolerance, so its FD check should fail.
    pub explicit_expected_to_fail: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseCampaignReport {
    pub cases: Vec<PointwiseCase>,
}

impl PointwiseCampaignReport {
    pub fn dsdw_passes(&self) -> usize {
        self.cases
            .iter()
            .filter(|c| matches!(&c.dsdw, Ok(r) if r.pass))
            .count()
    }

    pub fn djdw_total_passes(&self) -> usize {
        self.cases
            .iter()
            .filter(|c| matches!(&c.djdw, Ok(r) if r.total.pass))
            .count()
    }

    pub fn explicit_expected_failures(&self) -> usize {
        self.cases
            .iter()
            .filter(|c| c.explicit_expected_to_fail)
            .count()
    }

    pub fn explicit_failed_where_expected(&self) -> usize {
        self.cases
            .iter()
            .filter(|c| c.explicit_expected_to_fail && matches!(&c.djdw, Ok(r) if !r.explicit.pass))
            .count()
    }
}

fn draw_point_case(rng: &mut ChaCha8Rng, linear_only: bool) -> Result<(MixingParams, SamplePair)> {
    for _ in 0..MAX_DRAWS {
        let w = draw_params(rng, linear_only);
        let s = draw_pair(rng);
        if w.jacobian(s).abs() >= MIN_ABS_JACOBIAN {
            return Ok((w, s));
        }
    }
    Err(Error::InvalidParameter(
        "no admissible configuration found".into(),
    ))
}

pub fn run_pointwise_campaign(cfg: &PointwiseCampaignConfig) -> Result<PointwiseCampaignReport> {
    cfg.fd.validate()?;
    let mut cases = Vec::with_capacity(cfg.cases);
    for case in 0..cfg.cases {
        let mut rng = case_rng(cfg.seed, case);
        let (w, s) = draw_point_case(&mut rng, cfg.linear_only)?;
        let x = w.mix(s);
        let total = djdw_total(&w, s)?;
        let explicit = djdw_explicit(&w, s);
        let explicit_expected_to_fail = !compare(
            &explicit.0,
            &total.0,
            SEPARATION_RATIO * cfg.fd.relative_tolerance,
        )
        .pass;
        cases.push(PointwiseCase {
            params: w,
            sources: s,
            dsdw: fd_dsdw(&w, x, s, &cfg.fd),
            djdw: fd_djdw(&w, x, s, &cfg.fd),
            explicit_expected_to_fail,
        });
    }
    Ok(PointwiseCampaignReport { cases })
}

/// FD checks of the partial derivatives that do not go through the inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialsCase {
    pub params: MixingParams,
    pub sources: SamplePair,
    /// Mixing Jacobian in the sources.
    pub mixing_jacobian: DerivativeReport,
    /// Recurrence map Jacobian in its state.
    pub recurrence_jacobian: DerivativeReport,
    /// `∂J/∂s` at fixed parameters.
    pub djds: DerivativeReport,
    /// `∂J/∂w` at fixed sources.
    pub djdw_explicit: DerivativeReport,
}

impl PartialsCase {
    pub fn all_pass(&self) -> bool {
        self.mixing_jacobian.pass
            && self.recurrence_jacobian.pass
            && self.djds.pass
            && self.djdw_explicit.pass
    }
}

fn central<F: Fn(f64) -> f64>(f: F, at: f64, h: f64) -> f64 {
    let (p, m) = (at + h, at - h);
    (f(p) - f(m)) / (p - m)
}

pub fn run_partials_campaign(cases: usize, seed: u64, fd: &FdConfig) -> Result<Vec<PartialsCase>> {
    fd.validate()?;
    let h = fd.step;
    let tol = fd.relative_tolerance;
    let mut out = Vec::with_capacity(cases);
    for case in 0..cases {
        let mut rng = case_rng(seed, case);
        let (w, s) = draw_point_case(&mut rng, false)?;
        let x = w.mix(s);

        let m = w.mixing_jacobian_matrix(s);
        let r = recurrence_jacobian(&w, s);
        let mut fd_m = [0.0; 4];
        let mut fd_r = [0.0; 4];
        for col in 0..2 {
            let at = if col == 0 { s.first } else { s.second };
            let with = |v: f64| {
                if col == 0 {
                    SamplePair::new(v, s.second)
                } else {
                    SamplePair::new(s.first, v)
                }
            };
            for row in 0..2 {
                let pick = |p: SamplePair| if row == 0 { p.first } else { p.second };
                fd_m[2 * row + col] = central(|v| pick(w.mix(with(v))), at, h);
                fd_r[2 * row + col] = central(|v| pick(iterate_once(&w, x, with(v))), at, h);
            }
        }
        let flat = |a: [[f64; 2]; 2]| [a[0][0], a[0][1], a[1][0], a[1][1]];

        let fd_djds = [
            central(|v| w.jacobian(SamplePair::new(v, s.second)), s.first, h),
            central(|v| w.jacobian(SamplePair::new(s.first, v)), s.second, h),
        ];
        let base = w.to_array();
        let fd_djdw: [f64; 4] = std::array::from_fn(|k| {
            central(
                |v| {
                    let mut a = base;
                    a[k] = v;
                    MixingParams::from_array_unchecked(a).jacobian(s)
                },
                base[k],
                h,
            )
        });

        out.push(PartialsCase {
            params: w,
            sources: s,
            mixing_jacobian: compare(&flat(m), &fd_m, tol),
            recurrence_jacobian: compare(&flat(r), &fd_r, tol),
            djds: compare(&djds(&w), &fd_djds, tol),
            djdw_explicit: compare(&djdw_explicit(&w, s).0, &fd_djdw, tol),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_campaign_corrected_always_passes() {
        let cfg = GradientCampaignConfig {
            cases: 20,
            ..GradientCampaignConfig::default()
        };
        let r = run_gradient_campaign(&cfg).unwrap();
        assert_eq!(r.cases.len(), 20);
        assert_eq!(
            r.corrected_passes(),
            20,
            "max error {}",
            r.max_corrected_error()
        );
        assert!(r.separated_where_expected() as f64 >= 0.95 * r.separation_eligible() as f64);
    }

    #[test]
    fn gradient_campaign_linear_only_coincides() {
        let cfg = GradientCampaignConfig {
            cases: 10,
            linear_only: true,
            ..GradientCampaignConfig::default()
        };
        let r = run_gradient_campaign(&cfg).unwrap();
        assert_eq!(r.separation_eligible(), 0);
        for c in &r.cases {
            let check = c.outcome.as_ref().unwrap();
            assert!(check.corrected.pass && check.legacy.pass);
            assert_eq!(check.corrected.analytic, check.legacy.analytic);
        }
    }

    #[test]
    fn pointwise_campaign_matches_fd() {
        let r = run_pointwise_campaign(&PointwiseCampaignConfig::default()).unwrap();
        assert_eq!(r.cases.len(), 200);
        let failures: Vec<_> = r
            .cases
            .iter()
            .filter(|c| !matches!(&c.dsdw, Ok(d) if d.pass))
            .map(|c| (c.params, c.sources, c.dsdw.clone()))
            .collect();
        assert!(failures.is_empty(), "{failures:?}");
        assert_eq!(r.djdw_total_passes(), 200);
        assert!(r.explicit_expected_failures() > 150);
        assert_eq!(
            r.explicit_failed_where_expected(),
            r.explicit_expected_failures()
        );
    }

    #[test]
    fn partials_campaign_matches_fd() {
        let fd = FdConfig::new(1e-6, 1e-6).unwrap();
        let cases = run_partials_campaign(100, 3, &fd).unwrap();
        for c in &cases {
            assert!(c.all_pass(), "{c:?}");
        }
    }

    #[test]
    fn campaigns_are_reproducible() {
        let cfg = GradientCampaignConfig {
            cases: 5,
            ..GradientCampaignConfig::default()
        };
        assert_eq!(
            run_gradient_campaign(&cfg).unwrap(),
            run_gradient_campaign(&cfg).unwrap()
        );
        let p = PointwiseCampaignConfig {
            cases: 5,
            ..PointwiseCampaignConfig::default()
        };
        assert_eq!(
            run_pointwise_campaign(&p).unwrap(),
            run_pointwise_campaign(&p).unwrap()
        );
    }
}
