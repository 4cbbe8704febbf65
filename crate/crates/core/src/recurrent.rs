//! Recurrent separating structure.
//!
//! The outputs are computed by the fixed-point iteration
//!
//! ```text
//! y1(n+1) = x1 + l1*y2(n) + q1*y1(n)*y2(n)
//! y2(n+1) = x2 + l2*y1(n) + q2*y1(n)*y2(n)
//! ```
//!
//! whose steady state for `x = mix(w, s)` is `y = s`. With `q1 = q2 = 0` it is
//! the linear Hérault-Jutten network.

use crate::error::{Error, Result};
use crate::model::{Matrix2, MixingParams, SamplePair};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecurrenceConfig {
    pub max_iterations: usize,
    /// Sup-norm threshold on the step `y(n+1) - y(n)`. Zero never converges.
    pub tolerance: f64,
    /// Abort once any output component exceeds this magnitude.
    pub divergence_bound: f64,
}

impl Default for RecurrenceConfig {
    fn default() -> Self {
        RecurrenceConfig {
            max_iterations: 200,
            tolerance: 1e-10,
            divergence_bound: 1e6,
        }
    }
}

impl RecurrenceConfig {
    pub fn new(max_iterations: usize, tolerance: f64, divergence_bound: f64) -> Result<Self> {
        let cfg = RecurrenceConfig {
            max_iterations,
            tolerance,
            divergence_bound,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidParameter(
                "max_iterations must be at least 1".into(),
            ));
        }
        if !(self.tolerance >= 0.0) || !self.tolerance.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "recurrence tolerance must be a nonnegative number, got {}",
                self.tolerance
            )));
        }
        if !(self.divergence_bound > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "divergence bound must be positive, got {}",
                self.divergence_bound
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RecurrenceStatus {
    Converged,
    MaxIterations,
    Diverged,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecurrenceResult {
    pub output: SamplePair,
    pub iterations_used: usize,
    pub status: RecurrenceStatus,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityReport {
    /// Eigenvalue moduli of the recurrence Jacobian, ascending.
    pub eigenvalue_magnitudes: [f64; 2],
    pub locally_stable: bool,
}

impl StabilityReport {
    pub fn spectral_radius(&self) -> f64 {
        self.eigenvalue_magnitudes[1]
    }
}

pub fn iterate_once(w: &MixingParams, x: SamplePair, y: SamplePair) -> SamplePair {
    let cross = y.first * y.second;
    SamplePair {
        first: x.first + w.l1 * y.second + w.q1 * cross,
        second: x.second + w.l2 * y.first + w.q2 * cross,
    }
}

pub fn run_recurrence(
    w: &MixingParams,
    x: SamplePair,
    y0: SamplePair,
    cfg: &RecurrenceConfig,
) -> RecurrenceResult {
    let mut y = y0;
    for n in 1..=cfg.max_iterations {
        let next = iterate_once(w, x, y);
        let out_of_bounds = !next.is_finite()
            || next.first.abs() > cfg.divergence_bound
            || next.second.abs() > cfg.divergence_bound;
        if out_of_bounds {
            return RecurrenceResult {
                output: next,
                iterations_used: n,
                status: RecurrenceStatus::Diverged,
            };
        }
        let step = next.max_abs_diff(y);
        y = next;
        if step < cfg.tolerance {
            return RecurrenceResult {
                output: y,
                iterations_used: n,
                status: RecurrenceStatus::Converged,
            };
        }
    }
    RecurrenceResult {
        output: y,
        iterations_used: cfg.max_iterations,
        status: RecurrenceStatus::MaxIterations,
    }
}

/// Runs the recurrence from the default starting point `y0 = x`.
pub fn separate_sample(
    w: &MixingParams,
    x: SamplePair,
    cfg: &RecurrenceConfig,
) -> RecurrenceResult {
    run_recurrence(w, x, x, cfg)
}

/// Derivative of one recurrence step with respect to `y`.
pub fn recurrence_jacobian(w: &MixingParams, y: SamplePair) -> Matrix2 {
    [
        [w.q1 * y.second, w.l1 + w.q1 * y.first],
        [w.l2 + w.q2 * y.second, w.q2 * y.first],
    ]
}

/// Eigenvalue moduli of a real 2×2 matrix from its characteristic polynomial, ascending.
pub fn eigenvalue_magnitudes(m: &Matrix2) -> [f64; 2] {
    let half_trace = 0.5 * (m[0][0] + m[1][1]);
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let disc = half_trace * half_trace - det;
    let mut mags = if disc >= 0.0 {
        let r = disc.sqrt();
        // Larger-magnitude root first, the other from det = λ1·λ2 to avoid cancellation.
        let big = if half_trace >= 0.0 {
            half_trace + r
        } else {
            half_trace - r
        };
        let small = if big != 0.0 { det / big } else { 0.0 };
        [small.abs(), big.abs()]
    } else {
        // Complex-conjugate pair: |λ|² = det.
        let modulus = det.sqrt();
        [modulus, modulus]
    };
    if mags[0] > mags[1] {
        mags.swap(0, 1);
    }
    mags
}

/// Local stability of the recurrence at the separating point `y = s`.
pub fn stability_at(w: &MixingParams, s: SamplePair) -> StabilityReport {
    let mags = eigenvalue_magnitudes(&recurrence_jacobian(w, s));
    StabilityReport {
        eigenvalue_magnitudes: mags,
        locally_stable: mags[0] < 1.0 && mags[1] < 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const W_STAR: MixingParams = MixingParams {
        l1: -0.2,
        l2: 0.2,
        q1: -0.8,
        q2: 0.8,
    };

    fn fd_jacobian(w: &MixingParams, x: SamplePair, y: SamplePair, h: f64) -> Matrix2 {
        let mut m = [[0.0; 2]; 2];
        for col in 0..2 {
            let mut yp = y;
            let mut ym = y;
            if col == 0 {
                yp.first += h;
                ym.first -= h;
            } else {
                yp.second += h;
                ym.second -= h;
            }
            let fp = iterate_once(w, x, yp);
            let fm = iterate_once(w, x, ym);
            m[0][col] = (fp.first - fm.first) / (2.0 * h);
            m[1][col] = (fp.second - fm.second) / (2.0 * h);
        }
        m
    }

    /// Brute-force eigenvalue oracle: roots of λ² - tr·λ + det via complex arithmetic.
    fn oracle_magnitudes(m: &Matrix2) -> [f64; 2] {
        let tr = m[0][0] + m[1][1];
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let disc = tr * tr - 4.0 * det;
        // sqrt(disc) as a complex number (re, im).
        let (re, im) = if disc >= 0.0 {
            (disc.sqrt(), 0.0)
        } else {
            (0.0, (-disc).sqrt())
        };
        let l1 = ((tr + re) / 2.0).hypot(im / 2.0);
        let l2 = ((tr - re) / 2.0).hypot(im / 2.0);
        let mut out = [l1, l2];
        out.sort_by(f64::total_cmp);
        out
    }

    #[test]
    fn iterate_once_examples() {
        let x = SamplePair::new(0.3, -0.2);
        assert_eq!(
            iterate_once(&MixingParams::ZERO, x, SamplePair::new(9.0, -4.0)),
            x
        );

        let x = W_STAR.mix(SamplePair::new(0.5, 0.5));
        let y = iterate_once(&W_STAR, x, SamplePair::new(0.5, 0.5));
        assert!(y.max_abs_diff(SamplePair::new(0.5, 0.5)) < 1e-15);

        let y = iterate_once(
            &W_STAR,
            SamplePair::new(0.8, 0.2),
            SamplePair::new(0.0, 0.0),
        );
        assert_eq!(y, SamplePair::new(0.8, 0.2));
    }

    #[test]
    fn run_recurrence_converges_on_reference_point() {
        let cfg = RecurrenceConfig::new(500, 1e-12, 1e6).unwrap();
        let r = run_recurrence(
            &W_STAR,
            SamplePair::new(0.8, 0.2),
            SamplePair::new(0.0, 0.0),
            &cfg,
        );
        assert_eq!(r.status, RecurrenceStatus::Converged);
        let root = W_STAR
            .direct_inverse(SamplePair::new(0.8, 0.2))
            .unwrap()
            .root_minus;
        assert!(r.output.max_abs_diff(root) < 1e-10);
        assert!(r.output.max_abs_diff(SamplePair::new(0.5, 0.5)) < 1e-10);
    }

    #[test]
    fn run_recurrence_identity_converges_in_one_step() {
        let x = SamplePair::new(0.7, -1.3);
        let r = run_recurrence(&MixingParams::ZERO, x, x, &RecurrenceConfig::default());
        assert_eq!(r.status, RecurrenceStatus::Converged);
        assert_eq!(r.iterations_used, 1);
        assert_eq!(r.output, x);
    }

    #[test]
    fn run_recurrence_zero_tolerance_hits_max_iterations() {
        let cfg = RecurrenceConfig::new(1, 0.0, 1e6).unwrap();
        let r = run_recurrence(
            &W_STAR,
            SamplePair::new(0.8, 0.2),
            SamplePair::new(0.0, 0.0),
            &cfg,
        );
        assert_eq!(r.status, RecurrenceStatus::MaxIterations);
        assert_eq!(r.iterations_used, 1);
    }

    #[test]
    fn run_recurrence_reports_divergence() {
        let w = MixingParams::new(0.0, 0.0, 0.0, 2.0).unwrap();
        let x = w.mix(SamplePair::new(1.0, 1.0));
        let r = run_recurrence(
            &w,
            x,
            SamplePair::new(1.1, 1.1),
            &RecurrenceConfig::default(),
        );
        assert_eq!(r.status, RecurrenceStatus::Diverged);
        assert!(r.iterations_used <= RecurrenceConfig::default().max_iterations);
    }

    #[test]
    fn config_validation() {
        assert!(RecurrenceConfig::new(0, 1e-10, 1.0).is_err());
        assert!(RecurrenceConfig::new(10, -1.0, 1.0).is_err());
        assert!(RecurrenceConfig::new(10, f64::NAN, 1.0).is_err());
        assert!(RecurrenceConfig::new(10, 1e-10, 0.0).is_err());
    }

    #[test]
    fn recurrence_jacobian_examples() {
        assert_eq!(
            recurrence_jacobian(&MixingParams::ZERO, SamplePair::new(0.3, 0.4)),
            [[0.0, 0.0], [0.0, 0.0]]
        );
        let m = recurrence_jacobian(&W_STAR, SamplePair::new(0.5, 0.5));
        let want = [[-0.4, -0.6], [0.6, 0.4]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((m[i][j] - want[i][j]).abs() < 1e-15, "{m:?}");
            }
        }
        let fd = fd_jacobian(
            &W_STAR,
            SamplePair::new(0.8, 0.2),
            SamplePair::new(0.5, 0.5),
            1e-6,
        );
        for i in 0..2 {
            for j in 0..2 {
                assert!((m[i][j] - fd[i][j]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn stability_examples() {
        let r = stability_at(&MixingParams::ZERO, SamplePair::new(0.3, 0.1));
        assert_eq!(r.eigenvalue_magnitudes, [0.0, 0.0]);
        assert!(r.locally_stable);

        // [[-0.4,-0.6],[0.6,0.4]]: trace 0, det 0.2, so a complex pair of modulus sqrt(0.2).
        let r = stability_at(&W_STAR, SamplePair::new(0.5, 0.5));
        let m = fd_jacobian(
            &W_STAR,
            SamplePair::new(0.8, 0.2),
            SamplePair::new(0.5, 0.5),
            1e-6,
        );
        let oracle = oracle_magnitudes(&m);
        assert!(
            (oracle[0] - 0.2f64.sqrt()).abs() < 1e-9 && (oracle[1] - 0.2f64.sqrt()).abs() < 1e-9
        );
        assert!((r.eigenvalue_magnitudes[0] - 0.2f64.sqrt()).abs() < 1e-12);
        assert!((r.eigenvalue_magnitudes[1] - 0.2f64.sqrt()).abs() < 1e-12);
        assert!(r.locally_stable);

        let w = MixingParams::new(0.0, 0.0, 0.0, 2.0).unwrap();
        let r = stability_at(&w, SamplePair::new(1.0, 1.0));
        assert_eq!(
            recurrence_jacobian(&w, SamplePair::new(1.0, 1.0)),
            [[0.0, 0.0], [2.0, 2.0]]
        );
        assert_eq!(r.eigenvalue_magnitudes, [0.0, 2.0]);
        assert!(!r.locally_stable);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn fixed_point_of_mixture(w in prop::array::uniform4(-1.0..1.0f64), s in (-2.0..2.0f64, -2.0..2.0f64)) {
            let w = MixingParams::from_array(w).unwrap();
            let s = SamplePair::from(s);
            let y = iterate_once(&w, w.mix(s), s);
            prop_assert!(y.max_abs_diff(s) <= 1e-14 * (1.0 + s.first.abs() + s.second.abs()).powi(2));
        }

        #[test]
        fn jacobian_matches_finite_differences(w in prop::array::uniform4(-2.0..2.0f64), y in (-2.0..2.0f64, -2.0..2.0f64)) {
            let w = MixingParams::from_array(w).unwrap();
            let y = SamplePair::from(y);
            let m = recurrence_jacobian(&w, y);
            let fd = fd_jacobian(&w, SamplePair::new(0.1, -0.3), y, 1e-6);
            for i in 0..2 {
                for j in 0..2 {
                    prop_assert!((m[i][j] - fd[i][j]).abs() <= 1e-7);
                }
            }
        }

        #[test]
        fn eigenvalues_match_oracle(m in prop::array::uniform2(prop::array::uniform2(-3.0..3.0f64))) {
            let got = eigenvalue_magnitudes(&m);
            let want = oracle_magnitudes(&m);
            prop_assert!((got[0] - want[0]).abs() <= 1e-9 * (1.0 + want[1]));
            prop_assert!((got[1] - want[1]).abs() <= 1e-9 * (1.0 + want[1]));
        }

        #[test]
        fn linear_network_is_affine_in_y(l in (-1.0..1.0f64, -1.0..1.0f64), y in (-2.0..2.0f64, -2.0..2.0f64), z in (-2.0..2.0f64, -2.0..2.0f64)) {
            let w = MixingParams::new(l.0, l.1, 0.0, 0.0).unwrap();
            let x = SamplePair::new(0.2, -0.1);
            let (y, z) = (SamplePair::from(y), SamplePair::from(z));
            let mid = SamplePair::new(0.5 * (y.first + z.first), 0.5 * (y.second + z.second));
            let a = iterate_once(&w, x, mid);
            let fy = iterate_once(&w, x, y);
            let fz = iterate_once(&w, x, z);
            prop_assert!((a.first - 0.5 * (fy.first + fz.first)).abs() <= 1e-14);
            prop_assert!((a.second - 0.5 * (fy.second + fz.second)).abs() <= 1e-14);
        }

        #[test]
        fn stable_points_attract_nearby_starts(
            w in prop::array::uniform4(-0.6..0.6f64),
            s in (-0.5..0.5f64, -0.5..0.5f64),
            d in (-0.05..0.05f64, -0.05..0.05f64),
        ) {
            let w = MixingParams::from_array(w).unwrap();
            let s = SamplePair::from(s);
            let rep = stability_at(&w, s);
            prop_assume!(rep.spectral_radius() < 0.9);
            let y0 = SamplePair::new(s.first + d.0, s.second + d.1);
            let cfg = RecurrenceConfig::new(10_000, 1e-14, 1e6).unwrap();
            let r = run_recurrence(&w, w.mix(s), y0, &cfg);
            prop_assert_eq!(r.status, RecurrenceStatus::Converged);
            prop_assert!(r.output.max_abs_diff(s) <= 1e-10);
        }
    }
}
