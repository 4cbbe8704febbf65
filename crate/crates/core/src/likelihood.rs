//! Log-likelihood of the observations and its gradient in `w`.
//!
//! With `x = f(s, w)` fixed, the sources are implicit functions of the
//! parameters, `∂s/∂w = -(∂f/∂s)^{-1} ∂f/∂w`. The Jacobian term of the
//! likelihood depends on `w` both directly and through `s`, so its total
//! derivative is
//!
//! ```text
//! dJ/dw = ∂J/∂w|_s + ∂J/∂s · ∂s/∂w
//! ```
//!
//! [`gradient_corrected`] uses that total derivative. [`gradient_legacy`]
//! keeps only the first term, which is the historical (incorrect) form; it is
//! retained to reproduce and measure the discrepancy.

use crate::error::{Error, Result};
use crate::model::{MixingParams, SamplePair, SignalBatch};
use crate::scores::{LogDensity, ScoreEvaluator};

pub const DEFAULT_JACOBIAN_FLOOR: f64 = 1e-8;

/// `∂L/∂w` in the canonical order `[l1, l2, q1, q2]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradientVector(pub [f64; 4]);

impl GradientVector {
    pub fn components(&self) -> [f64; 4] {
        self.0
    }

    pub fn sup_norm(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, k: f64) -> GradientVector {
        GradientVector(self.0.map(|v| v * k))
    }
}

impl std::ops::Add for GradientVector {
    type Output = GradientVector;

    fn add(self, rhs: GradientVector) -> GradientVector {
        GradientVector(std::array::from_fn(|i| self.0[i] + rhs.0[i]))
    }
}

impl std::ops::Index<usize> for GradientVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// `∂s/∂w`: one row per source, one column per parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensitivityMatrix {
    pub rows: [[f64; 4]; 2],
}

impl SensitivityMatrix {
    pub fn flatten(&self) -> [f64; 8] {
        let [a, b] = self.rows;
        [a[0], a[1], a[2], a[3], b[0], b[1], b[2], b[3]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GradientVariant {
    Corrected,
    Legacy,
}

/// Everything needed to evaluate the likelihood gradient on a batch.
///
/// Construction checks that `|J| >= jacobian_floor` on every sample.
pub struct LikelihoodContext<'a> {
    params: MixingParams,
    sources: &'a SignalBatch,
    score1: &'a dyn ScoreEvaluator,
    score2: &'a dyn ScoreEvaluator,
    jacobian_floor: f64,
}

impl<'a> LikelihoodContext<'a> {
    pub fn new(
        params: MixingParams,
        sources: &'a SignalBatch,
        score1: &'a dyn ScoreEvaluator,
        score2: &'a dyn ScoreEvaluator,
        jacobian_floor: f64,
    ) -> Result<Self> {
        if !(jacobian_floor > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "jacobian floor must be positive, got {jacobian_floor}"
            )));
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("mixing parameters"));
        }
        for s in sources {
            let j = params.jacobian(*s);
            if !(j.abs() >= jacobian_floor) {
                return Err(Error::SingularJacobian {
                    value: j,
                    floor: jacobian_floor,
                });
            }
        }
        Ok(LikelihoodContext {
            params,
            sources,
            score1,
            score2,
            jacobian_floor,
        })
    }

    pub fn params(&self) -> MixingParams {
        self.params
    }

    pub fn sources(&self) -> &SignalBatch {
        self.sources
    }

    pub fn jacobian_floor(&self) -> f64 {
        self.jacobian_floor
    }
}

/// `E_t[log f1(s1)] + E_t[log f2(s2)] - E_t[log |J|]` over the batch.
pub fn log_likelihood(
    ctx: &LikelihoodContext<'_>,
    log_density1: &dyn LogDensity,
    log_density2: &dyn LogDensity,
) -> Result<f64> {
    let mut total = 0.0;
    for (i, s) in ctx.sources.iter().enumerate() {
        let term = log_density1.log_density(s.first) + log_density2.log_density(s.second)
            - ctx.params.jacobian(*s).abs().ln();
        if !term.is_finite() {
            return Err(Error::NonFiniteLogDensity(i));
        }
        total += term;
    }
    Ok(total / ctx.sources.len() as f64)
}

fn check_jacobian(j: f64, floor: f64) -> Result<()> {
    if j.abs() >= floor {
        Ok(())
    } else {
        Err(Error::SingularJacobian { value: j, floor })
    }
}

/// `∂s/∂w` at the source point `s`.
pub fn dsdw(w: &MixingParams, s: SamplePair) -> Result<SensitivityMatrix> {
    dsdw_with_floor(w, s, DEFAULT_JACOBIAN_FLOOR)
}

pub fn dsdw_with_floor(w: &MixingParams, s: SamplePair, floor: f64) -> Result<SensitivityMatrix> {
    let j = w.jacobian(s);
    check_jacobian(j, floor)?;
    let (s1, s2) = (s.first, s.second);
    let s12 = s1 * s2;
    // Rows of (∂f/∂s)^{-1} scaled by J, applied to -∂f/∂w.
    let a = 1.0 - w.q2 * s1;
    let b = w.l1 + w.q1 * s1;
    let c = w.l2 + w.q2 * s2;
    let d = 1.0 - w.q1 * s2;
    let inv_j = 1.0 / j;
    Ok(SensitivityMatrix {
        rows: [
            [
                a * s2 * inv_j,
                b * s1 * inv_j,
                a * s12 * inv_j,
                b * s12 * inv_j,
            ],
            [
                c * s2 * inv_j,
                d * s1 * inv_j,
                c * s12 * inv_j,
                d * s12 * inv_j,
            ],
        ],
    })
}

/// `∂J/∂w` with the sources held fixed.
pub fn djdw_explicit(w: &MixingParams, s: SamplePair) -> GradientVector {
    let (s1, s2) = (s.first, s.second);
    GradientVector([
        -(w.l2 + w.q2 * s2),
        -(w.l1 + w.q1 * s1),
        -(w.l2 * s1 + s2),
        -(s1 + w.l1 * s2),
    ])
}

/// `∂J/∂s`, independent of the sources since `J` is affine in them.
pub fn djds(w: &MixingParams) -> [f64; 2] {
    [-w.jacobian_slope_s1(), -w.jacobian_slope_s2()]
}

/// Total derivative `dJ/dw` along the fixed-observation manifold.
pub fn djdw_total(w: &MixingParams, s: SamplePair) -> Result<GradientVector> {
    djdw_total_with_floor(w, s, DEFAULT_JACOBIAN_FLOOR)
}

pub fn djdw_total_with_floor(
    w: &MixingParams,
    s: SamplePair,
    floor: f64,
) -> Result<GradientVector> {
    let sens = dsdw_with_floor(w, s, floor)?;
    Ok(chain_djdw(w, s, &sens))
}

fn chain_djdw(w: &MixingParams, s: SamplePair, sens: &SensitivityMatrix) -> GradientVector {
    let explicit = djdw_explicit(w, s);
    let [g1, g2] = djds(w);
    let [r1, r2] = sens.rows;
    GradientVector(std::array::from_fn(|k| {
        explicit.0[k] + g1 * r1[k] + g2 * r2[k]
    }))
}

/// `∂L/∂w` using the total derivative of the Jacobian term.
pub fn gradient_corrected(ctx: &LikelihoodContext<'_>) -> Result<GradientVector> {
    gradient(ctx, GradientVariant::Corrected)
}

/// `∂L/∂w` with the Jacobian term differentiated at fixed sources.
pub fn gradient_legacy(ctx: &LikelihoodContext<'_>) -> Result<GradientVector> {
    gradient(ctx, GradientVariant::Legacy)
}

/// `-E_t[ψ1(s1) ∂s1/∂w + ψ2(s2) ∂s2/∂w + (1/J) dJ/dw]`, reduced in sample order.
pub fn gradient(ctx: &LikelihoodContext<'_>, variant: GradientVariant) -> Result<GradientVector> {
    let w = &ctx.params;
    let mut acc = [0.0; 4];
    for s in ctx.sources {
        let sens = dsdw_with_floor(w, *s, ctx.jacobian_floor)?;
        let jac_term = match variant {
            GradientVariant::Corrected => chain_djdw(w, *s, &sens),
            GradientVariant::Legacy => djdw_explicit(w, *s),
        };
        let psi1 = ctx.score1.score(s.first);
        let psi2 = ctx.score2.score(s.second);
        let inv_j = 1.0 / w.jacobian(*s);
        let [r1, r2] = sens.rows;
        for k in 0..4 {
            acc[k] += psi1 * r1[k] + psi2 * r2[k] + inv_j * jac_term.0[k];
        }
    }
    let n = ctx.sources.len() as f64;
    Ok(GradientVector(acc.map(|v| -v / n)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{det2, Matrix2};
    use crate::scores::{gaussian_score, FlatDensity};
    use proptest::prelude::*;

    const W_STAR: MixingParams = MixingParams {
        l1: -0.2,
        l2: 0.2,
        q1: -0.8,
        q2: 0.8,
    };

    fn assert_vec_close(got: &[f64], want: &[f64], tol: f64) {
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() <= tol, "{got:?} vs {want:?}");
        }
    }

    /// The four components of the corrected dJ/dw written out term by term,
    /// independent of the chain-rule assembly above.
    fn djdw_expanded(w: &MixingParams, s: SamplePair) -> [f64; 4] {
        let (l1, l2, q1, q2) = (w.l1, w.l2, w.q1, w.q2);
        let (s1, s2) = (s.first, s.second);
        let j = w.jacobian(s);
        let a1 = q2 + l2 * q1;
        let a2 = q1 + l1 * q2;
        [
            -(l2 + q2 * s2) - a1 * (1.0 - q2 * s1) * s2 / j - a2 * (l2 + q2 * s2) * s2 / j,
            -(l1 + q1 * s1) - a2 * (1.0 - q1 * s2) * s1 / j - a1 * (l1 + q1 * s1) * s1 / j,
            -(l2 * s1 + s2)
                - a1 * (1.0 - q2 * s1) * s1 * s2 / j
                - a2 * (l2 + q2 * s2) * s1 * s2 / j,
            -(l1 * s2 + s1)
                - a2 * (1.0 - q1 * s2) * s1 * s2 / j
                - a1 * (l1 + q1 * s1) * s1 * s2 / j,
        ]
    }

    /// Corrected per-sample gradient term written out in full, term by term.
    fn gradient_term_expanded(w: &MixingParams, s: SamplePair, psi1: f64, psi2: f64) -> [f64; 4] {
        let (l1, l2, q1, q2) = (w.l1, w.l2, w.q1, w.q2);
        let (s1, s2) = (s.first, s.second);
        let j = w.jacobian(s);
        let a1 = q2 + l2 * q1;
        let a2 = q1 + l1 * q2;
        [
            -(psi1 * (1.0 - q2 * s1) * s2 + psi2 * (l2 + q2 * s2) * s2
                - (l2 + q2 * s2)
                - a1 * (1.0 - q2 * s1) * s2 / j
                - a2 * (l2 + q2 * s2) * s2 / j)
                / j,
            -(psi1 * (l1 + q1 * s1) * s1 + psi2 * (1.0 - q1 * s2) * s1
                - (l1 + q1 * s1)
                - a2 * (1.0 - q1 * s2) * s1 / j
                - a1 * (l1 + q1 * s1) * s1 / j)
                / j,
            -(psi1 * (1.0 - q2 * s1) * s1 * s2 + psi2 * (l2 + q2 * s2) * s1 * s2
                - (l2 * s1 + s2)
                - a1 * (1.0 - q2 * s1) * s1 * s2 / j
                - a2 * (l2 + q2 * s2) * s1 * s2 / j)
                / j,
            -(psi1 * (l1 + q1 * s1) * s1 * s2 + psi2 * (1.0 - q1 * s2) * s1 * s2
                - (l1 * s2 + s1)
                - a2 * (1.0 - q1 * s2) * s1 * s2 / j
                - a1 * (l1 + q1 * s1) * s1 * s2 / j)
                / j,
        ]
    }

    #[test]
    fn log_likelihood_examples() {
        let batch = SignalBatch::new(vec![SamplePair::new(0.0, 0.0)]).unwrap();
        let g = gaussian_score(0.0, 1.0).unwrap();
        let ctx = LikelihoodContext::new(MixingParams::ZERO, &batch, &g, &g, 1e-8).unwrap();
        let l = log_likelihood(&ctx, &g, &g).unwrap();
        assert!((l + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);

        // J = e at s = (0, 0) with l1*l2 = 1 - e.
        let e = std::f64::consts::E;
        let w = MixingParams::new(1.0, 1.0 - e, 0.0, 0.0).unwrap();
        let ctx = LikelihoodContext::new(w, &batch, &FlatDensity, &FlatDensity, 1e-8).unwrap();
        let l = log_likelihood(&ctx, &FlatDensity, &FlatDensity).unwrap();
        assert!((l + 1.0).abs() < 1e-15);

        let two =
            SignalBatch::new(vec![SamplePair::new(0.0, 0.0), SamplePair::new(1.0, -0.5)]).unwrap();
        let ctx = LikelihoodContext::new(W_STAR, &two, &g, &g, 1e-8).unwrap();
        let per = |s: SamplePair| {
            g.log_density(s.first) + g.log_density(s.second) - W_STAR.jacobian(s).abs().ln()
        };
        let want = 0.5 * (per(two.samples()[0]) + per(two.samples()[1]));
        assert!((log_likelihood(&ctx, &g, &g).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn log_likelihood_rejects_nonfinite_density() {
        struct Bounded;
        impl LogDensity for Bounded {
            fn log_density(&self, u: f64) -> f64 {
                if u.abs() <= 1.0 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
        let batch =
            SignalBatch::new(vec![SamplePair::new(0.0, 0.0), SamplePair::new(2.0, 0.0)]).unwrap();
        let ctx =
            LikelihoodContext::new(MixingParams::ZERO, &batch, &FlatDensity, &FlatDensity, 1e-8)
                .unwrap();
        assert_eq!(
            log_likelihood(&ctx, &Bounded, &Bounded),
            Err(Error::NonFiniteLogDensity(1))
        );
    }

    #[test]
    fn context_rejects_samples_below_floor() {
        // J(w*, s) = 0 on the line 0.64 s1 - 0.96 s2 = 1.04.
        let s = SamplePair::new(1.625, 0.0);
        assert!(W_STAR.jacobian(s).abs() < 1e-12);
        let batch = SignalBatch::new(vec![SamplePair::new(0.0, 0.0), s]).unwrap();
        let res = LikelihoodContext::new(W_STAR, &batch, &FlatDensity, &FlatDensity, 1e-8);
        assert!(matches!(res, Err(Error::SingularJacobian { .. })));
        assert!(matches!(
            dsdw(&W_STAR, s),
            Err(Error::SingularJacobian { .. })
        ));
    }

    #[test]
    fn dsdw_examples() {
        let s = SamplePair::new(0.3, -0.7);
        let m = dsdw(&MixingParams::ZERO, s).unwrap();
        assert_vec_close(&m.rows[0], &[-0.7, 0.0, 0.3 * -0.7, 0.0], 1e-15);
        assert_vec_close(&m.rows[1], &[0.0, 0.3, 0.0, 0.3 * -0.7], 1e-15);

        let m = dsdw(&W_STAR, SamplePair::new(0.5, 0.5)).unwrap();
        assert_vec_close(&m.rows[0], &[0.25, -0.25, 0.125, -0.125], 1e-14);
        assert_vec_close(&m.rows[1], &[0.25, 0.7 / 1.2, 0.125, 0.35 / 1.2], 1e-14);
    }

    #[test]
    fn djdw_explicit_examples() {
        let g = djdw_explicit(&MixingParams::ZERO, SamplePair::new(0.5, 0.3));
        assert_vec_close(&g.0, &[0.0, 0.0, -0.3, -0.5], 0.0);
        let g = djdw_explicit(&W_STAR, SamplePair::new(0.5, 0.5));
        assert_vec_close(&g.0, &[-0.6, 0.6, -0.6, -0.4], 1e-15);
        let g = djdw_explicit(&W_STAR, SamplePair::new(0.0, 0.0));
        assert_vec_close(&g.0, &[-W_STAR.l2, -W_STAR.l1, 0.0, 0.0], 0.0);
    }

    #[test]
    fn djdw_explicit_matches_fd_at_fixed_sources() {
        let s = SamplePair::new(0.5, 0.5);
        let h = 1e-6;
        let base = W_STAR.to_array();
        let g = djdw_explicit(&W_STAR, s);
        for k in 0..4 {
            let mut p = base;
            let mut m = base;
            p[k] += h;
            m[k] -= h;
            let fd = (MixingParams::from_array(p).unwrap().jacobian(s)
                - MixingParams::from_array(m).unwrap().jacobian(s))
                / (2.0 * h);
            assert!((fd - g.0[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn djds_examples() {
        assert_eq!(djds(&MixingParams::ZERO).map(f64::abs), [0.0, 0.0]);
        let d = djds(&W_STAR);
        assert!((d[0] + 0.64).abs() < 1e-15 && (d[1] - 0.96).abs() < 1e-15);
        let lin = MixingParams::new(0.4, -0.3, 0.0, 0.0).unwrap();
        assert_eq!(djds(&lin).map(f64::abs), [0.0, 0.0]);
        // FD of J in s with w fixed.
        let s = SamplePair::new(0.2, -0.1);
        let h = 1e-6;
        let fd1 = (W_STAR.jacobian(SamplePair::new(s.first + h, s.second))
            - W_STAR.jacobian(SamplePair::new(s.first - h, s.second)))
            / (2.0 * h);
        let fd2 = (W_STAR.jacobian(SamplePair::new(s.first, s.second + h))
            - W_STAR.jacobian(SamplePair::new(s.first, s.second - h)))
            / (2.0 * h);
        assert!((fd1 - d[0]).abs() < 1e-9 && (fd2 - d[1]).abs() < 1e-9);
    }

    #[test]
    fn djdw_total_examples() {
        let lin = MixingParams::new(0.4, -0.3, 0.0, 0.0).unwrap();
        let s = SamplePair::new(0.2, 0.45);
        assert_eq!(djdw_total(&lin, s).unwrap(), djdw_explicit(&lin, s));

        let g = djdw_total(&W_STAR, SamplePair::new(0.5, 0.5)).unwrap();
        assert_vec_close(&g.0, &[-0.52, 1.32, -0.56, -0.04], 1e-14);
        assert_vec_close(
            &g.0,
            &djdw_expanded(&W_STAR, SamplePair::new(0.5, 0.5)),
            1e-14,
        );
    }

    #[test]
    fn gradient_examples_with_flat_scores() {
        let batch = SignalBatch::new(vec![SamplePair::new(0.5, 0.5)]).unwrap();
        let ctx = LikelihoodContext::new(W_STAR, &batch, &FlatDensity, &FlatDensity, 1e-8).unwrap();
        let g = gradient_corrected(&ctx).unwrap();
        assert_vec_close(&g.0, &[0.52 / 1.2, -1.1, 0.56 / 1.2, 0.04 / 1.2], 1e-14);
        let g = gradient_legacy(&ctx).unwrap();
        assert_vec_close(&g.0, &[0.5, -0.5, 0.5, 0.4 / 1.2], 1e-14);

        let batch = SignalBatch::new(vec![
            SamplePair::new(0.5, 0.3),
            SamplePair::new(-0.1, 0.2),
            SamplePair::new(0.4, -0.4),
        ])
        .unwrap();
        let ctx =
            LikelihoodContext::new(MixingParams::ZERO, &batch, &FlatDensity, &FlatDensity, 1e-8)
                .unwrap();
        let g = gradient_corrected(&ctx).unwrap();
        let mean1 = (0.5 - 0.1 + 0.4) / 3.0;
        let mean2 = (0.3 + 0.2 - 0.4) / 3.0;
        assert_vec_close(&g.0, &[0.0, 0.0, mean2, mean1], 1e-15);
    }

    #[test]
    fn legacy_equals_corrected_for_linear_mixtures() {
        let w = MixingParams::new(0.3, -0.45, 0.0, 0.0).unwrap();
        let batch =
            SignalBatch::new(vec![SamplePair::new(0.5, 0.3), SamplePair::new(-0.2, 0.1)]).unwrap();
        let g = gaussian_score(0.0, 0.4).unwrap();
        let ctx = LikelihoodContext::new(w, &batch, &g, &g, 1e-8).unwrap();
        assert_eq!(
            gradient_corrected(&ctx).unwrap(),
            gradient_legacy(&ctx).unwrap()
        );
    }

    fn admissible() -> impl Strategy<Value = (MixingParams, SamplePair)> {
        (
            prop::array::uniform4(-0.5..0.5f64),
            (-0.5..0.5f64, -0.5..0.5f64),
        )
            .prop_map(|(w, s)| (MixingParams::from_array(w).unwrap(), SamplePair::from(s)))
            .prop_filter("|J| >= 0.1", |(w, s)| w.jacobian(*s).abs() >= 0.1)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(512))]

        #[test]
        fn chain_rule_matches_expanded_formula((w, s) in admissible()) {
            let total = djdw_total(&w, s).unwrap();
            let expanded = djdw_expanded(&w, s);
            for k in 0..4 {
                prop_assert!((total.0[k] - expanded[k]).abs() <= 1e-12);
            }
        }

        #[test]
        fn implicit_function_identity((w, s) in admissible()) {
            let m: Matrix2 = w.mixing_jacobian_matrix(s);
            let sens = dsdw(&w, s).unwrap();
            let dfdw = [
                [-s.second, 0.0, -s.first * s.second, 0.0],
                [0.0, -s.first, 0.0, -s.first * s.second],
            ];
            for r in 0..2 {
                for k in 0..4 {
                    let v = m[r][0] * sens.rows[0][k] + m[r][1] * sens.rows[1][k] + dfdw[r][k];
                    prop_assert!(v.abs() <= 1e-12);
                }
            }
            prop_assert!((det2(&m) - w.jacobian(s)).abs() <= 1e-12);
        }

        #[test]
        fn gradient_matches_expanded_formula((w, s) in admissible(), t in (-0.5..0.5f64, -0.5..0.5f64)) {
            let t = SamplePair::from(t);
            prop_assume!(w.jacobian(t).abs() >= 0.1);
            let batch = SignalBatch::new(vec![s, t]).unwrap();
            let g1 = gaussian_score(0.1, 0.3).unwrap();
            let g2 = gaussian_score(-0.05, 0.6).unwrap();
            let ctx = LikelihoodContext::new(w, &batch, &g1, &g2, 1e-8).unwrap();
            let got = gradient_corrected(&ctx).unwrap();
            let a = gradient_term_expanded(&w, s, g1.score(s.first), g2.score(s.second));
            let b = gradient_term_expanded(&w, t, g1.score(t.first), g2.score(t.second));
            for k in 0..4 {
                let want = 0.5 * (a[k] + b[k]);
                prop_assert!((got.0[k] - want).abs() <= 1e-11 * (1.0 + want.abs()));
            }
        }
    }
}
