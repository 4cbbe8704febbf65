//! The linear-quadratic mixing model.
//!
//! Two sources `s = (s1, s2)` are mixed into observations `x = (x1, x2)` by
//!
//! ```text
//! x1 = s1 - l1*s2 - q1*s1*s2
//! x2 = s2 - l2*s1 - q2*s1*s2
//! ```
//!
//! The Jacobian of this map is affine in the sources, which makes both the
//! closed-form inversion and the sign classification over a rectangle exact.

use crate::error::{Error, Result};

/// Row-major 2×2 matrix.
pub type Matrix2 = [[f64; 2]; 2];

/// Discriminants in `(-NEAR_ZERO_DISCRIMINANT, 0)` are treated as an exact double root.
pub const NEAR_ZERO_DISCRIMINANT: f64 = 1e-12;

pub fn det2(m: &Matrix2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

/// Mixture coefficients `w = [l1, l2, q1, q2]`.
///
/// The array order is canonical: gradients, updates and serialization all
/// use it.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MixingParams {
    pub l1: f64,
    pub l2: f64,
    pub q1: f64,
    pub q2: f64,
}

/// Coefficients of the unnormalized model `x_i = a_i1*u1 + a_i2*u2 + b_i*u1*u2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawCoefficients {
    pub a11: f64,
    pub a12: f64,
    pub a21: f64,
    pub a22: f64,
    pub b1: f64,
    pub b2: f64,
}

/// A pair of values on the two channels: sources, observations or outputs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SamplePair {
    pub first: f64,
    pub second: f64,
}

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

/// A nonempty, finite sequence of two-channel samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalBatch {
    samples: Vec<SamplePair>,
}

/// Both root pairs of the quadratic inversion plus the per-channel discriminants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseCandidates {
    /// Pair obtained with `+sqrt(Δ)` on both channels.
    pub root_plus: SamplePair,
    /// Pair obtained with `-sqrt(Δ)` on both channels.
    pub root_minus: SamplePair,
    pub discriminants: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum JacobianSignClass {
    AlwaysNegative,
    AlwaysPositive,
    MixedSign,
}

impl MixingParams {
    pub const ZERO: MixingParams = MixingParams {
        l1: 0.0,
        l2: 0.0,
        q1: 0.0,
        q2: 0.0,
    };

    pub fn new(l1: f64, l2: f64, q1: f64, q2: f64) -> Result<Self> {
        Self::from_array([l1, l2, q1, q2])
    }

    pub fn from_array(w: [f64; 4]) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mixing parameters"));
        }
        Ok(Self::from_array_unchecked(w))
    }

    pub(crate) fn from_array_unchecked(w: [f64; 4]) -> Self {
        MixingParams {
            l1: w[0],
            l2: w[1],
            q1: w[2],
            q2: w[3],
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.l1, self.l2, self.q1, self.q2]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// `q2 + l2*q1`, the coefficient of `s1` in `1 - l1*l2 - J`.
    pub fn jacobian_slope_s1(&self) -> f64 {
        self.q2 + self.l2 * self.q1
    }

    /// `q1 + l1*q2`, the coefficient of `s2` in `1 - l1*l2 - J`.
    pub fn jacobian_slope_s2(&self) -> f64 {
        self.q1 + self.l1 * self.q2
    }

    pub fn mix(&self, s: SamplePair) -> SamplePair {
        let cross = s.first * s.second;
        SamplePair {
            first: s.first - self.l1 * s.second - self.q1 * cross,
            second: s.second - self.l2 * s.first - self.q2 * cross,
        }
    }

    /// Determinant of the mixing map's derivative, `1 - l1*l2 - (q2+l2*q1)*s1 - (q1+l1*q2)*s2`.
    pub fn jacobian(&self, s: SamplePair) -> f64 {
        1.0 - self.l1 * self.l2
            - self.jacobian_slope_s1() * s.first
            - self.jacobian_slope_s2() * s.second
    }

    /// `∂x/∂s`.
    pub fn mixing_jacobian_matrix(&self, s: SamplePair) -> Matrix2 {
        [
            [1.0 - self.q1 * s.second, -self.l1 - self.q1 * s.first],
            [-self.l2 - self.q2 * s.second, 1.0 - self.q2 * s.first],
        ]
    }

    /// Solves the model for the sources in closed form.
    ///
    /// Each channel reduces to `a_i*s^2 + b_i*s + c_i = 0`. When `a_i = 0`
    /// the linear equation is solved and its root fills both slots.
    pub fn direct_inverse(&self, x: SamplePair) -> Result<InverseCandidates> {
        let (l1, l2, q1, q2) = (self.l1, self.l2, self.q1, self.q2);
        let a1 = self.jacobian_slope_s1();
        let a2 = self.jacobian_slope_s2();
        let cross = q1 * x.second - q2 * x.first;
        let b1 = cross + l1 * l2 - 1.0;
        let b2 = -cross + l1 * l2 - 1.0;
        let c1 = x.first + l1 * x.second;
        let c2 = x.second + l2 * x.first;

        let (plus1, minus1, d1) = solve_channel(a1, b1, c1, 1)?;
        let (plus2, minus2, d2) = solve_channel(a2, b2, c2, 2)?;
        Ok(InverseCandidates {
            root_plus: SamplePair::new(plus1, plus2),
            root_minus: SamplePair::new(minus1, minus2),
            discriminants: (d1, d2),
        })
    }

    /// The second solution of the model: it produces the same observations as `s`
    /// and equals `s` up to a swap, a scaling and an offset.
    pub fn permuted_solution(&self, s: SamplePair) -> Result<SamplePair> {
        let a1 = self.jacobian_slope_s1();
        let a2 = self.jacobian_slope_s2();
        if a1 == 0.0 || a2 == 0.0 {
            return Err(Error::DegenerateCoefficients(
                "q2 + l2*q1 and q1 + l1*q2 must be nonzero",
            ));
        }
        let k = self.l1 * self.l2 - 1.0;
        Ok(SamplePair {
            first: -(a2 / a1) * s.second - k / a1,
            second: -(a1 / a2) * s.first - k / a2,
        })
    }

    /// Sign of `J` over the rectangle `s1_range × s2_range`.
    ///
    /// `J` is affine in the sources, so its extrema over a rectangle are
    /// attained at the corners.
    pub fn classify_jacobian_sign(
        &self,
        s1_range: Interval,
        s2_range: Interval,
    ) -> JacobianSignClass {
        let corners = [
            SamplePair::new(s1_range.lo, s2_range.lo),
            SamplePair::new(s1_range.lo, s2_range.hi),
            SamplePair::new(s1_range.hi, s2_range.lo),
            SamplePair::new(s1_range.hi, s2_range.hi),
        ];
        let values = corners.map(|c| self.jacobian(c));
        if values.iter().all(|&j| j > 0.0) {
            JacobianSignClass::AlwaysPositive
        } else if values.iter().all(|&j| j < 0.0) {
            JacobianSignClass::AlwaysNegative
        } else {
            JacobianSignClass::MixedSign
        }
    }
}

/// Returns `(plus_root, minus_root, discriminant)` for `a*s^2 + b*s + c = 0`.
fn solve_channel(a: f64, b: f64, c: f64, channel: usize) -> Result<(f64, f64, f64)> {
    if a == 0.0 {
        if b == 0.0 {
            return Err(Error::DegenerateInverse(channel));
        }
        let s = -c / b;
        return Ok((s, s, b * b));
    }
    let mut disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        if disc > -NEAR_ZERO_DISCRIMINANT {
            disc = 0.0;
        } else {
            return Err(Error::NegativeDiscriminant(disc));
        }
    }
    let sq = disc.sqrt();
    // Cancellation-free form: q shares the sign of -b, so -b and ∓sqrt(Δ) never cancel.
    if b < 0.0 {
        let q = 0.5 * (-b + sq);
        Ok((q / a, c / q, disc))
    } else {
        let q = -0.5 * (b + sq);
        if q == 0.0 {
            // b = 0 and Δ = 0, hence c = 0: double root at the origin.
            return Ok((0.0, 0.0, disc));
        }
        Ok((c / q, q / a, disc))
    }
}

impl RawCoefficients {
    /// Normalizes to the model whose sources are `s1 = a11*u1` and `s2 = a22*u2`.
    pub fn normalize(&self) -> Result<MixingParams> {
        if self.a11 == 0.0 || self.a22 == 0.0 {
            return Err(Error::DegenerateCoefficients("a11 and a22 must be nonzero"));
        }
        MixingParams::new(
            -self.a12 / self.a22,
            -self.a21 / self.a11,
            -self.b1 / (self.a11 * self.a22),
            -self.b2 / (self.a11 * self.a22),
        )
    }
}

impl SamplePair {
    pub const fn new(first: f64, second: f64) -> Self {
        SamplePair { first, second }
    }

    pub fn is_finite(&self) -> bool {
        self.first.is_finite() && self.second.is_finite()
    }

    /// Sup-norm distance.
    pub fn max_abs_diff(&self, other: SamplePair) -> f64 {
        (self.first - other.first)
            .abs()
            .max((self.second - other.second).abs())
    }

    pub fn distance(&self, other: SamplePair) -> f64 {
        (self.first - other.first).hypot(self.second - other.second)
    }
}

impl From<(f64, f64)> for SamplePair {
    fn from((first, second): (f64, f64)) -> Self {
        SamplePair { first, second }
    }
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::NonFinite("interval bounds"));
        }
        if lo > hi {
            return Err(Error::InvalidParameter(format!(
                "empty interval [{lo}, {hi}]"
            )));
        }
        Ok(Interval { lo, hi })
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

impl InverseCandidates {
    /// Picks the root pair equal to the true sources for a constant-sign Jacobian.
    ///
    /// `J < 0` everywhere selects the `+sqrt(Δ)` pair and `J > 0` the `-sqrt(Δ)`
    /// pair. With a zero discriminant both pairs coincide.
    pub fn select_root(&self, sign_class: JacobianSignClass) -> Result<SamplePair> {
        match sign_class {
            JacobianSignClass::AlwaysNegative => Ok(self.root_plus),
            JacobianSignClass::AlwaysPositive => Ok(self.root_minus),
            JacobianSignClass::MixedSign => Err(Error::MixedSign),
        }
    }

    pub fn roots(&self) -> [SamplePair; 2] {
        [self.root_plus, self.root_minus]
    }
}

impl SignalBatch {
    pub fn new(samples: Vec<SamplePair>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("signal batch"));
        }
        Ok(SignalBatch { samples })
    }

    pub fn from_channels(first: &[f64], second: &[f64]) -> Result<Self> {
        if first.len() != second.len() {
            return Err(Error::LengthMismatch {
                left: first.len(),
                right: second.len(),
            });
        }
        Self::new(
            first
                .iter()
                .zip(second)
                .map(|(&a, &b)| SamplePair::new(a, b))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    /// Always false; kept for the usual `len`/`is_empty` pairing.
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[SamplePair] {
        &self.samples
    }

    pub fn iter(&self) -> std::slice::Iter<'_, SamplePair> {
        self.samples.iter()
    }

    pub fn into_samples(self) -> Vec<SamplePair> {
        self.samples
    }

    pub fn first_channel(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.first).collect()
    }

    pub fn second_channel(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.second).collect()
    }

    /// Per-channel `[min, max]`.
    pub fn bounding_box(&self) -> (Interval, Interval) {
        let mut r1 = Interval {
            lo: f64::INFINITY,
            hi: f64::NEG_INFINITY,
        };
        let mut r2 = r1;
        for s in &self.samples {
            r1.lo = r1.lo.min(s.first);
            r1.hi = r1.hi.max(s.first);
            r2.lo = r2.lo.min(s.second);
            r2.hi = r2.hi.max(s.second);
        }
        (r1, r2)
    }

    /// Applies the mixing model samplewise.
    pub fn mixed(&self, w: &MixingParams) -> Result<SignalBatch> {
        SignalBatch::new(self.samples.iter().map(|&s| w.mix(s)).collect())
    }
}

impl<'a> IntoIterator for &'a SignalBatch {
    type Item = &'a SamplePair;
    type IntoIter = std::slice::Iter<'a, SamplePair>;

    fn into_iter(self) -> Self::IntoIter {
        self.samples.iter()
    }
}
