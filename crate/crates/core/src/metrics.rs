//! Separation quality modulo permutation, scale and offset.

use crate::error::{Error, Result};
use crate::model::SignalBatch;

/// Reported in place of an infinite ratio when a fit is exact.
pub const SIR_CAP_DB: f64 = 300.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeparationMetrics {
    /// SIR of each output channel against its matched source, in dB.
    pub sir_db: [f64; 2],
    /// `true` when output 1 matches source 2 and output 2 matches source 1.
    pub swapped: bool,
    pub scale: [f64; 2],
    pub offset: [f64; 2],
}

impl SeparationMetrics {
    pub fn min_sir(&self) -> f64 {
        self.sir_db[0].min(self.sir_db[1])
    }

    pub fn mean_sir(&self) -> f64 {
        0.5 * (self.sir_db[0] + self.sir_db[1])
    }
}

struct AffineFit {
    scale: f64,
    offset: f64,
    sir_db: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Least-squares fit `y ≈ α·s + β`; SIR compares the fitted component to the residual.
fn fit_affine(y: &[f64], s: &[f64]) -> Result<AffineFit> {
    let (my, ms) = (mean(y), mean(s));
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&yi, &si) in y.iter().zip(s) {
        sxx += (si - ms) * (si - ms);
        sxy += (si - ms) * (yi - my);
    }
    if !(sxx > 0.0) {
        return Err(Error::ZeroVariance);
    }
    let scale = sxy / sxx;
    let offset = my - scale * ms;
    let n = y.len() as f64;
    let signal = scale * scale * sxx / n;
    let residual = y
        .iter()
        .zip(s)
        .map(|(&yi, &si)| {
            let r = yi - scale * si - offset;
            r * r
        })
        .sum::<f64>()
        / n;
    let sir_db = if residual == 0.0 {
        SIR_CAP_DB
    } else if signal == 0.0 {
        -SIR_CAP_DB
    } else {
        (10.0 * (signal / residual).log10()).clamp(-SIR_CAP_DB, SIR_CAP_DB)
    };
    Ok(AffineFit {
        scale,
        offset,
        sir_db,
    })
}

/// Matches outputs to sources under {identity, swap} and scores each channel.
pub fn align_and_score(y: &SignalBatch, s: &SignalBatch) -> Result<SeparationMetrics> {
    if y.len() != s.len() {
        return Err(Error::LengthMismatch {
            left: y.len(),
            right: s.len(),
        });
    }
    let (y1, y2) = (y.first_channel(), y.second_channel());
    let (s1, s2) = (s.first_channel(), s.second_channel());

    let direct = [fit_affine(&y1, &s1)?, fit_affine(&y2, &s2)?];
    let crossed = [fit_affine(&y1, &s2)?, fit_affine(&y2, &s1)?];
    let score = |f: &[AffineFit; 2]| f[0].sir_db + f[1].sir_db;
    let swapped = score(&crossed) > score(&direct);
    let fits = if swapped { crossed } else { direct };
    Ok(SeparationMetrics {
        sir_db: [fits[0].sir_db, fits[1].sir_db],
        swapped,
        scale: [fits[0].scale, fits[1].scale],
        offset: [fits[0].offset, fits[1].offset],
    })
}
