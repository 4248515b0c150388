//! Extreme-value machinery: two-parameter Weibull tail fits and the rank
//! calibrator that together turn feature-space distances into per-class
//! belongingness scores.
//!
//! The fit maximizes the Weibull likelihood on the `tail_size` largest
//! distances. With shape m and scale eta the profile-likelihood stationarity
//! condition is
//!
//!   sum(d^m ln d) / sum(d^m) - 1/m - mean(ln d) = 0
//!
//! which has a unique root for any tail with at least two distinct positive
//! values (the left side is strictly increasing in m). We solve it by Newton
//! iteration from a coefficient-of-variation initial guess and fall back to
//! bisection on [0.01, 100] if Newton wanders. Distances are normalized by
//! the tail maximum before solving: the root is invariant under scaling, the
//! powers d^m stay in [0, 1], and the scale recovers as
//! eta = (sum(d^m)/n)^(1/m) times the maximum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeibullParams {
    /// Shape m > 0.
    pub shape: f64,
    /// Scale eta > 0.
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankCalibration {
    /// Resolved per model: off when the known-class count is at most 10,
    /// on otherwise.
    Auto,
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TailFitConfig {
    pub tail_size: usize,
    pub alpha: u32,
    pub rank_calibration: RankCalibration,
}

impl Default for TailFitConfig {
    fn default() -> Self {
        TailFitConfig {
            tail_size: 20,
            alpha: 10,
            rank_calibration: RankCalibration::Auto,
        }
    }
}

impl TailFitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tail_size < 2 {
            return Err(Error::Config(format!(
                "tail_size {} cannot determine two Weibull parameters",
                self.tail_size
            )));
        }
        if self.alpha == 0 {
            return Err(Error::Config("alpha must be at least 1".into()));
        }
        Ok(())
    }

    /// The auto rule: calibration helps when many classes compete, hurts
    /// when few do.
    pub fn calibration_enabled(&self, class_count: usize) -> bool {
        match self.rank_calibration {
            RankCalibration::On => true,
            RankCalibration::Off => false,
            RankCalibration::Auto => class_count > 10,
        }
    }
}

/// P(D <= d) for D ~ Weibull(shape, scale); domain d >= 0.
pub fn weibull_cdf(d: f64, params: WeibullParams) -> Result<f64> {
    if !d.is_finite() || d < 0.0 {
        return Err(Error::Input(format!("weibull_cdf: distance {d} outside [0, inf)")));
    }
    Ok(1.0 - (-(d / params.scale).powf(params.shape)).exp())
}

/// Maximum-likelihood Weibull fit on the `tail_size` largest values.
pub fn fit_weibull_tail(distances: &[f64], tail_size: usize) -> Result<WeibullParams> {
    if tail_size < 2 {
        return Err(Error::Config(format!(
            "tail_size {tail_size} cannot determine two Weibull parameters"
        )));
    }
    if distances.len() < tail_size {
        return Err(Error::Input(format!(
            "{} distances but tail_size is {tail_size}",
            distances.len()
        )));
    }
    for &d in distances {
        if !d.is_finite() || d < 0.0 {
            return Err(Error::Input(format!("distance {d} outside [0, inf)")));
        }
    }
    let mut sorted = distances.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let tail = &sorted[..tail_size];
    let dmax = tail[0];
    let dmin = tail[tail_size - 1];
    if dmin <= 0.0 {
        return Err(Error::Fit(format!(
            "tail reaches down to {dmin}; Weibull support is strictly positive"
        )));
    }
    if dmin == dmax {
        return Err(Error::Fit(
            "tail is constant; need at least two distinct values".into(),
        ));
    }

    // Normalized tail in (0, 1]; the shape root is scale-invariant.
    let t: Vec<f64> = tail.iter().map(|&d| d / dmax).collect();
    let logs: Vec<f64> = t.iter().map(|&v| v.ln()).collect();
    let n = t.len() as f64;
    let mean_log = logs.iter().sum::<f64>() / n;

    // g(m) = S1/S0 - 1/m - mean_log and its derivative; g is strictly
    // increasing, so a sign change brackets the unique root.
    let g_and_slope = |m: f64| -> (f64, f64) {
        let mut s0 = 0.0;
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for (&v, &lv) in t.iter().zip(&logs) {
            let p = (m * lv).exp();
            debug_assert!(v > 0.0);
            s0 += p;
            s1 += p * lv;
            s2 += p * lv * lv;
        }
        let g = s1 / s0 - 1.0 / m - mean_log;
        let slope = (s2 * s0 - s1 * s1) / (s0 * s0) + 1.0 / (m * m);
        (g, slope)
    };

    let mean = tail.iter().sum::<f64>() / n;
    let var = tail.iter().map(|&d| (d - mean) * (d - mean)).sum::<f64>() / n;
    // Method-of-moments seed: shape ~ cv^-1.086 for the Weibull family.
    let cv = var.sqrt() / mean;
    let mut m = cv.powf(-1.086).clamp(0.02, 90.0);

    let mut converged = false;
    for _ in 0..100 {
        let (g, slope) = g_and_slope(m);
        let step = g / slope;
        let next = m - step;
        if !next.is_finite() || next <= 1e-4 || next >= 1e4 {
            break;
        }
        let moved = (next - m).abs();
        m = next;
        if moved <= 1e-12 * m.abs() {
            converged = true;
            break;
        }
    }

    if !converged {
        // Bisection fallback over the bracket the config promises.
        let (mut lo, mut hi) = (0.01, 100.0);
        let (glo, _) = g_and_slope(lo);
        let (ghi, _) = g_and_slope(hi);
        if glo.signum() == ghi.signum() {
            return Err(Error::Numerical(format!(
                "no Weibull shape root in [{lo}, {hi}] (g {glo:.3e}..{ghi:.3e})"
            )));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let (gm, _) = g_and_slope(mid);
            if gm.signum() == glo.signum() {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-12 * hi {
                converged = true;
                break;
            }
        }
        m = 0.5 * (lo + hi);
        if !converged {
            return Err(Error::Numerical(
                "Weibull shape solve did not converge within the iteration budget".into(),
            ));
        }
    }

    let s0: f64 = t.iter().map(|&v| (m * v.ln()).exp()).sum();
    let scale_norm = (s0 / n).powf(1.0 / m);
    let params = WeibullParams {
        shape: m,
        scale: scale_norm * dmax,
    };
    if !(params.shape > 0.0 && params.shape.is_finite())
        || !(params.scale > 0.0 && params.scale.is_finite())
    {
        return Err(Error::Numerical(format!(
            "degenerate Weibull solution m={} eta={}",
            params.shape, params.scale
        )));
    }
    Ok(params)
}

/// Linear rank damping: max(0, (alpha - rank) / alpha) with 1-based rank.
/// Rank 1 is the largest activation.
pub fn rank_calibrator(rank: usize, alpha: u32) -> Result<f64> {
    if rank == 0 {
        return Err(Error::Input("rank is 1-based".into()));
    }
    if alpha == 0 {
        return Err(Error::Config("alpha must be at least 1".into()));
    }
    let a = alpha as f64;
    Ok(((a - rank as f64) / a).max(0.0))
}

/// P(x belongs to the class) = 1 - R * cdf(d). With the calibrator off
/// (R = 1) this is the plain Weibull tail probability of the distance.
pub fn class_belongingness(d: f64, params: WeibullParams, r: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Input(format!("calibrator value {r} outside [0,1]")));
    }
    Ok(1.0 - r * weibull_cdf(d, params)?)
}
