use super::BeatCurve;
use crate::error::{invalid, Error, Result};
use crate::model::{pair_weight, Branch, Channel, DetectorArray, SourceParams};
use crate::sinc;
use serde::{Deserialize, Serialize};

/// Grid intervals of the coarse maximum search.
const MLE_GRID: usize = 512;
const GOLDEN_TOL: f64 = 1e-6;
const STATIONARY_TOL: f64 = 1e-6;

/// A channel's model value and the first two `dx` derivatives of its log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelPoint {
    pub value: f64,
    pub dlog: f64,
    pub d2log: f64,
}

impl ModelPoint {
    fn from_derivs(value: f64, d1: f64, d2: f64) -> Self {
        let r = d1 / value;
        ModelPoint {
            value,
            dlog: r,
            d2log: d2 / value - r * r,
        }
    }
}

/// Per-channel model entering the log-likelihood.
pub trait ChannelModel: Sync {
    fn channels(&self) -> &[Channel];
    fn evaluate(&self, dx: f64) -> Result<Vec<ModelPoint>>;
}

/// Independently fitted beat curves used as count surrogates, one per
/// channel. Raw by default; [`FittedCurves::normalized`] divides each curve
/// by the sum over all channels so the surrogates form a distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedCurves {
    channels: Vec<Channel>,
    curves: Vec<BeatCurve>,
    #[serde(default)]
    normalized: bool,
}

impl FittedCurves {
    pub fn new(channels: Vec<Channel>, curves: Vec<BeatCurve>) -> Result<Self> {
        if channels.len() != curves.len() {
            return Err(invalid("one curve per channel is required"));
        }
        if channels.is_empty() {
            return Err(Error::EmptyChannelSet);
        }
        if let Some((ch, _)) = channels
            .iter()
            .zip(&curves)
            .find(|(ch, c)| ch.branch != c.branch)
        {
            return Err(invalid(format!("curve for {ch} has the wrong branch")));
        }
        Ok(FittedCurves {
            channels,
            curves,
            normalized: false,
        })
    }

    pub fn normalized(mut self) -> Self {
        self.normalized = true;
        self
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn curves(&self) -> &[BeatCurve] {
        &self.curves
    }

    pub fn fastest_delta_k(&self) -> f64 {
        self.curves
            .iter()
            .map(|c| c.delta_k.abs())
            .fold(0.0, f64::max)
    }
}

impl ChannelModel for FittedCurves {
    fn channels(&self) -> &[Channel] {
        &self.channels
    }

    fn evaluate(&self, dx: f64) -> Result<Vec<ModelPoint>> {
        let mut points: Vec<ModelPoint> = self
            .curves
            .iter()
            .map(|c| {
                let (v, d1, d2) = c.derivs(dx);
                ModelPoint::from_derivs(v, d1, d2)
            })
            .collect();
        if self.normalized {
            let (s, s1, s2) = self
                .curves
                .iter()
                .map(|c| c.derivs(dx))
                .fold((0.0, 0.0, 0.0), |a, d| (a.0 + d.0, a.1 + d.1, a.2 + d.2));
            if !(s > 0.0) {
                return Err(invalid(format!("fitted curves sum to {s} at dx = {dx}")));
            }
            let norm = ModelPoint::from_derivs(s, s1, s2);
            for p in &mut points {
                p.value /= s;
                p.dlog -= norm.dlog;
                p.d2log -= norm.d2log;
            }
        }
        Ok(points)
    }
}

/// The sinc-law channel distribution of an array, conditioned on the
/// unmasked channels: `P_c / Σ P`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableModel {
    params: SourceParams,
    array: DetectorArray,
    channels: Vec<Channel>,
}

impl TableModel {
    pub fn new(params: SourceParams, array: DetectorArray) -> Result<Self> {
        let channels = array.channels(&Branch::BOTH);
        if channels.is_empty() {
            return Err(Error::EmptyChannelSet);
        }
        Ok(TableModel {
            params,
            array,
            channels,
        })
    }

    pub fn fastest_delta_k(&self) -> f64 {
        let k = self.array.k_centers();
        k[k.len() - 1] - k[0]
    }
}

impl ChannelModel for TableModel {
    fn channels(&self) -> &[Channel] {
        &self.channels
    }

    fn evaluate(&self, dx: f64) -> Result<Vec<ModelPoint>> {
        let v = self.params.visibility();
        let delta = self.array.delta();
        let k = self.array.k_centers();
        let mut raw = Vec::with_capacity(self.channels.len());
        let (mut s, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for ch in &self.channels {
            let (ki, kj) = (k[ch.pair.i], k[ch.pair.j]);
            let c = 0.5 * ch.pair.multiplicity() * pair_weight(ki, kj, &self.params, delta);
            let b = sinc::beat(v, delta, ki - kj, dx);
            let (minus, plus) = sinc::beat_complements(v, delta, ki - kj, dx);
            let q = match ch.branch {
                Branch::Antibunching => minus,
                Branch::Bunching => plus,
            };
            let sign = ch.branch.sign();
            let (p, d1, d2) = (c * q, c * sign * b.dg, c * sign * b.d2g);
            s += p;
            s1 += d1;
            s2 += d2;
            raw.push((p, d1, d2));
        }
        if !(s > 0.0) {
            return Err(Error::DegenerateTable(format!(
                "unmasked probability mass is {s} at dx = {dx}"
            )));
        }
        let norm = ModelPoint::from_derivs(s, s1, s2);
        Ok(raw
            .into_iter()
            .map(|(p, d1, d2)| {
                let m = ModelPoint::from_derivs(p, d1, d2);
                ModelPoint {
                    value: p / s,
                    dlog: m.dlog - norm.dlog,
                    d2log: m.d2log - norm.d2log,
                }
            })
            .collect())
    }
}

fn check_counts(counts: &[f64], model: &dyn ChannelModel) -> Result<()> {
    if counts.len() != model.channels().len() {
        return Err(invalid(format!(
            "{} counts for {} model channels",
            counts.len(),
            model.channels().len()
        )));
    }
    if let Some(c) = counts.iter().find(|c| !(**c >= 0.0 && c.is_finite())) {
        return Err(invalid(format!(
            "counts must be finite and non-negative, got {c}"
        )));
    }
    Ok(())
}

/// `(ℒ, dℒ/dx, d²ℒ/dx²)` with `ℒ = Σ C ln C_model(dx)`; channels with zero
/// counts contribute nothing.
pub fn log_likelihood_derivs(
    dx: f64,
    counts: &[f64],
    model: &dyn ChannelModel,
) -> Result<(f64, f64, f64)> {
    check_counts(counts, model)?;
    let pts = model.evaluate(dx)?;
    let (mut l, mut d1, mut d2) = (0.0, 0.0, 0.0);
    for (k, (c, m)) in counts.iter().zip(&pts).enumerate() {
        if m.value < 0.0 || (m.value == 0.0 && *c > 0.0) || m.value.is_nan() {
            return Err(Error::NonPositiveModel {
                channel: model.channels()[k].to_string(),
                dx,
                value: m.value,
            });
        }
        if *c > 0.0 {
            l += c * m.value.ln();
            d1 += c * m.dlog;
            d2 += c * m.d2log;
        }
    }
    Ok((l, d1, d2))
}

pub fn log_likelihood(dx: f64, counts: &[f64], model: &dyn ChannelModel) -> Result<f64> {
    Ok(log_likelihood_derivs(dx, counts, model)?.0)
}

/// Maximizer of the log-likelihood over `window`: a grid scan, golden-section
/// refinement of the best bracket and a Newton polish on the analytic
/// derivatives. A maximizer on the window edge is an error.
pub fn mle_estimate(counts: &[f64], model: &dyn ChannelModel, window: (f64, f64)) -> Result<f64> {
    let (lo, hi) = window;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(invalid(format!("search window [{lo}, {hi}] is empty")));
    }
    check_counts(counts, model)?;
    let ll = |x: f64| log_likelihood(x, counts, model);
    let step = (hi - lo) / MLE_GRID as f64;
    let mut best = (0, f64::NEG_INFINITY);
    for k in 0..=MLE_GRID {
        let v = ll(lo + step * k as f64)?;
        if v > best.1 {
            best = (k, v);
        }
    }
    if best.0 == 0 || best.0 == MLE_GRID {
        return Err(Error::BoundaryMaximum {
            dx: lo + step * best.0 as f64,
            lo,
            hi,
        });
    }
    let (mut a, mut b) = (
        lo + step * (best.0 - 1) as f64,
        lo + step * (best.0 + 1) as f64,
    );
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let (mut f1, mut f2) = (ll(x1)?, ll(x2)?);
    while b - a > GOLDEN_TOL {
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = ll(x2)?;
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = ll(x1)?;
        }
    }
    let mut x = 0.5 * (a + b);
    let (bl, bh) = (
        lo + step * (best.0 - 1) as f64,
        lo + step * (best.0 + 1) as f64,
    );
    for _ in 0..8 {
        let (l0, d1, d2) = log_likelihood_derivs(x, counts, model)?;
        if !(d2 < 0.0) || d1 == 0.0 {
            break;
        }
        let next = x - d1 / d2;
        if !(next > bl && next < bh) || ll(next)? < l0 - 1e-12 * l0.abs() {
            break;
        }
        let moved = (next - x).abs();
        x = next;
        if moved < 1e-14 * (1.0 + x.abs()) {
            break;
        }
    }
    Ok(x)
}

/// Propagates count uncertainties to the estimate:
/// `dΔx/dC_c = −(∂ ln C_c/∂Δx) / (∂²ℒ/∂Δx²)` and
/// `δΔx = sqrt(Σ (dΔx/dC_c · δC_c)²)`.
pub fn mle_uncertainty(
    counts: &[f64],
    count_errs: &[f64],
    model: &dyn ChannelModel,
    dx_ml: f64,
) -> Result<(f64, Vec<f64>)> {
    check_counts(counts, model)?;
    if count_errs.len() != counts.len() {
        return Err(invalid("one error per count is required"));
    }
    let pts = model.evaluate(dx_ml)?;
    let (_, d1, d2) = log_likelihood_derivs(dx_ml, counts, model)?;
    // the score vanishes identically at symmetry points, so the curvature
    // term keeps the scale away from zero there
    let scale: f64 = counts
        .iter()
        .zip(&pts)
        .filter(|(c, _)| **c > 0.0)
        .map(|(c, m)| c * (m.dlog.abs() + m.d2log.abs().sqrt()))
        .sum();
    if d1.abs() > STATIONARY_TOL * scale {
        return Err(Error::NonStationary {
            dx: dx_ml,
            derivative: d1,
        });
    }
    let curv_scale: f64 = counts
        .iter()
        .zip(&pts)
        .filter(|(c, _)| **c > 0.0)
        .map(|(c, m)| (c * m.d2log).abs())
        .sum();
    if !(d2 < 0.0) || d2.abs() <= 1e-12 * curv_scale {
        return Err(Error::NonNegativeCurvature {
            dx: dx_ml,
            curvature: d2,
        });
    }
    let sens: Vec<f64> = pts
        .iter()
        .map(|m| if m.value > 0.0 { -m.dlog / d2 } else { 0.0 })
        .collect();
    let var: f64 = sens
        .iter()
        .zip(count_errs)
        .map(|(s, e)| (s * e).powi(2))
        .sum();
    Ok((var.sqrt(), sens))
}

/// `center ± π / (2 Δk_max)`: a quarter period of the fastest beat.
pub fn default_window(center: f64, fastest_delta_k: f64) -> Result<(f64, f64)> {
    if !(fastest_delta_k > 0.0 && fastest_delta_k.is_finite()) {
        return Err(invalid("the fastest beat frequency must be positive"));
    }
    let half = std::f64::consts::FRAC_PI_2 / fastest_delta_k;
    Ok((center - half, center + half))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub dx_ml: f64,
    pub dx_err: f64,
    /// `n_r · Σ C̄` over the channels entering the likelihood.
    pub n_total: f64,
    pub log_likelihood_at_max: f64,
    pub search_window: (f64, f64),
    pub per_channel_sensitivities: Vec<(Channel, f64)>,
}

impl EstimationResult {
    pub fn sqrt_n_err(&self) -> f64 {
        self.n_total.sqrt() * self.dx_err
    }
}

/// Estimate and propagated uncertainty from mean counts `C̄` over `n_r` repeats.
pub fn estimate(
    counts: &[f64],
    count_errs: &[f64],
    model: &dyn ChannelModel,
    window: (f64, f64),
    n_r: usize,
) -> Result<EstimationResult> {
    let dx_ml = mle_estimate(counts, model, window)?;
    let (dx_err, sens) = mle_uncertainty(counts, count_errs, model, dx_ml)?;
    Ok(EstimationResult {
        dx_ml,
        dx_err,
        n_total: n_r as f64 * counts.iter().sum::<f64>(),
        log_likelihood_at_max: log_likelihood(dx_ml, counts, model)?,
        search_window: window,
        per_channel_sensitivities: model.channels().iter().copied().zip(sens).collect(),
    })
}
