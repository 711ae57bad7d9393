//! Fisher information of the pixel-resolved coincidence measurement and
//! the Cramér-Rao bounds built on it.
//!
//! The ideal-grid information sums over ordered pixel assignments on the
//! contiguous grid `k = n δ`; the restricted information uses a physical
//! array, drops masked channels and conditions on the surviving ones, which
//! is the law the Monte Carlo sampler draws from.

use crate::error::{invalid, Error, Result};
use crate::model::{momentum_pdf, pair_weight, quadrature, Branch, DetectorArray, SourceParams};
use crate::sinc;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Ideal-grid Fisher information setup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FisherConfig {
    pub grid_half_width: usize,
    pub delta: f64,
    pub params: SourceParams,
    /// Step for the finite-difference cross-check, mm.
    pub derivative_step: f64,
}

impl FisherConfig {
    pub fn new(params: SourceParams, delta: f64) -> Result<Self> {
        let cfg = FisherConfig {
            grid_half_width: 50,
            delta,
            params,
            derivative_step: 1e-6 * params.sigma_x(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_half_width(mut self, half_width: usize) -> Result<Self> {
        self.grid_half_width = half_width;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_half_width < 1 {
            return Err(invalid("grid_half_width must be at least 1"));
        }
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(invalid(format!(
                "delta must be positive, got {}",
                self.delta
            )));
        }
        if !(self.derivative_step.is_finite() && self.derivative_step > 0.0) {
            return Err(invalid("derivative_step must be positive"));
        }
        Ok(())
    }

    /// Pair weights `C = f(nδ) f(mδ) δ²` summed over all `(n, m)` with
    /// `n - m = d`, indexed by `d ∈ [0, 2·half_width]` (ordered pairs, both signs of `d`).
    fn difference_weights(&self) -> Vec<f64> {
        let hw = self.grid_half_width as i64;
        let f: Vec<f64> = (-hw..=hw)
            .map(|n| momentum_pdf(n as f64 * self.delta, &self.params) * self.delta)
            .collect();
        let len = f.len();
        let mut w = vec![0.0; len];
        for d in 0..len {
            let mut acc = 0.0;
            for n in d..len {
                acc += f[n] * f[n - d];
            }
            w[d] = if d == 0 { acc } else { 2.0 * acc };
        }
        w
    }
}

/// `(∂P/∂dx)² / P` summed over both branches for a channel of weight `c`,
/// with `P = c/2 (1 ∓ g)`.
fn channel_information(
    c: f64,
    visibility: f64,
    delta: f64,
    delta_k: f64,
    dx: f64,
    label: (i64, i64),
) -> Result<f64> {
    if c == 0.0 || visibility == 0.0 {
        return Ok(0.0);
    }
    let b = sinc::beat(visibility, delta, delta_k, dx);
    let (one_minus, one_plus) = sinc::beat_complements(visibility, delta, delta_k, dx);
    let mut total = 0.0;
    for (branch, q) in [
        (Branch::Antibunching, one_minus),
        (Branch::Bunching, one_plus),
    ] {
        if b.dg == 0.0 {
            continue;
        }
        if q <= 0.0 {
            return Err(Error::SingularChannel {
                branch: branch.letter(),
                i: label.0,
                j: label.1,
                dx,
            });
        }
        total += 0.5 * c * b.dg * b.dg / q;
    }
    Ok(total)
}

/// Fisher information about `dx` on the contiguous grid, mm⁻².
pub fn fisher_information(dx: f64, cfg: &FisherConfig) -> Result<f64> {
    if !dx.is_finite() {
        return Err(invalid(format!("dx must be finite, got {dx}")));
    }
    cfg.validate()?;
    let weights = cfg.difference_weights();
    let v = cfg.params.visibility();
    let mut total = 0.0;
    for (d, &w) in weights.iter().enumerate() {
        total += channel_information(w, v, cfg.delta, d as f64 * cfg.delta, dx, (d as i64, 0))?;
    }
    Ok(total)
}

/// Central finite-difference version of [`fisher_information`], used as a
/// cross-check of the analytic derivative.
pub fn fisher_information_numeric(dx: f64, cfg: &FisherConfig) -> Result<f64> {
    cfg.validate()?;
    let hw = cfg.grid_half_width as i64;
    let h = cfg.derivative_step;
    let mut total = 0.0;
    for n in -hw..=hw {
        for m in -hw..=hw {
            let (kn, km) = (n as f64 * cfg.delta, m as f64 * cfg.delta);
            for branch in Branch::BOTH {
                let p = crate::model::sinc_prob(branch, kn, km, dx, &cfg.params, cfg.delta);
                let dp = (crate::model::sinc_prob(branch, kn, km, dx + h, &cfg.params, cfg.delta)
                    - crate::model::sinc_prob(branch, kn, km, dx - h, &cfg.params, cfg.delta))
                    / (2.0 * h);
                if p > 0.0 {
                    total += dp * dp / p;
                }
            }
        }
    }
    Ok(total)
}

/// Fisher information of the pixel-integrated law (no constant-`f`
/// approximation) on the contiguous grid.
///
/// Each pixel contributes `∫ f`, `∫ f e^{ik dx}` and `∫ f k e^{ik dx}`; the
/// pair probabilities follow from products of these. Where the A-branch
/// probability cancels to near zero (V = 1, dx → 0) the result loses
/// relative accuracy.
pub fn fisher_information_exact(dx: f64, cfg: &FisherConfig) -> Result<f64> {
    cfg.validate()?;
    let hw = cfg.grid_half_width as i64;
    let half = 0.5 * cfg.delta;
    let params = cfg.params;
    // absolute floors are tied to the central pixel's mass, since tail pixels
    // and cancelling oscillatory moments cannot meet a relative target
    let central = momentum_pdf(0.0, &params) * cfg.delta;
    let tol = |scale: f64| quadrature::Tolerance {
        relative: 1e-13,
        absolute: 1e-14 * central * scale.max(1.0),
        max_intervals: 200,
    };
    let mut pix = Vec::with_capacity((2 * hw + 1) as usize);
    for n in -hw..=hw {
        let k0 = n as f64 * cfg.delta;
        let (lo, hi) = (k0 - half, k0 + half);
        let i0 = quadrature::integrate(|k| momentum_pdf(k, &params), lo, hi, tol(1.0))?;
        let t = tol(1.0);
        let ic = quadrature::integrate(|k| momentum_pdf(k, &params) * (k * dx).cos(), lo, hi, t)?;
        let is = quadrature::integrate(|k| momentum_pdf(k, &params) * (k * dx).sin(), lo, hi, t)?;
        let t = tol(k0.abs() + half);
        let jc = quadrature::integrate(
            |k| -momentum_pdf(k, &params) * k * (k * dx).sin(),
            lo,
            hi,
            t,
        )?;
        let js =
            quadrature::integrate(|k| momentum_pdf(k, &params) * k * (k * dx).cos(), lo, hi, t)?;
        pix.push([i0, ic, is, jc, js]);
    }
    let v = params.visibility();
    let mut total = 0.0;
    for (a, pa) in pix.iter().enumerate() {
        for pb in pix.iter().skip(a) {
            let weight = if std::ptr::eq(pa, pb) { 1.0 } else { 2.0 };
            let base = pa[0] * pb[0];
            let x = pa[1] * pb[1] + pa[2] * pb[2];
            let dxv = pa[3] * pb[1] + pa[1] * pb[3] + pa[4] * pb[2] + pa[2] * pb[4];
            let dp = 0.5 * v * dxv;
            if dp == 0.0 {
                continue;
            }
            for p in [0.5 * (base - v * x), 0.5 * (base + v * x)] {
                if p > 0.0 {
                    total += weight * dp * dp / p;
                }
            }
        }
    }
    Ok(total)
}

/// Fisher information of one event drawn from the unmasked channels of a
/// physical array, conditioned on landing in one of them.
///
/// With `P_c = P / S` and `S = Σ P` over surviving channels,
/// `F = (1/S) Σ (∂P)²/P − (∂S/S)²`.
pub fn fisher_information_restricted(
    dx: f64,
    params: &SourceParams,
    array: &DetectorArray,
) -> Result<f64> {
    if !dx.is_finite() {
        return Err(invalid(format!("dx must be finite, got {dx}")));
    }
    let channels = array.channels(&Branch::BOTH);
    if channels.is_empty() {
        return Err(Error::EmptyChannelSet);
    }
    let v = params.visibility();
    let delta = array.delta();
    let k = array.k_centers();
    let (mut s, mut ds, mut acc) = (0.0, 0.0, 0.0);
    for ch in &channels {
        let (ki, kj) = (k[ch.pair.i], k[ch.pair.j]);
        let c = ch.pair.multiplicity() * pair_weight(ki, kj, params, delta);
        let b = sinc::beat(v, delta, ki - kj, dx);
        let (one_minus, one_plus) = sinc::beat_complements(v, delta, ki - kj, dx);
        let q = match ch.branch {
            Branch::Antibunching => one_minus,
            Branch::Bunching => one_plus,
        };
        let p = 0.5 * c * q;
        let dp = 0.5 * c * ch.branch.sign() * b.dg;
        s += p;
        ds += dp;
        if dp != 0.0 {
            if p <= 0.0 {
                return Err(Error::SingularChannel {
                    branch: ch.branch.letter(),
                    i: ch.pair.i as i64,
                    j: ch.pair.j as i64,
                    dx,
                });
            }
            acc += dp * dp / p;
        }
    }
    if !(s > 0.0) {
        return Err(Error::DegenerateTable(
            "unmasked probability mass is zero".into(),
        ));
    }
    let ratio = ds / s;
    Ok((acc / s - ratio * ratio).max(0.0))
}

/// A Cramér-Rao bound, which diverges where the Fisher information vanishes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Bound {
    Finite(f64),
    Unbounded,
}

impl Bound {
    pub fn value(self) -> f64 {
        match self {
            Bound::Finite(v) => v,
            Bound::Unbounded => f64::INFINITY,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, Bound::Finite(_))
    }

    pub fn scaled(self, factor: f64) -> Bound {
        match self {
            Bound::Finite(v) => Bound::Finite(v * factor),
            Bound::Unbounded => Bound::Unbounded,
        }
    }
}

impl std::fmt::Display for Bound {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Bound::Finite(v) => write!(f, "{v}"),
            Bound::Unbounded => write!(f, "inf"),
        }
    }
}

/// Quantum bound `sqrt(2/N)·σ_x`; independent of `dx`.
pub fn qcrb(n_events: u64, params: &SourceParams) -> Result<f64> {
    if n_events == 0 {
        return Err(Error::ZeroEvents);
    }
    Ok((2.0 / n_events as f64).sqrt() * params.sigma_x())
}

/// Classical bound `1/sqrt(N F)`.
pub fn crb(n_events: u64, fisher: f64) -> Result<Bound> {
    if n_events == 0 {
        return Err(Error::ZeroEvents);
    }
    if !(fisher >= 0.0) || fisher.is_infinite() {
        return Err(invalid(format!(
            "Fisher information must be finite and non-negative, got {fisher}"
        )));
    }
    if fisher == 0.0 {
        return Ok(Bound::Unbounded);
    }
    Ok(Bound::Finite(1.0 / (n_events as f64 * fisher).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundResult {
    pub dx: f64,
    pub fisher: f64,
    pub crb: Bound,
    pub qcrb: f64,
    pub n_events: u64,
}

impl BoundResult {
    pub fn sqrt_n_crb(&self) -> Bound {
        self.crb.scaled((self.n_events as f64).sqrt())
    }

    pub fn sqrt_n_qcrb(&self) -> f64 {
        self.qcrb * (self.n_events as f64).sqrt()
    }
}

pub fn crb_curve(dx_grid: &[f64], n_events: u64, cfg: &FisherConfig) -> Result<Vec<BoundResult>> {
    if dx_grid.is_empty() {
        return Err(invalid("dx grid is empty"));
    }
    let q = qcrb(n_events, &cfg.params)?;
    dx_grid
        .par_iter()
        .map(|&dx| {
            let fisher = fisher_information(dx, cfg)?;
            Ok(BoundResult {
                dx,
                fisher,
                crb: crb(n_events, fisher)?,
                qcrb: q,
                n_events,
            })
        })
        .collect()
}

/// Grid positions where `√N·CRB` is a local maximum (end points compare
/// against their single neighbour).
pub fn local_maxima(curve: &[BoundResult]) -> Vec<f64> {
    let vals: Vec<f64> = curve.iter().map(|b| b.crb.value()).collect();
    let n = vals.len();
    let mut out = Vec::new();
    for i in 0..n {
        let left = if i > 0 {
            vals[i - 1]
        } else {
            f64::NEG_INFINITY
        };
        let right = if i + 1 < n {
            vals[i + 1]
        } else {
            f64::NEG_INFINITY
        };
        if vals[i] >= left && vals[i] >= right && (vals[i] > left || vals[i] > right) {
            out.push(curve[i].dx);
        }
    }
    out
}

/// Writes `dx_mm,fisher_mm2,sqrtN_crb_mm,sqrtN_qcrb_mm`, preceded by a
/// `# digest:` comment line when a digest is given.
pub fn write_crb_csv<W: Write>(
    curve: &[BoundResult],
    digest: Option<&str>,
    mut out: W,
) -> Result<()> {
    if let Some(d) = digest {
        writeln!(out, "# digest: {d}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["dx_mm", "fisher_mm2", "sqrtN_crb_mm", "sqrtN_qcrb_mm"])?;
    for b in curve {
        w.write_record([
            b.dx.to_string(),
            b.fisher.to_string(),
            b.sqrt_n_crb().to_string(),
            b.sqrt_n_qcrb().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn cfg(v: f64, delta: f64) -> FisherConfig {
        FisherConfig::new(SourceParams::new(0.035, v).unwrap(), delta).unwrap()
    }

    /// Direct double sum over ordered grid pairs and both branches, written
    /// from the per-branch definition with no symmetry shortcuts.
    fn brute_force(dx: f64, c: &FisherConfig) -> f64 {
        let hw = c.grid_half_width as i64;
        let v = c.params.visibility();
        let env = sinc::envelope(c.delta, dx);
        let mut total = 0.0;
        for n in -hw..=hw {
            for m in -hw..=hw {
                let (kn, km) = (n as f64 * c.delta, m as f64 * c.delta);
                let cc =
                    momentum_pdf(kn, &c.params) * momentum_pdf(km, &c.params) * c.delta * c.delta;
                let dk = kn - km;
                for sign in [-1.0, 1.0] {
                    let p = 0.5 * cc * (1.0 + sign * v * env.value * (dk * dx).cos());
                    let dp = 0.5
                        * cc
                        * sign
                        * v
                        * (env.d_dx * (dk * dx).cos() - env.value * dk * (dk * dx).sin());
                    if p > 0.0 {
                        total += dp * dp / p;
                    }
                }
            }
        }
        total
    }

    #[test]
    fn matches_brute_force_sum() {
        for &(v, delta, dx) in &[(0.3, 1.7, 0.5), (1.0, 1.7, 0.11), (0.6, 0.9, 2.3)] {
            let c = cfg(v, delta);
            assert_relative_eq!(
                fisher_information(dx, &c).unwrap(),
                brute_force(dx, &c),
                max_relative = 1e-11
            );
        }
    }

    #[test]
    fn analytic_derivative_matches_finite_differences() {
        for &(v, dx) in &[(0.3, 0.5), (0.9, 0.05), (0.3, 1.2)] {
            let c = cfg(v, 1.7);
            let a = fisher_information(dx, &c).unwrap();
            let n = fisher_information_numeric(dx, &c).unwrap();
            assert_relative_eq!(a, n, max_relative = 1e-6);
        }
    }

    #[test]
    fn vanishes_at_zero_and_envelope_roots() {
        let c = cfg(0.3, 1.7);
        assert_eq!(fisher_information(0.0, &c).unwrap(), 0.0);
        let h = c.params.quantum_fisher();
        for m in 1..=3 {
            let f = fisher_information(2.0 * m as f64 * PI / 1.7, &c).unwrap();
            assert!(f <= 1e-12 * h, "m={m}: {f}");
        }
    }

    #[test]
    fn even_in_dx() {
        let c = cfg(0.3, 1.7);
        for &dx in &[0.13, 0.5, 2.9] {
            assert_relative_eq!(
                fisher_information(dx, &c).unwrap(),
                fisher_information(-dx, &c).unwrap(),
                max_relative = 1e-14
            );
        }
    }

    #[test]
    fn saturation_regime() {
        let sx = 0.035;
        let c = FisherConfig::new(SourceParams::new(sx, 1.0).unwrap(), 0.05 / sx).unwrap();
        let f = fisher_information(0.2 * sx, &c).unwrap();
        let h = c.params.quantum_fisher();
        assert!((f / h - 1.0).abs() < 0.05, "{}", f / h);
    }

    #[test]
    fn quadratic_in_small_visibility() {
        let ratios: Vec<f64> = [0.1, 0.05, 0.01]
            .iter()
            .map(|&v| fisher_information(0.5, &cfg(v, 1.7)).unwrap() / (v * v))
            .collect();
        for r in &ratios[1..] {
            assert!((r / ratios[0] - 1.0).abs() < 0.01);
        }
    }

    #[test]
    fn grid_beyond_fifty_changes_nothing() {
        let c = cfg(0.3, 1.7);
        let wide = c.with_half_width(80).unwrap();
        for &dx in &[0.3, 0.5, 1.4] {
            let a = fisher_information(dx, &c).unwrap();
            let b = fisher_information(dx, &wide).unwrap();
            assert!(((a - b) / a).abs() < 1e-6);
        }
    }

    #[test]
    fn exact_pixel_law_respects_quantum_bound() {
        let c = cfg(1.0, 1.7);
        let h = c.params.quantum_fisher();
        for &dx in &[0.037, 0.1, 0.3, 1.0, 2.5] {
            let f = fisher_information_exact(dx, &c).unwrap();
            assert!(f <= h, "dx={dx}: F/H = {}", f / h);
            let approx = fisher_information(dx, &c).unwrap();
            assert!(((f - approx) / h).abs() < 5e-3);
        }
    }

    #[test]
    fn restricted_information_on_unmasked_grid_matches_ideal_sum() {
        // no masks and a contiguous grid: S = Σ C ≈ 1 and ∂S = 0 because A and B cancel
        let p = SourceParams::new(0.035, 0.3).unwrap();
        let grid = DetectorArray::contiguous_grid(50, 1.7).unwrap();
        let c = cfg(0.3, 1.7);
        for &dx in &[0.2, 0.5] {
            let r = fisher_information_restricted(dx, &p, &grid).unwrap();
            let i = fisher_information(dx, &c).unwrap();
            assert_relative_eq!(r, i, max_relative = 1e-6);
        }
    }

    #[test]
    fn restricted_information_positive_beyond_overlap() {
        let p = SourceParams::reference();
        let a = DetectorArray::uniform(8, 9.85, 1.7, 3.5).unwrap();
        assert!(fisher_information_restricted(0.5, &p, &a).unwrap() > 0.0);
    }

    #[test]
    fn restricted_information_regression() {
        // frozen value: 8-pixel geometry, δ = 1.7 mm⁻¹, default masks, dx = 0.5 mm
        let a =
            DetectorArray::from_geometry(&crate::model::OpticalGeometry::reference(), Some(1.7))
                .unwrap();
        let f = fisher_information_restricted(0.5, &SourceParams::reference(), &a).unwrap();
        assert_relative_eq!(f, 21.044507640218907, max_relative = 1e-12);
    }

    #[test]
    fn bound_examples() {
        let p = SourceParams::new(0.035, 0.3).unwrap();
        assert!((qcrb(1, &p).unwrap() - 0.049497).abs() < 5e-7);
        assert!((qcrb(100, &p).unwrap() - 0.0049497).abs() < 5e-8);
        assert_eq!(qcrb(2, &SourceParams::new(1.0, 0.3).unwrap()).unwrap(), 1.0);
        assert!(matches!(qcrb(0, &p), Err(Error::ZeroEvents)));
        let h = p.quantum_fisher();
        assert_relative_eq!(
            crb(7, h).unwrap().value(),
            qcrb(7, &p).unwrap(),
            max_relative = 1e-14
        );
        assert_eq!(crb(10, 0.0).unwrap(), Bound::Unbounded);
        assert!(crb(10, -1.0).is_err());
    }

    #[test]
    fn crb_regression_value_for_physical_array() {
        // frozen from the ideal-grid sum with V = 0.3, δ = 1.7 mm⁻¹ at dx = 0.5 mm
        let c = cfg(0.3, 1.7);
        let f = fisher_information(0.5, &c).unwrap();
        let b = crb(10_000, f).unwrap().value();
        assert_relative_eq!(f, brute_force(0.5, &c), max_relative = 1e-11);
        assert_relative_eq!(b, 1.0 / (1e4 * f).sqrt(), max_relative = 1e-14);
    }

    #[test]
    fn curve_has_unbounded_point_at_zero() {
        let c = cfg(0.3, 1.7);
        let curve = crb_curve(&[0.0], 100, &c).unwrap();
        assert_eq!(curve[0].crb, Bound::Unbounded);
        assert!(crb_curve(&[], 100, &c).is_err());
    }

    #[test]
    fn csv_columns() {
        let c = cfg(0.3, 1.7);
        let curve = crb_curve(&[0.0, 0.5], 100, &c).unwrap();
        let mut buf = Vec::new();
        write_crb_csv(&curve, Some("abc"), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("# digest: abc"));
        assert_eq!(
            lines.next(),
            Some("dx_mm,fisher_mm2,sqrtN_crb_mm,sqrtN_qcrb_mm")
        );
        assert!(lines.next().unwrap().contains(",inf,"));
    }
}
