//! Source and detector parameters and the two-photon coincidence laws.
//!
//! A pair of photons leaves the beam splitter either through different
//! ports (antibunching, branch A) or through the same port (bunching,
//! branch B). In the far field each photon's transverse momentum `k` is
//! resolved by the pixel it lands on; the joint density over `(k1, k2)`
//! carries a beat `cos((k1 - k2)·dx)` whose frequency is the transverse
//! displacement `dx` between the two sources.

pub mod quadrature;

use crate::error::{invalid, Error, Result};
use crate::sinc;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;

/// Relative tolerance of the pixel-integration oracle.
pub const EXACT_REL_TOL: f64 = 1e-10;

/// Biphoton source: transverse waist and interference visibility.
///
/// The momentum width is always `sigma_k = 1 / (2 sigma_x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceParams {
    sigma_x: f64,
    visibility: f64,
}

impl SourceParams {
    pub fn new(sigma_x: f64, visibility: f64) -> Result<Self> {
        if !(sigma_x.is_finite() && sigma_x > 0.0) {
            return Err(invalid(format!("sigma_x must be positive, got {sigma_x}")));
        }
        if !(0.0..=1.0).contains(&visibility) {
            return Err(invalid(format!(
                "visibility must lie in [0, 1], got {visibility}"
            )));
        }
        Ok(SourceParams {
            sigma_x,
            visibility,
        })
    }

    pub fn from_sigma_k(sigma_k: f64, visibility: f64) -> Result<Self> {
        if !(sigma_k.is_finite() && sigma_k > 0.0) {
            return Err(invalid(format!("sigma_k must be positive, got {sigma_k}")));
        }
        Self::new(0.5 / sigma_k, visibility)
    }

    /// Waist 0.035 mm, visibility 0.3.
    pub fn reference() -> Self {
        SourceParams {
            sigma_x: 0.035,
            visibility: 0.3,
        }
    }

    pub fn sigma_x(&self) -> f64 {
        self.sigma_x
    }

    pub fn sigma_k(&self) -> f64 {
        0.5 / self.sigma_x
    }

    pub fn visibility(&self) -> f64 {
        self.visibility
    }

    pub fn with_visibility(&self, visibility: f64) -> Result<Self> {
        Self::new(self.sigma_x, visibility)
    }

    /// Quantum Fisher information `1 / (2 sigma_x²)`.
    pub fn quantum_fisher(&self) -> f64 {
        0.5 / (self.sigma_x * self.sigma_x)
    }
}

/// Gaussian transverse-momentum density of a single photon, in mm.
pub fn momentum_pdf(k: f64, params: &SourceParams) -> f64 {
    let sk = params.sigma_k();
    let z = k / sk;
    (-0.5 * z * z).exp() / (sk * (2.0 * PI).sqrt())
}

/// Far-field optics: lens focal length, wavelength and the SPAD layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpticalGeometry {
    pub wavelength_nm: f64,
    pub focal_length_mm: f64,
    pub pixel_pitch_um: f64,
    pub pixel_width_um: f64,
    pub n_pixels: usize,
    /// Fractional pixel index that maps to `k = 0`.
    pub center_index: f64,
}

impl OpticalGeometry {
    /// 531.5 nm, f = 300 mm, 8 SPADs at 250 µm pitch and 50 µm width.
    pub fn reference() -> Self {
        OpticalGeometry {
            wavelength_nm: 531.5,
            focal_length_mm: 300.0,
            pixel_pitch_um: 250.0,
            pixel_width_um: 50.0,
            n_pixels: 8,
            center_index: 3.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("wavelength_nm", self.wavelength_nm),
            ("focal_length_mm", self.focal_length_mm),
            ("pixel_pitch_um", self.pixel_pitch_um),
            ("pixel_width_um", self.pixel_width_um),
        ] {
            if !(v.is_finite() && v > 0.0) {
                problems.push(format!("{name} must be positive, got {v}"));
            }
        }
        if self.n_pixels < 2 {
            problems.push(format!(
                "n_pixels must be at least 2, got {}",
                self.n_pixels
            ));
        }
        if !self.center_index.is_finite() {
            problems.push("center_index must be finite".to_string());
        }
        if problems.is_empty() && self.momentum_width() >= self.momentum_pitch() {
            problems.push(format!(
                "pixel width {} µm must be smaller than the pitch {} µm",
                self.pixel_width_um, self.pixel_pitch_um
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(invalid(problems.join("; ")))
        }
    }

    /// `2π / (λ f)` in mm⁻¹ per mm of detector-plane distance.
    fn momentum_per_mm(&self) -> f64 {
        2.0 * PI / (self.wavelength_nm * 1e-6 * self.focal_length_mm)
    }

    /// Momentum step between adjacent pixel centers, mm⁻¹.
    pub fn momentum_pitch(&self) -> f64 {
        self.momentum_per_mm() * self.pixel_pitch_um * 1e-3
    }

    /// Momentum interval covered by one pixel (δ), mm⁻¹.
    pub fn momentum_width(&self) -> f64 {
        self.momentum_per_mm() * self.pixel_width_um * 1e-3
    }

    pub fn pixel_center_momentum(&self, i: usize) -> Result<f64> {
        if i >= self.n_pixels {
            return Err(Error::PixelOutOfRange {
                index: i,
                n_pixels: self.n_pixels,
            });
        }
        Ok(self.momentum_pitch() * (i as f64 - self.center_index))
    }
}

pub fn pixel_center_momentum(i: usize, geometry: &OpticalGeometry) -> Result<f64> {
    geometry.pixel_center_momentum(i)
}

/// Output-port configuration of a detected pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Branch {
    /// Photons leave through different ports.
    #[serde(rename = "A")]
    Antibunching,
    /// Photons leave through the same port.
    #[serde(rename = "B")]
    Bunching,
}

impl Branch {
    pub const BOTH: [Branch; 2] = [Branch::Antibunching, Branch::Bunching];

    /// Sign in front of the interference term: −1 for A, +1 for B.
    pub fn sign(self) -> f64 {
        match self {
            Branch::Antibunching => -1.0,
            Branch::Bunching => 1.0,
        }
    }

    pub fn letter(self) -> char {
        match self {
            Branch::Antibunching => 'A',
            Branch::Bunching => 'B',
        }
    }

    pub fn from_letter(c: &str) -> Option<Branch> {
        match c {
            "A" | "a" => Some(Branch::Antibunching),
            "B" | "b" => Some(Branch::Bunching),
            _ => None,
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Unordered pixel pair, stored with `i <= j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PixelPair {
    pub i: usize,
    pub j: usize,
}

impl PixelPair {
    pub fn new(a: usize, b: usize) -> Self {
        PixelPair {
            i: a.min(b),
            j: a.max(b),
        }
    }

    pub fn separation(&self) -> usize {
        self.j - self.i
    }

    /// Number of ordered `(k1, k2)` pixel assignments the pair collects.
    pub fn multiplicity(&self) -> f64 {
        if self.i == self.j {
            1.0
        } else {
            2.0
        }
    }
}

/// One detectable outcome: a branch and an unordered pixel pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Channel {
    pub branch: Branch,
    pub pair: PixelPair,
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({},{})", self.branch, self.pair.i, self.pair.j)
    }
}

/// Pixel momenta, momentum sensitivity and the channels excluded from each branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorArray {
    k_centers: Vec<f64>,
    delta: f64,
    bunching_mask: BTreeSet<PixelPair>,
    antibunching_mask: BTreeSet<PixelPair>,
}

/// Same-pixel (no number resolution) and adjacent-pixel (crosstalk) bunching pairs.
pub fn default_bunching_mask(n_pixels: usize) -> BTreeSet<PixelPair> {
    let mut mask = BTreeSet::new();
    for i in 0..n_pixels {
        mask.insert(PixelPair::new(i, i));
        if i + 1 < n_pixels {
            mask.insert(PixelPair::new(i, i + 1));
        }
    }
    mask
}

impl DetectorArray {
    pub fn new(
        k_centers: Vec<f64>,
        delta: f64,
        bunching_mask: BTreeSet<PixelPair>,
        antibunching_mask: BTreeSet<PixelPair>,
    ) -> Result<Self> {
        let array = DetectorArray {
            k_centers,
            delta,
            bunching_mask,
            antibunching_mask,
        };
        array.validate()?;
        Ok(array)
    }

    /// `n` pixels at momentum `pitch·(i - center_index)` with default masks.
    pub fn uniform(n: usize, pitch: f64, delta: f64, center_index: f64) -> Result<Self> {
        let k = (0..n).map(|i| pitch * (i as f64 - center_index)).collect();
        Self::new(k, delta, default_bunching_mask(n), BTreeSet::new())
    }

    /// Array described by the optics, with default masks. `delta` overrides
    /// the geometric pixel width when given.
    pub fn from_geometry(geometry: &OpticalGeometry, delta: Option<f64>) -> Result<Self> {
        geometry.validate()?;
        Self::uniform(
            geometry.n_pixels,
            geometry.momentum_pitch(),
            delta.unwrap_or_else(|| geometry.momentum_width()),
            geometry.center_index,
        )
    }

    /// Contiguous grid `k = n δ`, `n ∈ {-half_width, …, half_width}`, with no masks.
    pub fn contiguous_grid(half_width: usize, delta: f64) -> Result<Self> {
        let hw = half_width as i64;
        let k = (-hw..=hw).map(|n| n as f64 * delta).collect();
        Self::new(k, delta, BTreeSet::new(), BTreeSet::new())
    }

    pub fn with_masks(
        mut self,
        bunching: BTreeSet<PixelPair>,
        antibunching: BTreeSet<PixelPair>,
    ) -> Result<Self> {
        self.bunching_mask = bunching;
        self.antibunching_mask = antibunching;
        self.validate()?;
        Ok(self)
    }

    pub fn without_masks(mut self) -> Self {
        self.bunching_mask.clear();
        self.antibunching_mask.clear();
        self
    }

    fn validate(&self) -> Result<()> {
        let n = self.k_centers.len();
        if n < 2 {
            return Err(invalid("detector array needs at least 2 pixels"));
        }
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(invalid(format!(
                "delta must be positive, got {}",
                self.delta
            )));
        }
        let pitch = (self.k_centers[n - 1] - self.k_centers[0]) / (n - 1) as f64;
        if !(pitch > 0.0) {
            return Err(invalid("pixel momenta must be strictly increasing"));
        }
        for w in self.k_centers.windows(2) {
            let step = w[1] - w[0];
            if !(step > 0.0) || ((step - pitch) / pitch).abs() > 1e-12 {
                return Err(invalid(
                    "pixel momenta must be strictly increasing and equally spaced",
                ));
            }
        }
        for p in self.bunching_mask.iter().chain(&self.antibunching_mask) {
            if p.j >= n || p.i > p.j {
                return Err(invalid(format!(
                    "mask entry ({}, {}) is not a valid pixel pair",
                    p.i, p.j
                )));
            }
        }
        Ok(())
    }

    pub fn n_pixels(&self) -> usize {
        self.k_centers.len()
    }

    pub fn k_centers(&self) -> &[f64] {
        &self.k_centers
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn pitch(&self) -> f64 {
        let n = self.k_centers.len();
        (self.k_centers[n - 1] - self.k_centers[0]) / (n - 1) as f64
    }

    pub fn k(&self, i: usize) -> Result<f64> {
        self.k_centers
            .get(i)
            .copied()
            .ok_or(Error::PixelOutOfRange {
                index: i,
                n_pixels: self.k_centers.len(),
            })
    }

    pub fn bunching_mask(&self) -> &BTreeSet<PixelPair> {
        &self.bunching_mask
    }

    pub fn antibunching_mask(&self) -> &BTreeSet<PixelPair> {
        &self.antibunching_mask
    }

    pub fn mask(&self, branch: Branch) -> &BTreeSet<PixelPair> {
        match branch {
            Branch::Antibunching => &self.antibunching_mask,
            Branch::Bunching => &self.bunching_mask,
        }
    }

    pub fn is_masked(&self, branch: Branch, pair: PixelPair) -> bool {
        self.mask(branch).contains(&pair)
    }

    /// All `i <= j` pairs in lexicographic order.
    pub fn pairs(&self) -> impl Iterator<Item = PixelPair> + '_ {
        let n = self.n_pixels();
        (0..n).flat_map(move |i| (i..n).map(move |j| PixelPair { i, j }))
    }

    /// Unmasked channels of the given branches, branch-major.
    pub fn channels(&self, branches: &[Branch]) -> Vec<Channel> {
        let mut out = Vec::new();
        for &branch in branches {
            for pair in self.pairs() {
                if !self.is_masked(branch, pair) {
                    out.push(Channel { branch, pair });
                }
            }
        }
        out
    }

    fn check_pair(&self, i: usize, j: usize) -> Result<(f64, f64)> {
        Ok((self.k(i)?, self.k(j)?))
    }

    /// Whether the pixels reach `3 sigma_k` on both sides of the distribution.
    pub fn covers(&self, params: &SourceParams) -> bool {
        let reach = 3.0 * params.sigma_k();
        let half = 0.5 * self.delta;
        self.k_centers[0] - half <= -reach && self.k_centers[self.n_pixels() - 1] + half >= reach
    }
}

/// Continuous joint density of detecting momenta `(k1, k2)` in `branch`, mm².
pub fn joint_prob_continuous(
    branch: Branch,
    k1: f64,
    k2: f64,
    dx: f64,
    params: &SourceParams,
) -> f64 {
    0.5 * momentum_pdf(k1, params)
        * momentum_pdf(k2, params)
        * (1.0 + branch.sign() * params.visibility() * ((k1 - k2) * dx).cos())
}

/// Approximate probability of one ordered pixel assignment: `f` taken
/// constant across each pixel, giving `(C/2)(1 ∓ V sinc²(dx δ/2) cos(Δk dx))`
/// with `C = f(k_i) f(k_j) δ²`.
pub fn joint_prob_pixel_sinc(
    branch: Branch,
    i: usize,
    j: usize,
    dx: f64,
    params: &SourceParams,
    array: &DetectorArray,
) -> Result<f64> {
    let (ki, kj) = array.check_pair(i, j)?;
    Ok(sinc_prob(branch, ki, kj, dx, params, array.delta()))
}

pub(crate) fn pair_weight(ki: f64, kj: f64, params: &SourceParams, delta: f64) -> f64 {
    momentum_pdf(ki, params) * momentum_pdf(kj, params) * delta * delta
}

pub(crate) fn sinc_prob(
    branch: Branch,
    ki: f64,
    kj: f64,
    dx: f64,
    params: &SourceParams,
    delta: f64,
) -> f64 {
    let c = pair_weight(ki, kj, params, delta);
    let g = params.visibility() * sinc::envelope(delta, dx).value * ((ki - kj) * dx).cos();
    0.5 * c * (1.0 + branch.sign() * g)
}

/// Probability of one ordered pixel assignment, integrating the continuous
/// density over both pixel intervals with nested adaptive quadrature.
///
/// The integrand is rewritten as `½ f f [(1 - V) + 2V sin²(θ/2)]` for A and
/// `½ f f [(1 - V) + 2V cos²(θ/2)]` for B, `θ = (k1 - k2) dx`, so it is
/// non-negative and the relative tolerance holds even where the two terms
/// of `1 ∓ V cos θ` nearly cancel.
pub fn joint_prob_pixel_exact(
    branch: Branch,
    i: usize,
    j: usize,
    dx: f64,
    params: &SourceParams,
    array: &DetectorArray,
) -> Result<f64> {
    let (ki, kj) = array.check_pair(i, j)?;
    exact_prob(branch, ki, kj, dx, params, array.delta())
}

pub(crate) fn exact_prob(
    branch: Branch,
    ki: f64,
    kj: f64,
    dx: f64,
    params: &SourceParams,
    delta: f64,
) -> Result<f64> {
    let v = params.visibility();
    let half = 0.5 * delta;
    let shape = move |theta: f64| -> f64 {
        let t = match branch {
            Branch::Antibunching => (0.5 * theta).sin(),
            Branch::Bunching => (0.5 * theta).cos(),
        };
        (1.0 - v) + 2.0 * v * t * t
    };
    let inner_tol = quadrature::Tolerance {
        relative: 1e-13,
        absolute: 0.0,
        max_intervals: 400,
    };
    let outer_tol = quadrature::Tolerance {
        relative: EXACT_REL_TOL,
        absolute: 0.0,
        max_intervals: 400,
    };
    let mut failure = None;
    let value = quadrature::integrate(
        |k1| {
            let inner = quadrature::integrate(
                |k2| momentum_pdf(k2, params) * shape((k1 - k2) * dx),
                kj - half,
                kj + half,
                inner_tol,
            );
            match inner {
                Ok(v) => momentum_pdf(k1, params) * v,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        ki - half,
        ki + half,
        outer_tol,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(0.5 * value?)
}

/// How pixel probabilities are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PixelIntegration {
    /// `f` constant across the pixel (sinc² envelope).
    #[default]
    Sinc,
    /// Adaptive double integral of the continuous density.
    Exact,
}

pub(crate) fn pixel_prob(
    integration: PixelIntegration,
    branch: Branch,
    ki: f64,
    kj: f64,
    dx: f64,
    params: &SourceParams,
    delta: f64,
) -> Result<f64> {
    match integration {
        PixelIntegration::Sinc => Ok(sinc_prob(branch, ki, kj, dx, params, delta)),
        PixelIntegration::Exact => exact_prob(branch, ki, kj, dx, params, delta),
    }
}

/// Normalized distribution over the detectable channels of an array.
///
/// Each unordered pair collects both ordered pixel assignments, so `i != j`
/// entries carry twice the single-assignment probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityTable {
    pub channels: Vec<Channel>,
    pub probabilities: Vec<f64>,
    /// Sum over every pair of the requested branches before masking and normalization.
    pub coverage: f64,
    /// Sum over the unmasked channels before normalization.
    pub retained: f64,
}

impl ProbabilityTable {
    pub fn get(&self, channel: &Channel) -> Option<f64> {
        self.channels
            .iter()
            .position(|c| c == channel)
            .map(|idx| self.probabilities[idx])
    }
}

pub fn probability_table(
    branches: &[Branch],
    dx: f64,
    params: &SourceParams,
    array: &DetectorArray,
    integration: PixelIntegration,
) -> Result<ProbabilityTable> {
    if !array.covers(params) {
        log::warn!(
            "detector array spans [{:.3}, {:.3}] mm^-1, short of ±3 sigma_k = ±{:.3} mm^-1",
            array.k_centers()[0],
            array.k_centers()[array.n_pixels() - 1],
            3.0 * params.sigma_k()
        );
    }
    let mut uniq: Vec<Branch> = branches.to_vec();
    uniq.sort();
    uniq.dedup();
    let mut channels = Vec::new();
    let mut raw = Vec::new();
    let mut coverage = 0.0;
    for &branch in &uniq {
        for pair in array.pairs() {
            let p = pair.multiplicity()
                * pixel_prob(
                    integration,
                    branch,
                    array.k_centers[pair.i],
                    array.k_centers[pair.j],
                    dx,
                    params,
                    array.delta,
                )?;
            coverage += p;
            if !array.is_masked(branch, pair) {
                channels.push(Channel { branch, pair });
                raw.push(p);
            }
        }
    }
    if channels.is_empty() {
        return Err(Error::EmptyChannelSet);
    }
    let retained: f64 = raw.iter().sum();
    if !(retained > 0.0 && retained.is_finite()) {
        return Err(Error::DegenerateTable(format!(
            "unmasked probability mass is {retained}"
        )));
    }
    let probabilities = raw.iter().map(|p| p / retained).collect();
    Ok(ProbabilityTable {
        channels,
        probabilities,
        coverage,
        retained,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn reference_array() -> DetectorArray {
        DetectorArray::from_geometry(&OpticalGeometry::reference(), Some(1.7)).unwrap()
    }

    /// Composite Simpson rule, kept independent of the adaptive quadrature.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let n = n + n % 2;
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for m in 1..n {
            s += f(a + m as f64 * h) * if m % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn source_params_validation() {
        assert!(SourceParams::new(0.0, 0.3).is_err());
        assert!(SourceParams::new(0.035, 1.2).is_err());
        assert!(SourceParams::new(0.035, -0.1).is_err());
        let p = SourceParams::from_sigma_k(1.0 / 0.07, 1.0).unwrap();
        assert_relative_eq!(p.sigma_x(), 0.035, max_relative = 1e-15);
        assert_eq!(p.sigma_k(), 0.5 / p.sigma_x());
    }

    #[test]
    fn momentum_pdf_peak_and_shape() {
        let p = SourceParams::new(0.035, 0.3).unwrap();
        assert_relative_eq!(p.sigma_k(), 14.285714285714286, max_relative = 1e-14);
        // closed form 1/(σ_k √(2π))
        assert_eq!(
            momentum_pdf(0.0, &p),
            1.0 / (p.sigma_k() * (2.0 * PI).sqrt())
        );
        assert!((momentum_pdf(0.0, &p) - 0.027927).abs() < 1.5e-6);
        let sk = p.sigma_k();
        assert_relative_eq!(
            momentum_pdf(sk, &p) / momentum_pdf(0.0, &p),
            (-0.5f64).exp(),
            max_relative = 1e-14
        );
        assert_eq!(momentum_pdf(sk, &p), momentum_pdf(-sk, &p));
    }

    #[test]
    fn momentum_pdf_normalized_over_appendix_span() {
        let p = SourceParams::new(0.035, 0.3).unwrap();
        let delta = 1.7;
        let total = simpson(|k| momentum_pdf(k, &p), -50.0 * delta, 50.0 * delta, 20_000);
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn geometry_mapping() {
        let g = OpticalGeometry::reference();
        g.validate().unwrap();
        let pitch = g.momentum_pitch();
        assert!((pitch - 9.85).abs() < 0.005, "{pitch}");
        assert!((g.momentum_width() - 1.97).abs() < 0.005);
        let k3 = g.pixel_center_momentum(3).unwrap();
        let k4 = g.pixel_center_momentum(4).unwrap();
        assert_relative_eq!(k4 - k3, pitch, max_relative = 1e-12);
        assert!(matches!(
            g.pixel_center_momentum(8),
            Err(Error::PixelOutOfRange { .. })
        ));
        let centered = OpticalGeometry {
            center_index: 2.0,
            ..g.clone()
        };
        assert_eq!(centered.pixel_center_momentum(2).unwrap(), 0.0);
        let bad = OpticalGeometry {
            pixel_width_um: 300.0,
            ..g
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn default_masks() {
        let a = reference_array();
        assert_eq!(a.bunching_mask().len(), 8 + 7);
        assert!(a.antibunching_mask().is_empty());
        assert!(a.is_masked(Branch::Bunching, PixelPair::new(3, 3)));
        assert!(a.is_masked(Branch::Bunching, PixelPair::new(5, 4)));
        assert!(!a.is_masked(Branch::Bunching, PixelPair::new(2, 4)));
        assert_eq!(a.channels(&Branch::BOTH).len(), 36 + 21);
    }

    #[test]
    fn array_rejects_bad_layouts() {
        let k = vec![0.0, 1.0, 2.5];
        assert!(DetectorArray::new(k, 0.5, BTreeSet::new(), BTreeSet::new()).is_err());
        let k = vec![0.0, 1.0, 2.0];
        let mut m = BTreeSet::new();
        m.insert(PixelPair::new(0, 3));
        assert!(DetectorArray::new(k.clone(), 0.5, m, BTreeSet::new()).is_err());
        assert!(DetectorArray::new(k, 0.0, BTreeSet::new(), BTreeSet::new()).is_err());
    }

    #[test]
    fn continuous_examples() {
        let p0 = SourceParams::new(0.035, 0.0).unwrap();
        let ff = momentum_pdf(3.0, &p0) * momentum_pdf(-7.0, &p0);
        for b in Branch::BOTH {
            assert_relative_eq!(
                joint_prob_continuous(b, 3.0, -7.0, 0.4, &p0),
                0.5 * ff,
                max_relative = 1e-15
            );
        }
        let p1 = SourceParams::new(0.035, 1.0).unwrap();
        assert_eq!(
            joint_prob_continuous(Branch::Antibunching, 3.0, -7.0, 0.0, &p1),
            0.0
        );
        let p3 = SourceParams::new(0.035, 0.3).unwrap();
        let (k1, k2) = (12.0, 2.0);
        let dx = PI / (k1 - k2);
        let ff = momentum_pdf(k1, &p3) * momentum_pdf(k2, &p3);
        assert_relative_eq!(
            joint_prob_continuous(Branch::Antibunching, k1, k2, dx, &p3),
            0.5 * ff * 1.3,
            max_relative = 1e-14
        );
        assert_relative_eq!(
            joint_prob_continuous(Branch::Bunching, k1, k2, dx, &p3),
            0.5 * ff * 0.7,
            max_relative = 1e-14
        );
    }

    #[test]
    fn sinc_examples() {
        let p = SourceParams::new(0.035, 0.3).unwrap();
        let a = reference_array();
        let c = pair_weight(a.k(1).unwrap(), a.k(5).unwrap(), &p, a.delta());
        let first_zero = 2.0 * PI / a.delta();
        for b in Branch::BOTH {
            let v = joint_prob_pixel_sinc(b, 1, 5, first_zero, &p, &a).unwrap();
            assert!((v - 0.5 * c).abs() <= 1e-15 * c);
        }
        let cii = pair_weight(a.k(2).unwrap(), a.k(2).unwrap(), &p, a.delta());
        assert_relative_eq!(
            joint_prob_pixel_sinc(Branch::Antibunching, 2, 2, 0.0, &p, &a).unwrap(),
            0.5 * cii * 0.7,
            max_relative = 1e-15
        );
        assert_relative_eq!(
            joint_prob_pixel_sinc(Branch::Bunching, 2, 2, 0.0, &p, &a).unwrap(),
            0.5 * cii * 1.3,
            max_relative = 1e-15
        );
        assert!(joint_prob_pixel_sinc(Branch::Bunching, 2, 9, 0.0, &p, &a).is_err());
    }

    #[test]
    fn beat_period_for_fitted_pitch() {
        let p = SourceParams::new(0.035, 0.3).unwrap();
        let a = DetectorArray::uniform(8, 9.8, 1.7, 3.5).unwrap();
        let period = 2.0 * PI / 9.8;
        assert!((period - 0.641).abs() < 5e-4);
        // with the sinc envelope divided out the A-branch beat repeats after one period
        let beat = |dx: f64| {
            let v = joint_prob_pixel_sinc(Branch::Antibunching, 3, 4, dx, &p, &a).unwrap();
            let c = pair_weight(a.k(3).unwrap(), a.k(4).unwrap(), &p, a.delta());
            (1.0 - 2.0 * v / c) / sinc::envelope(1.7, dx).value
        };
        for &x in &[0.1, 0.3, 0.45] {
            assert!((beat(x) - beat(x + period)).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_examples() {
        let a = reference_array();
        let p0 = SourceParams::new(0.035, 0.0).unwrap();
        let half = 0.5 * a.delta();
        let pix = |i: usize| {
            simpson(
                |k| momentum_pdf(k, &p0),
                a.k(i).unwrap() - half,
                a.k(i).unwrap() + half,
                2000,
            )
        };
        let e = joint_prob_pixel_exact(Branch::Bunching, 2, 6, 0.37, &p0, &a).unwrap();
        assert_relative_eq!(e, 0.5 * pix(2) * pix(6), max_relative = 1e-10);
        let p1 = SourceParams::new(0.035, 1.0).unwrap();
        assert_eq!(
            joint_prob_pixel_exact(Branch::Antibunching, 2, 6, 0.0, &p1, &a).unwrap(),
            0.0
        );
    }

    #[test]
    fn exact_matches_brute_force_double_integral() {
        // independent 2-D Simpson on the raw density
        let p = SourceParams::new(0.035, 0.8).unwrap();
        let a = reference_array();
        let half = 0.5 * a.delta();
        for &(b, i, j, dx) in &[
            (Branch::Antibunching, 3usize, 4usize, 0.5),
            (Branch::Bunching, 1, 6, 1.1),
            (Branch::Antibunching, 5, 5, 0.9),
        ] {
            let (ki, kj) = (a.k(i).unwrap(), a.k(j).unwrap());
            let brute = simpson(
                |k1| {
                    simpson(
                        |k2| joint_prob_continuous(b, k1, k2, dx, &p),
                        kj - half,
                        kj + half,
                        200,
                    )
                },
                ki - half,
                ki + half,
                200,
            );
            let exact = joint_prob_pixel_exact(b, i, j, dx, &p, &a).unwrap();
            assert_relative_eq!(exact, brute, max_relative = 1e-9);
        }
    }

    #[test]
    fn sinc_close_to_exact_for_fine_pixels() {
        // δσ_x = 0.05 on a contiguous 8-pixel patch around k = 0, V = 0.3
        let p = SourceParams::new(0.035, 0.3).unwrap();
        let delta = 0.05 / 0.035;
        let a = DetectorArray::uniform(8, delta, delta, 3.5).unwrap();
        let mut worst: f64 = 0.0;
        for dx in [0.0, 0.25 / delta, 0.5 / delta, 1.0 / delta] {
            for b in Branch::BOTH {
                for pair in a.pairs() {
                    let s = joint_prob_pixel_sinc(b, pair.i, pair.j, dx, &p, &a).unwrap();
                    let e = joint_prob_pixel_exact(b, pair.i, pair.j, dx, &p, &a).unwrap();
                    worst = worst.max((s - e).abs() / e);
                }
            }
        }
        assert!(worst < 5e-3, "{worst}");
    }

    #[test]
    fn table_on_contiguous_grid_is_complete() {
        let p = SourceParams::new(0.035, 0.3).unwrap();
        let grid = DetectorArray::contiguous_grid(50, 1.7).unwrap();
        let t = probability_table(&Branch::BOTH, 0.42, &p, &grid, PixelIntegration::Sinc).unwrap();
        assert!((t.coverage - 1.0).abs() < 1e-3, "{}", t.coverage);
        assert!((t.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(t.probabilities.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn table_without_visibility_is_branch_uniform() {
        let p = SourceParams::new(0.035, 0.0).unwrap();
        let a = reference_array();
        let t = probability_table(&Branch::BOTH, 0.8, &p, &a, PixelIntegration::Sinc).unwrap();
        let ref_ch = t.channels[0];
        let ref_w = pair_weight(
            a.k(ref_ch.pair.i).unwrap(),
            a.k(ref_ch.pair.j).unwrap(),
            &p,
            a.delta(),
        ) * ref_ch.pair.multiplicity();
        for (ch, &prob) in t.channels.iter().zip(&t.probabilities) {
            let w = pair_weight(
                a.k(ch.pair.i).unwrap(),
                a.k(ch.pair.j).unwrap(),
                &p,
                a.delta(),
            ) * ch.pair.multiplicity();
            assert_relative_eq!(prob / t.probabilities[0], w / ref_w, max_relative = 1e-12);
        }
        let anti = t
            .get(&Channel {
                branch: Branch::Antibunching,
                pair: PixelPair::new(2, 5),
            })
            .unwrap();
        let bun = t
            .get(&Channel {
                branch: Branch::Bunching,
                pair: PixelPair::new(2, 5),
            })
            .unwrap();
        assert_relative_eq!(anti, bun, max_relative = 1e-15);
    }

    #[test]
    fn table_honors_default_masks() {
        let p = SourceParams::reference();
        let a = reference_array();
        let t = probability_table(&Branch::BOTH, 0.5, &p, &a, PixelIntegration::Sinc).unwrap();
        for ch in &t.channels {
            if ch.branch == Branch::Bunching {
                assert!(ch.pair.separation() >= 2);
            }
        }
        assert!(t.retained < t.coverage);
    }

    #[test]
    fn table_rejects_fully_masked_array() {
        let p = SourceParams::reference();
        let a = reference_array();
        let all: BTreeSet<_> = a.pairs().collect();
        let masked = a.with_masks(all.clone(), all).unwrap();
        assert!(matches!(
            probability_table(&Branch::BOTH, 0.5, &p, &masked, PixelIntegration::Sinc),
            Err(Error::EmptyChannelSet)
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn continuous_symmetry_completeness_parity(
                k1 in -60.0f64..60.0, k2 in -60.0f64..60.0, dx in -3.0f64..3.0, v in 0.0f64..=1.0
            ) {
                let p = SourceParams::new(0.035, v).unwrap();
                let a = joint_prob_continuous(Branch::Antibunching, k1, k2, dx, &p);
                let b = joint_prob_continuous(Branch::Bunching, k1, k2, dx, &p);
                prop_assert_eq!(a, joint_prob_continuous(Branch::Antibunching, k2, k1, dx, &p));
                prop_assert_eq!(a, joint_prob_continuous(Branch::Antibunching, k1, k2, -dx, &p));
                let ff = momentum_pdf(k1, &p) * momentum_pdf(k2, &p);
                prop_assert!((a + b - ff).abs() <= 1e-15 * ff.max(1e-300) + 1e-300);
                prop_assert!(a >= 0.0 && b >= 0.0);
            }

            #[test]
            fn sinc_completeness_and_parity(
                i in 0usize..8, j in 0usize..8, dx in -3.0f64..3.0, v in 0.0f64..=1.0
            ) {
                let p = SourceParams::new(0.035, v).unwrap();
                let arr = DetectorArray::uniform(8, 9.85, 1.7, 3.5).unwrap();
                let a = joint_prob_pixel_sinc(Branch::Antibunching, i, j, dx, &p, &arr).unwrap();
                let b = joint_prob_pixel_sinc(Branch::Bunching, i, j, dx, &p, &arr).unwrap();
                let c = pair_weight(arr.k(i).unwrap(), arr.k(j).unwrap(), &p, 1.7);
                prop_assert!((a + b - c).abs() <= 1e-15 * c);
                prop_assert!(a >= 0.0 && b >= 0.0);
                prop_assert_eq!(a, joint_prob_pixel_sinc(Branch::Antibunching, j, i, dx, &p, &arr).unwrap());
                prop_assert_eq!(a, joint_prob_pixel_sinc(Branch::Antibunching, i, j, -dx, &p, &arr).unwrap());
            }
        }
    }
}
