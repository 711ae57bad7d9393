//! Run configuration: a TOML file with dotted keys, CLI overrides and a content digest.

use crate::error::{CliError, Result};
use clap::ValueEnum;
use mrhom::estimation::FisherConfig;
use mrhom::ingest::CoincidenceWindows;
use mrhom::model::{
    default_bunching_mask, DetectorArray, OpticalGeometry, PixelIntegration, PixelPair,
    SourceParams,
};
use mrhom::montecarlo::{EventTotals, SimulationConfig, TimingConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ParamMode {
    /// From the optics: `2π·size/(λf)`.
    Geometric,
    /// The configured value (beat-curve fits give δ ≈ 1.7 mm⁻¹, Δk ≈ 9.8 mm⁻¹ per pixel).
    #[default]
    Fitted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LikelihoodModel {
    /// Per-channel fitted beat curves as count surrogates, used as they are.
    Fitted,
    /// Fitted curves divided by their sum over the channels in the likelihood.
    #[default]
    FittedNormalized,
    /// The conditional sinc-law probability table of the configured source and array.
    Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceSection {
    pub sigma_x_mm: f64,
    pub visibility: f64,
}

impl Default for SourceSection {
    fn default() -> Self {
        SourceSection {
            sigma_x_mm: 0.035,
            visibility: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometrySection {
    pub wavelength_nm: f64,
    pub focal_length_mm: f64,
    pub pixel_pitch_um: f64,
    pub pixel_width_um: f64,
    pub n_pixels: usize,
    pub center_index: f64,
}

impl Default for GeometrySection {
    fn default() -> Self {
        let g = OpticalGeometry::reference();
        GeometrySection {
            wavelength_nm: g.wavelength_nm,
            focal_length_mm: g.focal_length_mm,
            pixel_pitch_um: g.pixel_pitch_um,
            pixel_width_um: g.pixel_width_um,
            n_pixels: g.n_pixels,
            center_index: g.center_index,
        }
    }
}

impl GeometrySection {
    pub fn optics(&self) -> OpticalGeometry {
        OpticalGeometry {
            wavelength_nm: self.wavelength_nm,
            focal_length_mm: self.focal_length_mm,
            pixel_pitch_um: self.pixel_pitch_um,
            pixel_width_um: self.pixel_width_um,
            n_pixels: self.n_pixels,
            center_index: self.center_index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArraySection {
    pub delta_mode: ParamMode,
    pub delta_fitted: f64,
    pub pitch_mode: ParamMode,
    pub pitch_fitted: f64,
    /// Excluded bunching pairs; absent means same-pixel and adjacent pairs.
    pub bunching_mask: Option<Vec<[usize; 2]>>,
    pub antibunching_mask: Vec<[usize; 2]>,
}

impl Default for ArraySection {
    fn default() -> Self {
        ArraySection {
            delta_mode: ParamMode::Fitted,
            delta_fitted: 1.7,
            pitch_mode: ParamMode::Geometric,
            pitch_fitted: 9.8,
            bunching_mask: None,
            antibunching_mask: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanSection {
    pub start_mm: f64,
    pub stop_mm: f64,
    pub step_mm: f64,
    pub repeats: usize,
    pub events: u64,
    pub totals: EventTotals,
    pub exact_integral: bool,
}

impl Default for ScanSection {
    fn default() -> Self {
        ScanSection {
            start_mm: 0.0,
            stop_mm: 2.0,
            step_mm: 0.05,
            repeats: 10,
            events: 550,
            totals: EventTotals::Fixed,
            exact_integral: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowsSection {
    pub bunching_center_ns: f64,
    pub antibunching_center_ns: f64,
    pub half_width_ns: f64,
    pub tac_bin_width_ns: f64,
}

impl Default for WindowsSection {
    fn default() -> Self {
        let w = CoincidenceWindows::default();
        WindowsSection {
            bunching_center_ns: w.bunching_center_ns,
            antibunching_center_ns: w.antibunching_center_ns,
            half_width_ns: w.half_width_ns,
            tac_bin_width_ns: w.tac_bin_width_ns,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimingSection {
    pub jitter_bins: u16,
    pub max_frame_gap: u64,
}

impl Default for TimingSection {
    fn default() -> Self {
        let t = TimingConfig::default();
        TimingSection {
            jitter_bins: t.jitter_bins,
            max_frame_gap: t.max_frame_gap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimationSection {
    pub model: LikelihoodModel,
    /// Search half-width around each nominal dx; absent means a quarter
    /// period of the fastest beat in the model.
    pub half_window_mm: Option<f64>,
    pub fit_restarts: usize,
}

impl Default for EstimationSection {
    fn default() -> Self {
        EstimationSection {
            model: LikelihoodModel::FittedNormalized,
            half_window_mm: None,
            fit_restarts: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    /// Pixel separations shown in the beat tables; the most central pair of each.
    pub antibunching_separations: Vec<usize>,
    pub bunching_separations: Vec<usize>,
    pub curve_samples: usize,
    /// Half width of the ideal grid used for the unrestricted bound.
    pub grid_half_width: usize,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection {
            antibunching_separations: vec![0, 1, 2, 3],
            bunching_separations: vec![2, 3, 4, 5, 6],
            curve_samples: 201,
            grid_half_width: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: "out".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub source: SourceSection,
    pub geometry: GeometrySection,
    pub array: ArraySection,
    pub scan: ScanSection,
    pub windows: WindowsSection,
    pub timing: TimingSection,
    pub estimation: EstimationSection,
    pub report: ReportSection,
    pub output: OutputSection,
}

/// `start:stop:step` in mm, stop inclusive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl FromStr for GridSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(format!("expected start:stop:step, got {s:?}"));
        }
        let num = |p: &str| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}"));
        Ok(GridSpec {
            start: num(parts[0])?,
            stop: num(parts[1])?,
            step: num(parts[2])?,
        })
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub events: Option<u64>,
    pub repeats: Option<usize>,
    pub grid: Option<GridSpec>,
    pub exact_integral: bool,
    pub delta_mode: Option<ParamMode>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text)
            .map_err(|e| CliError::invalid(format!("config: {}", e.to_string().trim_end())))
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Self::from_toml(&text)
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = &o.out {
            self.output.dir = d.clone();
        }
        if let Some(n) = o.events {
            self.scan.events = n;
        }
        if let Some(n) = o.repeats {
            self.scan.repeats = n;
        }
        if let Some(g) = o.grid {
            self.scan.start_mm = g.start;
            self.scan.stop_mm = g.stop;
            self.scan.step_mm = g.step;
        }
        if o.exact_integral {
            self.scan.exact_integral = true;
        }
        if let Some(m) = o.delta_mode {
            self.array.delta_mode = m;
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form. The output directory is left out
    /// so the same run written elsewhere keeps its digest.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output = OutputSection::default();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn source(&self) -> mrhom::Result<SourceParams> {
        SourceParams::new(self.source.sigma_x_mm, self.source.visibility)
    }

    pub fn delta(&self) -> f64 {
        match self.array.delta_mode {
            ParamMode::Geometric => self.geometry.optics().momentum_width(),
            ParamMode::Fitted => self.array.delta_fitted,
        }
    }

    pub fn pitch(&self) -> f64 {
        match self.array.pitch_mode {
            ParamMode::Geometric => self.geometry.optics().momentum_pitch(),
            ParamMode::Fitted => self.array.pitch_fitted,
        }
    }

    pub fn detector_array(&self) -> mrhom::Result<DetectorArray> {
        let g = self.geometry.optics();
        g.validate()?;
        let array = DetectorArray::uniform(g.n_pixels, self.pitch(), self.delta(), g.center_index)?;
        let pairs = |v: &[[usize; 2]]| {
            v.iter()
                .map(|p| PixelPair::new(p[0], p[1]))
                .collect::<BTreeSet<_>>()
        };
        let bunching = match &self.array.bunching_mask {
            None => default_bunching_mask(g.n_pixels),
            Some(v) => pairs(v),
        };
        array.with_masks(bunching, pairs(&self.array.antibunching_mask))
    }

    pub fn windows(&self) -> CoincidenceWindows {
        CoincidenceWindows {
            bunching_center_ns: self.windows.bunching_center_ns,
            antibunching_center_ns: self.windows.antibunching_center_ns,
            half_width_ns: self.windows.half_width_ns,
            tac_bin_width_ns: self.windows.tac_bin_width_ns,
        }
    }

    pub fn timing(&self) -> TimingConfig {
        TimingConfig {
            windows: self.windows(),
            jitter_bins: self.timing.jitter_bins,
            max_frame_gap: self.timing.max_frame_gap,
        }
    }

    pub fn integration(&self) -> PixelIntegration {
        if self.scan.exact_integral {
            PixelIntegration::Exact
        } else {
            PixelIntegration::Sinc
        }
    }

    pub fn simulation(&self) -> mrhom::Result<SimulationConfig> {
        let mut sim = SimulationConfig::new(self.source()?, self.detector_array()?);
        sim.integration = self.integration();
        sim.totals = self.scan.totals;
        Ok(sim)
    }

    pub fn fisher(&self) -> mrhom::Result<FisherConfig> {
        FisherConfig::new(self.source()?, self.delta())?
            .with_half_width(self.report.grid_half_width)
    }

    /// Scan positions from start to stop inclusive.
    pub fn grid(&self) -> Vec<f64> {
        let s = &self.scan;
        let n = ((s.stop_mm - s.start_mm) / s.step_mm + 1e-9).floor() as usize;
        (0..=n).map(|k| s.start_mm + k as f64 * s.step_mm).collect()
    }

    /// Every inconsistency at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        fn note(problems: &mut Vec<String>, r: mrhom::Result<()>) {
            if let Err(e) = r {
                problems.push(e.to_string());
            }
        }
        note(&mut problems, self.source().map(|_| ()));
        let g = self.geometry.optics();
        note(&mut problems, g.validate());
        let geometry_ok = g.validate().is_ok();
        note(&mut problems, self.windows().validate());
        let (delta, pitch) = (self.delta(), self.pitch());
        if geometry_ok {
            if !(delta.is_finite() && delta > 0.0) {
                problems.push(format!("array delta must be positive, got {delta}"));
            }
            if !(pitch.is_finite() && pitch > 0.0) {
                problems.push(format!("array pitch must be positive, got {pitch}"));
            } else if delta >= pitch {
                problems.push(format!(
                    "pixel momentum width {delta} must be smaller than the momentum pitch {pitch}"
                ));
            }
        }
        let n = self.geometry.n_pixels;
        if n > usize::from(u8::MAX) {
            problems.push(format!(
                "n_pixels {n} exceeds the 255 pixels a time-tag record can address"
            ));
        }
        let masks = self
            .array
            .bunching_mask
            .iter()
            .flatten()
            .chain(&self.array.antibunching_mask);
        for p in masks {
            if p[0] >= n || p[1] >= n {
                problems.push(format!("mask pair {p:?} is outside the {n}-pixel array"));
            }
        }
        if geometry_ok && problems.is_empty() {
            note(&mut problems, self.detector_array().map(|_| ()));
        }
        let s = &self.scan;
        if !(s.start_mm.is_finite() && s.stop_mm.is_finite() && s.step_mm.is_finite()) {
            problems.push("scan limits must be finite".to_string());
        } else {
            if s.step_mm <= 0.0 {
                problems.push(format!("scan step must be positive, got {}", s.step_mm));
            }
            if s.stop_mm < s.start_mm {
                problems.push(format!(
                    "scan stop {} is below start {}",
                    s.stop_mm, s.start_mm
                ));
            }
            if s.step_mm > 0.0 && (s.stop_mm - s.start_mm) / s.step_mm > 1e6 {
                problems.push("scan grid has more than a million points".to_string());
            }
        }
        if s.repeats < 2 {
            problems.push(format!(
                "scan.repeats must be at least 2 for error bars, got {}",
                s.repeats
            ));
        }
        if let Some(h) = self.estimation.half_window_mm {
            if !(h.is_finite() && h > 0.0) {
                problems.push(format!(
                    "estimation.half_window_mm must be positive, got {h}"
                ));
            }
        }
        if self.estimation.fit_restarts == 0 {
            problems.push("estimation.fit_restarts must be at least 1".to_string());
        }
        let r = &self.report;
        for d in r
            .antibunching_separations
            .iter()
            .chain(&r.bunching_separations)
        {
            if *d >= n {
                problems.push(format!("report separation {d} needs more than {n} pixels"));
            }
        }
        if r.curve_samples < 2 {
            problems.push("report.curve_samples must be at least 2".to_string());
        }
        if r.grid_half_width < 1 {
            problems.push("report.grid_half_width must be at least 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::Validation(problems))
        }
    }
}
