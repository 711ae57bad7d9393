//! Synthetic coincidence data.
//!
//! Each repeat draws a fixed number of detected pairs from the normalized
//! channel table (a multinomial over unmasked channels). Scan points and
//! repeats use independent ChaCha8 streams derived from one seed, so a
//! dataset depends only on `(config, seed)` and not on thread scheduling.

use crate::error::{invalid, Error, Result};
use crate::ingest::{CoincidenceWindows, TimeTagRecord, TAC_BINS};
use crate::model::{
    probability_table, Branch, Channel, DetectorArray, PixelIntegration, PixelPair,
    ProbabilityTable, SourceParams,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{Read, Write};

pub const RNG_NAME: &str = "ChaCha8Rng(seed_from_u64, stream = point << 32 | repeat)";

/// Coincidence counts of one branch over unordered pixel pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountMatrix {
    branch: Branch,
    n_pixels: usize,
    counts: Vec<u64>,
    masked: BTreeSet<PixelPair>,
}

impl CountMatrix {
    pub fn new(branch: Branch, n_pixels: usize, masked: BTreeSet<PixelPair>) -> Self {
        CountMatrix {
            branch,
            n_pixels,
            counts: vec![0; n_pixels * (n_pixels + 1) / 2],
            masked,
        }
    }

    pub fn for_array(branch: Branch, array: &DetectorArray) -> Self {
        Self::new(branch, array.n_pixels(), array.mask(branch).clone())
    }

    fn index(&self, p: PixelPair) -> Option<usize> {
        if p.j >= self.n_pixels {
            return None;
        }
        Some(p.i * (2 * self.n_pixels + 1 - p.i) / 2 + p.j - p.i)
    }

    pub fn branch(&self) -> Branch {
        self.branch
    }

    pub fn n_pixels(&self) -> usize {
        self.n_pixels
    }

    pub fn masked(&self) -> &BTreeSet<PixelPair> {
        &self.masked
    }

    /// `None` for masked or out-of-range pairs.
    pub fn get(&self, pair: PixelPair) -> Option<u64> {
        if self.masked.contains(&pair) {
            return None;
        }
        self.index(pair).map(|k| self.counts[k])
    }

    pub fn add(&mut self, pair: PixelPair, n: u64) -> Result<()> {
        if self.masked.contains(&pair) {
            return Err(invalid(format!(
                "pair ({}, {}) is masked in branch {}",
                pair.i, pair.j, self.branch
            )));
        }
        let k = self.index(pair).ok_or(Error::PixelOutOfRange {
            index: pair.j,
            n_pixels: self.n_pixels,
        })?;
        self.counts[k] += n;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Unmasked pairs with their counts, `i <= j` lexicographic.
    pub fn iter(&self) -> impl Iterator<Item = (PixelPair, u64)> + '_ {
        let n = self.n_pixels;
        (0..n)
            .flat_map(move |i| (i..n).map(move |j| PixelPair { i, j }))
            .filter(move |p| !self.masked.contains(p))
            .map(move |p| (p, self.counts[self.index(p).expect("pair in range")]))
    }

    pub fn merge(&mut self, other: &CountMatrix) {
        debug_assert_eq!(self.n_pixels, other.n_pixels);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// `branch,i,j,count` rows for the unmasked pairs.
    pub fn write_csv<W: Write>(&self, digest: Option<&str>, mut out: W) -> Result<()> {
        if let Some(d) = digest {
            writeln!(out, "# digest: {d}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["branch", "i", "j", "count"])?;
        for (p, c) in self.iter() {
            w.write_record([
                self.branch.to_string(),
                p.i.to_string(),
                p.j.to_string(),
                c.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// How many events a repeat contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventTotals {
    /// Exactly the requested number.
    #[default]
    Fixed,
    /// Poisson-distributed around the requested number.
    Poisson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub params: SourceParams,
    pub array: DetectorArray,
    pub integration: PixelIntegration,
    pub totals: EventTotals,
}

impl SimulationConfig {
    pub fn new(params: SourceParams, array: DetectorArray) -> Self {
        SimulationConfig {
            params,
            array,
            integration: PixelIntegration::Sinc,
            totals: EventTotals::Fixed,
        }
    }

    pub fn table(&self, dx: f64) -> Result<ProbabilityTable> {
        probability_table(
            &Branch::BOTH,
            dx,
            &self.params,
            &self.array,
            self.integration,
        )
    }
}

pub(crate) fn stream_rng(seed: u64, point: u64, repeat: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((point << 32) | (repeat & 0xffff_ffff));
    rng
}

/// Multinomial draw by successive conditional binomials.
pub fn multinomial<R: Rng + ?Sized>(
    n: u64,
    probabilities: &[f64],
    rng: &mut R,
) -> Result<Vec<u64>> {
    let mut remaining_mass: f64 = probabilities.iter().sum();
    if !(remaining_mass > 0.0 && remaining_mass.is_finite())
        || probabilities.iter().any(|&p| !(p >= 0.0))
    {
        return Err(Error::DegenerateTable(
            "probabilities must be non-negative with positive sum".into(),
        ));
    }
    let mut left = n;
    let mut out = vec![0; probabilities.len()];
    for (slot, &p) in out.iter_mut().zip(probabilities) {
        if left == 0 {
            break;
        }
        let q = (p / remaining_mass).clamp(0.0, 1.0);
        let k = if q >= 1.0 {
            left
        } else {
            Binomial::new(left, q)
                .map_err(|e| Error::DegenerateTable(e.to_string()))?
                .sample(rng)
        };
        *slot = k;
        left -= k;
        remaining_mass -= p;
    }
    // rounding in remaining_mass can leave a handful of events unassigned
    if left > 0 {
        let last = probabilities
            .iter()
            .rposition(|&p| p > 0.0)
            .expect("positive mass exists");
        out[last] += left;
    }
    Ok(out)
}

fn draw_counts(
    table: &ProbabilityTable,
    n_events: u64,
    totals: EventTotals,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<u64>> {
    let n = match totals {
        EventTotals::Fixed => n_events,
        EventTotals::Poisson if n_events == 0 => 0,
        EventTotals::Poisson => Poisson::new(n_events as f64)
            .map_err(|e| invalid(e.to_string()))?
            .sample(rng) as u64,
    };
    multinomial(n, &table.probabilities, rng)
}

fn to_matrices(
    table: &ProbabilityTable,
    counts: &[u64],
    array: &DetectorArray,
) -> (CountMatrix, CountMatrix) {
    let mut a = CountMatrix::for_array(Branch::Antibunching, array);
    let mut b = CountMatrix::for_array(Branch::Bunching, array);
    for (ch, &c) in table.channels.iter().zip(counts) {
        let m = match ch.branch {
            Branch::Antibunching => &mut a,
            Branch::Bunching => &mut b,
        };
        m.add(ch.pair, c).expect("table channels are unmasked");
    }
    (a, b)
}

/// One repeat at `dx`: `(C^A, C^B)`.
pub fn sample_counts(
    dx: f64,
    n_events: u64,
    cfg: &SimulationConfig,
    seed: u64,
) -> Result<(CountMatrix, CountMatrix)> {
    sample_repeat(dx, n_events, cfg, seed, 0, 0)
}

/// The counts behind repeat `repeat` of scan point `point` in
/// [`simulate_scan`] with the same seed.
pub fn sample_repeat(
    dx: f64,
    n_events: u64,
    cfg: &SimulationConfig,
    seed: u64,
    point: usize,
    repeat: usize,
) -> Result<(CountMatrix, CountMatrix)> {
    let table = cfg.table(dx)?;
    let mut rng = stream_rng(seed, point as u64, repeat as u64);
    let counts = draw_counts(&table, n_events, cfg.totals, &mut rng)?;
    Ok(to_matrices(&table, &counts, &cfg.array))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub rng: String,
    pub config_digest: Option<String>,
}

/// Statistics of one scan position over the repeats, aligned with
/// [`ScanDataset::channels`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPointStats {
    pub dx: f64,
    pub means: Vec<f64>,
    /// Sample standard deviation of the repeats divided by `sqrt(n_r)`.
    pub errs: Vec<f64>,
}

/// Coincidence counts against displacement for every detectable channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanDataset {
    pub channels: Vec<Channel>,
    pub points: Vec<ScanPointStats>,
    pub n_r: usize,
    pub events_per_repeat: u64,
    pub provenance: Provenance,
}

/// `(mean, std / sqrt(n))` with the `n - 1` sample variance.
pub fn mean_and_error(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn simulate_scan(
    dx_grid: &[f64],
    n_r: usize,
    events_per_repeat: u64,
    cfg: &SimulationConfig,
    seed: u64,
) -> Result<ScanDataset> {
    if n_r < 2 {
        return Err(invalid(format!(
            "at least 2 repeats are needed for error bars, got {n_r}"
        )));
    }
    if dx_grid.is_empty() {
        return Err(invalid("dx grid is empty"));
    }
    let channels = cfg.array.channels(&Branch::BOTH);
    if channels.is_empty() {
        return Err(Error::EmptyChannelSet);
    }
    let points = dx_grid
        .par_iter()
        .enumerate()
        .map(|(pt, &dx)| {
            let table = cfg.table(dx)?;
            debug_assert_eq!(table.channels, channels);
            let mut per_channel = vec![Vec::with_capacity(n_r); table.channels.len()];
            for rep in 0..n_r {
                let mut rng = stream_rng(seed, pt as u64, rep as u64);
                let counts = draw_counts(&table, events_per_repeat, cfg.totals, &mut rng)?;
                for (acc, c) in per_channel.iter_mut().zip(counts) {
                    acc.push(c as f64);
                }
            }
            let (means, errs) = per_channel.iter().map(|s| mean_and_error(s)).unzip();
            Ok(ScanPointStats { dx, means, errs })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScanDataset {
        channels,
        points,
        n_r,
        events_per_repeat,
        provenance: Provenance {
            seed,
            rng: RNG_NAME.to_string(),
            config_digest: None,
        },
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    dx_mm: f64,
    branch: Branch,
    i: usize,
    j: usize,
    mean: f64,
    err: f64,
    n_r: usize,
    events: u64,
}

impl ScanDataset {
    pub fn dx_values(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.dx).collect()
    }

    pub fn channel_index(&self, channel: &Channel) -> Option<usize> {
        self.channels.iter().position(|c| c == channel)
    }

    /// `(dx, mean, err)` for one channel across the scan.
    pub fn channel_series(&self, idx: usize) -> Vec<crate::fit::ScanPoint> {
        self.points
            .iter()
            .map(|p| crate::fit::ScanPoint {
                dx: p.dx,
                mean: p.means[idx],
                err: p.errs[idx],
            })
            .collect()
    }

    /// `N = n_r · Σ C̄` at one scan position.
    pub fn n_total(&self, point: usize) -> f64 {
        self.n_r as f64 * self.points[point].means.iter().sum::<f64>()
    }

    pub fn with_digest(mut self, digest: impl Into<String>) -> Self {
        self.provenance.config_digest = Some(digest.into());
        self
    }

    /// CSV with columns `dx_mm,branch,i,j,mean,err,n_r,events`, preceded by
    /// `#` provenance lines.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "# digest: {}",
            self.provenance.config_digest.as_deref().unwrap_or("none")
        )?;
        writeln!(out, "# seed: {}", self.provenance.seed)?;
        writeln!(out, "# rng: {}", self.provenance.rng)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["dx_mm", "branch", "i", "j", "mean", "err", "n_r", "events"])?;
        for p in &self.points {
            for (k, ch) in self.channels.iter().enumerate() {
                w.write_record([
                    p.dx.to_string(),
                    ch.branch.to_string(),
                    ch.pair.i.to_string(),
                    ch.pair.j.to_string(),
                    p.means[k].to_string(),
                    p.errs[k].to_string(),
                    self.n_r.to_string(),
                    self.events_per_repeat.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(mut input: R) -> Result<Self> {
        let mut text = String::new();
        input.read_to_string(&mut text)?;
        let mut digest = None;
        let mut seed = 0;
        let mut rng = String::new();
        for line in text.lines().take_while(|l| l.starts_with('#')) {
            let body = line.trim_start_matches('#').trim();
            if let Some(v) = body.strip_prefix("digest:") {
                let v = v.trim();
                digest = (v != "none").then(|| v.to_string());
            } else if let Some(v) = body.strip_prefix("seed:") {
                seed = v.trim().parse().map_err(|_| invalid("bad seed line"))?;
            } else if let Some(v) = body.strip_prefix("rng:") {
                rng = v.trim().to_string();
            }
        }
        let mut rd = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let mut channels: Vec<Channel> = Vec::new();
        let mut points: Vec<ScanPointStats> = Vec::new();
        let mut meta: Option<(usize, u64)> = None;
        for row in rd.deserialize::<CsvRow>() {
            let row = row?;
            let channel = Channel {
                branch: row.branch,
                pair: PixelPair::new(row.i, row.j),
            };
            match meta {
                None => meta = Some((row.n_r, row.events)),
                Some(m) if m != (row.n_r, row.events) => {
                    return Err(invalid("n_r/events differ between rows"));
                }
                _ => {}
            }
            if points.last().map(|p| p.dx) != Some(row.dx_mm) {
                // the first point defines the channel order
                if points.len() > 1 && points.last().map(|p| p.means.len()) != Some(channels.len())
                {
                    return Err(invalid("scan points list different channel sets"));
                }
                points.push(ScanPointStats {
                    dx: row.dx_mm,
                    means: Vec::new(),
                    errs: Vec::new(),
                });
            }
            let first = points.len() == 1;
            let point = points.last_mut().expect("just pushed");
            if first {
                channels.push(channel);
            } else if channels.get(point.means.len()) != Some(&channel) {
                return Err(invalid(format!(
                    "unexpected channel {channel} at dx = {}",
                    row.dx_mm
                )));
            }
            point.means.push(row.mean);
            point.errs.push(row.err);
        }
        if points.iter().any(|p| p.means.len() != channels.len()) {
            return Err(invalid("scan points list different channel sets"));
        }
        let (n_r, events_per_repeat) = meta.unwrap_or((0, 0));
        Ok(ScanDataset {
            channels,
            points,
            n_r,
            events_per_repeat,
            provenance: Provenance {
                seed,
                rng,
                config_digest: digest,
            },
        })
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    pub fn read_json<R: Read>(input: R) -> Result<Self> {
        Ok(serde_json::from_reader(input)?)
    }
}

/// Placement of synthetic detections on the TAC ramp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingConfig {
    pub windows: CoincidenceWindows,
    /// Uniform timing jitter, ± bins, applied to the second photon of a pair.
    pub jitter_bins: u16,
    /// Empty frames inserted between events, drawn uniformly from `0..=max_frame_gap`.
    pub max_frame_gap: u64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig {
            windows: CoincidenceWindows::default(),
            jitter_bins: 2,
            max_frame_gap: 3,
        }
    }
}

/// Emits one two-record frame per counted pair so that
/// [`crate::ingest::coincidence_matrices`] rebuilds the input matrices.
pub fn synth_timetags(
    antibunching: &CountMatrix,
    bunching: &CountMatrix,
    timing: &TimingConfig,
    seed: u64,
) -> Result<Vec<TimeTagRecord>> {
    let w = &timing.windows;
    w.validate()?;
    let jitter = i64::from(timing.jitter_bins);
    let ramp = i64::from(TAC_BINS);
    let a_off = w.antibunching_offset_bins();
    let b_off = w.bunching_offset_bins();
    for (off, branch) in [(a_off, Branch::Antibunching), (b_off, Branch::Bunching)] {
        let (lo, hi) = ((off - jitter).max(0), off + jitter);
        if hi >= ramp {
            return Err(Error::WindowOverflow {
                bins: hi,
                range: TAC_BINS,
            });
        }
        if w.classify(lo as u16) != Some(branch) || w.classify(hi as u16) != Some(branch) {
            return Err(invalid(format!(
                "timing jitter pushes {branch} pairs outside their coincidence window"
            )));
        }
    }
    if a_off - jitter < i64::from(crate::ingest::SAME_PIXEL_MIN_SEPARATION) {
        return Err(invalid(
            "antibunching delay too short to separate same-pixel hits",
        ));
    }

    let mut events: Vec<(Branch, PixelPair)> = Vec::new();
    for m in [antibunching, bunching] {
        for (pair, c) in m.iter() {
            if m.branch() == Branch::Bunching && pair.i == pair.j && c > 0 {
                return Err(invalid(format!(
                    "bunching counts on single pixel {} cannot be time-tagged without number resolution",
                    pair.i
                )));
            }
            if pair.j > usize::from(u8::MAX) {
                return Err(invalid("pixel index does not fit in a u8"));
            }
            events.extend(std::iter::repeat_n((m.branch(), pair), c as usize));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    events.shuffle(&mut rng);

    let mut out = Vec::with_capacity(2 * events.len());
    let mut frame: u64 = 0;
    for (branch, pair) in events {
        frame += 1 + if timing.max_frame_gap > 0 {
            rng.random_range(0..=timing.max_frame_gap)
        } else {
            0
        };
        let off = match branch {
            Branch::Antibunching => a_off,
            Branch::Bunching => b_off,
        };
        let sep = (off + rng.random_range(-jitter..=jitter)).max(0);
        let start = rng.random_range(0..ramp - sep);
        let (first, second) = if rng.random_bool(0.5) {
            (pair.i, pair.j)
        } else {
            (pair.j, pair.i)
        };
        out.push(TimeTagRecord {
            pixel: first as u8,
            frame,
            tac_bin: start as u16,
        });
        out.push(TimeTagRecord {
            pixel: second as u8,
            frame,
            tac_bin: (start + sep) as u16,
        });
    }
    Ok(out)
}
