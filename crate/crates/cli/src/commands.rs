//! The subcommands. Each reads a validated [`RunConfig`] and writes its files
//! plus a manifest into the configured output directory.

use crate::config::{LikelihoodModel, Overrides, RunConfig};
use crate::error::{CliError, Context, Result};
use crate::output::Outputs;
use clap::ValueEnum;
use mrhom::estimation::{
    crb, fisher_information, fisher_information_exact, fisher_information_restricted, qcrb,
    write_crb_csv, Bound, BoundResult,
};
use mrhom::fit::{
    default_window, estimate, fit_beat_curve, initial_guess, BeatFitParams, ChannelModel,
    EstimationResult, FitOptions, FittedCurves, TableModel,
};
use mrhom::ingest::{
    coincidence_matrices, encode_timetags, parse_timetags, parse_timetags_csv, CoincidenceSummary,
};
use mrhom::model::{Branch, Channel, DetectorArray, PixelPair};
use mrhom::montecarlo::{sample_repeat, simulate_scan, synth_timetags, ScanDataset};
use mrhom::Error;
use serde::Serialize;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Loads the file (or defaults), applies overrides and validates.
pub fn prepare(config: Option<&Path>, overrides: &Overrides) -> Result<(RunConfig, String)> {
    let mut cfg = RunConfig::load(config)?;
    cfg.apply(overrides);
    cfg.validate()?;
    let digest = cfg.digest();
    Ok((cfg, digest))
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Core {
        context: "writing CSV".into(),
        source: Error::Csv(e),
    }
}

fn io_to_cli(e: std::io::Error) -> CliError {
    CliError::Core {
        context: "writing output".into(),
        source: Error::Io(e),
    }
}

fn stamp(buf: &mut Vec<u8>, digest: &str) {
    writeln!(buf, "# digest: {digest}").expect("writing to memory");
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

// ---------------------------------------------------------------- simulate

pub fn simulate(cfg: &RunConfig, digest: &str, timetags: bool) -> Result<ScanDataset> {
    let sim = cfg
        .simulation()
        .context(|| "building the simulation".into())?;
    let grid = cfg.grid();
    let ds = simulate_scan(&grid, cfg.scan.repeats, cfg.scan.events, &sim, cfg.seed)
        .context(|| "simulating the scan".into())?
        .with_digest(digest);
    let mut out = Outputs::create(&cfg.output.dir)?;
    out.write("dataset.csv", |b| {
        ds.write_csv(b).context(|| "dataset CSV".into())
    })?;
    out.write("dataset.json", |b| {
        ds.write_json(b).context(|| "dataset JSON".into())
    })?;
    if timetags {
        let timing = cfg.timing();
        let n = cfg.geometry.n_pixels as u8;
        for (k, &dx) in grid.iter().enumerate() {
            let (a, b) = sample_repeat(dx, cfg.scan.events, &sim, cfg.seed, k, 0)
                .context(|| format!("sampling repeat 0 at dx = {dx}"))?;
            let recs = synth_timetags(&a, &b, &timing, cfg.seed.wrapping_add(k as u64))
                .context(|| format!("time tags at dx = {dx}"))?;
            out.write(&format!("timetags/point_{k:03}.mrht"), |buf| {
                buf.extend(encode_timetags(n, &recs));
                Ok(())
            })?;
            out.write(&format!("timetags/point_{k:03}_A.csv"), |buf| {
                a.write_csv(Some(digest), buf)
                    .context(|| "counts CSV".into())
            })?;
            out.write(&format!("timetags/point_{k:03}_B.csv"), |buf| {
                b.write_csv(Some(digest), buf)
                    .context(|| "counts CSV".into())
            })?;
        }
    }
    out.finish("simulate", cfg, digest)?;
    Ok(ds)
}

// ---------------------------------------------------------------- ingest

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TagFormat {
    Binary,
    Csv,
}

#[derive(Debug, Serialize)]
struct IngestSummary<'a> {
    config_digest: &'a str,
    input: String,
    records: usize,
    #[serde(flatten)]
    tallies: CoincidenceSummary,
}

pub fn ingest(
    cfg: &RunConfig,
    digest: &str,
    input: &Path,
    format: Option<TagFormat>,
) -> Result<CoincidenceSummary> {
    let bytes = fs::read(input).map_err(|e| CliError::io(input, e))?;
    let format = format.unwrap_or_else(|| match input.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("csv") => TagFormat::Csv,
        _ => TagFormat::Binary,
    });
    let n = cfg.geometry.n_pixels as u8;
    let stream = match format {
        TagFormat::Binary => parse_timetags(&bytes),
        TagFormat::Csv => parse_timetags_csv(&bytes[..], n),
    }
    .context(|| input.display().to_string())?;
    if !stream.records.is_empty() && stream.n_pixels != n {
        return Err(CliError::invalid(format!(
            "{} was recorded with {} pixels but the configured array has {n}",
            input.display(),
            stream.n_pixels
        )));
    }
    let array = cfg
        .detector_array()
        .context(|| "building the array".into())?;
    let c = coincidence_matrices(&stream.records, &cfg.windows(), &array)
        .context(|| format!("coincidences in {}", input.display()))?;
    let mut out = Outputs::create(&cfg.output.dir)?;
    out.record_input(input, &bytes);
    out.write("counts_A.csv", |b| {
        c.antibunching
            .write_csv(Some(digest), b)
            .context(|| "counts CSV".into())
    })?;
    out.write("counts_B.csv", |b| {
        c.bunching
            .write_csv(Some(digest), b)
            .context(|| "counts CSV".into())
    })?;
    let summary = IngestSummary {
        config_digest: digest,
        input: input.display().to_string(),
        records: stream.records.len(),
        tallies: c.summary,
    };
    out.write("ingest_summary.json", |b| {
        serde_json::to_writer_pretty(&mut *b, &summary).expect("summary serializes");
        b.push(b'\n');
        Ok(())
    })?;
    out.finish("ingest", cfg, digest)?;
    Ok(c.summary)
}

// ---------------------------------------------------------------- fit

#[derive(Debug, Clone)]
pub enum FitOutcome {
    Ok(BeatFitParams),
    /// Rank-deficient Jacobian; the best curve found is kept but carries no covariance.
    Degenerate(BeatFitParams),
    Failed(String),
}

#[derive(Debug, Clone)]
pub struct ChannelFit {
    pub channel: Channel,
    pub outcome: FitOutcome,
}

impl ChannelFit {
    pub fn params(&self) -> Option<&BeatFitParams> {
        match &self.outcome {
            FitOutcome::Ok(p) | FitOutcome::Degenerate(p) => Some(p),
            FitOutcome::Failed(_) => None,
        }
    }

    fn status(&self) -> (&'static str, String) {
        match &self.outcome {
            FitOutcome::Ok(_) => ("ok", String::new()),
            FitOutcome::Degenerate(_) => ("degenerate", String::new()),
            FitOutcome::Failed(m) => ("failed", m.clone()),
        }
    }
}

/// Inverse-variance pooled value over the well-determined fits.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Pooled {
    pub value: f64,
    pub err: f64,
    pub n_channels: usize,
}

fn pool(samples: impl Iterator<Item = (f64, f64)>) -> Option<Pooled> {
    let (mut sw, mut swx, mut n) = (0.0, 0.0, 0);
    for (x, se) in samples {
        if se.is_finite() && se > 0.0 && x.is_finite() {
            let w = se.powi(-2);
            sw += w;
            swx += w * x;
            n += 1;
        }
    }
    (n > 0).then(|| Pooled {
        value: swx / sw,
        err: sw.powf(-0.5),
        n_channels: n,
    })
}

/// Pooled visibility, δ and Δk per unit pixel separation.
pub fn pooled(fits: &[ChannelFit]) -> [Option<Pooled>; 3] {
    let ok = || {
        fits.iter().filter_map(|f| match &f.outcome {
            FitOutcome::Ok(p) if f.channel.pair.separation() > 0 => {
                Some((f.channel.pair.separation() as f64, p))
            }
            _ => None,
        })
    };
    let se = |p: &BeatFitParams, k: usize| p.std_errors()[k];
    [
        pool(ok().map(|(_, p)| (p.curve.visibility, se(p, 1)))),
        pool(ok().map(|(_, p)| (p.curve.delta, se(p, 2)))),
        pool(ok().map(|(d, p)| (p.curve.delta_k / d, se(p, 3) / d))),
    ]
}

pub fn read_dataset(path: &Path) -> Result<ScanDataset> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let json = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if json {
        ScanDataset::read_json(reader)
    } else {
        ScanDataset::read_csv(reader)
    }
    .context(|| path.display().to_string())
}

fn dataset_path(cfg: &RunConfig, given: Option<&Path>) -> PathBuf {
    given
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output.dir.join("dataset.csv"))
}

fn load_dataset(
    cfg: &RunConfig,
    digest: &str,
    path: &Path,
    out: &mut Outputs,
) -> Result<ScanDataset> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    out.record_input(path, &bytes);
    let ds = read_dataset(path)?;
    if let Some(d) = &ds.provenance.config_digest {
        if d != digest {
            log::warn!(
                "{} was produced under config digest {d}, current is {digest}",
                path.display()
            );
        }
    }
    let n = cfg.geometry.n_pixels;
    if let Some(ch) = ds.channels.iter().find(|c| c.pair.j >= n) {
        return Err(CliError::invalid(format!(
            "dataset channel {ch} is outside the configured {n}-pixel array"
        )));
    }
    Ok(ds)
}

fn fit_channel(
    ds: &ScanDataset,
    idx: usize,
    array: &DetectorArray,
    opts: &FitOptions,
) -> ChannelFit {
    let channel = ds.channels[idx];
    let pts = ds.channel_series(idx);
    let dk =
        (array.k(channel.pair.j).unwrap_or(0.0) - array.k(channel.pair.i).unwrap_or(0.0)).abs();
    let outcome = match initial_guess(&pts, channel.branch, dk, array.delta())
        .and_then(|g| fit_beat_curve(&pts, channel.branch, g, opts))
    {
        // a beat far from the pair's momentum difference belongs to another harmonic
        Ok(p) if (p.curve.delta_k - dk).abs() > 0.5 * array.pitch() => FitOutcome::Failed(format!(
            "fitted delta_k = {} strays from the expected {dk}",
            p.curve.delta_k
        )),
        Ok(p) => FitOutcome::Ok(p),
        Err(Error::RankDeficient { partial, .. }) => FitOutcome::Degenerate(*partial),
        Err(e) => FitOutcome::Failed(e.to_string()),
    };
    if let FitOutcome::Failed(m) = &outcome {
        log::debug!("fit of {channel} failed: {m}");
    }
    ChannelFit { channel, outcome }
}

pub fn fit_channels(
    cfg: &RunConfig,
    ds: &ScanDataset,
    which: impl Fn(&Channel) -> bool,
) -> Result<Vec<ChannelFit>> {
    let array = cfg
        .detector_array()
        .context(|| "building the array".into())?;
    let opts = FitOptions {
        restarts: cfg.estimation.fit_restarts,
        ..FitOptions::default()
    };
    Ok((0..ds.channels.len())
        .filter(|&i| which(&ds.channels[i]))
        .map(|i| fit_channel(ds, i, &array, &opts))
        .collect())
}

fn write_fit_tables(out: &mut Outputs, digest: &str, fits: &[ChannelFit]) -> Result<()> {
    out.write("fit_params.csv", |buf| {
        stamp(buf, digest);
        let mut w = csv::Writer::from_writer(buf);
        w.write_record([
            "branch",
            "i",
            "j",
            "status",
            "amplitude",
            "visibility",
            "delta_mm_inv",
            "delta_k_mm_inv",
            "se_amplitude",
            "se_visibility",
            "se_delta_mm_inv",
            "se_delta_k_mm_inv",
            "reduced_chi2",
            "n_points",
            "iterations",
            "message",
        ])
        .map_err(csv_err)?;
        for f in fits {
            let (status, msg) = f.status();
            let ch = f.channel;
            let mut row = vec![
                ch.branch.to_string(),
                ch.pair.i.to_string(),
                ch.pair.j.to_string(),
                status.into(),
            ];
            match f.params() {
                Some(p) => {
                    row.extend(p.curve.params().iter().map(f64::to_string));
                    let se = p.std_errors();
                    let ok = matches!(f.outcome, FitOutcome::Ok(_));
                    row.extend(se.iter().map(|&s| fmt_opt(ok.then_some(s))));
                    row.push(p.reduced_chi2().to_string());
                    row.push(p.n_points.to_string());
                    row.push(p.iterations.to_string());
                }
                None => row.extend(std::iter::repeat_n(String::new(), 11)),
            }
            row.push(msg);
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(io_to_cli)
    })?;
    let [v, d, k] = pooled(fits);
    out.write("fit_pooled.csv", |buf| {
        stamp(buf, digest);
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["parameter", "value", "err", "n_channels"])
            .map_err(csv_err)?;
        for (name, p) in [
            ("visibility", v),
            ("delta_mm_inv", d),
            ("delta_k_per_pixel_mm_inv", k),
        ] {
            let (val, err, n) = p.map_or((None, None, 0), |p| {
                (Some(p.value), Some(p.err), p.n_channels)
            });
            w.write_record([name.to_string(), fmt_opt(val), fmt_opt(err), n.to_string()])
                .map_err(csv_err)?;
        }
        w.flush().map_err(io_to_cli)
    })?;
    for (name, p) in [("V", v), ("delta", d), ("delta_k / |i-j|", k)] {
        if let Some(p) = p {
            log::info!(
                "pooled {name} = {:.4} ± {:.4} over {} channels",
                p.value,
                p.err,
                p.n_channels
            );
        }
    }
    Ok(())
}

/// Fits every channel of the dataset.
pub fn fit(cfg: &RunConfig, digest: &str, dataset: Option<&Path>) -> Result<Vec<ChannelFit>> {
    let mut out = Outputs::create(&cfg.output.dir)?;
    let ds = load_dataset(cfg, digest, &dataset_path(cfg, dataset), &mut out)?;
    let fits = fit_channels(cfg, &ds, |_| true)?;
    write_fit_tables(&mut out, digest, &fits)?;
    out.finish("fit", cfg, digest)?;
    Ok(fits)
}

// ---------------------------------------------------------------- bounds

fn ideal_fisher(cfg: &RunConfig, dx: f64) -> mrhom::Result<f64> {
    let fc = cfg.fisher()?;
    if cfg.scan.exact_integral {
        fisher_information_exact(dx, &fc)
    } else {
        fisher_information(dx, &fc)
    }
}

fn bound_row(dx: f64, fisher: f64, q: f64) -> mrhom::Result<BoundResult> {
    Ok(BoundResult {
        dx,
        fisher,
        crb: crb(1, fisher)?,
        qcrb: q,
        n_events: 1,
    })
}

/// Per-event bounds on the scan grid: the ideal contiguous grid of width δ
/// and the configured array with its masks.
pub fn crb_tables(cfg: &RunConfig, digest: &str) -> Result<(Vec<BoundResult>, Vec<BoundResult>)> {
    let params = cfg.source().context(|| "source".into())?;
    let array = cfg
        .detector_array()
        .context(|| "building the array".into())?;
    let q = qcrb(1, &params).context(|| "qCRB".into())?;
    let mut ideal = Vec::new();
    let mut restricted = Vec::new();
    for dx in cfg.grid() {
        let f = ideal_fisher(cfg, dx)
            .context(|| format!("ideal-grid Fisher information at dx = {dx}"))?;
        ideal.push(bound_row(dx, f, q).context(|| "CRB".into())?);
        let f = fisher_information_restricted(dx, &params, &array)
            .context(|| format!("array Fisher information at dx = {dx}"))?;
        restricted.push(bound_row(dx, f, q).context(|| "CRB".into())?);
    }
    let mut out = Outputs::create(&cfg.output.dir)?;
    out.write("crb_ideal.csv", |b| {
        write_crb_csv(&ideal, Some(digest), b).context(|| "CRB CSV".into())
    })?;
    out.write("crb_array.csv", |b| {
        write_crb_csv(&restricted, Some(digest), b).context(|| "CRB CSV".into())
    })?;
    out.finish("crb", cfg, digest)?;
    Ok((ideal, restricted))
}

// ---------------------------------------------------------------- report

/// One row of the uncertainty comparison.
#[derive(Debug, Clone)]
pub struct EstimateRow {
    pub dx: f64,
    pub estimate: std::result::Result<EstimationResult, String>,
    pub sqrt_n_crb: Bound,
    pub sqrt_n_crb_ideal: Bound,
    pub sqrt_n_qcrb: f64,
}

/// Most central pair with the given separation.
fn central_pair(n: usize, d: usize) -> Option<PixelPair> {
    (d < n).then(|| {
        let i = (n - 1 - d) / 2;
        PixelPair::new(i, i + d)
    })
}

fn shown_channels(cfg: &RunConfig) -> Vec<Channel> {
    let n = cfg.geometry.n_pixels;
    let r = &cfg.report;
    let mut out = Vec::new();
    for (branch, seps) in [
        (Branch::Antibunching, &r.antibunching_separations),
        (Branch::Bunching, &r.bunching_separations),
    ] {
        out.extend(
            seps.iter()
                .filter_map(|&d| central_pair(n, d))
                .map(|pair| Channel { branch, pair }),
        );
    }
    out
}

fn write_beat_table(
    out: &mut Outputs,
    digest: &str,
    name: &str,
    ds: &ScanDataset,
    fits: &[(usize, &ChannelFit)],
    samples: usize,
) -> Result<()> {
    let dxs = ds.dx_values();
    let lo = dxs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = dxs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    out.write(name, |buf| {
        stamp(buf, digest);
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["branch", "i", "j", "kind", "dx_mm", "count", "err"])
            .map_err(csv_err)?;
        for &(idx, f) in fits {
            let ch = f.channel;
            let head = [
                ch.branch.to_string(),
                ch.pair.i.to_string(),
                ch.pair.j.to_string(),
            ];
            for p in ds.channel_series(idx) {
                let mut row = head.to_vec();
                row.extend([
                    "data".into(),
                    p.dx.to_string(),
                    p.mean.to_string(),
                    p.err.to_string(),
                ]);
                w.write_record(&row).map_err(csv_err)?;
            }
            let kind = match f.outcome {
                FitOutcome::Ok(_) => "fit",
                FitOutcome::Degenerate(_) => "fit_degenerate",
                FitOutcome::Failed(_) => continue,
            };
            let curve = f.params().expect("fitted").curve;
            for s in 0..samples {
                let dx = lo + (hi - lo) * s as f64 / (samples - 1) as f64;
                let mut row = head.to_vec();
                row.extend([
                    kind.into(),
                    dx.to_string(),
                    curve.value(dx).to_string(),
                    String::new(),
                ]);
                w.write_record(&row).map_err(csv_err)?;
            }
        }
        w.flush().map_err(io_to_cli)
    })?;
    Ok(())
}

fn estimate_scan(
    cfg: &RunConfig,
    ds: &ScanDataset,
    fits: &[ChannelFit],
) -> Result<Vec<EstimateRow>> {
    let params = cfg.source().context(|| "source".into())?;
    let array = cfg
        .detector_array()
        .context(|| "building the array".into())?;
    let (model, fastest): (Box<dyn ChannelModel>, f64) = match cfg.estimation.model {
        LikelihoodModel::Table => {
            let m = TableModel::new(params, array.clone()).context(|| "likelihood model".into())?;
            let f = m.fastest_delta_k();
            (Box::new(m), f)
        }
        LikelihoodModel::Fitted | LikelihoodModel::FittedNormalized => {
            let (chs, curves): (Vec<Channel>, Vec<_>) = fits
                .iter()
                .filter_map(|f| match &f.outcome {
                    FitOutcome::Ok(p) => Some((f.channel, p.curve)),
                    _ => None,
                })
                .unzip();
            log::info!(
                "likelihood uses {} fitted channels of {}",
                chs.len(),
                ds.channels.len()
            );
            let mut m =
                FittedCurves::new(chs, curves).context(|| "fitted-curve likelihood".into())?;
            if cfg.estimation.model == LikelihoodModel::FittedNormalized {
                m = m.normalized();
            }
            let f = m.fastest_delta_k();
            (Box::new(m), f)
        }
    };
    let idx: Vec<usize> = model
        .channels()
        .iter()
        .map(|ch| {
            ds.channel_index(ch)
                .ok_or_else(|| CliError::invalid(format!("dataset has no channel {ch}")))
        })
        .collect::<Result<_>>()?;
    let q = qcrb(1, &params).context(|| "qCRB".into())?;
    let mut rows = Vec::with_capacity(ds.points.len());
    for p in &ds.points {
        let counts: Vec<f64> = idx.iter().map(|&i| p.means[i]).collect();
        let errs: Vec<f64> = idx.iter().map(|&i| p.errs[i]).collect();
        let window = match cfg.estimation.half_window_mm {
            Some(h) => Ok((p.dx - h, p.dx + h)),
            None => default_window(p.dx, fastest),
        };
        let est = window
            .and_then(|w| estimate(&counts, &errs, model.as_ref(), w, ds.n_r))
            .map_err(|e| e.to_string())
            .and_then(|e| {
                if e.dx_err > 0.0 {
                    Ok(e)
                } else {
                    Err(format!("zero sensitivity at dx = {}", e.dx_ml))
                }
            });
        if let Err(m) = &est {
            log::warn!("estimation at dx = {}: {m}", p.dx);
        }
        let fr = fisher_information_restricted(p.dx, &params, &array)
            .context(|| format!("array Fisher information at dx = {}", p.dx))?;
        let fi = ideal_fisher(cfg, p.dx)
            .context(|| format!("ideal-grid Fisher information at dx = {}", p.dx))?;
        rows.push(EstimateRow {
            dx: p.dx,
            estimate: est,
            sqrt_n_crb: crb(1, fr).context(|| "CRB".into())?,
            sqrt_n_crb_ideal: crb(1, fi).context(|| "CRB".into())?,
            sqrt_n_qcrb: q,
        });
    }
    Ok(rows)
}

fn write_estimates(out: &mut Outputs, digest: &str, rows: &[EstimateRow]) -> Result<()> {
    out.write("estimates.csv", |buf| {
        stamp(buf, digest);
        let mut w = csv::Writer::from_writer(buf);
        w.write_record([
            "dx_mm",
            "dx_ml_mm",
            "dx_err_mm",
            "n_total",
            "sqrtN_dx_err_mm",
            "sqrtN_crb_mm",
            "sqrtN_crb_ideal_mm",
            "sqrtN_qcrb_mm",
            "status",
        ])
        .map_err(csv_err)?;
        for r in rows {
            let (fields, status) = match &r.estimate {
                Ok(e) => (
                    [e.dx_ml, e.dx_err, e.n_total, e.sqrt_n_err()].map(|x| x.to_string()),
                    "ok".to_string(),
                ),
                Err(m) => (Default::default(), m.clone()),
            };
            let mut row = vec![r.dx.to_string()];
            row.extend(fields);
            row.extend([
                r.sqrt_n_crb.to_string(),
                r.sqrt_n_crb_ideal.to_string(),
                r.sqrt_n_qcrb.to_string(),
                status,
            ]);
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(io_to_cli)
    })?;
    Ok(())
}

/// Beat tables, fits, per-point estimates and bounds for a dataset.
pub fn report(cfg: &RunConfig, digest: &str, dataset: Option<&Path>) -> Result<Vec<EstimateRow>> {
    let mut out = Outputs::create(&cfg.output.dir)?;
    let ds = load_dataset(cfg, digest, &dataset_path(cfg, dataset), &mut out)?;
    let shown = shown_channels(cfg);
    let needs_all = cfg.estimation.model != LikelihoodModel::Table;
    let fits = fit_channels(cfg, &ds, |ch| needs_all || shown.contains(ch))?;
    for (branch, name) in [
        (Branch::Antibunching, "beats_antibunching.csv"),
        (Branch::Bunching, "beats_bunching.csv"),
    ] {
        let mut chosen = Vec::new();
        for ch in shown.iter().filter(|c| c.branch == branch) {
            match (ds.channel_index(ch), fits.iter().find(|f| f.channel == *ch)) {
                (Some(i), Some(f)) => chosen.push((i, f)),
                _ => log::warn!("{ch} is masked or absent from the dataset; left out of {name}"),
            }
        }
        write_beat_table(
            &mut out,
            digest,
            name,
            &ds,
            &chosen,
            cfg.report.curve_samples,
        )?;
    }
    write_fit_tables(&mut out, digest, &fits)?;
    let rows = estimate_scan(cfg, &ds, &fits)?;
    write_estimates(&mut out, digest, &rows)?;
    out.finish("report", cfg, digest)?;
    Ok(rows)
}
