//! Python bindings for the simulator, bounds, fits and estimator.

use mrhom::estimation::{self, FisherConfig};
use mrhom::fit::{self, BeatCurve, FitOptions, ScanPoint, TableModel};
use mrhom::ingest::{self, CoincidenceWindows};
use mrhom::model::{self, Branch, Channel, PixelIntegration, PixelPair};
use mrhom::montecarlo::{self, CountMatrix, SimulationConfig};
use mrhom::ErrorKind;
use pyo3::create_exception;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};
use std::collections::BTreeMap;

create_exception!(mrhom, NumericalError, PyRuntimeError);

fn py_err(e: mrhom::Error) -> PyErr {
    match e.kind() {
        ErrorKind::Validation => PyValueError::new_err(e.to_string()),
        ErrorKind::Io => PyIOError::new_err(e.to_string()),
        ErrorKind::Numerical => NumericalError::new_err(e.to_string()),
    }
}

fn branch(letter: &str) -> PyResult<Branch> {
    Branch::from_letter(letter)
        .ok_or_else(|| PyValueError::new_err(format!("branch must be 'A' or 'B', got {letter:?}")))
}

type ChannelKey = (char, usize, usize);

fn key(ch: &Channel) -> ChannelKey {
    (ch.branch.letter(), ch.pair.i, ch.pair.j)
}

/// Gaussian pump source: transverse width σx (mm) and two-photon visibility.
#[pyclass(name = "SourceParams", frozen, skip_from_py_object)]
#[derive(Clone, Copy)]
struct PySourceParams(model::SourceParams);

#[pymethods]
impl PySourceParams {
    #[new]
    fn new(sigma_x: f64, visibility: f64) -> PyResult<Self> {
        model::SourceParams::new(sigma_x, visibility)
            .map(Self)
            .map_err(py_err)
    }

    #[staticmethod]
    fn reference() -> Self {
        Self(model::SourceParams::reference())
    }

    #[getter]
    fn sigma_x(&self) -> f64 {
        self.0.sigma_x()
    }

    #[getter]
    fn sigma_k(&self) -> f64 {
        self.0.sigma_k()
    }

    #[getter]
    fn visibility(&self) -> f64 {
        self.0.visibility()
    }

    /// `1 / (2 σx²)` per event.
    fn quantum_fisher(&self) -> f64 {
        self.0.quantum_fisher()
    }

    fn __repr__(&self) -> String {
        format!(
            "SourceParams(sigma_x={}, visibility={})",
            self.0.sigma_x(),
            self.0.visibility()
        )
    }
}

/// Pixel momenta, momentum width δ and the masked channels.
#[pyclass(name = "DetectorArray", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyDetectorArray(model::DetectorArray);

#[pymethods]
impl PyDetectorArray {
    /// The 8-pixel SPAD array; `delta` overrides the geometric pixel width.
    #[staticmethod]
    #[pyo3(signature = (delta=None))]
    fn reference(delta: Option<f64>) -> PyResult<Self> {
        model::DetectorArray::from_geometry(&model::OpticalGeometry::reference(), delta)
            .map(Self)
            .map_err(py_err)
    }

    #[staticmethod]
    fn uniform(n: usize, pitch: f64, delta: f64, center_index: f64) -> PyResult<Self> {
        model::DetectorArray::uniform(n, pitch, delta, center_index)
            .map(Self)
            .map_err(py_err)
    }

    #[staticmethod]
    fn contiguous_grid(half_width: usize, delta: f64) -> PyResult<Self> {
        model::DetectorArray::contiguous_grid(half_width, delta)
            .map(Self)
            .map_err(py_err)
    }

    fn without_masks(&self) -> Self {
        Self(self.0.clone().without_masks())
    }

    #[getter]
    fn k_centers(&self) -> Vec<f64> {
        self.0.k_centers().to_vec()
    }

    #[getter]
    fn delta(&self) -> f64 {
        self.0.delta()
    }

    #[getter]
    fn n_pixels(&self) -> usize {
        self.0.n_pixels()
    }

    /// Unmasked channels as `(branch, i, j)`.
    fn channels(&self) -> Vec<ChannelKey> {
        self.0.channels(&Branch::BOTH).iter().map(key).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "DetectorArray(n_pixels={}, delta={})",
            self.0.n_pixels(),
            self.0.delta()
        )
    }
}

/// Mean counts and errors per channel over a displacement scan.
#[pyclass(name = "ScanDataset", frozen)]
struct PyScanDataset(montecarlo::ScanDataset);

#[pymethods]
impl PyScanDataset {
    #[getter]
    fn dx(&self) -> Vec<f64> {
        self.0.dx_values()
    }

    #[getter]
    fn channels(&self) -> Vec<ChannelKey> {
        self.0.channels.iter().map(key).collect()
    }

    #[getter]
    fn n_r(&self) -> usize {
        self.0.n_r
    }

    /// `(dx, mean, err)` per scan point for one channel.
    fn series(&self, branch_letter: &str, i: usize, j: usize) -> PyResult<Vec<(f64, f64, f64)>> {
        let ch = Channel {
            branch: branch(branch_letter)?,
            pair: PixelPair::new(i, j),
        };
        let idx = self
            .0
            .channel_index(&ch)
            .ok_or_else(|| PyValueError::new_err(format!("no channel {ch}")))?;
        Ok(self
            .0
            .channel_series(idx)
            .iter()
            .map(|p| (p.dx, p.mean, p.err))
            .collect())
    }

    fn to_csv(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        self.0.write_csv(&mut buf).map_err(py_err)?;
        Ok(String::from_utf8(buf).expect("CSV is UTF-8"))
    }

    #[staticmethod]
    fn from_csv(text: &str) -> PyResult<Self> {
        montecarlo::ScanDataset::read_csv(text.as_bytes())
            .map(Self)
            .map_err(py_err)
    }

    /// Maximum-likelihood estimate at one scan point under the sinc-law table
    /// model, searched within a quarter period of the fastest beat.
    fn estimate<'py>(
        &self,
        py: Python<'py>,
        point: usize,
        source: &PySourceParams,
        array: &PyDetectorArray,
    ) -> PyResult<Bound<'py, PyDict>> {
        let p = self
            .0
            .points
            .get(point)
            .ok_or_else(|| PyValueError::new_err(format!("no scan point {point}")))?;
        let model = TableModel::new(source.0, array.0.clone()).map_err(py_err)?;
        let mut counts = Vec::new();
        let mut errs = Vec::new();
        for ch in fit::ChannelModel::channels(&model) {
            let idx = self
                .0
                .channel_index(ch)
                .ok_or_else(|| PyValueError::new_err(format!("dataset has no channel {ch}")))?;
            counts.push(p.means[idx]);
            errs.push(p.errs[idx]);
        }
        let window = fit::default_window(p.dx, model.fastest_delta_k()).map_err(py_err)?;
        let r = fit::estimate(&counts, &errs, &model, window, self.0.n_r).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("dx_ml", r.dx_ml)?;
        d.set_item("dx_err", r.dx_err)?;
        d.set_item("n_total", r.n_total)?;
        d.set_item("sqrt_n_err", r.sqrt_n_err())?;
        d.set_item("window", r.search_window)?;
        Ok(d)
    }
}

fn count_dict(a: &CountMatrix, b: &CountMatrix) -> BTreeMap<ChannelKey, u64> {
    let mut out = BTreeMap::new();
    for m in [a, b] {
        for (pair, n) in m.iter() {
            out.insert((m.branch().letter(), pair.i, pair.j), n);
        }
    }
    out
}

/// Normalized probabilities of the unmasked channels at `dx`.
#[pyfunction]
#[pyo3(signature = (dx, source, array, exact=false))]
fn probability_table(
    dx: f64,
    source: &PySourceParams,
    array: &PyDetectorArray,
    exact: bool,
) -> PyResult<BTreeMap<ChannelKey, f64>> {
    let integration = if exact {
        PixelIntegration::Exact
    } else {
        PixelIntegration::Sinc
    };
    let t = model::probability_table(&Branch::BOTH, dx, &source.0, &array.0, integration)
        .map_err(py_err)?;
    Ok(t.channels
        .iter()
        .map(key)
        .zip(t.probabilities.iter().copied())
        .collect())
}

/// Ideal-grid Fisher information per event, mm⁻².
#[pyfunction]
#[pyo3(signature = (dx, source, delta, half_width=50))]
fn fisher_information(
    dx: f64,
    source: &PySourceParams,
    delta: f64,
    half_width: usize,
) -> PyResult<f64> {
    let cfg = FisherConfig::new(source.0, delta)
        .and_then(|c| c.with_half_width(half_width))
        .map_err(py_err)?;
    estimation::fisher_information(dx, &cfg).map_err(py_err)
}

/// Fisher information per event of a physical array, conditioned on its unmasked channels.
#[pyfunction]
fn fisher_information_restricted(
    dx: f64,
    source: &PySourceParams,
    array: &PyDetectorArray,
) -> PyResult<f64> {
    estimation::fisher_information_restricted(dx, &source.0, &array.0).map_err(py_err)
}

#[pyfunction]
fn qcrb(n_events: u64, source: &PySourceParams) -> PyResult<f64> {
    estimation::qcrb(n_events, &source.0).map_err(py_err)
}

/// `1/√(N F)`; infinite when `F = 0`.
#[pyfunction]
fn crb(n_events: u64, fisher: f64) -> PyResult<f64> {
    estimation::crb(n_events, fisher)
        .map(|b| b.value())
        .map_err(py_err)
}

/// One multinomial repeat at `dx`, keyed by `(branch, i, j)`.
#[pyfunction]
fn sample_counts(
    dx: f64,
    n_events: u64,
    source: &PySourceParams,
    array: &PyDetectorArray,
    seed: u64,
) -> PyResult<BTreeMap<ChannelKey, u64>> {
    let cfg = SimulationConfig::new(source.0, array.0.clone());
    let (a, b) = montecarlo::sample_counts(dx, n_events, &cfg, seed).map_err(py_err)?;
    Ok(count_dict(&a, &b))
}

#[pyfunction]
fn simulate_scan(
    dx_grid: Vec<f64>,
    n_r: usize,
    events_per_repeat: u64,
    source: &PySourceParams,
    array: &PyDetectorArray,
    seed: u64,
) -> PyResult<PyScanDataset> {
    let cfg = SimulationConfig::new(source.0, array.0.clone());
    montecarlo::simulate_scan(&dx_grid, n_r, events_per_repeat, &cfg, seed)
        .map(PyScanDataset)
        .map_err(py_err)
}

/// Weighted beat-curve fit. `guess` is `(amplitude, visibility, delta, delta_k)`;
/// when omitted it is built from `delta_k` and `delta`.
#[pyfunction]
#[pyo3(signature = (points, branch_letter, delta_k, delta, guess=None))]
fn fit_beat_curve<'py>(
    py: Python<'py>,
    points: Vec<(f64, f64, f64)>,
    branch_letter: &str,
    delta_k: f64,
    delta: f64,
    guess: Option<[f64; 4]>,
) -> PyResult<Bound<'py, PyDict>> {
    let b = branch(branch_letter)?;
    let pts: Vec<ScanPoint> = points
        .iter()
        .map(|&(dx, mean, err)| ScanPoint { dx, mean, err })
        .collect();
    let guess = match guess {
        Some(g) => g,
        None => fit::initial_guess(&pts, b, delta_k, delta).map_err(py_err)?,
    };
    let r = fit::fit_beat_curve(&pts, b, guess, &FitOptions::default()).map_err(py_err)?;
    let d = PyDict::new(py);
    for (name, v) in fit::PARAM_NAMES.iter().zip(r.curve.params()) {
        d.set_item(*name, v)?;
    }
    d.set_item("std_errors", r.std_errors().to_vec())?;
    d.set_item("reduced_chi2", r.reduced_chi2())?;
    Ok(d)
}

/// Value of `N (1 ∓ V sinc²(dx δ/2) cos(Δk dx))`.
#[pyfunction]
fn beat_curve(
    dx: f64,
    branch_letter: &str,
    amplitude: f64,
    visibility: f64,
    delta: f64,
    delta_k: f64,
) -> PyResult<f64> {
    let c = BeatCurve {
        branch: branch(branch_letter)?,
        amplitude,
        visibility,
        delta,
        delta_k,
    };
    Ok(c.value(dx))
}

/// Synthetic binary time-tag file reproducing one repeat's counts.
#[pyfunction]
fn synth_timetag_file<'py>(
    py: Python<'py>,
    dx: f64,
    n_events: u64,
    source: &PySourceParams,
    array: &PyDetectorArray,
    seed: u64,
) -> PyResult<Bound<'py, PyBytes>> {
    let cfg = SimulationConfig::new(source.0, array.0.clone());
    let (a, b) = montecarlo::sample_counts(dx, n_events, &cfg, seed).map_err(py_err)?;
    let recs = montecarlo::synth_timetags(&a, &b, &Default::default(), seed).map_err(py_err)?;
    let n = u8::try_from(array.0.n_pixels())
        .map_err(|_| PyValueError::new_err("more than 255 pixels"))?;
    Ok(PyBytes::new(py, &ingest::encode_timetags(n, &recs)))
}

/// Coincidence counts from a binary time-tag file, with the default windows.
#[pyfunction]
fn ingest_timetags(data: &[u8], array: &PyDetectorArray) -> PyResult<BTreeMap<ChannelKey, u64>> {
    let stream = ingest::parse_timetags(data).map_err(py_err)?;
    let c = ingest::coincidence_matrices(&stream.records, &CoincidenceWindows::default(), &array.0)
        .map_err(py_err)?;
    Ok(count_dict(&c.antibunching, &c.bunching))
}

#[pymodule(name = "mrhom")]
fn init(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySourceParams>()?;
    m.add_class::<PyDetectorArray>()?;
    m.add_class::<PyScanDataset>()?;
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    m.add_function(wrap_pyfunction!(probability_table, m)?)?;
    m.add_function(wrap_pyfunction!(fisher_information, m)?)?;
    m.add_function(wrap_pyfunction!(fisher_information_restricted, m)?)?;
    m.add_function(wrap_pyfunction!(qcrb, m)?)?;
    m.add_function(wrap_pyfunction!(crb, m)?)?;
    m.add_function(wrap_pyfunction!(sample_counts, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_scan, m)?)?;
    m.add_function(wrap_pyfunction!(fit_beat_curve, m)?)?;
    m.add_function(wrap_pyfunction!(beat_curve, m)?)?;
    m.add_function(wrap_pyfunction!(synth_timetag_file, m)?)?;
    m.add_function(wrap_pyfunction!(ingest_timetags, m)?)?;
    Ok(())
}
