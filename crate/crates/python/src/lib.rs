//! Python bindings: channels, baseline detectors, the unfolded network, the
//! trainer and the BER harness. Vectors cross the boundary as lists of
//! floats and matrices as lists of rows.

use std::path::PathBuf;

use mimo_unfold::baseline;
use mimo_unfold::bench::{self, Detector, FlopDetector, SweepConfig};
use mimo_unfold::system_model::{
    awgn_receive, ComplexChannel, Constellation, Modulation, NoiseLevel, RealSystem, SnrConvention,
};
use mimo_unfold::training::{self, TrainConfig};
use mimo_unfold::unfolded::{self, NetworkParams};
use mimo_unfold::Error;
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        Error::Divergence { .. } | Error::SingularMatrix | Error::DegenerateChannel { .. } => {
            PyArithmeticError::new_err(e.to_string())
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

fn constellation(modulation: &str) -> PyResult<Constellation> {
    Ok(Constellation::new(parse::<Modulation>(modulation)?))
}

/// Bits as a list of ints rather than `bytes`.
fn bit_list(bits: &[u8]) -> Vec<u32> {
    bits.iter().map(|&b| u32::from(b)).collect()
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Ok(DMatrix::from_row_iterator(n, m, rows.into_iter().flatten()))
}

/// Real-domain observation `y = H x + n`.
#[pyclass(name = "System", module = "pymimo", from_py_object)]
#[derive(Clone)]
struct PySystem {
    inner: RealSystem,
}

#[pymethods]
impl PySystem {
    #[new]
    fn new(h: Vec<Vec<f64>>, y: Vec<f64>, noise_var_per_real_dim: f64) -> PyResult<Self> {
        let inner = RealSystem::new(matrix(h)?, DVector::from_vec(y), noise_var_per_real_dim)
            .map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Draw a Rayleigh channel and random bits. Returns `(system, bits, x)`.
    /// `snr_db=None` gives a noiseless observation.
    #[staticmethod]
    #[pyo3(signature = (n_antennas, n_users, modulation="qpsk", snr_db=None, seed=0, snr_convention="receive"))]
    fn generate(
        n_antennas: usize,
        n_users: usize,
        modulation: &str,
        snr_db: Option<f64>,
        seed: u64,
        snr_convention: &str,
    ) -> PyResult<(Self, Vec<u32>, Vec<f64>)> {
        let c = constellation(modulation)?;
        let convention: SnrConvention = parse(snr_convention)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = ComplexChannel::generate(n_antennas, n_users, &mut rng)
            .map_err(py_err)?
            .to_real();
        let frame = c
            .modulate(&c.random_bits(n_users, &mut rng))
            .map_err(py_err)?;
        let noise = match snr_db {
            Some(snr_db) => NoiseLevel::SnrDb { snr_db, convention },
            None => NoiseLevel::Noiseless,
        };
        let inner = awgn_receive(&h, &frame.x, noise, &mut rng).map_err(py_err)?;
        Ok((
            Self { inner },
            bit_list(&frame.bits),
            frame.x.as_slice().to_vec(),
        ))
    }

    #[getter]
    fn h(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.h)
    }

    #[getter]
    fn y(&self) -> Vec<f64> {
        self.inner.y.as_slice().to_vec()
    }

    #[getter]
    fn noise_var(&self) -> f64 {
        self.inner.noise_var()
    }

    #[getter]
    fn n_antennas(&self) -> usize {
        self.inner.n_antennas
    }

    #[getter]
    fn n_users(&self) -> usize {
        self.inner.n_users
    }

    fn __repr__(&self) -> String {
        format!(
            "System(n_antennas={}, n_users={}, noise_var={})",
            self.inner.n_antennas,
            self.inner.n_users,
            self.inner.noise_var()
        )
    }
}

/// Parameters of the unfolded detector.
#[pyclass(name = "Network", module = "pymimo", from_py_object)]
#[derive(Clone)]
struct PyNetwork {
    inner: NetworkParams,
}

#[pymethods]
impl PyNetwork {
    /// Untrained network.
    #[new]
    #[pyo3(signature = (modulation="qpsk", n_users=8, n_layers=8))]
    fn new(modulation: &str, n_users: usize, n_layers: usize) -> PyResult<Self> {
        let inner = NetworkParams::init(parse(modulation)?, n_users, n_layers).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: NetworkParams::load(path).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_model_str(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: NetworkParams::from_model_str(text).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    fn to_model_string(&self) -> PyResult<String> {
        self.inner.to_model_string().map_err(py_err)
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.n_layers()
    }

    #[getter]
    fn n_users(&self) -> usize {
        self.inner.n_users
    }

    #[getter]
    fn modulation(&self) -> String {
        self.inner.modulation.to_string()
    }

    #[getter]
    fn alpha1(&self) -> Vec<f64> {
        self.inner.layers.iter().map(|l| l.alpha1).collect()
    }

    #[getter]
    fn alpha2(&self) -> Vec<f64> {
        self.inner.layers.iter().map(|l| l.alpha2).collect()
    }

    /// Flattened trainable parameters (every layer after the first).
    fn trainable_vector(&self) -> Vec<f64> {
        self.inner.trainable_vector()
    }

    fn set_trainable(&mut self, values: Vec<f64>) -> PyResult<()> {
        self.inner.set_trainable(&values).map_err(py_err)
    }

    /// Hard-decision output for one system.
    fn detect(&self, system: &PySystem) -> PyResult<Vec<f64>> {
        let c = Constellation::new(self.inner.modulation);
        let x = unfolded::detect(&system.inner, &c, &self.inner).map_err(py_err)?;
        Ok(x.as_slice().to_vec())
    }

    /// Final pre-quantization output and the gradient of `sum(w * output)`
    /// with respect to the trainable parameters.
    fn forward_with_gradient(
        &self,
        system: &PySystem,
        w: Vec<f64>,
    ) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let c = Constellation::new(self.inner.modulation);
        let (out, tape) = unfolded::forward_soft(&system.inner, &c, &self.inner).map_err(py_err)?;
        let grads =
            unfolded::param_gradients(&tape, &self.inner, &DVector::from_vec(w)).map_err(py_err)?;
        Ok((out.as_slice().to_vec(), grads.trainable_vector()))
    }

    fn __repr__(&self) -> String {
        format!(
            "Network(modulation={:?}, n_users={}, n_layers={})",
            self.inner.modulation.to_string(),
            self.inner.n_users,
            self.inner.n_layers()
        )
    }
}

/// One Monte Carlo measurement.
#[pyclass(name = "BerRecord", module = "pymimo", get_all, skip_from_py_object)]
struct PyBerRecord {
    detector: String,
    snr_db: f64,
    n_frames: u64,
    n_bits: u64,
    n_bit_errors: u64,
    ber: f64,
    seed: u64,
}

#[pymethods]
impl PyBerRecord {
    fn __repr__(&self) -> String {
        format!(
            "BerRecord(detector={:?}, snr_db={}, n_bits={}, n_bit_errors={}, ber={})",
            self.detector, self.snr_db, self.n_bits, self.n_bit_errors, self.ber
        )
    }
}

impl From<bench::BerRecord> for PyBerRecord {
    fn from(r: bench::BerRecord) -> Self {
        Self {
            detector: r.detector.as_str().to_string(),
            snr_db: r.snr_db,
            n_frames: r.n_frames,
            n_bits: r.n_bits,
            n_bit_errors: r.n_bit_errors,
            ber: r.ber,
            seed: r.seed,
        }
    }
}

#[pyfunction]
#[pyo3(signature = (values, modulation="qpsk"))]
fn quantize(values: Vec<f64>, modulation: &str) -> PyResult<Vec<f64>> {
    Ok(constellation(modulation)?.quantize_slice(&values))
}

/// Bits to real-domain symbols `[Re; Im]`.
#[pyfunction]
#[pyo3(signature = (bits, modulation="qpsk"))]
fn modulate(bits: Vec<u8>, modulation: &str) -> PyResult<Vec<f64>> {
    let frame = constellation(modulation)?.modulate(&bits).map_err(py_err)?;
    Ok(frame.x.as_slice().to_vec())
}

#[pyfunction]
#[pyo3(signature = (x, modulation="qpsk"))]
fn demodulate(x: Vec<f64>, modulation: &str) -> PyResult<Vec<u32>> {
    let bits = constellation(modulation)?.demodulate(&x).map_err(py_err)?;
    Ok(bit_list(&bits))
}

#[pyfunction]
#[pyo3(signature = (system, modulation="qpsk"))]
fn zf_detect(system: &PySystem, modulation: &str) -> PyResult<Vec<f64>> {
    let x = baseline::zf_detect(&system.inner, &constellation(modulation)?).map_err(py_err)?;
    Ok(x.as_slice().to_vec())
}

#[pyfunction]
#[pyo3(signature = (system, modulation="qpsk"))]
fn lmmse_detect(system: &PySystem, modulation: &str) -> PyResult<Vec<f64>> {
    let x = baseline::lmmse_detect(&system.inner, &constellation(modulation)?).map_err(py_err)?;
    Ok(x.as_slice().to_vec())
}

#[pyfunction]
#[pyo3(signature = (system, modulation="qpsk", n_iters=8))]
fn iterative_detect(system: &PySystem, modulation: &str, n_iters: usize) -> PyResult<Vec<f64>> {
    let x = baseline::iterative_detect(&system.inner, &constellation(modulation)?, n_iters)
        .map_err(py_err)?;
    Ok(x.as_slice().to_vec())
}

/// Multiplication count; `detector` is one of `lmmse`, `detnet`,
/// `iterative`, `proposed`.
#[pyfunction]
fn flops(detector: &str, k: u64, l: u64) -> PyResult<u64> {
    let d = match detector.to_ascii_lowercase().as_str() {
        "lmmse" => FlopDetector::Lmmse,
        "detnet" => FlopDetector::DetNet,
        "iterative" => FlopDetector::Iterative,
        "proposed" => FlopDetector::Proposed,
        other => return Err(PyValueError::new_err(format!("unknown detector `{other}`"))),
    };
    Ok(bench::flops(d, k, l))
}

/// Train a network. Returns `(network, per-epoch mean losses)`.
#[pyfunction]
#[pyo3(signature = (
    n_antennas=128, n_users=8, n_layers=8, modulation="qpsk", snr_range_db=(-1.0, 21.0),
    lr0=1e-4, batch_size=5000, n_train=20000, n_epochs=20, seed=0, snr_convention="receive"
))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    n_antennas: usize,
    n_users: usize,
    n_layers: usize,
    modulation: &str,
    snr_range_db: (f64, f64),
    lr0: f64,
    batch_size: usize,
    n_train: usize,
    n_epochs: usize,
    seed: u64,
    snr_convention: &str,
) -> PyResult<(PyNetwork, Vec<f64>)> {
    let cfg = TrainConfig {
        n_antennas,
        n_users,
        n_layers,
        modulation: parse(modulation)?,
        snr_range_db: [snr_range_db.0, snr_range_db.1],
        snr_convention: parse(snr_convention)?,
        lr0,
        batch_size,
        n_train,
        n_epochs,
        seed,
    };
    let outcome = py.detach(|| training::train(&cfg)).map_err(py_err)?;
    let losses = outcome.losses();
    Ok((
        PyNetwork {
            inner: outcome.params,
        },
        losses,
    ))
}

/// BER sweep over the cross product of `snr_db` and `detectors`.
#[pyfunction]
#[pyo3(signature = (
    snr_db, seed, n_frames=1000, detectors=None, network=None, n_antennas=128, n_users=8,
    modulation="qpsk", n_layers=8, noiseless=false, snr_convention="receive"
))]
#[allow(clippy::too_many_arguments)]
fn run_sweep(
    py: Python<'_>,
    snr_db: Vec<f64>,
    seed: u64,
    n_frames: u64,
    detectors: Option<Vec<String>>,
    network: Option<PyNetwork>,
    n_antennas: usize,
    n_users: usize,
    modulation: &str,
    n_layers: usize,
    noiseless: bool,
    snr_convention: &str,
) -> PyResult<Vec<PyBerRecord>> {
    let cfg = SweepConfig {
        n_antennas,
        n_users,
        modulation: parse(modulation)?,
        n_layers,
        snr_convention: parse(snr_convention)?,
        noiseless,
    };
    let detectors: Vec<Detector> = match detectors {
        Some(names) => names.iter().map(|n| parse(n)).collect::<PyResult<_>>()?,
        None => Detector::ALL
            .into_iter()
            .filter(|d| network.is_some() || *d != Detector::Proposed)
            .collect(),
    };
    let params = network.map(|n| n.inner);
    let records = py
        .detach(|| bench::run_sweep(&cfg, &detectors, &snr_db, n_frames, seed, params.as_ref()))
        .map_err(py_err)?;
    Ok(records.into_iter().map(PyBerRecord::from).collect())
}

#[pymodule]
fn pymimo(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySystem>()?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyBerRecord>()?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(modulate, m)?)?;
    m.add_function(wrap_pyfunction!(demodulate, m)?)?;
    m.add_function(wrap_pyfunction!(zf_detect, m)?)?;
    m.add_function(wrap_pyfunction!(lmmse_detect, m)?)?;
    m.add_function(wrap_pyfunction!(iterative_detect, m)?)?;
    m.add_function(wrap_pyfunction!(flops, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_sweep, m)?)?;
    Ok(())
}
