//! Python bindings: `import act_py`.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use act_core::act::{self, TrainTrace};
use act_core::augmentation::PairBatch;
use act_core::config::ExperimentConfig;
use act_core::dataset::Dataset as CoreDataset;
use act_core::diagnostics::{self, CertificateInputs, DiagnosticsReport};
use act_core::downstream;
use act_core::encoder::EncoderParams;
use act_core::linalg::Matrix;
use act_core::synthgen;

create_exception!(act_py, ActError, PyException, "Raised for any error reported by the core library.");

fn err(e: act_core::ActError) -> PyErr {
    ActError::new_err(e.to_string())
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// Parsed and validated experiment configuration.
#[pyclass(name = "Config", module = "act_py", from_py_object)]
#[derive(Clone)]
struct Config {
    inner: ExperimentConfig,
}

#[pymethods]
impl Config {
    /// Parses `key = value` text.
    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(Self { inner: text.parse().map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: ExperimentConfig::load(&path).map_err(err)? })
    }

    /// All defaults with the given seed.
    #[staticmethod]
    fn default(seed: u64) -> Self {
        Self { inner: ExperimentConfig::with_seed(seed) }
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.train.epochs
    }

    #[getter]
    fn lambda_(&self) -> f64 {
        self.inner.train.lambda
    }

    fn __repr__(&self) -> String {
        format!("Config(seed={}, epochs={})", self.inner.seed, self.inner.train.epochs)
    }
}

/// Labelled or unlabelled points. Labels are 0-based.
#[pyclass(name = "Dataset", module = "act_py", from_py_object)]
#[derive(Clone)]
struct Dataset {
    inner: CoreDataset,
}

#[pymethods]
impl Dataset {
    #[new]
    #[pyo3(signature = (points, num_classes, labels=None))]
    fn new(points: Vec<Vec<f64>>, num_classes: usize, labels: Option<Vec<usize>>) -> PyResult<Self> {
        let dim = points.first().map_or(0, Vec::len);
        Ok(Self { inner: CoreDataset::new(dim, num_classes, points, labels).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: CoreDataset::load(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn points(&self) -> Vec<Vec<f64>> {
        self.inner.points.clone()
    }

    #[getter]
    fn labels(&self) -> Option<Vec<usize>> {
        self.inner.labels.clone()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Norm-constrained ReLU encoder.
#[pyclass(name = "Encoder", module = "act_py", from_py_object)]
#[derive(Clone)]
struct Encoder {
    inner: EncoderParams,
}

#[pymethods]
impl Encoder {
    /// Fresh encoder with the dimensions and seed of `config`.
    #[staticmethod]
    fn init(config: &Config) -> PyResult<Self> {
        Ok(Self { inner: config.inner.init_encoder().map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: EncoderParams::load(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[pyo3(signature = (x, project=true))]
    fn forward(&self, x: Vec<f64>, project: bool) -> PyResult<Vec<f64>> {
        if x.len() != self.inner.input_dim() {
            return Err(ActError::new_err(format!("expected {} inputs, got {}", self.inner.input_dim(), x.len())));
        }
        Ok(self.inner.forward(&x, project))
    }

    #[pyo3(signature = (points, project=true))]
    fn encode(&self, points: Vec<Vec<f64>>, project: bool) -> PyResult<Vec<Vec<f64>>> {
        let xs = Matrix::from_rows(&points).map_err(err)?;
        if !points.is_empty() && xs.cols() != self.inner.input_dim() {
            return Err(ActError::new_err(format!("expected {} inputs, got {}", self.inner.input_dim(), xs.cols())));
        }
        Ok(rows(&self.inner.forward_batch(&xs, project)))
    }

    fn kappa(&self) -> f64 {
        self.inner.kappa()
    }

    /// Copy rescaled so that `kappa() <= budget`.
    fn project_kappa(&self, budget: f64) -> PyResult<Self> {
        let with_budget = self.inner.clone().with_kappa_budget(budget).map_err(err)?;
        Ok(Self { inner: with_budget.project_kappa() })
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

fn pair_batch(view1: Vec<Vec<f64>>, view2: Vec<Vec<f64>>) -> PyResult<PairBatch> {
    if view1.len() != view2.len() {
        return Err(ActError::new_err(format!("{} first views but {} second views", view1.len(), view2.len())));
    }
    let n = view1.len();
    PairBatch::new(view1.into_iter().zip(view2).collect(), (0..n).collect()).map_err(err)
}

/// `(source, target, test)` synthetic datasets.
#[pyfunction]
fn generate(config: &Config) -> PyResult<(Dataset, Dataset, Dataset)> {
    let s = &config.inner.synthetic;
    let source = synthgen::generate_source(s).map_err(err)?;
    let (target, test) = synthgen::generate_target(s).map_err(err)?;
    Ok((Dataset { inner: source }, Dataset { inner: target }, Dataset { inner: test }))
}

fn trace_dicts<'py>(py: Python<'py>, trace: &TrainTrace) -> PyResult<Vec<Bound<'py, PyDict>>> {
    trace
        .records
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("epoch", r.epoch)?;
            d.set_item("loss", r.loss)?;
            d.set_item("l_align", r.l_align)?;
            d.set_item("l_div", r.l_div)?;
            d.set_item("gap_fro", r.gap_fro)?;
            d.set_item("kappa", r.kappa)?;
            Ok(d)
        })
        .collect()
}

/// Trains from `init` (or a fresh encoder) and returns `(encoder, trace)`.
#[pyfunction]
#[pyo3(signature = (config, source, init=None))]
fn pretrain<'py>(
    py: Python<'py>,
    config: &Config,
    source: &Dataset,
    init: Option<&Encoder>,
) -> PyResult<(Encoder, Vec<Bound<'py, PyDict>>)> {
    let cfg = &config.inner;
    let aug = cfg.augmentation_set().map_err(err)?;
    let init = match init {
        Some(e) => e.inner.clone(),
        None => cfg.init_encoder().map_err(err)?,
    };
    let points = &source.inner.points;
    let (params, trace) = py.detach(|| act::train(points, &aug, &cfg.train, &init)).map_err(err)?;
    Ok((Encoder { inner: params }, trace_dicts(py, &trace)?))
}

/// Probe and k-NN error rows as dicts.
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    config: &Config,
    encoder: &Encoder,
    target: &Dataset,
    test: &Dataset,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = &config.inner;
    let aug = cfg.augmentation_set().map_err(err)?;
    let mut rng = cfg.evaluation_rng();
    let rows = downstream::evaluate(&encoder.inner, &target.inner, &test.inner, &aug, cfg.knn_k, &mut rng).map_err(err)?;
    rows.iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("protocol", r.protocol.to_string())?;
            d.set_item("k", r.k)?;
            d.set_item("n_per_class", r.n_per_class.clone())?;
            d.set_item("error", r.error)?;
            Ok(d)
        })
        .collect()
}

fn report_dict<'py>(py: Python<'py>, r: &DiagnosticsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("epsilon", r.epsilon)?;
    d.set_item("R_s", r.r_s)?;
    d.set_item("R_t", r.r_t)?;
    d.set_item("centers_s", rows(&r.centers_s))?;
    d.set_item("centers_t", rows(&r.centers_t))?;
    d.set_item("max_center_alignment", r.max_center_alignment)?;
    d.set_item("sigma_s", r.sigma_s)?;
    d.set_item("delta_s", r.delta_s)?;
    d.set_item("sigma_t", r.sigma_t)?;
    d.set_item("delta_t", r.delta_t)?;
    d.set_item("kappa", r.kappa)?;
    d.set_item("p_t_min", r.p_t_min)?;
    d.set_item("theta", r.theta)?;
    d.set_item("gamma_min", r.gamma_min)?;
    d.set_item("delta_mu_hat", r.delta_mu_hat)?;
    d.set_item("theta_clamped", r.theta_clamped)?;
    d.set_item("theta_vacuous", r.theta_vacuous)?;
    d.set_item("l_align", r.l_align)?;
    d.set_item("l_div", r.l_div)?;
    d.set_item("phi", r.phi)?;
    d.set_item("alignment_bound_ok", r.alignment_bound_ok)?;
    d.set_item("wasserstein_per_class", r.wasserstein_per_class.clone())?;
    d.set_item("wasserstein_noise_threshold", r.wasserstein_noise_threshold)?;
    d.set_item("prior_gap_eta", r.prior_gap_eta)?;
    Ok(d)
}

/// `(report, bound_rows)`; each bound row is
/// `(epsilon, r_s, lhs, rhs, slack, phi)`.
#[pyfunction]
#[allow(clippy::type_complexity)]
fn diagnose<'py>(
    py: Python<'py>,
    config: &Config,
    encoder: &Encoder,
    source: &Dataset,
    target: &Dataset,
    test: &Dataset,
) -> PyResult<(Bound<'py, PyDict>, Vec<(f64, f64, f64, f64, f64, f64)>)> {
    let cfg = &config.inner;
    let aug = cfg.augmentation_set().map_err(err)?;
    let opts = cfg.diagnose_options();
    let (report, bound) = py
        .detach(|| diagnostics::diagnose(&encoder.inner, &source.inner, &target.inner, &test.inner, &aug, &opts))
        .map_err(err)?;
    let bound = bound.iter().map(|r| (r.epsilon, r.r_s, r.lhs, r.rhs, r.slack, r.phi)).collect();
    Ok((report_dict(py, &report)?, bound))
}

/// Cross-correlation `Ĉ` of paired views.
#[pyfunction]
#[pyo3(signature = (encoder, view1, view2, standardize=false))]
fn cross_correlation(encoder: &Encoder, view1: Vec<Vec<f64>>, view2: Vec<Vec<f64>>, standardize: bool) -> PyResult<Vec<Vec<f64>>> {
    let batch = pair_batch(view1, view2)?;
    Ok(rows(&act::cross_correlation(&encoder.inner, &batch, standardize).map_err(err)?))
}

/// `(l_align, l_div)` of paired views.
#[pyfunction]
#[pyo3(signature = (encoder, view1, view2, lambda_, standardize=false))]
fn loss_decomposition(
    encoder: &Encoder,
    view1: Vec<Vec<f64>>,
    view2: Vec<Vec<f64>>,
    lambda_: f64,
    standardize: bool,
) -> PyResult<(f64, f64)> {
    let batch = pair_batch(view1, view2)?;
    let parts = act::loss_decomposition(&encoder.inner, &batch, lambda_, standardize).map_err(err)?;
    Ok((parts.l_align, parts.l_div))
}

/// Empirical 1-Wasserstein distance between equal-size point sets.
#[pyfunction]
fn wasserstein1(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    diagnostics::wasserstein1(&a, &b).map_err(err)
}

/// `(theta, gamma_min, delta_mu_hat, clamped, vacuous)` for probe templates
/// `probe_weights` and target class centers `centers_t` (rows per class).
#[pyfunction]
#[allow(clippy::too_many_arguments)]
fn theta_certificate(
    sigma_t: f64,
    delta_t: f64,
    epsilon: f64,
    r_t: f64,
    p_t_min: f64,
    kappa: f64,
    b1: f64,
    b2: f64,
    probe_weights: Vec<Vec<f64>>,
    centers_t: Vec<Vec<f64>>,
) -> PyResult<(f64, f64, f64, bool, bool)> {
    let inputs = CertificateInputs { sigma_t, delta_t, epsilon, r_t, p_t_min, kappa, b1, b2 };
    let weights = Matrix::from_rows(&probe_weights).map_err(err)?;
    let counts = vec![1; weights.rows()];
    let probe = downstream::ProbeModel { weights, class_counts: counts };
    let centers = Matrix::from_rows(&centers_t).map_err(err)?;
    let c = diagnostics::theta_certificate(&inputs, &probe, &centers).map_err(err)?;
    Ok((c.theta, c.gamma_min, c.delta_mu_hat, c.clamped, c.vacuous))
}

#[pymodule]
fn act_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ActError", m.py().get_type::<ActError>())?;
    m.add_class::<Config>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Encoder>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(diagnose, m)?)?;
    m.add_function(wrap_pyfunction!(cross_correlation, m)?)?;
    m.add_function(wrap_pyfunction!(loss_decomposition, m)?)?;
    m.add_function(wrap_pyfunction!(wasserstein1, m)?)?;
    m.add_function(wrap_pyfunction!(theta_certificate, m)?)?;
    Ok(())
}
