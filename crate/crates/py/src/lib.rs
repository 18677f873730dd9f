//! Python bindings: tensors, frequency encoders, kernel generators, the
//! dynamic convolution and the command-line runner.

use std::collections::HashMap;

use clap::Parser;
use insta_core::cli::{execute, Cli};
use insta_core::generator::{self, Encoder, GeneratorParams};
use insta_core::insta::{self as core_insta, ContextParams, DynamicKernel, KernelKind};
use insta_core::msa::{self, FrequencySelection};
use insta_core::{gradsuite, ops, BnMode, Error};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyOSError::new_err(e.to_string()),
        Error::Numeric { .. } | Error::Diverged { .. } => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

type Res<T> = PyResult<T>;

/// Dense row-major `f64` tensor.
#[pyclass(name = "Tensor", module = "insta", from_py_object)]
#[derive(Clone)]
pub struct PyTensor(insta_core::Tensor);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> Res<Self> {
        insta_core::Tensor::new(shape, data).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        Self(insta_core::Tensor::zeros(&shape))
    }

    /// Entries drawn uniformly from `[-bound, bound)`.
    #[staticmethod]
    #[pyo3(signature = (shape, bound=1.0, seed=0))]
    fn uniform(shape: Vec<usize>, bound: f64, seed: u64) -> Self {
        Self(insta_core::Tensor::uniform(&shape, bound, &mut ChaCha8Rng::seed_from_u64(seed)))
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn at(&self, index: Vec<usize>) -> Res<f64> {
        let ok = index.len() == self.0.rank() && index.iter().zip(self.0.shape()).all(|(i, n)| i < n);
        if !ok {
            return Err(PyValueError::new_err(format!("index {index:?} out of bounds for {:?}", self.0.shape())));
        }
        Ok(self.0.at(&index))
    }

    fn reshape(&self, shape: Vec<usize>) -> Res<Self> {
        self.0.reshape(&shape).map(Self).map_err(to_py)
    }

    fn max_abs_diff(&self, other: &PyTensor) -> Res<f64> {
        self.0.expect_same_shape(&other.0).map_err(to_py)?;
        Ok(self.0.max_abs_diff(&other.0))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __eq__(&self, other: &PyTensor) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

fn kernel(t: &PyTensor) -> Res<DynamicKernel> {
    DynamicKernel::new(t.0.clone(), KernelKind::Insta).map_err(to_py)
}

fn selection(pairs: Vec<(usize, usize)>) -> Res<FrequencySelection> {
    FrequencySelection::new(pairs.into_iter().map(|(u, v)| [u, v]).collect()).map_err(to_py)
}

/// `c×h×w → c×h×w×k×k` sliding windows with zero padding.
#[pyfunction]
fn unfold(s: &PyTensor, k: usize) -> Res<PyTensor> {
    ops::unfold(&s.0, k).map(PyTensor).map_err(to_py)
}

#[pyfunction]
fn dct_basis(h: usize, w: usize, u: usize, v: usize) -> Res<PyTensor> {
    msa::dct_basis(h, w, u, v).map(PyTensor).map_err(to_py)
}

/// Default frequency pairs for a `c×h×w` map.
#[pyfunction]
fn frequency_selection(c: usize, h: usize, w: usize) -> Res<Vec<(usize, usize)>> {
    let sel = FrequencySelection::for_shape(c, h, w).map_err(to_py)?;
    Ok(sel.pairs().iter().map(|p| (p[0], p[1])).collect())
}

#[pyfunction]
fn msa_encode(s: &PyTensor, pairs: Vec<(usize, usize)>) -> Res<PyTensor> {
    msa::msa_encode(&s.0, &selection(pairs)?).map(PyTensor).map_err(to_py)
}

#[pyfunction]
fn gap_encode(s: &PyTensor) -> Res<PyTensor> {
    msa::gap_encode(&s.0).map(PyTensor).map_err(to_py)
}

/// `F + mean_over_taps(unfold(F) ⊙ G)`.
#[pyfunction]
fn adapt(f: &PyTensor, g: &PyTensor) -> Res<PyTensor> {
    core_insta::adapt(&f.0, &kernel(g)?).map(PyTensor).map_err(to_py)
}

/// Sliding-window reference for the convolution term of `adapt`.
#[pyfunction]
fn dynamic_conv_oracle(f: &PyTensor, g: &PyTensor) -> Res<PyTensor> {
    core_insta::dynamic_conv_oracle(&f.0, &kernel(g)?).map(PyTensor).map_err(to_py)
}

/// Hadamard fusion of an instance kernel with a task kernel.
#[pyfunction]
fn fuse(instance: &PyTensor, task: &PyTensor) -> Res<PyTensor> {
    let inst = DynamicKernel::new(instance.0.clone(), KernelKind::Instance).map_err(to_py)?;
    let task = DynamicKernel::new(task.0.clone(), KernelKind::Task).map_err(to_py)?;
    core_insta::fuse_insta(&inst, &task).map(|k| PyTensor(k.values().clone())).map_err(to_py)
}

#[pyfunction]
fn param_count_report(c: u64, c_out: u64, h: u64, w: u64, k: u64) -> HashMap<&'static str, u64> {
    let r = generator::param_count_report(c, c_out, h, w, k);
    HashMap::from([("dynamic", r.dynamic), ("standard", r.standard)])
}

/// Finite-difference check of every op and module; `(name, max_rel_err)` pairs.
#[pyfunction]
#[pyo3(signature = (seed=0, eps=1e-6))]
fn gradcheck_suite(seed: u64, eps: f64) -> Res<Vec<(String, f64)>> {
    let entries = gradsuite::run_suite(seed, eps).map_err(to_py)?;
    Ok(entries.into_iter().map(|e| (e.name, e.max_rel_err)).collect())
}

/// Runs an `insta` command line such as `["train", "--episodes", "10"]` and
/// returns the parsed `result.json` document.
#[pyfunction]
#[pyo3(signature = (args, env=None))]
fn run_cli(py: Python<'_>, args: Vec<String>, env: Option<HashMap<String, String>>) -> Res<Py<PyAny>> {
    let argv = std::iter::once("insta".to_string()).chain(args);
    let cli = Cli::try_parse_from(argv).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let out = py.detach(|| execute(&cli.command, env.unwrap_or_default())).map_err(to_py)?;
    if let Some(msg) = out.numeric_failure {
        return Err(PyArithmeticError::new_err(msg));
    }
    let text = serde_json::to_string(&out.document).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Channel/spatial kernel generator with its own batch-norm state.
#[pyclass(name = "Generator", module = "insta")]
pub struct PyGenerator(GeneratorParams);

#[pymethods]
impl PyGenerator {
    /// `encoder` is `"msa"` (default frequencies), `"gap"`, or a list of
    /// `(u, v)` frequency pairs.
    #[new]
    #[pyo3(signature = (c, h, w, k=3, sigma=0.25, encoder=None, seed=0))]
    fn new(c: usize, h: usize, w: usize, k: usize, sigma: f64, encoder: Option<&Bound<'_, PyAny>>, seed: u64) -> Res<Self> {
        let enc = match encoder {
            None => Encoder::Msa(FrequencySelection::for_shape(c, h, w).map_err(to_py)?),
            Some(obj) => match obj.extract::<String>() {
                Ok(s) if s == "gap" => Encoder::Gap,
                Ok(s) if s == "msa" => Encoder::Msa(FrequencySelection::for_shape(c, h, w).map_err(to_py)?),
                Ok(s) => return Err(PyValueError::new_err(format!("unknown encoder `{s}`"))),
                Err(_) => Encoder::Msa(selection(obj.extract()?)?),
            },
        };
        GeneratorParams::init(c, sigma, k, enc, seed).map(Self).map_err(to_py)
    }

    /// Switches batch norm between batch statistics (`True`) and running statistics.
    fn train(&mut self, on: bool) {
        self.0.set_mode(if on { BnMode::Train } else { BnMode::Eval });
    }

    fn channel_kernel(&mut self, s: &PyTensor) -> Res<PyTensor> {
        generator::channel_kernel(&s.0, &mut self.0).map(PyTensor).map_err(to_py)
    }

    fn spatial_kernel(&mut self, s: &PyTensor) -> Res<PyTensor> {
        generator::spatial_kernel(&s.0, &mut self.0).map(PyTensor).map_err(to_py)
    }

    fn dynamic_kernel(&mut self, s: &PyTensor) -> Res<PyTensor> {
        generator::dynamic_kernel(&s.0, &mut self.0).map(PyTensor).map_err(to_py)
    }
}

/// Permutation-invariant summary of a support set.
#[pyclass(name = "Context", module = "insta")]
pub struct PyContext(ContextParams);

#[pymethods]
impl PyContext {
    #[new]
    #[pyo3(signature = (c, seed=0))]
    fn new(c: usize, seed: u64) -> Self {
        Self(ContextParams::init(c, seed))
    }

    fn summary(&self, supports: Vec<PyTensor>) -> Res<PyTensor> {
        let s: Vec<_> = supports.into_iter().map(|t| t.0).collect();
        core_insta::context_summary(&s, &self.0).map(PyTensor).map_err(to_py)
    }
}

#[pymodule]
fn insta(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyGenerator>()?;
    m.add_class::<PyContext>()?;
    for f in [
        wrap_pyfunction!(unfold, m)?,
        wrap_pyfunction!(dct_basis, m)?,
        wrap_pyfunction!(frequency_selection, m)?,
        wrap_pyfunction!(msa_encode, m)?,
        wrap_pyfunction!(gap_encode, m)?,
        wrap_pyfunction!(adapt, m)?,
        wrap_pyfunction!(dynamic_conv_oracle, m)?,
        wrap_pyfunction!(fuse, m)?,
        wrap_pyfunction!(param_count_report, m)?,
        wrap_pyfunction!(gradcheck_suite, m)?,
        wrap_pyfunction!(run_cli, m)?,
    ] {
        m.add_function(f)?;
    }
    Ok(())
}
