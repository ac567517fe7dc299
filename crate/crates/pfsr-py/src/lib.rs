//! Python bindings for the federated sequential-recommendation simulator:
//! dataset construction, the two sequence kernels, the gradient check, and
//! the full training loop.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use pfsr_core::data::{self, InteractionDataset, PartitionStrategy, SyntheticConfig};
use pfsr_core::error::Error;
use pfsr_core::eval::EvalMode;
use pfsr_core::fed::{self, FedConfig, TrainContext, TrainOptions};
use pfsr_core::gradcheck::{run_gradcheck, GradcheckSettings};
use pfsr_core::losses::LossConfig;
use pfsr_core::model::{Model, ModelConfig};
use pfsr_core::tensor::{self, Tensor};
use pfsr_core::vrm::VrmConfig;

fn to_py_err(err: Error) -> PyErr {
    match err {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix_from_rows(name: &str, rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let r = rows.len();
    let c = rows.first().map(Vec::len).unwrap_or(0);
    if r == 0 || c == 0 {
        return Err(PyValueError::new_err(format!("{name}: empty matrix")));
    }
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err(format!("{name}: ragged rows")));
    }
    let data: Vec<f64> = rows.into_iter().flatten().collect();
    Tensor::matrix(r, c, data).map_err(to_py_err)
}

fn matrix_to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (r, c) = t.dims2().expect("matrix");
    (0..r)
        .map(|i| t.data()[i * c..(i + 1) * c].to_vec())
        .collect()
}

/// A processed interaction corpus with dense 1-based user and item ids.
#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: InteractionDataset,
}

#[pymethods]
impl PyDataset {
    #[getter]
    fn num_users(&self) -> u32 {
        self.inner.num_users
    }

    #[getter]
    fn num_items(&self) -> u32 {
        self.inner.num_items
    }

    #[getter]
    fn num_interactions(&self) -> usize {
        self.inner.num_interactions()
    }

    /// Time-ordered item sequence of one user.
    fn sequence(&self, user: u32) -> PyResult<Vec<u32>> {
        if user == 0 || user > self.inner.num_users {
            return Err(PyValueError::new_err(format!("no such user {user}")));
        }
        Ok(self.inner.sequence(user).to_vec())
    }

    /// Write the binary dataset cache.
    fn save_cache(&self, path: PathBuf) -> PyResult<()> {
        data::save_cache(&path, &self.inner).map_err(to_py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(users={}, items={}, interactions={})",
            self.inner.num_users,
            self.inner.num_items,
            self.inner.num_interactions()
        )
    }
}

/// Per-client first-order Markov corpus; deterministic in the seed.
#[pyfunction]
#[pyo3(signature = (num_users, num_items, num_clients, len_min, len_max, seed=42))]
fn make_synthetic(
    num_users: u32,
    num_items: u32,
    num_clients: usize,
    len_min: usize,
    len_max: usize,
    seed: u64,
) -> PyResult<PyDataset> {
    let inner = data::make_synthetic(&SyntheticConfig {
        num_users,
        num_items,
        num_clients,
        len_min,
        len_max,
        seed,
    })
    .map_err(to_py_err)?;
    Ok(PyDataset { inner })
}

/// Ingest a `user<TAB>item<TAB>timestamp` file, k-core filter, and reindex.
#[pyfunction]
#[pyo3(signature = (path, k_core=5, max_seq_len=50))]
fn load_tsv(path: PathBuf, k_core: u32, max_seq_len: usize) -> PyResult<PyDataset> {
    let (events, _warnings) = data::load_interactions(&path).map_err(to_py_err)?;
    let inner = data::build_dataset(events, k_core, max_seq_len).map_err(to_py_err)?;
    Ok(PyDataset { inner })
}

/// Read a dataset cache written by `Dataset.save_cache` or `pfsr prep`.
#[pyfunction]
fn load_cache(path: PathBuf) -> PyResult<PyDataset> {
    Ok(PyDataset {
        inner: data::load_cache(&path).map_err(to_py_err)?,
    })
}

/// Selective-scan recurrence. `u`, `delta` are LxD; `a` is DxS; `b`, `c` are
/// LxS; `skip` has length D. Returns the LxD output.
#[pyfunction]
fn selective_scan(
    u: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    skip: Vec<f64>,
) -> PyResult<Vec<Vec<f64>>> {
    let u = matrix_from_rows("u", u)?;
    let delta = matrix_from_rows("delta", delta)?;
    let a = matrix_from_rows("a", a)?;
    let b = matrix_from_rows("b", b)?;
    let c = matrix_from_rows("c", c)?;
    let skip = Tensor::from_vec(skip);
    let y = tensor::selective_scan(&u, &delta, &a, &b, &c, &skip).map_err(to_py_err)?;
    Ok(matrix_to_rows(&y))
}

/// Causal depthwise convolution. `x` is LxD, `w` is DxK (tap 0 at the
/// current position); positions before the start read as zero.
#[pyfunction]
fn causal_depthwise_conv(x: Vec<Vec<f64>>, w: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let x = matrix_from_rows("x", x)?;
    let w = matrix_from_rows("w", w)?;
    let y = tensor::causal_depthwise_conv(&x, &w).map_err(to_py_err)?;
    Ok(matrix_to_rows(&y))
}

/// Finite-difference check of the analytic gradients on a small random
/// model. Returns the worst relative error per parameter group.
#[pyfunction]
#[pyo3(signature = (embed_dim=8, state_size=4, conv_kernel=4, expansion=2, vocab=20, seq_len=6, seed=42))]
fn gradcheck(
    embed_dim: usize,
    state_size: usize,
    conv_kernel: usize,
    expansion: usize,
    vocab: u32,
    seq_len: usize,
    seed: u64,
) -> PyResult<HashMap<String, f64>> {
    let report = run_gradcheck(&GradcheckSettings {
        model: ModelConfig {
            embed_dim,
            state_size,
            conv_kernel,
            expansion,
            num_blocks: 1,
            dropout: 0.0,
            max_seq_len: seq_len.max(3),
            vocab_size: vocab,
        },
        seq_len,
        seed,
        corrupt: false,
    })
    .map_err(to_py_err)?;
    Ok(report
        .groups
        .into_iter()
        .map(|g| (g.group, g.max_rel_err))
        .collect())
}

/// Run federated training in memory and return the metric rows.
#[pyfunction]
#[pyo3(signature = (
    dataset,
    clients=8,
    rounds=10,
    local_epochs=1,
    embed_dim=128,
    state_size=16,
    conv_kernel=4,
    expansion=4,
    num_blocks=1,
    dropout=0.1,
    max_seq_len=50,
    lambda_=0.5,
    fisher_batches=1,
    gamma1=0.05,
    gamma2=0.1,
    client_fraction=1.0,
    learning_rate=1e-2,
    batch_size=512,
    partition="uniform",
    eval_interval=0,
    seed=42,
))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    dataset: &PyDataset,
    clients: usize,
    rounds: u64,
    local_epochs: usize,
    embed_dim: usize,
    state_size: usize,
    conv_kernel: usize,
    expansion: usize,
    num_blocks: usize,
    dropout: f64,
    max_seq_len: usize,
    lambda_: f64,
    fisher_batches: usize,
    gamma1: f64,
    gamma2: f64,
    client_fraction: f64,
    learning_rate: f64,
    batch_size: usize,
    partition: &str,
    eval_interval: usize,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    use pyo3::types::{PyDict, PyList};

    let strategy: PartitionStrategy = partition.parse().map_err(to_py_err)?;
    let split = data::leave_one_out_split(&dataset.inner).map_err(to_py_err)?;
    let groups =
        data::partition_clients(&dataset.inner, clients, strategy, seed).map_err(to_py_err)?;
    let model = Model::new(ModelConfig {
        embed_dim,
        state_size,
        conv_kernel,
        expansion,
        num_blocks,
        dropout,
        max_seq_len,
        vocab_size: dataset.inner.num_items,
    })
    .map_err(to_py_err)?;
    let fed_cfg = FedConfig {
        num_clients: clients,
        rounds,
        local_epochs,
        client_fraction,
        learning_rate,
        batch_size,
    };
    let vrm_cfg = VrmConfig {
        lambda: lambda_,
        fisher_batches,
    };
    let loss_cfg = LossConfig { gamma1, gamma2 };
    let ctx = TrainContext {
        model: &model,
        split: &split,
        fed: &fed_cfg,
        vrm: &vrm_cfg,
        loss: &loss_cfg,
    };
    let opts = TrainOptions {
        eval_interval,
        checkpoint_interval: 0,
        checkpoint_dir: None,
    };
    let output = py
        .detach(|| fed::run_training(&ctx, groups, seed, &opts))
        .map_err(to_py_err)?;

    let metrics = PyList::empty(py);
    for row in &output.metrics {
        let d = PyDict::new(py);
        d.set_item("round", row.round)?;
        d.set_item("scope", row.scope.to_string())?;
        d.set_item("mode", row.mode.to_string())?;
        for (i, k) in row.report.ks.iter().enumerate() {
            d.set_item(format!("hr{k}"), row.report.hr[i])?;
            d.set_item(format!("ndcg{k}"), row.report.ndcg[i])?;
        }
        d.set_item("users", row.report.users)?;
        d.set_item("mean_loss", row.report.mean_loss)?;
        metrics.append(d)?;
    }
    let round_log = PyList::empty(py);
    for report in &output.rounds {
        for c in &report.clients {
            let d = PyDict::new(py);
            d.set_item("round", report.round)?;
            d.set_item("client", c.client_id)?;
            d.set_item("train_loss", c.train_loss)?;
            d.set_item("frac_p1", c.frac_p1)?;
            d.set_item("samples", c.samples)?;
            round_log.append(d)?;
        }
    }

    let result = PyDict::new(py);
    result.set_item("rounds", output.server.round)?;
    result.set_item("metrics", metrics)?;
    result.set_item("round_log", round_log)?;
    Ok(result.into_any().unbind())
}

/// Popularity-baseline metrics on a dataset, for comparison with `train`.
#[pyfunction]
#[pyo3(signature = (dataset, mode="test"))]
fn popularity_baseline(dataset: &PyDataset, mode: &str) -> PyResult<HashMap<String, f64>> {
    let split = data::leave_one_out_split(&dataset.inner).map_err(to_py_err)?;
    let mode = match mode {
        "valid" => EvalMode::Validation,
        "test" => EvalMode::Test,
        other => {
            return Err(PyValueError::new_err(format!(
                "mode must be valid|test, got {other:?}"
            )))
        }
    };
    let users: Vec<u32> = dataset.inner.user_ids().collect();
    let report =
        pfsr_core::eval::evaluate_popularity(&split, &users, mode, dataset.inner.num_items)
            .map_err(to_py_err)?;
    let mut out = HashMap::new();
    for (i, k) in report.ks.iter().enumerate() {
        out.insert(format!("hr{k}"), report.hr[i]);
        out.insert(format!("ndcg{k}"), report.ndcg[i]);
    }
    out.insert("users".into(), report.users as f64);
    Ok(out)
}

#[pymodule]
fn pfsr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(make_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(load_tsv, m)?)?;
    m.add_function(wrap_pyfunction!(load_cache, m)?)?;
    m.add_function(wrap_pyfunction!(selective_scan, m)?)?;
    m.add_function(wrap_pyfunction!(causal_depthwise_conv, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(popularity_baseline, m)?)?;
    Ok(())
}
