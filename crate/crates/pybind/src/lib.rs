//! Python bindings for the search engine: data generation, the search /
//! retrain / score pipeline, EER scoring, and the gradient-check suite.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use spoofsearch::data::{self, Dataset, FeatureMatrix, Label};
use spoofsearch::eval::{self, ScoreRecord};
use spoofsearch::search::{self, Order, SearchConfig};
use spoofsearch::supernet::{self, ArchParams, Genotype};
use spoofsearch::tensor::gradcheck;
use spoofsearch::Tensor;

fn err(e: spoofsearch::Error) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn config(
    epochs: usize,
    lr: f64,
    arch_lr: f64,
    batch_size: usize,
    val_batch_size: Option<usize>,
    cells: usize,
    channels: usize,
    frames: usize,
    seed: u64,
    second_order: bool,
) -> SearchConfig {
    SearchConfig {
        epochs,
        lr,
        arch_lr,
        batch_size,
        val_batch_size,
        cells,
        init_channels: channels,
        seed,
        order: if second_order { Order::Second } else { Order::First },
        target_frames: frames,
        xi: None,
    }
}

/// Writes a seeded synthetic corpus (train/val/eval manifests plus feature
/// files) under `out_dir`.
#[pyfunction]
fn gen_synthetic(out_dir: PathBuf, n_per_split: usize, t: usize, f: usize, seed: u64) -> PyResult<()> {
    data::gen_synthetic(&out_dir, n_per_split, t, f, seed).map_err(err)
}

/// Loads a binary feature file; returns (frames, feature_dim, row-major values).
#[pyfunction]
fn load_feature(path: PathBuf) -> PyResult<(usize, usize, Vec<f64>)> {
    let m = data::load_feature(&path).map_err(err)?;
    Ok((m.t, m.f, m.values))
}

/// Stores a row-major matrix as a binary feature file.
#[pyfunction]
fn store_feature(path: PathBuf, t: usize, f: usize, values: Vec<f64>) -> PyResult<()> {
    let m = FeatureMatrix::new(t, f, values).map_err(err)?;
    data::store_feature(&path, &m).map_err(err)
}

/// Cyclically pads or truncates a matrix to `target` frames.
#[pyfunction]
fn fix_frames(t: usize, f: usize, values: Vec<f64>, target: usize) -> PyResult<(usize, Vec<f64>)> {
    let m = FeatureMatrix::new(t, f, values).map_err(err)?;
    let fixed = data::fix_frames(&m, target);
    Ok((fixed.t, fixed.values))
}

/// Interpolated equal error rate of two score lists; returns (eer, threshold).
#[pyfunction]
fn compute_eer(bonafide: Vec<f64>, spoof: Vec<f64>) -> PyResult<(f64, f64)> {
    let mut records = Vec::with_capacity(bonafide.len() + spoof.len());
    for (i, s) in bonafide.into_iter().enumerate() {
        records.push(ScoreRecord {
            utt_id: format!("bonafide_{i}"),
            score: s,
            label: Label::Bonafide,
        });
    }
    for (i, s) in spoof.into_iter().enumerate() {
        records.push(ScoreRecord {
            utt_id: format!("spoof_{i}"),
            score: s,
            label: Label::Spoof,
        });
    }
    eval::compute_eer(&records).map_err(err)
}

/// Parses and re-serializes a genotype, validating it.
#[pyfunction]
fn normalize_genotype(text: &str) -> PyResult<String> {
    let g = Genotype::parse(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(g.to_text())
}

/// Derives the discrete genotype from raw architecture logits
/// (two row-major [14, 9] matrices).
#[pyfunction]
fn derive_genotype(normal: Vec<f64>, reduce: Vec<f64>) -> PyResult<String> {
    let mut alpha = ArchParams::new(0);
    for (t, values) in [(&mut alpha.normal, normal), (&mut alpha.reduce, reduce)] {
        if values.len() != t.numel() {
            return Err(PyValueError::new_err(format!(
                "expected {} logits, got {}",
                t.numel(),
                values.len()
            )));
        }
        t.values_mut().copy_from_slice(&values);
    }
    Ok(supernet::derive_genotype(&alpha).map_err(err)?.to_text())
}

/// Runs the architecture search; returns (genotype_text, history_csv).
#[pyfunction]
#[pyo3(signature = (train_manifest, val_manifest, *, epochs=15, lr=1e-3, arch_lr=1e-3,
       batch_size=8, val_batch_size=None, cells=4, channels=8, frames=40, seed=0,
       second_order=false))]
#[allow(clippy::too_many_arguments)]
fn run_search(
    train_manifest: PathBuf,
    val_manifest: PathBuf,
    epochs: usize,
    lr: f64,
    arch_lr: f64,
    batch_size: usize,
    val_batch_size: Option<usize>,
    cells: usize,
    channels: usize,
    frames: usize,
    seed: u64,
    second_order: bool,
) -> PyResult<(String, String)> {
    let cfg = config(
        epochs, lr, arch_lr, batch_size, val_batch_size, cells, channels, frames, seed,
        second_order,
    );
    cfg.validate().map_err(|e| PyValueError::new_err(e.to_string()))?;
    let train = Dataset::load(&train_manifest, frames).map_err(err)?;
    let val = Dataset::load(&val_manifest, frames).map_err(err)?;
    let outcome = search::run_search(&cfg, &train, &val).map_err(err)?;
    Ok((
        outcome.genotype.to_text(),
        search::format_history_csv(&outcome.history),
    ))
}

/// Retrains a discrete model from a genotype and writes it to `model_out`.
#[pyfunction]
#[pyo3(signature = (genotype_text, train_manifest, model_out, *, epochs=3, lr=1e-3,
       batch_size=1, cells=4, channels=8, frames=40, seed=0))]
#[allow(clippy::too_many_arguments)]
fn retrain(
    genotype_text: &str,
    train_manifest: PathBuf,
    model_out: PathBuf,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    cells: usize,
    channels: usize,
    frames: usize,
    seed: u64,
) -> PyResult<Vec<(f64, f64)>> {
    let genotype =
        Genotype::parse(genotype_text).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let cfg = config(epochs, lr, lr, batch_size, None, cells, channels, frames, seed, false);
    cfg.validate().map_err(|e| PyValueError::new_err(e.to_string()))?;
    let train = Dataset::load(&train_manifest, frames).map_err(err)?;
    let (model, history) = search::retrain_discrete(&genotype, &cfg, epochs, &train).map_err(err)?;
    search::save_model(&model_out, &model).map_err(err)?;
    Ok(history)
}

/// Scores every utterance in a manifest with a stored model; returns
/// (utt_id, score, label) triples. Utterances are scored one at a time.
#[pyfunction]
fn score_manifest(model_path: PathBuf, manifest: PathBuf) -> PyResult<Vec<(String, f64, String)>> {
    let model = search::load_model(&model_path).map_err(err)?;
    let ds = Dataset::load(&manifest, model.target_frames).map_err(err)?;
    let records = eval::score_dataset(&model.net, &ds).map_err(err)?;
    Ok(records
        .into_iter()
        .map(|r| (r.utt_id, r.score, r.label.name().to_string()))
        .collect())
}

/// Scores a labeled manifest and returns its EER.
#[pyfunction]
fn eval_eer(model_path: PathBuf, manifest: PathBuf) -> PyResult<f64> {
    let model = search::load_model(&model_path).map_err(err)?;
    let ds = Dataset::load(&manifest, model.target_frames).map_err(err)?;
    let records = eval::score_dataset(&model.net, &ds).map_err(err)?;
    Ok(eval::compute_eer(&records).map_err(err)?.0)
}

/// Scores a single feature file with a stored model.
#[pyfunction]
fn score_feature(model_path: PathBuf, feature_path: PathBuf) -> PyResult<f64> {
    let model = search::load_model(&model_path).map_err(err)?;
    let m = data::load_feature(Path::new(&feature_path)).map_err(err)?;
    let fixed = data::fix_frames(&m, model.target_frames);
    eval::score_utterance(&model.net, &fixed).map_err(err)
}

/// Runs the gradient-check suites over every tensor primitive and candidate
/// operation; returns (name, max_rel_err) pairs.
#[pyfunction]
#[pyo3(signature = (instances=3, eps=gradcheck::DEFAULT_EPS))]
fn run_gradcheck(instances: usize, eps: f64) -> PyResult<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for suite in [
        gradcheck::run_primitive_suite(instances, eps).map_err(err)?,
        spoofsearch::ops::run_candidate_op_suite(instances, eps).map_err(err)?,
    ] {
        out.extend(suite.into_iter().map(|r| (r.name, r.max_rel_err)));
    }
    Ok(out)
}

/// Numerically checks one scalar expression: sum(relu(x) * x) for a seeded
/// random tensor, exercising the tape end to end from Python.
#[pyfunction]
fn tape_smoke(n: usize) -> PyResult<f64> {
    let values: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin()).collect();
    let x = Tensor::param(vec![n], values).map_err(err)?;
    let mut tape = spoofsearch::Tape::new();
    let xid = tape.leaf(&x);
    let r = tape.relu(xid);
    let p = tape.mul(r, xid).map_err(err)?;
    let s = tape.sum(p);
    tape.backward(s).map_err(err)?;
    tape.scalar_value(s).map_err(err)
}

#[pymodule]
fn spoofsearch_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(gen_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(load_feature, m)?)?;
    m.add_function(wrap_pyfunction!(store_feature, m)?)?;
    m.add_function(wrap_pyfunction!(fix_frames, m)?)?;
    m.add_function(wrap_pyfunction!(compute_eer, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_genotype, m)?)?;
    m.add_function(wrap_pyfunction!(derive_genotype, m)?)?;
    m.add_function(wrap_pyfunction!(run_search, m)?)?;
    m.add_function(wrap_pyfunction!(retrain, m)?)?;
    m.add_function(wrap_pyfunction!(score_manifest, m)?)?;
    m.add_function(wrap_pyfunction!(eval_eer, m)?)?;
    m.add_function(wrap_pyfunction!(score_feature, m)?)?;
    m.add_function(wrap_pyfunction!(run_gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(tape_smoke, m)?)?;
    m.add("GENERATOR_VERSION", data::SYNTHETIC_GENERATOR_VERSION)?;
    Ok(())
}
