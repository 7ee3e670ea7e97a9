//! Bilevel search: alternating Adam steps on network weights (training split)
//! and architecture logits (validation split), discrete retraining, and model
//! serialization.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::supernet::{
    derive_genotype, instantiate_discrete, ArchParams, Genotype, Network, NetworkConfig,
};
use crate::tensor::{Tape, Tensor};
use std::fs;
use std::path::Path;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment buffers plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> AdamState {
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn for_params(params: &[&Tensor]) -> AdamState {
        let sizes: Vec<usize> = params.iter().map(|p| p.numel()).collect();
        AdamState::new(&sizes)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam step with bias correction. Gradients are read from each tensor's
/// grad buffer (missing buffer = zero gradient). Non-finite gradients reject
/// the whole step without touching any parameter.
pub fn adam_update(params: &mut [&mut Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::shape(format!(
            "Adam state tracks {} tensors, got {}",
            state.m.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if state.m[i].len() != p.numel() {
            return Err(Error::shape(format!(
                "Adam moment buffer {i} has {} entries, parameter has {}",
                state.m[i].len(),
                p.numel()
            )));
        }
        if let Some(g) = p.grad() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of parameter {i}")));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let grad: Option<Vec<f64>> = p.grad().map(|g| g.to_vec());
        let values = p.values_mut();
        for j in 0..values.len() {
            let g = grad.as_ref().map_or(0.0, |g| g[j]);
            state.m[i][j] = ADAM_BETA1 * state.m[i][j] + (1.0 - ADAM_BETA1) * g;
            state.v[i][j] = ADAM_BETA2 * state.v[i][j] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = state.m[i][j] / bc1;
            let v_hat = state.v[i][j] / bc2;
            values[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Order {
    First,
    Second,
}

#[derive(Clone, Copy, Debug)]
pub struct SearchConfig {
    pub epochs: usize,
    pub lr: f64,
    pub arch_lr: f64,
    pub batch_size: usize,
    /// batch size for the validation-side alpha steps; `None` mirrors
    /// `batch_size`
    pub val_batch_size: Option<usize>,
    pub cells: usize,
    pub init_channels: usize,
    pub seed: u64,
    pub order: Order,
    /// frame count inputs are fixed to
    pub target_frames: usize,
    /// virtual-step size for second-order search; defaults to `lr`
    pub xi: Option<f64>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            epochs: 50,
            lr: 1e-4,
            arch_lr: 1e-4,
            batch_size: 16,
            val_batch_size: None,
            cells: 8,
            init_channels: 16,
            seed: 0,
            order: Order::First,
            target_frames: 400,
            xi: None,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if self.val_batch_size == Some(0) {
            return Err(Error::invalid("val_batch_size must be >= 1"));
        }
        if !(self.lr > 0.0) || !(self.arch_lr > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        Ok(())
    }

    pub fn network_config(&self, feat_dim: usize) -> NetworkConfig {
        NetworkConfig {
            cells: self.cells,
            init_channels: self.init_channels,
            feat_dim,
        }
    }
}

/// Per-epoch record written to the history CSV.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub alpha_entropy_normal: f64,
    pub alpha_entropy_reduce: f64,
}

pub fn format_history_csv(history: &[EpochStats]) -> String {
    let mut out =
        String::from("epoch,train_loss,val_loss,train_acc,val_acc,alpha_entropy_normal,alpha_entropy_reduce\n");
    for h in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            h.epoch, h.train_loss, h.val_loss, h.train_acc, h.val_acc, h.alpha_entropy_normal,
            h.alpha_entropy_reduce
        ));
    }
    out
}

fn accuracy(logits: &[f64], labels: &[usize]) -> f64 {
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let pred = if logits[2 * i] >= logits[2 * i + 1] { 0 } else { 1 };
            pred == l
        })
        .count();
    correct as f64 / labels.len() as f64
}

/// Forward + cross-entropy backward; leaves weight gradients on `net` and,
/// for supernets, alpha gradients on `alpha`. Returns (loss, accuracy).
fn backward_pass(
    net: &mut Network,
    alpha: Option<&mut ArchParams>,
    input: &Tensor,
    labels: &[usize],
    batch_id: &str,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let alpha_ref = alpha.as_deref();
    let fwd = net.forward(&mut tape, input, alpha_ref)?;
    let loss = tape.cross_entropy(fwd.logits, labels)?;
    let loss_val = tape.values(loss)[0];
    if !loss_val.is_finite() {
        return Err(Error::NonFinite(format!("loss on batch {batch_id}")));
    }
    let acc = accuracy(tape.values(fwd.logits), labels);
    tape.backward(loss)?;
    net.store_grads(&tape, &fwd);
    if let Some(alpha) = alpha {
        let (a_n, a_r) = fwd.alpha_ids.expect("supernet forward binds alpha");
        for (t, id) in [(&mut alpha.normal, a_n), (&mut alpha.reduce, a_r)] {
            let n = t.numel();
            match tape.grad(id) {
                Some(g) => t.set_grad(g.to_vec()),
                None => t.set_grad(vec![0.0; n]),
            }
        }
    }
    Ok((loss_val, acc))
}

/// Forward + backward that only harvests alpha gradients (weights untouched).
fn alpha_grad_only(
    net: &Network,
    alpha: &mut ArchParams,
    input: &Tensor,
    labels: &[usize],
    batch_id: &str,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let fwd = net.forward_frozen_weights(&mut tape, input, Some(alpha))?;
    let loss = tape.cross_entropy(fwd.logits, labels)?;
    let loss_val = tape.values(loss)[0];
    if !loss_val.is_finite() {
        return Err(Error::NonFinite(format!("loss on batch {batch_id}")));
    }
    let acc = accuracy(tape.values(fwd.logits), labels);
    tape.backward(loss)?;
    let (a_n, a_r) = fwd.alpha_ids.expect("supernet forward binds alpha");
    for (t, id) in [(&mut alpha.normal, a_n), (&mut alpha.reduce, a_r)] {
        let n = t.numel();
        match tape.grad(id) {
            Some(g) => t.set_grad(g.to_vec()),
            None => t.set_grad(vec![0.0; n]),
        }
    }
    Ok((loss_val, acc))
}

/// Statistics produced by one alternation step.
#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

/// One alternation: an Adam step on the weights against the training batch,
/// then an Adam step on the architecture logits against the validation batch.
///
/// With `order: Second` the alpha gradient includes the original
/// finite-difference Hessian-vector correction: alpha is evaluated at the
/// virtual point w − ξ·∇w L_train, and the correction term is estimated with
/// ±ε weight perturbations along ∇w' L_val. ξ = 0 reduces exactly to the
/// first-order step.
#[allow(clippy::too_many_arguments)]
pub fn search_step(
    net: &mut Network,
    alpha: &mut ArchParams,
    train_batch: (&Tensor, &[usize]),
    val_batch: (&Tensor, &[usize]),
    w_state: &mut AdamState,
    a_state: &mut AdamState,
    config: &SearchConfig,
) -> Result<StepStats> {
    // lower level: weights on the training split
    let (train_loss, train_acc) =
        backward_pass(net, Some(alpha), train_batch.0, train_batch.1, "train")?;
    let train_w_grads: Option<Vec<Vec<f64>>> = match config.order {
        Order::First => None,
        Order::Second => Some(
            net.params()
                .iter()
                .map(|p| p.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.numel()]))
                .collect(),
        ),
    };
    adam_update(&mut net.params_mut(), w_state, config.lr)?;

    // upper level: alpha on the validation split, never reading train data
    let (val_loss, val_acc) = match config.order {
        Order::First => alpha_grad_only(net, alpha, val_batch.0, val_batch.1, "val")?,
        Order::Second => {
            let xi = config.xi.unwrap_or(config.lr);
            second_order_alpha_grad(
                net,
                alpha,
                train_batch,
                val_batch,
                train_w_grads.as_ref().unwrap(),
                xi,
            )?
        }
    };
    adam_update(&mut alpha.tensors_mut(), a_state, config.arch_lr)?;
    Ok(StepStats { train_loss, val_loss, train_acc, val_acc })
}

fn add_scaled(net: &mut Network, direction: &[Vec<f64>], scale: f64) {
    for (p, d) in net.params_mut().into_iter().zip(direction) {
        for (v, dv) in p.values_mut().iter_mut().zip(d) {
            *v += scale * dv;
        }
    }
}

/// DARTS second-order alpha gradient:
/// ∇α L_val(w', α) − ξ/(2ε)·[∇α L_train(w⁺, α) − ∇α L_train(w⁻, α)]
/// where w' = w − ξ∇w L_train and w± = w ± ε∇w' L_val.
fn second_order_alpha_grad(
    net: &Network,
    alpha: &mut ArchParams,
    train_batch: (&Tensor, &[usize]),
    val_batch: (&Tensor, &[usize]),
    train_w_grads: &[Vec<f64>],
    xi: f64,
) -> Result<(f64, f64)> {
    if xi == 0.0 {
        return alpha_grad_only(net, alpha, val_batch.0, val_batch.1, "val");
    }
    // virtual step on a scratch copy of the (pre-update) weights
    let mut virt = net.clone();
    add_scaled(&mut virt, train_w_grads, -xi);
    let mut scratch_alpha = alpha.clone();
    let (val_loss, val_acc) =
        backward_pass(&mut virt, Some(&mut scratch_alpha), val_batch.0, val_batch.1, "val")?;
    let val_alpha_grads = [
        scratch_alpha.normal.grad().unwrap().to_vec(),
        scratch_alpha.reduce.grad().unwrap().to_vec(),
    ];
    let val_w_grads: Vec<Vec<f64>> = virt
        .params()
        .iter()
        .map(|p| p.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let norm: f64 = val_w_grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm == 0.0 {
        alpha.normal.set_grad(val_alpha_grads[0].clone());
        alpha.reduce.set_grad(val_alpha_grads[1].clone());
        return Ok((val_loss, val_acc));
    }
    let eps = 1e-2 / norm;

    let mut perturbed = net.clone();
    add_scaled(&mut perturbed, &val_w_grads, eps);
    let mut plus_alpha = alpha.clone();
    alpha_grad_only(&perturbed, &mut plus_alpha, train_batch.0, train_batch.1, "train")?;
    add_scaled(&mut perturbed, &val_w_grads, -2.0 * eps);
    let mut minus_alpha = alpha.clone();
    alpha_grad_only(&perturbed, &mut minus_alpha, train_batch.0, train_batch.1, "train")?;

    let scale = xi / (2.0 * eps);
    let combined = |val: &[f64], plus: Option<&[f64]>, minus: Option<&[f64]>| -> Vec<f64> {
        val.iter()
            .enumerate()
            .map(|(i, v)| {
                let p = plus.map_or(0.0, |g| g[i]);
                let m = minus.map_or(0.0, |g| g[i]);
                v - scale * (p - m)
            })
            .collect()
    };
    let gn = combined(&val_alpha_grads[0], plus_alpha.normal.grad(), minus_alpha.normal.grad());
    let gr = combined(&val_alpha_grads[1], plus_alpha.reduce.grad(), minus_alpha.reduce.grad());
    alpha.normal.set_grad(gn);
    alpha.reduce.set_grad(gr);
    Ok((val_loss, val_acc))
}

/// The full search loop plus the derived discrete architecture.
pub struct SearchOutcome {
    pub genotype: Genotype,
    pub history: Vec<EpochStats>,
    pub alpha: ArchParams,
}

pub fn run_search(config: &SearchConfig, train: &Dataset, val: &Dataset) -> Result<SearchOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("search needs nonempty train and val sets"));
    }
    if train.feat_dim != val.feat_dim {
        return Err(Error::shape(format!(
            "train F={} but val F={}",
            train.feat_dim, val.feat_dim
        )));
    }
    let mut net = Network::new_supernet(config.network_config(train.feat_dim), config.seed)?;
    let mut alpha = ArchParams::new(config.seed);
    let mut w_state = AdamState::for_params(&net.params());
    let mut a_state = AdamState::new(&[alpha.normal.numel(), alpha.reduce.numel()]);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let train_batches = crate::data::epoch_batches(train.len(), config.batch_size, config.seed, epoch)?;
        let val_bs = config.val_batch_size.unwrap_or(config.batch_size);
        let val_batches =
            crate::data::epoch_batches(val.len(), val_bs, config.seed ^ 0xA5A5, epoch)?;
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        for (i, tb) in train_batches.iter().enumerate() {
            let vb = &val_batches[i % val_batches.len()];
            let (t_in, t_lab) = train.batch_tensor(tb)?;
            let (v_in, v_lab) = val.batch_tensor(vb)?;
            let stats = search_step(
                &mut net,
                &mut alpha,
                (&t_in, &t_lab),
                (&v_in, &v_lab),
                &mut w_state,
                &mut a_state,
                config,
            )?;
            sums.0 += stats.train_loss;
            sums.1 += stats.val_loss;
            sums.2 += stats.train_acc;
            sums.3 += stats.val_acc;
        }
        let n = train_batches.len() as f64;
        let (en, er) = alpha.entropy();
        history.push(EpochStats {
            epoch,
            train_loss: sums.0 / n,
            val_loss: sums.1 / n,
            train_acc: sums.2 / n,
            val_acc: sums.3 / n,
            alpha_entropy_normal: en,
            alpha_entropy_reduce: er,
        });
    }
    let genotype = derive_genotype(&alpha)?;
    Ok(SearchOutcome { genotype, history, alpha })
}

/// A trained discrete model: the network plus everything needed to rebuild it.
pub struct Model {
    pub genotype: Genotype,
    pub net: Network,
    pub target_frames: usize,
}

/// Trains a freshly seeded discrete network on the training split.
/// Returns the model and per-epoch (loss, accuracy) history.
pub fn retrain_discrete(
    genotype: &Genotype,
    config: &SearchConfig,
    epochs: usize,
    train: &Dataset,
) -> Result<(Model, Vec<(f64, f64)>)> {
    config.validate()?;
    if epochs < 1 {
        return Err(Error::invalid("retraining needs epochs >= 1"));
    }
    if train.is_empty() {
        return Err(Error::invalid("retraining needs a nonempty train set"));
    }
    let net_config = config.network_config(train.feat_dim);
    let mut net = instantiate_discrete(genotype, net_config, config.seed ^ 0x7e7a_11)?;
    let mut state = AdamState::for_params(&net.params());
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let batches =
            crate::data::epoch_batches(train.len(), config.batch_size, config.seed ^ 0x3c3c, epoch)?;
        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        for b in &batches {
            let (input, labels) = train.batch_tensor(b)?;
            let (loss, acc) = backward_pass(&mut net, None, &input, &labels, "train")?;
            adam_update(&mut net.params_mut(), &mut state, config.lr)?;
            loss_sum += loss;
            acc_sum += acc;
        }
        let n = batches.len() as f64;
        history.push((loss_sum / n, acc_sum / n));
    }
    Ok((
        Model {
            genotype: genotype.clone(),
            net,
            target_frames: config.target_frames,
        },
        history,
    ))
}

// ── model persistence ───────────────────────────────────────────────────

const MODEL_MAGIC: &[u8; 4] = b"FADM";
const MODEL_VERSION: u32 = 1;

/// Binary model format: magic, version, layout, genotype text, then the
/// parameter blob as float64 little-endian in traversal order.
pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    let geno_text = model.genotype.to_text();
    let params = model.net.params();
    let count: usize = params.iter().map(|p| p.numel()).sum();
    let mut buf = Vec::with_capacity(32 + geno_text.len() + 8 * count);
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    buf.extend_from_slice(&(model.net.config.cells as u32).to_le_bytes());
    buf.extend_from_slice(&(model.net.config.init_channels as u32).to_le_bytes());
    buf.extend_from_slice(&(model.target_frames as u32).to_le_bytes());
    buf.extend_from_slice(&(model.net.config.feat_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(geno_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(geno_text.as_bytes());
    buf.extend_from_slice(&(count as u64).to_le_bytes());
    for p in params {
        for &v in p.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(format!("writing model {}", path.display()), e))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes =
        fs::read(path).map_err(|e| Error::io(format!("reading model {}", path.display()), e))?;
    let fail = |msg: String| Error::Format { path: path.to_path_buf(), msg };
    if bytes.len() < 28 {
        return Err(fail("header truncated".to_string()));
    }
    if &bytes[0..4] != MODEL_MAGIC {
        return Err(fail(format!("bad magic {:?}, expected \"FADM\"", &bytes[0..4])));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != MODEL_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let cells = u32_at(8) as usize;
    let init_channels = u32_at(12) as usize;
    let target_frames = u32_at(16) as usize;
    let feat_dim = u32_at(20) as usize;
    let geno_len = u32_at(24) as usize;
    if bytes.len() < 28 + geno_len + 8 {
        return Err(fail("genotype section truncated".to_string()));
    }
    let geno_text = std::str::from_utf8(&bytes[28..28 + geno_len])
        .map_err(|_| fail("genotype text is not UTF-8".to_string()))?;
    let genotype = Genotype::parse(geno_text)?;
    let off = 28 + geno_len;
    let count = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize;
    let blob = &bytes[off + 8..];
    if blob.len() != count * 8 {
        return Err(fail(format!(
            "parameter blob is {} bytes but header promises {}",
            blob.len(),
            count * 8
        )));
    }
    let config = NetworkConfig { cells, init_channels, feat_dim };
    let mut net = instantiate_discrete(&genotype, config, 0)?;
    if net.param_count() != count {
        return Err(fail(format!(
            "parameter count {} does not match this layout ({} expected)",
            count,
            net.param_count()
        )));
    }
    let mut cursor = 0usize;
    for p in net.params_mut() {
        for v in p.values_mut() {
            *v = f64::from_le_bytes(blob[cursor..cursor + 8].try_into().unwrap());
            cursor += 8;
        }
    }
    Ok(Model { genotype, net, target_frames })
}
