//! Continuous-relaxation network: cells of softmax-mixed edges, a stacked
//! supernet with two reduction cells, genotype derivation, and discrete
//! instantiation.

use crate::error::{Error, Result};
use crate::ops::{self, build_op, OpInstance, OpKind, NUM_OPS};
use crate::tensor::{ConvSpec, Tape, Tensor, TensorId};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Intermediate nodes per cell. Node ids: 0, 1 are the two cell inputs;
/// 2..=5 are intermediates; the cell output concatenates nodes 2..=5.
pub const INTERMEDIATE_NODES: usize = 4;
/// Mixed edges per cell for 4 intermediate nodes: 2+3+4+5.
pub const EDGES_PER_CELL: usize = 14;

/// Row index into the [E × 9] alpha matrix for edge (src -> intermediate dst).
pub fn edge_row(dst: usize, src: usize) -> usize {
    debug_assert!(dst < INTERMEDIATE_NODES && src < dst + 2);
    dst * (dst + 3) / 2 + src
}

/// Per-cell-type architecture logits, shared across all cells of that type.
#[derive(Clone, Debug)]
pub struct ArchParams {
    pub normal: Tensor,
    pub reduce: Tensor,
}

impl ArchParams {
    /// Small seeded random logits (near-uniform softmax at the start).
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51ee_7a11);
        let mut draw = |_: usize| -> Tensor {
            let values: Vec<f64> = (0..EDGES_PER_CELL * NUM_OPS)
                .map(|_| rng.random_range(-1e-3..1e-3))
                .collect();
            Tensor::param(vec![EDGES_PER_CELL, NUM_OPS], values).unwrap()
        };
        ArchParams {
            normal: draw(0),
            reduce: draw(1),
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        if !self.normal.is_finite() || !self.reduce.is_finite() {
            return Err(Error::NonFinite("architecture logits".to_string()));
        }
        Ok(())
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.normal, &mut self.reduce]
    }

    fn entropy_of(matrix: &Tensor) -> f64 {
        let v = matrix.values();
        let mut total = 0.0;
        for r in 0..EDGES_PER_CELL {
            let p = softmax_slice(&v[r * NUM_OPS..(r + 1) * NUM_OPS]);
            total -= p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>();
        }
        total / EDGES_PER_CELL as f64
    }

    /// Mean per-row softmax entropy (nats).
    pub fn entropy(&self) -> (f64, f64) {
        (Self::entropy_of(&self.normal), Self::entropy_of(&self.reduce))
    }
}

pub(crate) fn softmax_slice(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Softmax-weighted mixture of the nine candidate outputs on one edge.
///
/// `op_ids[i]` are the bound parameter ids of `ops[i]`; `alpha_row` is a
/// bound tensor of 9 logits.
pub fn mixed_forward(
    tape: &mut Tape,
    ops: &[OpInstance],
    op_ids: &[Vec<TensorId>],
    x: TensorId,
    alpha_row: TensorId,
) -> Result<TensorId> {
    if tape.shape(alpha_row) != [NUM_OPS] {
        return Err(Error::shape(format!(
            "mixed_forward: alpha row must be [{NUM_OPS}], got {:?}",
            tape.shape(alpha_row)
        )));
    }
    if tape.values(alpha_row).iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mixed_forward: alpha logits".to_string()));
    }
    let weights = tape.softmax(alpha_row)?;
    let mut outs = Vec::with_capacity(ops.len());
    for (op, ids) in ops.iter().zip(op_ids) {
        outs.push(op.apply(tape, ids, x)?);
    }
    tape.weighted_sum(&outs, weights)
}

/// Input adapter aligning a previous cell output to the current channel count.
#[derive(Clone, Debug)]
enum Preproc {
    /// relu -> 1x1 conv -> norm
    ReluConvNorm { w: Tensor, gamma: Tensor, beta: Tensor },
    /// stride-2 spatial halving used when the previous cell was a reduction
    FactorizedReduce { w1: Tensor, w2: Tensor, gamma: Tensor, beta: Tensor },
}

const PW: ConvSpec = ConvSpec { stride: 1, dilation: 1, groups: 1, padding: 0 };

impl Preproc {
    fn relu_conv_norm(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> Preproc {
        let w = ops::uniform_param(rng, vec![c_out, c_in, 1, 1], c_in);
        let (gamma, beta) = ops::norm_params(c_out);
        Preproc::ReluConvNorm { w, gamma, beta }
    }

    fn factorized_reduce(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> Preproc {
        let w1 = ops::uniform_param(rng, vec![c_out / 2, c_in, 1, 1], c_in);
        let w2 = ops::uniform_param(rng, vec![c_out / 2, c_in, 1, 1], c_in);
        let (gamma, beta) = ops::norm_params(c_out);
        Preproc::FactorizedReduce { w1, w2, gamma, beta }
    }

    fn params(&self) -> Vec<&Tensor> {
        match self {
            Preproc::ReluConvNorm { w, gamma, beta } => vec![w, gamma, beta],
            Preproc::FactorizedReduce { w1, w2, gamma, beta } => vec![w1, w2, gamma, beta],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Preproc::ReluConvNorm { w, gamma, beta } => vec![w, gamma, beta],
            Preproc::FactorizedReduce { w1, w2, gamma, beta } => vec![w1, w2, gamma, beta],
        }
    }

    fn forward(&self, tape: &mut Tape, cur: &mut IdCursor, x: TensorId) -> Result<TensorId> {
        match self {
            Preproc::ReluConvNorm { .. } => {
                let (w, gamma, beta) = (cur.next(), cur.next(), cur.next());
                let r = tape.relu(x);
                let c = tape.conv2d(r, w, PW)?;
                tape.channel_norm(c, gamma, beta)
            }
            Preproc::FactorizedReduce { .. } => {
                let (w1, w2, gamma, beta) = (cur.next(), cur.next(), cur.next(), cur.next());
                ops::factorized_reduce(tape, x, w1, w2, gamma, beta)
            }
        }
    }
}

#[derive(Clone, Debug)]
enum EdgeOps {
    /// All nine candidates, softmax-mixed (supernet).
    Mixed(Vec<OpInstance>),
    /// One chosen candidate (discrete network).
    Single(OpInstance),
}

/// Directed edge from node `src` to intermediate node `dst` (0-based).
#[derive(Clone, Debug)]
struct Edge {
    src: usize,
    dst: usize,
    ops: EdgeOps,
}

impl Edge {
    fn params(&self) -> Vec<&Tensor> {
        match &self.ops {
            EdgeOps::Mixed(ops) => ops.iter().flat_map(|o| o.params()).collect(),
            EdgeOps::Single(op) => op.params().iter().collect(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match &mut self.ops {
            EdgeOps::Mixed(ops) => ops.iter_mut().flat_map(|o| o.params_mut()).collect(),
            EdgeOps::Single(op) => op.params_mut().iter_mut().collect(),
        }
    }
}

#[derive(Clone, Debug)]
struct Cell {
    reduction: bool,
    preproc0: Preproc,
    preproc1: Preproc,
    /// dst-major, src ascending
    edges: Vec<Edge>,
}

impl Cell {
    fn params(&self) -> Vec<&Tensor> {
        let mut out = self.preproc0.params();
        out.extend(self.preproc1.params());
        for e in &self.edges {
            out.extend(e.params());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.preproc0.params_mut();
        out.extend(self.preproc1.params_mut());
        for e in &mut self.edges {
            out.extend(e.params_mut());
        }
        out
    }

    fn forward(
        &self,
        tape: &mut Tape,
        cur: &mut IdCursor,
        s0: TensorId,
        s1: TensorId,
        weights: Option<&[TensorId]>,
    ) -> Result<TensorId> {
        let p0 = self.preproc0.forward(tape, cur, s0)?;
        let p1 = self.preproc1.forward(tape, cur, s1)?;
        let mut nodes = vec![p0, p1];
        let mut edge_iter = self.edges.iter().peekable();
        for dst in 0..INTERMEDIATE_NODES {
            let mut incoming = Vec::new();
            while let Some(edge) = edge_iter.peek() {
                if edge.dst != dst {
                    break;
                }
                let edge = edge_iter.next().unwrap();
                let x = nodes[edge.src];
                let out = match &edge.ops {
                    EdgeOps::Mixed(ops) => {
                        let w_rows = weights.ok_or_else(|| {
                            Error::invalid("supernet forward requires architecture parameters")
                        })?;
                        let row = w_rows[edge_row(edge.dst, edge.src)];
                        let mut outs = Vec::with_capacity(ops.len());
                        for op in ops {
                            let ids = cur.take(op.params().len());
                            outs.push(op.apply(tape, &ids, x)?);
                        }
                        tape.weighted_sum(&outs, row)?
                    }
                    EdgeOps::Single(op) => {
                        let ids = cur.take(op.params().len());
                        op.apply(tape, &ids, x)?
                    }
                };
                incoming.push(out);
            }
            if incoming.is_empty() {
                return Err(Error::invalid(format!("intermediate node {dst} has no incoming edges")));
            }
            nodes.push(tape.add_n(&incoming)?);
        }
        tape.concat_channels(&nodes[2..])
    }
}

/// Static configuration of a network's layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    /// number of stacked cells
    pub cells: usize,
    /// channel count of the first cell; doubles at each reduction
    pub init_channels: usize,
    /// expected feature dimension F of the input (stem contract)
    pub feat_dim: usize,
}

impl NetworkConfig {
    /// Reduction cells sit at floor(N/3) and floor(2N/3).
    pub fn reduction_indices(&self) -> Vec<usize> {
        let mut v = vec![self.cells / 3, 2 * self.cells / 3];
        v.dedup();
        v
    }
}

pub const NUM_CLASSES: usize = 2;
/// Logit order in the classifier head.
pub const CLASS_BONAFIDE: usize = 0;
pub const CLASS_SPOOF: usize = 1;

/// A stem, a stack of cells, and a pool + linear classifier head.
#[derive(Clone, Debug)]
pub struct Network {
    pub config: NetworkConfig,
    stem_conv: Tensor,
    stem_gamma: Tensor,
    stem_beta: Tensor,
    cells: Vec<Cell>,
    head_w: Tensor,
    head_b: Tensor,
    /// post-pool embedding width: 4 × final cell channels
    embedding_dim: usize,
}

struct IdCursor<'a> {
    ids: &'a [TensorId],
    pos: usize,
}

impl<'a> IdCursor<'a> {
    fn next(&mut self) -> TensorId {
        let id = self.ids[self.pos];
        self.pos += 1;
        id
    }

    fn take(&mut self, n: usize) -> Vec<TensorId> {
        let slice = self.ids[self.pos..self.pos + n].to_vec();
        self.pos += n;
        slice
    }
}

/// Everything a caller needs after one forward pass.
#[derive(Debug)]
pub struct ForwardOutput {
    pub logits: TensorId,
    /// penultimate (post-global-pool) representation, [batch, D]
    pub embedding: TensorId,
    /// bound parameter leaves, aligned with [`Network::params`] order
    pub param_ids: Vec<TensorId>,
    /// bound alpha leaves (normal, reduce) when the net has mixed edges
    pub alpha_ids: Option<(TensorId, TensorId)>,
}

fn edge_list_supernet(rng: &mut ChaCha8Rng, channels: usize, reduction: bool) -> Result<Vec<Edge>> {
    let mut edges = Vec::with_capacity(EDGES_PER_CELL);
    for dst in 0..INTERMEDIATE_NODES {
        for src in 0..dst + 2 {
            let stride = if reduction && src < 2 { 2 } else { 1 };
            let ops = OpKind::ALL
                .iter()
                .map(|&k| build_op(k, channels, stride, rng.next_u64()))
                .collect::<Result<Vec<_>>>()?;
            edges.push(Edge {
                src,
                dst,
                ops: EdgeOps::Mixed(ops),
            });
        }
    }
    Ok(edges)
}

fn build_cells<F>(config: &NetworkConfig, rng: &mut ChaCha8Rng, mut make_edges: F) -> Result<(Vec<Cell>, usize)>
where
    F: FnMut(&mut ChaCha8Rng, usize, bool) -> Result<Vec<Edge>>,
{
    let reductions = config.reduction_indices();
    let mut cells = Vec::with_capacity(config.cells);
    let mut c_curr = config.init_channels;
    let mut c_pp = config.init_channels; // stem output feeds both inputs of cell 0
    let mut c_p = config.init_channels;
    let mut reduction_prev = false;
    for i in 0..config.cells {
        let reduction = reductions.contains(&i);
        if reduction {
            c_curr *= 2;
        }
        let preproc0 = if reduction_prev {
            Preproc::factorized_reduce(rng, c_pp, c_curr)
        } else {
            Preproc::relu_conv_norm(rng, c_pp, c_curr)
        };
        let preproc1 = Preproc::relu_conv_norm(rng, c_p, c_curr);
        let edges = make_edges(rng, c_curr, reduction)?;
        cells.push(Cell {
            reduction,
            preproc0,
            preproc1,
            edges,
        });
        c_pp = c_p;
        c_p = INTERMEDIATE_NODES * c_curr;
        reduction_prev = reduction;
    }
    Ok((cells, c_p))
}

impl Network {
    /// Builds the full mixed-edge supernet with seeded initialization.
    pub fn new_supernet(config: NetworkConfig, seed: u64) -> Result<Network> {
        Self::validate_config(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem_conv = ops::uniform_param(&mut rng, vec![config.init_channels, 1, 3, 3], 9);
        let (stem_gamma, stem_beta) = ops::norm_params(config.init_channels);
        let (cells, embedding_dim) = build_cells(&config, &mut rng, |rng, c, red| {
            edge_list_supernet(rng, c, red)
        })?;
        let head_w = ops::uniform_param(&mut rng, vec![NUM_CLASSES, embedding_dim], embedding_dim);
        let head_b = Tensor::param(vec![NUM_CLASSES], vec![0.0; NUM_CLASSES]).unwrap();
        Ok(Network {
            config,
            stem_conv,
            stem_gamma,
            stem_beta,
            cells,
            head_w,
            head_b,
            embedding_dim,
        })
    }

    fn validate_config(config: &NetworkConfig) -> Result<()> {
        if config.cells < 1 {
            return Err(Error::invalid("network needs at least one cell"));
        }
        if config.init_channels < 2 || config.init_channels % 2 != 0 {
            return Err(Error::invalid(format!(
                "init_channels must be even and >= 2, got {}",
                config.init_channels
            )));
        }
        if config.feat_dim < 1 {
            return Err(Error::invalid("feat_dim must be >= 1"));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn has_mixed_edges(&self) -> bool {
        self.cells
            .iter()
            .any(|c| c.edges.iter().any(|e| matches!(e.ops, EdgeOps::Mixed(_))))
    }

    /// All learnable weight tensors in a fixed traversal order
    /// (stem, cells in order, head). Forward binds leaves in this order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.stem_conv, &self.stem_gamma, &self.stem_beta];
        for c in &self.cells {
            out.extend(c.params());
        }
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> =
            vec![&mut self.stem_conv, &mut self.stem_gamma, &mut self.stem_beta];
        for c in &mut self.cells {
            out.extend(c.params_mut());
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Forward pass over a [B, 1, T, F] batch. Supernets need `alpha`.
    pub fn forward(&self, tape: &mut Tape, input: &Tensor, alpha: Option<&ArchParams>) -> Result<ForwardOutput> {
        self.forward_impl(tape, input, alpha, false)
    }

    /// Forward pass that binds the network weights as frozen leaves, so a
    /// backward pass only produces architecture-logit gradients. The weight
    /// gradient kernels (the bulk of backward time) are skipped entirely.
    pub fn forward_frozen_weights(
        &self,
        tape: &mut Tape,
        input: &Tensor,
        alpha: Option<&ArchParams>,
    ) -> Result<ForwardOutput> {
        self.forward_impl(tape, input, alpha, true)
    }

    fn forward_impl(
        &self,
        tape: &mut Tape,
        input: &Tensor,
        alpha: Option<&ArchParams>,
        freeze_weights: bool,
    ) -> Result<ForwardOutput> {
        let shape = input.shape();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::shape(format!(
                "network input must be [B, 1, T, F], got {shape:?}"
            )));
        }
        if shape[3] != self.config.feat_dim {
            return Err(Error::shape(format!(
                "feature dimension {} does not match the stem configuration F={}",
                shape[3], self.config.feat_dim
            )));
        }
        if shape[0] == 0 {
            return Err(Error::invalid("empty batch"));
        }

        // bind alpha and precompute per-row softmax weights per cell type
        let mut alpha_ids = None;
        let mut weight_rows: Option<(Vec<TensorId>, Vec<TensorId>)> = None;
        if self.has_mixed_edges() {
            let alpha = alpha.ok_or_else(|| {
                Error::invalid("supernet forward requires architecture parameters")
            })?;
            alpha.check_finite()?;
            let a_n = tape.leaf(&alpha.normal);
            let a_r = tape.leaf(&alpha.reduce);
            alpha_ids = Some((a_n, a_r));
            let mut rows = |a: TensorId| -> Result<Vec<TensorId>> {
                let viewed = tape.reshape(a, vec![1, EDGES_PER_CELL, NUM_OPS, 1])?;
                (0..EDGES_PER_CELL)
                    .map(|e| {
                        let row = tape.slice_channels(viewed, e, 1)?;
                        let flat = tape.reshape(row, vec![NUM_OPS])?;
                        tape.softmax(flat)
                    })
                    .collect()
            };
            weight_rows = Some((rows(a_n)?, rows(a_r)?));
        }

        let param_ids: Vec<TensorId> = self
            .params()
            .iter()
            .map(|p| {
                if freeze_weights {
                    tape.frozen_leaf(p)
                } else {
                    tape.leaf(p)
                }
            })
            .collect();
        let mut cur = IdCursor { ids: &param_ids, pos: 0 };

        let x = tape.leaf(input);
        let (w, g, b) = (cur.next(), cur.next(), cur.next());
        let stem = tape.conv2d(x, w, ConvSpec { stride: 1, dilation: 1, groups: 1, padding: 1 })?;
        let stem = tape.channel_norm(stem, g, b)?;

        let mut s0 = stem;
        let mut s1 = stem;
        for cell in &self.cells {
            let rows = weight_rows.as_ref().map(|(n, r)| {
                if cell.reduction {
                    r.as_slice()
                } else {
                    n.as_slice()
                }
            });
            let out = cell.forward(tape, &mut cur, s0, s1, rows)?;
            s0 = s1;
            s1 = out;
        }

        // normalized cell outputs are mean-zero per channel, so pool a
        // rectified copy to keep the embedding informative for single inputs
        let rectified = tape.relu(s1);
        let embedding = tape.global_avg_pool(rectified)?;
        let (hw, hb) = (cur.next(), cur.next());
        let logits = tape.linear(embedding, hw, hb)?;
        debug_assert_eq!(cur.pos, param_ids.len());
        Ok(ForwardOutput {
            logits,
            embedding,
            param_ids,
            alpha_ids,
        })
    }

    /// Copies gradients from a finished backward pass onto the parameters.
    pub fn store_grads(&mut self, tape: &Tape, fwd: &ForwardOutput) {
        let ids = fwd.param_ids.clone();
        for (param, id) in self.params_mut().into_iter().zip(ids) {
            let n = param.numel();
            match tape.grad(id) {
                Some(g) => param.set_grad(g.to_vec()),
                None => param.set_grad(vec![0.0; n]),
            }
        }
    }

    /// Discrete network reusing this supernet's structure and sharing (cloning)
    /// the parameters of the genotype-selected operations.
    pub fn discretize(&self, genotype: &Genotype) -> Result<Network> {
        genotype.validate()?;
        let mut net = self.clone();
        for cell in &mut net.cells {
            let pairs = if cell.reduction {
                &genotype.reduce
            } else {
                &genotype.normal
            };
            let mut new_edges = Vec::with_capacity(pairs.len());
            for (i, &(kind, src)) in pairs.iter().enumerate() {
                let dst = i / 2;
                let old = cell
                    .edges
                    .iter()
                    .find(|e| e.dst == dst && e.src == src)
                    .ok_or_else(|| Error::invalid(format!("no edge {src} -> node {dst}")))?;
                let op = match &old.ops {
                    EdgeOps::Mixed(ops) => ops[kind.index()].clone(),
                    EdgeOps::Single(op) => op.clone(),
                };
                new_edges.push(Edge {
                    src,
                    dst,
                    ops: EdgeOps::Single(op),
                });
            }
            cell.edges = new_edges;
        }
        Ok(net)
    }
}

/// Builds a fresh discrete network from a genotype with seeded parameters.
pub fn instantiate_discrete(genotype: &Genotype, config: NetworkConfig, seed: u64) -> Result<Network> {
    genotype.validate()?;
    Network::validate_config(&config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stem_conv = ops::uniform_param(&mut rng, vec![config.init_channels, 1, 3, 3], 9);
    let (stem_gamma, stem_beta) = ops::norm_params(config.init_channels);
    let (cells, embedding_dim) = build_cells(&config, &mut rng, |rng, c, reduction| {
        let pairs = if reduction { &genotype.reduce } else { &genotype.normal };
        let mut edges = Vec::with_capacity(pairs.len());
        for (i, &(kind, src)) in pairs.iter().enumerate() {
            let dst = i / 2;
            let stride = if reduction && src < 2 { 2 } else { 1 };
            edges.push(Edge {
                src,
                dst,
                ops: EdgeOps::Single(build_op(kind, c, stride, rng.next_u64())?),
            });
        }
        Ok(edges)
    })?;
    let head_w = ops::uniform_param(&mut rng, vec![NUM_CLASSES, embedding_dim], embedding_dim);
    let head_b = Tensor::param(vec![NUM_CLASSES], vec![0.0; NUM_CLASSES]).unwrap();
    Ok(Network {
        config,
        stem_conv,
        stem_gamma,
        stem_beta,
        cells,
        head_w,
        head_b,
        embedding_dim,
    })
}

// ── genotype ────────────────────────────────────────────────────────────

/// Discrete architecture: per cell type, 2 (operation, source-node) pairs per
/// intermediate node, node-major; plus the output concat range.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Genotype {
    pub normal: Vec<(OpKind, usize)>,
    pub reduce: Vec<(OpKind, usize)>,
    /// inclusive node-id range concatenated into the cell output
    pub concat: (usize, usize),
}

impl Genotype {
    pub fn validate(&self) -> Result<()> {
        for (name, pairs) in [("normal", &self.normal), ("reduce", &self.reduce)] {
            if pairs.len() != 2 * INTERMEDIATE_NODES {
                return Err(Error::invalid(format!(
                    "{name}: expected {} pairs, got {}",
                    2 * INTERMEDIATE_NODES,
                    pairs.len()
                )));
            }
            for node in 0..INTERMEDIATE_NODES {
                let a = pairs[2 * node];
                let b = pairs[2 * node + 1];
                if a.0 == OpKind::Zero || b.0 == OpKind::Zero {
                    return Err(Error::invalid(format!(
                        "{name}: node {node} selects the zero op"
                    )));
                }
                if a.1 == b.1 {
                    return Err(Error::invalid(format!(
                        "{name}: node {node} uses source {} twice",
                        a.1
                    )));
                }
                for (_, src) in [a, b] {
                    if src >= node + 2 {
                        return Err(Error::invalid(format!(
                            "{name}: node {node} references source {src} (max {})",
                            node + 1
                        )));
                    }
                }
            }
        }
        if self.concat != (2, 5) {
            return Err(Error::invalid(format!(
                "concat range must be 2-5, got {}-{}",
                self.concat.0, self.concat.1
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let fmt = |pairs: &[(OpKind, usize)]| {
            pairs
                .iter()
                .map(|(k, s)| format!("({},{})", k.name(), s))
                .collect::<Vec<_>>()
                .join(" ")
        };
        format!(
            "normal: {}\nreduce: {}\nconcat: {}-{}\n",
            fmt(&self.normal),
            fmt(&self.reduce),
            self.concat.0,
            self.concat.1
        )
    }

    pub fn parse(text: &str) -> Result<Genotype> {
        let mut lines = text.lines().enumerate();
        let parse_pairs = |line_no: usize, line: &str, key: &str| -> Result<Vec<(OpKind, usize)>> {
            let prefix = format!("{key}:");
            let rest = line.strip_prefix(&prefix).ok_or(Error::Parse {
                line: line_no + 1,
                col: 1,
                msg: format!("expected line starting with `{prefix}`"),
            })?;
            let mut pairs = Vec::new();
            let base_col = prefix.len();
            let mut offset = 0usize;
            for tok in rest.split_whitespace() {
                let col = base_col + rest[offset..].find(tok).map(|p| offset + p).unwrap_or(offset) + 1;
                offset = rest[offset..]
                    .find(tok)
                    .map(|p| offset + p + tok.len())
                    .unwrap_or(offset);
                let inner = tok
                    .strip_prefix('(')
                    .and_then(|t| t.strip_suffix(')'))
                    .ok_or(Error::Parse {
                        line: line_no + 1,
                        col,
                        msg: format!("expected `(op,src)`, got `{tok}`"),
                    })?;
                let (op_name, src_str) = inner.split_once(',').ok_or(Error::Parse {
                    line: line_no + 1,
                    col,
                    msg: format!("missing comma in `{tok}`"),
                })?;
                let kind = OpKind::from_name(op_name).ok_or(Error::Parse {
                    line: line_no + 1,
                    col,
                    msg: format!("unknown operation `{op_name}`"),
                })?;
                let src: usize = src_str.parse().map_err(|_| Error::Parse {
                    line: line_no + 1,
                    col,
                    msg: format!("bad source node `{src_str}`"),
                })?;
                pairs.push((kind, src));
            }
            Ok(pairs)
        };

        let (n1, l1) = lines.next().ok_or(Error::Parse {
            line: 1,
            col: 1,
            msg: "missing `normal:` line".to_string(),
        })?;
        let normal = parse_pairs(n1, l1, "normal")?;
        let (n2, l2) = lines.next().ok_or(Error::Parse {
            line: 2,
            col: 1,
            msg: "missing `reduce:` line".to_string(),
        })?;
        let reduce = parse_pairs(n2, l2, "reduce")?;
        let (n3, l3) = lines.next().ok_or(Error::Parse {
            line: 3,
            col: 1,
            msg: "missing `concat:` line".to_string(),
        })?;
        let concat_str = l3.strip_prefix("concat:").ok_or(Error::Parse {
            line: n3 + 1,
            col: 1,
            msg: "expected line starting with `concat:`".to_string(),
        })?;
        let (lo, hi) = concat_str.trim().split_once('-').ok_or(Error::Parse {
            line: n3 + 1,
            col: 8,
            msg: "expected `lo-hi` range".to_string(),
        })?;
        let concat = (
            lo.trim().parse().map_err(|_| Error::Parse {
                line: n3 + 1,
                col: 8,
                msg: format!("bad concat bound `{lo}`"),
            })?,
            hi.trim().parse().map_err(|_| Error::Parse {
                line: n3 + 1,
                col: 8,
                msg: format!("bad concat bound `{hi}`"),
            })?,
        );
        let g = Genotype { normal, reduce, concat };
        g.validate()?;
        Ok(g)
    }
}

/// Argmax discretization: per edge the most probable non-zero operation, per
/// node the two strongest incoming edges. Ties break toward lower op index,
/// then lower source node.
pub fn derive_genotype(alpha: &ArchParams) -> Result<Genotype> {
    alpha.check_finite()?;
    let derive_one = |matrix: &Tensor| -> Vec<(OpKind, usize)> {
        let v = matrix.values();
        let mut pairs = Vec::with_capacity(2 * INTERMEDIATE_NODES);
        for dst in 0..INTERMEDIATE_NODES {
            // (weight, src, kind) for each incoming edge
            let mut candidates: Vec<(f64, usize, OpKind)> = (0..dst + 2)
                .map(|src| {
                    let row = &v[edge_row(dst, src) * NUM_OPS..][..NUM_OPS];
                    let p = softmax_slice(row);
                    let mut best = (f64::NEG_INFINITY, OpKind::SepConv3x3);
                    for (i, kind) in OpKind::ALL.iter().enumerate() {
                        if *kind == OpKind::Zero {
                            continue;
                        }
                        if p[i] > best.0 {
                            best = (p[i], *kind);
                        }
                    }
                    (best.0, src, best.1)
                })
                .collect();
            // strongest first; equal weights favor the lower source node
            candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let mut chosen: Vec<(OpKind, usize)> =
                candidates[..2].iter().map(|&(_, src, kind)| (kind, src)).collect();
            chosen.sort_by_key(|&(_, src)| src);
            pairs.extend(chosen);
        }
        pairs
    };
    Ok(Genotype {
        normal: derive_one(&alpha.normal),
        reduce: derive_one(&alpha.reduce),
        concat: (2, 5),
    })
}
