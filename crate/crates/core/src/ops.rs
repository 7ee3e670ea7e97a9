//! The nine candidate operations of the cell search space.
//!
//! Every operation is shape-preserving up to stride: (N, C, H, W) maps to
//! (N, C, ceil(H/stride), ceil(W/stride)).

use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, PoolKind, Tape, Tensor, TensorId};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Candidate operation set, in canonical index order 0..8.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    SepConv3x3,
    SepConv5x5,
    DilConv3x3,
    DilConv5x5,
    AvgPool3x3,
    MaxPool3x3,
    SkipConnect,
    Zero,
    MaxFeatureMap,
}

pub const NUM_OPS: usize = 9;

impl OpKind {
    pub const ALL: [OpKind; NUM_OPS] = [
        OpKind::SepConv3x3,
        OpKind::SepConv5x5,
        OpKind::DilConv3x3,
        OpKind::DilConv5x5,
        OpKind::AvgPool3x3,
        OpKind::MaxPool3x3,
        OpKind::SkipConnect,
        OpKind::Zero,
        OpKind::MaxFeatureMap,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::SepConv3x3 => "sep_conv_3x3",
            OpKind::SepConv5x5 => "sep_conv_5x5",
            OpKind::DilConv3x3 => "dil_conv_3x3",
            OpKind::DilConv5x5 => "dil_conv_5x5",
            OpKind::AvgPool3x3 => "avg_pool_3x3",
            OpKind::MaxPool3x3 => "max_pool_3x3",
            OpKind::SkipConnect => "skip_connect",
            OpKind::Zero => "zero",
            OpKind::MaxFeatureMap => "max_feature_map",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::ALL.iter().copied().find(|k| k.name() == name)
    }
}

/// One instantiated candidate operation with its learnable parameters.
#[derive(Clone, Debug)]
pub struct OpInstance {
    pub kind: OpKind,
    pub channels: usize,
    pub stride: usize,
    params: Vec<Tensor>,
}

pub(crate) fn uniform_param(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::param(shape, values).unwrap()
}

pub(crate) fn norm_params(c: usize) -> (Tensor, Tensor) {
    let gamma = Tensor::param(vec![c], vec![1.0; c]).unwrap();
    let beta = Tensor::param(vec![c], vec![0.0; c]).unwrap();
    (gamma, beta)
}

/// Builds a candidate op with seeded uniform ±sqrt(1/fan_in) initialization.
pub fn build_op(kind: OpKind, channels: usize, stride: usize, seed: u64) -> Result<OpInstance> {
    if channels < 2 || channels % 2 != 0 {
        return Err(Error::invalid(format!(
            "candidate ops require an even channel count >= 2, got {channels}"
        )));
    }
    if !(1..=2).contains(&stride) {
        return Err(Error::invalid(format!("stride must be 1 or 2, got {stride}")));
    }
    let c = channels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    match kind {
        OpKind::SepConv3x3 | OpKind::SepConv5x5 => {
            let k = if kind == OpKind::SepConv3x3 { 3 } else { 5 };
            for _ in 0..2 {
                params.push(uniform_param(&mut rng, vec![c, 1, k, k], k * k));
                params.push(uniform_param(&mut rng, vec![c, c, 1, 1], c));
                let (g, b) = norm_params(c);
                params.push(g);
                params.push(b);
            }
        }
        OpKind::DilConv3x3 | OpKind::DilConv5x5 => {
            let k = if kind == OpKind::DilConv3x3 { 3 } else { 5 };
            params.push(uniform_param(&mut rng, vec![c, 1, k, k], k * k));
            params.push(uniform_param(&mut rng, vec![c, c, 1, 1], c));
            let (g, b) = norm_params(c);
            params.push(g);
            params.push(b);
        }
        OpKind::AvgPool3x3 | OpKind::MaxPool3x3 => {
            let (g, b) = norm_params(c);
            params.push(g);
            params.push(b);
        }
        OpKind::SkipConnect => {
            if stride == 2 {
                // factorized reduce: two offset pointwise convs to C/2 each
                params.push(uniform_param(&mut rng, vec![c / 2, c, 1, 1], c));
                params.push(uniform_param(&mut rng, vec![c / 2, c, 1, 1], c));
                let (g, b) = norm_params(c);
                params.push(g);
                params.push(b);
            }
        }
        OpKind::Zero => {}
        OpKind::MaxFeatureMap => {
            params.push(uniform_param(&mut rng, vec![2 * c, c, 1, 1], c));
        }
    }
    Ok(OpInstance {
        kind,
        channels,
        stride,
        params,
    })
}

/// Channel-pair max: out channel k = max(y channel k, y channel k + C).
pub fn mfm_pairing(tape: &mut Tape, y: TensorId) -> Result<TensorId> {
    let shape = tape.shape(y);
    if shape.len() != 4 {
        return Err(Error::shape(format!("mfm_pairing expects 4-d input, got {shape:?}")));
    }
    let c2 = shape[1];
    if c2 % 2 != 0 {
        return Err(Error::invalid(format!(
            "mfm_pairing requires an even channel count, got {c2}"
        )));
    }
    let c = c2 / 2;
    let lo = tape.slice_channels(y, 0, c)?;
    let hi = tape.slice_channels(y, c, c)?;
    tape.elementwise_max(lo, hi)
}

fn dw_spec(stride: usize, dilation: usize, k: usize, groups: usize) -> ConvSpec {
    ConvSpec {
        stride,
        dilation,
        groups,
        padding: dilation * (k - 1) / 2,
    }
}

const PW: ConvSpec = ConvSpec { stride: 1, dilation: 1, groups: 1, padding: 0 };

impl OpInstance {
    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Binds this op's parameters onto the tape (leaf per tensor, in order).
    pub fn bind(&self, tape: &mut Tape) -> Vec<TensorId> {
        self.params.iter().map(|p| tape.leaf(p)).collect()
    }

    /// Applies the op. `ids` must come from [`OpInstance::bind`] on the same tape.
    pub fn apply(&self, tape: &mut Tape, ids: &[TensorId], x: TensorId) -> Result<TensorId> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::shape(format!(
                "{}: expected input channels {}, got shape {:?}",
                self.kind.name(),
                self.channels,
                shape
            )));
        }
        debug_assert_eq!(ids.len(), self.params.len());
        let s = self.stride;
        match self.kind {
            OpKind::SepConv3x3 | OpKind::SepConv5x5 => {
                let k = if self.kind == OpKind::SepConv3x3 { 3 } else { 5 };
                let mut cur = x;
                for (stack, stride) in [(0usize, s), (1usize, 1)] {
                    let base = stack * 4;
                    cur = tape.relu(cur);
                    cur = tape.conv2d(cur, ids[base], dw_spec(stride, 1, k, self.channels))?;
                    cur = tape.conv2d(cur, ids[base + 1], PW)?;
                    cur = tape.channel_norm(cur, ids[base + 2], ids[base + 3])?;
                }
                Ok(cur)
            }
            OpKind::DilConv3x3 | OpKind::DilConv5x5 => {
                let k = if self.kind == OpKind::DilConv3x3 { 3 } else { 5 };
                let mut cur = tape.relu(x);
                cur = tape.conv2d(cur, ids[0], dw_spec(s, 2, k, self.channels))?;
                cur = tape.conv2d(cur, ids[1], PW)?;
                tape.channel_norm(cur, ids[2], ids[3])
            }
            OpKind::AvgPool3x3 => {
                let p = tape.pool2d(x, PoolKind::Avg, 3, s, 1)?;
                tape.channel_norm(p, ids[0], ids[1])
            }
            OpKind::MaxPool3x3 => {
                let p = tape.pool2d(x, PoolKind::Max, 3, s, 1)?;
                tape.channel_norm(p, ids[0], ids[1])
            }
            OpKind::SkipConnect => {
                if s == 1 {
                    Ok(x)
                } else {
                    factorized_reduce(tape, x, ids[0], ids[1], ids[2], ids[3])
                }
            }
            OpKind::Zero => {
                let oh = shape[2].div_ceil(s);
                let ow = shape[3].div_ceil(s);
                let out_shape = vec![shape[0], shape[1], oh, ow];
                let n: usize = out_shape.iter().product();
                tape.constant(out_shape, vec![0.0; n])
            }
            OpKind::MaxFeatureMap => {
                let expanded = tape.conv2d(
                    x,
                    ids[0],
                    ConvSpec { stride: s, dilation: 1, groups: 1, padding: 0 },
                )?;
                mfm_pairing(tape, expanded)
            }
        }
    }
}

/// Stride-2 identity surrogate: two pointwise convs on pixel-offset grids,
/// channel-concatenated back to the input channel count, then normalized.
pub fn factorized_reduce(
    tape: &mut Tape,
    x: TensorId,
    w1: TensorId,
    w2: TensorId,
    gamma: TensorId,
    beta: TensorId,
) -> Result<TensorId> {
    let r = tape.relu(x);
    let even = tape.strided_subsample(r, 0, 0, 2)?;
    let odd = tape.strided_subsample(r, 1, 1, 2)?;
    let p1 = tape.conv2d(even, w1, PW)?;
    let p2 = tape.conv2d(odd, w2, PW)?;
    let cat = tape.concat_channels(&[p1, p2])?;
    tape.channel_norm(cat, gamma, beta)
}

/// Gradient checks for every parameterized candidate kind at both strides.
pub fn run_candidate_op_suite(instances: usize, eps: f64) -> Result<Vec<crate::tensor::gradcheck::CheckResult>> {
    use crate::tensor::gradcheck::{grad_check, CheckResult};
    let mut results = Vec::new();
    let c = 4usize;
    for kind in OpKind::ALL {
        for stride in [1usize, 2] {
            let mut worst: f64 = 0.0;
            for inst in 0..instances {
                let base_seed = inst as u64 * 31 + kind.index() as u64 * 977 + stride as u64;
                // redraw instances that land within the FD step of a relu kink
                // or a max tie; the subgradient is not FD-checkable there
                let mut err = None;
                for attempt in 0..64u64 {
                    let seed = base_seed + attempt * 7919;
                    let op = build_op(kind, c, stride, seed)?;
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
                    // keep the post-stride spatial extent large enough that
                    // channel-norm statistics stay low-curvature under FD
                    let side = 8usize;
                    let n = c * side * side;
                    let mut x_vals: Vec<f64> =
                        (0..n).map(|i| -1.0 + (2.0 * i as f64 + 1.0) / n as f64).collect();
                    x_vals.shuffle(&mut rng);
                    let x = Tensor::param(vec![1, c, side, side], x_vals)?;
                    let oh = side.div_ceil(stride);
                    let probe_n = c * oh * oh;
                    let probe = Tensor::new(
                        vec![1, c, oh, oh],
                        (0..probe_n).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    )?;

                    let mut margin_tape = Tape::new();
                    let xid = margin_tape.leaf(&x);
                    let pids = op.bind(&mut margin_tape);
                    op.apply(&mut margin_tape, &pids, xid)?;
                    if margin_tape.kink_margin() <= 3.0 * eps {
                        continue;
                    }

                    let mut inputs = vec![x];
                    inputs.extend(op.params.iter().cloned());
                    err = Some(grad_check(
                        &inputs,
                        |tape, ids| {
                            let y = op.apply(tape, &ids[1..], ids[0])?;
                            let p = tape.leaf(&probe);
                            let prod = tape.mul(y, p)?;
                            Ok(tape.sum(prod))
                        },
                        eps,
                    )?);
                    break;
                }
                let err = err.ok_or_else(|| {
                    Error::invalid(format!(
                        "no kink-free instance found for {} stride {stride}",
                        kind.name()
                    ))
                })?;
                worst = worst.max(err);
            }
            results.push(CheckResult {
                name: format!("{}_stride{}", kind.name(), stride),
                max_rel_err: worst,
            });
        }
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{DEFAULT_EPS, DEFAULT_TOL};

    #[test]
    fn op_kind_set_is_exactly_nine_in_order() {
        assert_eq!(OpKind::ALL.len(), 9);
        let names: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
        assert_eq!(
            names,
            [
                "sep_conv_3x3",
                "sep_conv_5x5",
                "dil_conv_3x3",
                "dil_conv_5x5",
                "avg_pool_3x3",
                "max_pool_3x3",
                "skip_connect",
                "zero",
                "max_feature_map"
            ]
        );
        for (i, k) in OpKind::ALL.iter().enumerate() {
            assert_eq!(k.index(), i);
            assert_eq!(OpKind::from_name(k.name()), Some(*k));
        }
        assert_eq!(OpKind::from_name("conv_7x7"), None);
    }

    #[test]
    fn zero_and_skip_are_parameter_free() {
        assert_eq!(build_op(OpKind::Zero, 8, 1, 0).unwrap().param_count(), 0);
        assert_eq!(build_op(OpKind::SkipConnect, 8, 1, 0).unwrap().param_count(), 0);
    }

    #[test]
    fn sep_conv_parameter_count_formula() {
        for c in [4usize, 8, 16] {
            let op = build_op(OpKind::SepConv3x3, c, 1, 0).unwrap();
            assert_eq!(op.param_count(), 2 * (c * 9 + c * c + 2 * c));
            let op5 = build_op(OpKind::SepConv5x5, c, 1, 0).unwrap();
            assert_eq!(op5.param_count(), 2 * (c * 25 + c * c + 2 * c));
        }
    }

    #[test]
    fn odd_channels_rejected() {
        assert!(build_op(OpKind::SepConv3x3, 7, 1, 0).is_err());
        assert!(build_op(OpKind::Zero, 0, 1, 0).is_err());
    }

    #[test]
    fn parameter_count_depends_only_on_kind_and_channels() {
        for kind in OpKind::ALL {
            if kind == OpKind::SkipConnect {
                continue; // stride changes the block structure for skip
            }
            let a = build_op(kind, 8, 1, 1).unwrap();
            let b = build_op(kind, 8, 1, 99).unwrap();
            assert_eq!(a.param_count(), b.param_count());
        }
    }

    #[test]
    fn zero_op_outputs_zeros_at_post_stride_shape() {
        let mut tape = Tape::new();
        let x = tape
            .constant(vec![2, 4, 5, 7], (0..280).map(|i| i as f64).collect())
            .unwrap();
        for stride in [1usize, 2] {
            let op = build_op(OpKind::Zero, 4, stride, 0).unwrap();
            let ids = op.bind(&mut tape);
            let y = op.apply(&mut tape, &ids, x).unwrap();
            assert_eq!(tape.shape(y), &[2, 4, 5usize.div_ceil(stride), 7usize.div_ceil(stride)]);
            assert!(tape.values(y).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn skip_stride1_is_identity() {
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..64).map(|i| i as f64 * 0.1).collect();
        let x = tape.constant(vec![1, 4, 4, 4], vals.clone()).unwrap();
        let op = build_op(OpKind::SkipConnect, 4, 1, 0).unwrap();
        let ids = op.bind(&mut tape);
        let y = op.apply(&mut tape, &ids, x).unwrap();
        assert_eq!(tape.values(y), &vals[..]);
    }

    #[test]
    fn mfm_constructed_kernel_gives_absolute_value() {
        // pointwise kernel set so output channel pair k is (+x_k, -x_k)
        let c = 2usize;
        let mut op = build_op(OpKind::MaxFeatureMap, c, 1, 0).unwrap();
        let w = &mut op.params_mut()[0];
        let wv = w.values_mut();
        wv.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..c {
            wv[k * c + k] = 1.0; // out channel k = +x_k
            wv[(k + c) * c + k] = -1.0; // out channel k+C = -x_k
        }
        let mut tape = Tape::new();
        let vals = vec![1.5, -2.0, 0.0, 3.0, -1.0, 2.5, -0.5, 0.25];
        let x = tape.constant(vec![1, c, 2, 2], vals.clone()).unwrap();
        let ids = op.bind(&mut tape);
        let y = op.apply(&mut tape, &ids, x).unwrap();
        let expect: Vec<f64> = vals.iter().map(|v| v.abs()).collect();
        assert_eq!(tape.values(y), &expect[..]);
    }

    #[test]
    fn mfm_pairing_basics() {
        let mut tape = Tape::new();
        let y = tape.constant(vec![1, 2, 1, 1], vec![1.0, -5.0]).unwrap();
        let out = mfm_pairing(&mut tape, y).unwrap();
        assert_eq!(tape.values(out), &[1.0]);

        // identical halves -> either half
        let y2 = tape.constant(vec![1, 4, 1, 1], vec![2.0, 3.0, 2.0, 3.0]).unwrap();
        let out2 = mfm_pairing(&mut tape, y2).unwrap();
        assert_eq!(tape.values(out2), &[2.0, 3.0]);

        let odd = tape.constant(vec![1, 3, 1, 1], vec![0.0; 3]).unwrap();
        assert!(mfm_pairing(&mut tape, odd).is_err());
    }

    #[test]
    fn mfm_pairing_matches_per_pixel_max_oracle() {
        use rand::prelude::*;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let vals: Vec<f64> = (0..4 * 9).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut tape = Tape::new();
        let y = tape.constant(vec![1, 4, 3, 3], vals.clone()).unwrap();
        let out = mfm_pairing(&mut tape, y).unwrap();
        let ov = tape.values(out);
        for k in 0..2 {
            for i in 0..9 {
                let a = vals[k * 9 + i];
                let b = vals[(k + 2) * 9 + i];
                assert_eq!(ov[k * 9 + i], a.max(b));
                // output dominates both source channels
                assert!(ov[k * 9 + i] >= a && ov[k * 9 + i] >= b);
            }
        }
    }

    #[test]
    fn shape_law_all_kinds_and_strides() {
        for kind in OpKind::ALL {
            for stride in [1usize, 2] {
                for (h, w) in [(6usize, 6usize), (5, 7), (7, 5)] {
                    let op = build_op(kind, 4, stride, 3).unwrap();
                    let mut tape = Tape::new();
                    let x = tape.constant(vec![2, 4, h, w], vec![0.1; 2 * 4 * h * w]).unwrap();
                    let ids = op.bind(&mut tape);
                    let y = op.apply(&mut tape, &ids, x).unwrap();
                    assert_eq!(
                        tape.shape(y),
                        &[2, 4, h.div_ceil(stride), w.div_ceil(stride)],
                        "{} stride {stride} on {h}x{w}",
                        kind.name()
                    );
                }
            }
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let op = build_op(OpKind::SepConv3x3, 4, 1, 0).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 6, 4, 4], vec![0.0; 96]).unwrap();
        let ids = op.bind(&mut tape);
        assert!(op.apply(&mut tape, &ids, x).is_err());
    }

    #[test]
    fn grad_check_all_kinds_both_strides() {
        for check in run_candidate_op_suite(2, DEFAULT_EPS).unwrap() {
            assert!(
                check.max_rel_err <= DEFAULT_TOL,
                "{}: max rel err {}",
                check.name,
                check.max_rel_err
            );
        }
    }
}
