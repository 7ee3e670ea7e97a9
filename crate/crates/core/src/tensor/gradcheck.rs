//! Finite-difference gradient checking for tape primitives.

use super::{ConvSpec, PoolKind, Tape, Tensor, TensorId};
use crate::error::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_EPS: f64 = 1e-3;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Compares analytic gradients against central finite differences.
///
/// `f` must build a scalar loss from leaves of the given inputs. Returns the
/// max over all coordinates of |analytic − numeric| / max(1, |numeric|),
/// taken over every input with `requires_grad`.
pub fn grad_check<F>(inputs: &[Tensor], f: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let eval = |ts: &[Tensor]| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = ts.iter().map(|t| tape.leaf(t)).collect();
        let loss = f(&mut tape, &ids)?;
        Ok((tape.scalar_value(loss)?, tape.kink_signature()))
    };

    // analytic pass
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = f(&mut tape, &ids)?;
    if tape.values(loss).len() != 1 {
        return Err(Error::shape("grad_check: loss must be scalar".to_string()));
    }
    tape.backward(loss)?;
    let base_sig = tape.kink_signature();

    let mut max_err: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        if !input.requires_grad() {
            continue;
        }
        let zeros = vec![0.0; input.numel()];
        let analytic: Vec<f64> = tape.grad(ids[i]).map(|g| g.to_vec()).unwrap_or(zeros);
        for j in 0..input.numel() {
            let orig = work[i].values()[j];
            let mut vals = [0.0f64; 4];
            let mut sig_ok = true;
            for (slot, h) in [(0usize, eps), (1, -eps), (2, eps / 2.0), (3, -eps / 2.0)] {
                work[i].values_mut()[j] = orig + h;
                let (v, sig) = eval(&work)?;
                vals[slot] = v;
                sig_ok &= sig == base_sig;
            }
            work[i].values_mut()[j] = orig;
            if !sig_ok {
                // the perturbed evaluations straddle a relu/max kink; the
                // FD quotient is meaningless for this coordinate
                continue;
            }
            // Richardson-extrapolated central difference: cancels the
            // leading O(eps^2) curvature term
            let d_full = (vals[0] - vals[1]) / (2.0 * eps);
            let d_half = (vals[2] - vals[3]) / eps;
            let numeric = (4.0 * d_half - d_full) / 3.0;
            let err = (analytic[j] - numeric).abs() / numeric.abs().max(1.0);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Uniform values kept away from zero (ReLU kink safety under FD eps).
fn uniform_off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

/// Distinct, well-separated values in random order (argmax stability).
fn distinct_shuffled(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / n.max(2) as f64).collect();
    v.shuffle(rng);
    v
}

fn param(shape: &[usize], values: Vec<f64>) -> Tensor {
    Tensor::param(shape.to_vec(), values).unwrap()
}

/// Scalarize a tensor output: dot with a fixed probe and sum.
fn probe_loss(tape: &mut Tape, y: TensorId, probe: &Tensor) -> Result<TensorId> {
    let c = tape.leaf(probe);
    let prod = tape.mul(y, c)?;
    Ok(tape.sum(prod))
}

pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
}

/// Runs every tape primitive through `grad_check` on `instances` seeded random
/// inputs each; returns the worst error per primitive.
pub fn run_primitive_suite(instances: usize, eps: f64) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    let mut run = |name: &str, f: &mut dyn FnMut(u64) -> Result<f64>| -> Result<()> {
        let mut worst: f64 = 0.0;
        for k in 0..instances {
            worst = worst.max(f(k as u64)?);
        }
        results.push(CheckResult {
            name: name.to_string(),
            max_rel_err: worst,
        });
        Ok(())
    };

    run("relu", &mut |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = param(&[2, 5], uniform_off_zero(&mut rng, 10));
        let probe = Tensor::new(vec![2, 5], uniform(&mut rng, 10))?;
        grad_check(&[x], |t, ids| {
            let y = t.relu(ids[0]);
            probe_loss(t, y, &probe)
        }, eps)
    })?;

    run("add", &mut |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let a = param(&[3, 4], uniform(&mut rng, 12));
        let b = param(&[3, 4], uniform(&mut rng, 12));
        let probe = Tensor::new(vec![3, 4], uniform(&mut rng, 12))?;
        grad_check(&[a, b], |t, ids| {
            let y = t.add(ids[0], ids[1])?;
            probe_loss(t, y, &probe)
        }, eps)
    })?;

    run("elementwise_max", &mut |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
        // tie-free pairs: enforce a gap well above the FD step
        let a_vals = uniform(&mut rng, 12);
        let b_vals: Vec<f64> = a_vals
            .iter()
            .map(|&v| {
                let delta: f64 = rng.random_range(0.05..0.5);
                if rng.random_bool(0.5) {
                    v + delta
                } else {
                    v - delta
                }
            })
            .collect();
        let a = param(&[3, 4], a_vals);
        let b = param(&[3, 4], b_vals);
        let probe = Tensor::new(vec![3, 4], uniform(&mut rng, 12))?;
        grad_check(&[a, b], |t, ids| {
            let y = t.elementwise_max(ids[0], ids[1])?;
            probe_loss(t, y, &probe)
        }, eps)
    })?;

    run("softmax", &mut |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 300);
        let x = param(&[2, 9], uniform(&mut rng, 18));
        let probe = Tensor::new(vec![2, 9], uniform(&mut rng, 18))?;
        grad_check(&[x], |t, ids| {
            let y = t.softmax(ids[0])?;
            probe_loss(t, y, &probe)
        }, eps)
    })?;

    run("log_softmax", &mut |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 400);
        let x = param(&[2, 9], uniform(&mut rng, 18));
        let probe = Tensor::new(vec![2, 9], uniform(&mut rng, 18))?;
        grad_check(&[x], |t, ids| {
            let y = t.log_softmax(ids[0])?;
            probe_loss(t, y, &probe)
        }, eps)
    })?;

    run("cross_entropy", &mut |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 500);
        let x = param(&[4, 3], uniform(&mut rng, 12));
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
        grad_check(&[x], |t, ids| t.cross_entropy(ids[0], &labels), eps)
    })?;

    run("linear", &mut |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 600);
        let x = param(&[3, 5], uniform(&mut rng, 15));
        let w = param(&[2, 5], uniform(&mut rng, 10));
        let b = param(&[2], uniform(&mut rng, 2));
        let probe = Tensor::new(vec![3, 2], uniform(&mut rng, 6))?;
        grad_check(&[x, w, b], |t, ids| {
            let y = t.linear(ids[0], ids[1], ids[2])?;
            probe_loss(t, y, &probe)
        }, eps)
    })?;

    run("conv2d_dense", &mut |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 700);
        let x = param(&[1, 2, 5, 4], uniform(&mut rng, 40));
        let k = param(&[3, 2, 3, 3], uniform(&mut rng, 54));
        let spec = ConvSpec { stride: 1, dilation: 1, groups: 1, padding: 1 };
        let probe = Tensor::new(vec![1, 3, 5, 4], uniform(&mut rng, 60))?;
        grad_check(&[x, k], move |t, ids| {
            let y = t.conv2d(ids[0], ids[1], spec)?;
            probe_loss(t, y, &probe)
        }, eps)
    })?;

    run("conv2d_strided", &mut |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 800);
        let x = param(&[2, 2, 6, 5], uniform(&mut rng, 120));
        let k = param(&[2, 2, 3, 3], uniform(&mut rng, 36));
        let spec = ConvSpec { stride: 2, dilation: 1, groups: 1, padding: 1 };
        let probe = Tensor::new(vec![2, 2, 3, 3], uniform(&mut rng, 36))?;
        grad_check(&[x, k], move |t, ids| {
            let y = t.conv2d(ids[0], ids[1], spec)?;
            probe_loss(t, y, &probe)
        }, eps)
    })?;

    run("conv2d_dilated", &mut |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 900);
        let x = param(&[1, 2, 7, 7], uniform(&mut rng, 98));
        let k = param(&[2, 2, 3, 3], uniform(&mut rng, 36));
        let spec = ConvSpec { stride: 1, dilation: 2, groups: 1, padding: 2 };
        let probe = Tensor::new(vec![1, 2, 7, 7], uniform(&mut rng, 98))?;
        grad_check(&[x, k], move |t, ids| {
            let y = t.conv2d(ids[0], ids[1], spec)?;
            probe_loss(t, y, &probe)
        }, eps)
    })?;

    run("conv2d_depthwise", &mut |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let x = param(&[1, 4, 5, 5], uniform(&mut rng, 100));
        let k = param(&[4, 1, 3, 3], uniform(&mut rng, 36));
        let spec = ConvSpec { stride: 1, dilation: 1, groups: 4, padding: 1 };
        let probe = Tensor::new(vec![1, 4, 5, 5], uniform(&mut rng, 100))?;
        grad_check(&[x, k], move |t, ids| {
            let y = t.conv2d(ids[0], ids[1], spec)?;
            probe_loss(t, y, &probe)
        }, eps)
    })?;

    run("pool2d_avg", &mut |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1100);
        let x = param(&[1, 2, 5, 5], uniform(&mut rng, 50));
        let probe = Tensor::new(vec![1, 2, 3, 3], uniform(&mut rng, 18))?;
        grad_check(&[x], |t, ids| {
            let y = t.pool2d(ids[0], PoolKind::Avg, 3, 2, 1)?;
            probe_loss(t, y, &probe)
        }, eps)
    })?;

    run("pool2d_max", &mut |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1200);
        let x = param(&[1, 2, 5, 5], distinct_shuffled(&mut rng, 50));
        let probe = Tensor::new(vec![1, 2, 3, 3], uniform(&mut rng, 18))?;
        grad_check(&[x], |t, ids| {
            let y = t.pool2d(ids[0], PoolKind::Max, 3, 2, 1)?;
            probe_loss(t, y, &probe)
        }, eps)
    })?;

    run("channel_norm", &mut |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1300);
        let x = param(&[2, 3, 4, 4], uniform(&mut rng, 96));
        let g = param(&[3], uniform_off_zero(&mut rng, 3));
        let b = param(&[3], uniform(&mut rng, 3));
        let probe = Tensor::new(vec![2, 3, 4, 4], uniform(&mut rng, 96))?;
        grad_check(&[x, g, b], |t, ids| {
            let y = t.channel_norm(ids[0], ids[1], ids[2])?;
            probe_loss(t, y, &probe)
        }, eps)
    })?;

    run("global_avg_pool", &mut |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1400);
        let x = param(&[2, 3, 4, 4], uniform(&mut rng, 96));
        let probe = Tensor::new(vec![2, 3], uniform(&mut rng, 6))?;
        grad_check(&[x], |t, ids| {
            let y = t.global_avg_pool(ids[0])?;
            probe_loss(t, y, &probe)
        }, eps)
    })?;

    run("concat_slice_channels", &mut |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1500);
        let a = param(&[1, 2, 3, 3], uniform(&mut rng, 18));
        let b = param(&[1, 3, 3, 3], uniform(&mut rng, 27));
        let probe = Tensor::new(vec![1, 3, 3, 3], uniform(&mut rng, 27))?;
        grad_check(&[a, b], |t, ids| {
            let y = t.concat_channels(&[ids[0], ids[1]])?;
            let s = t.slice_channels(y, 1, 3)?;
            probe_loss(t, s, &probe)
        }, eps)
    })?;

    run("weighted_sum", &mut |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1600);
        let a = param(&[2, 4], uniform(&mut rng, 8));
        let b = param(&[2, 4], uniform(&mut rng, 8));
        let c = param(&[2, 4], uniform(&mut rng, 8));
        let w = param(&[3], uniform(&mut rng, 3));
        let probe = Tensor::new(vec![2, 4], uniform(&mut rng, 8))?;
        grad_check(&[a, b, c, w], |t, ids| {
            let y = t.weighted_sum(&ids[0..3], ids[3])?;
            probe_loss(t, y, &probe)
        }, eps)
    })?;

    run("strided_subsample", &mut |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1700);
        let x = param(&[1, 2, 5, 5], uniform(&mut rng, 50));
        let probe = Tensor::new(vec![1, 2, 3, 3], uniform(&mut rng, 18))?;
        grad_check(&[x], |t, ids| {
            let y = t.strided_subsample(ids[0], 1, 1, 2)?;
            probe_loss(t, y, &probe)
        }, eps)
    })?;

    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes_on_ten_seeded_instances() {
        for check in run_primitive_suite(10, DEFAULT_EPS).unwrap() {
            assert!(
                check.max_rel_err <= DEFAULT_TOL,
                "{}: max rel err {}",
                check.name,
                check.max_rel_err
            );
        }
    }

    #[test]
    fn linear_layer_within_tolerance() {
        let results = run_primitive_suite(3, DEFAULT_EPS).unwrap();
        let linear = results.iter().find(|c| c.name == "linear").unwrap();
        assert!(linear.max_rel_err <= DEFAULT_TOL);
    }
}
