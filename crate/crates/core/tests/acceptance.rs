//! End-to-end acceptance suite. Each test prints a single summary line
//! (bypassing libtest capture) so a full run reads as a checklist.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use spoofsearch::data::{self, Dataset, FeatureMatrix, Label};
use spoofsearch::eval::{compute_eer, score_dataset, score_utterance, ScoreRecord};
use spoofsearch::ops::{build_op, run_candidate_op_suite, OpKind, NUM_OPS};
use spoofsearch::search::{retrain_discrete, run_search, save_model, Order, SearchConfig};
use spoofsearch::supernet::{
    derive_genotype, edge_row, instantiate_discrete, mixed_forward, ArchParams, Genotype, Network,
    NetworkConfig, EDGES_PER_CELL, INTERMEDIATE_NODES,
};
use spoofsearch::tensor::gradcheck::{run_primitive_suite, DEFAULT_EPS, DEFAULT_TOL};
use spoofsearch::{Tape, Tensor};

/// Prints directly to the process stdout so the line survives libtest's
/// output capture.
fn report(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, values).unwrap()
}

// ── 1. gradient fidelity ────────────────────────────────────────────────

#[test]
fn gradient_fidelity() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for suite in [
        run_primitive_suite(10, DEFAULT_EPS).unwrap(),
        run_candidate_op_suite(10, DEFAULT_EPS).unwrap(),
    ] {
        for r in suite {
            worst = worst.max(r.max_rel_err);
            if r.max_rel_err > DEFAULT_TOL {
                failures.push(format!("{} {:.3e}", r.name, r.max_rel_err));
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let ok = failures.is_empty() && elapsed < 60.0;
    report(&format!(
        "{} gradient fidelity: worst rel err {:.3e} (tol {:.0e}), {:.1}s (limit 60s)",
        if ok { "PASS" } else { "FAIL" },
        worst,
        DEFAULT_TOL,
        elapsed
    ));
    assert!(failures.is_empty(), "gradient failures: {failures:?}");
    assert!(elapsed < 60.0, "gradient suite took {elapsed:.1}s");
}

// ── 2. EER oracle equivalence ───────────────────────────────────────────

/// Independent oracle: every score is a candidate threshold (accept bonafide
/// when score >= t); FAR and FRR are tabulated exhaustively over all
/// candidates plus the two infinite endpoints, and the equal-error point is
/// the linear interpolation at the sign change of FAR - FRR.
fn eer_oracle(bona: &[f64], spoof: &[f64]) -> f64 {
    let mut ts: Vec<f64> = bona.iter().chain(spoof).copied().collect();
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ts.dedup();
    let rates = |t: f64| -> (f64, f64) {
        let far = spoof.iter().filter(|&&s| s >= t).count() as f64 / spoof.len() as f64;
        let frr = bona.iter().filter(|&&s| s < t).count() as f64 / bona.len() as f64;
        (far, frr)
    };
    let mut points = vec![(1.0f64, 0.0f64)];
    points.extend(ts.iter().map(|&t| rates(t)));
    points.push((0.0, 1.0));
    for w in points.windows(2) {
        let (far0, frr0) = w[0];
        let (far1, frr1) = w[1];
        let d0 = far0 - frr0;
        let d1 = far1 - frr1;
        if d0 == 0.0 {
            return far0;
        }
        if d1 < 0.0 {
            let lambda = d0 / (d0 - d1);
            return far0 + lambda * (far1 - far0);
        }
        if d1 == 0.0 {
            return far1;
        }
    }
    unreachable!("no FAR/FRR crossing")
}

fn records_from(bona: &[f64], spoof: &[f64]) -> Vec<ScoreRecord> {
    let mut recs = Vec::new();
    for (i, &s) in bona.iter().enumerate() {
        recs.push(ScoreRecord {
            utt_id: format!("b{i}"),
            score: s,
            label: Label::Bonafide,
        });
    }
    for (i, &s) in spoof.iter().enumerate() {
        recs.push(ScoreRecord {
            utt_id: format!("s{i}"),
            score: s,
            label: Label::Spoof,
        });
    }
    recs
}

#[test]
fn eer_oracle_equivalence() {
    let mut max_diff: f64 = 0.0;
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bona: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..1.0)).collect();
        let spoof: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..1.0)).collect();
        let (eer, _) = compute_eer(&records_from(&bona, &spoof)).unwrap();
        let oracle = eer_oracle(&bona, &spoof);
        max_diff = max_diff.max((eer - oracle).abs());
    }
    // perfectly separated classes must yield exactly zero
    let bona: Vec<f64> = (0..50).map(|i| 10.0 + i as f64).collect();
    let spoof: Vec<f64> = (0..50).map(|i| -10.0 - i as f64).collect();
    let (sep_eer, _) = compute_eer(&records_from(&bona, &spoof)).unwrap();
    let ok = max_diff <= 1e-12 && sep_eer == 0.0;
    report(&format!(
        "{} EER oracle equivalence: max |diff| {:.3e} over 1000 sets (tol 1e-12), separated EER {}",
        if ok { "PASS" } else { "FAIL" },
        max_diff,
        sep_eer
    ));
    assert!(max_diff <= 1e-12, "EER deviates from oracle by {max_diff:e}");
    assert_eq!(sep_eer, 0.0, "separated score sets must give EER 0");
}

// ── 3. mixed-edge convexity and shift symmetry ──────────────────────────

#[test]
fn mixed_edge_convexity_and_symmetry() {
    let c = 8;
    let side = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x_t = random_tensor(&mut rng, vec![2, c, side, side]);
    let ops: Vec<_> = OpKind::ALL
        .iter()
        .map(|&k| build_op(k, c, 1, 1000 + k.index() as u64).unwrap())
        .collect();

    // uniform logits: the mixture must equal the plain mean of the op outputs
    let mut tape = Tape::new();
    let x = tape.leaf(&x_t);
    let ids: Vec<_> = ops.iter().map(|op| op.bind(&mut tape)).collect();
    let alpha = tape.constant(vec![NUM_OPS], vec![0.37; NUM_OPS]).unwrap();
    let mixed = mixed_forward(&mut tape, &ops, &ids, x, alpha).unwrap();
    let mixed_vals = tape.values(mixed).to_vec();
    let outs: Vec<Vec<f64>> = ops
        .iter()
        .zip(&ids)
        .map(|(op, id)| {
            let y = op.apply(&mut tape, id, x).unwrap();
            tape.values(y).to_vec()
        })
        .collect();
    let mut mean_err: f64 = 0.0;
    for (j, mv) in mixed_vals.iter().enumerate() {
        let mean: f64 = outs.iter().map(|o| o[j]).sum::<f64>() / NUM_OPS as f64;
        mean_err = mean_err.max((mv - mean).abs());
    }

    // adding a constant to every logit of a row cannot move the output
    let mut shift_err: f64 = 0.0;
    for shift in [-3.25, 0.5, 7.0] {
        let mut t2 = Tape::new();
        let x2 = t2.leaf(&x_t);
        let ids2: Vec<_> = ops.iter().map(|op| op.bind(&mut t2)).collect();
        let logits: Vec<f64> = (0..NUM_OPS).map(|i| (i as f64 * 0.21) - 0.9).collect();
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        let a0 = t2.constant(vec![NUM_OPS], logits).unwrap();
        let a1 = t2.constant(vec![NUM_OPS], shifted).unwrap();
        let y0 = mixed_forward(&mut t2, &ops, &ids2, x2, a0).unwrap();
        let y1 = mixed_forward(&mut t2, &ops, &ids2, x2, a1).unwrap();
        let v0 = t2.values(y0);
        let v1 = t2.values(y1);
        for (a, b) in v0.iter().zip(v1) {
            shift_err = shift_err.max((a - b).abs());
        }
    }
    let ok = mean_err <= 1e-6 && shift_err <= 1e-12;
    report(&format!(
        "{} mixed-edge convexity/symmetry: uniform-vs-mean {:.3e} (tol 1e-6), shift drift {:.3e} (tol 1e-12)",
        if ok { "PASS" } else { "FAIL" },
        mean_err,
        shift_err
    ));
    assert!(mean_err <= 1e-6);
    assert!(shift_err <= 1e-12);
}

// ── 4. genotype derivation vs brute force ───────────────────────────────

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Brute-force re-derivation written against the documented rules only:
/// per edge the strongest non-zero op (ties toward the lower op index), per
/// node the two strongest edges (ties toward the lower source), pairs listed
/// in source order.
fn oracle_derive(matrix: &[f64]) -> Vec<(OpKind, usize)> {
    let mut pairs = Vec::new();
    for dst in 0..INTERMEDIATE_NODES {
        let mut edge_best: Vec<(f64, usize, OpKind)> = Vec::new();
        for src in 0..dst + 2 {
            let row = &matrix[edge_row(dst, src) * NUM_OPS..][..NUM_OPS];
            let p = softmax(row);
            let mut best_w = f64::NEG_INFINITY;
            let mut best_k = OpKind::SepConv3x3;
            for (i, &kind) in OpKind::ALL.iter().enumerate() {
                if kind != OpKind::Zero && p[i] > best_w {
                    best_w = p[i];
                    best_k = kind;
                }
            }
            edge_best.push((best_w, src, best_k));
        }
        let mut chosen: Vec<(OpKind, usize)> = Vec::new();
        for _ in 0..2 {
            let mut pick = 0;
            for i in 1..edge_best.len() {
                if edge_best[i].0 > edge_best[pick].0 {
                    pick = i;
                }
            }
            let (_, src, kind) = edge_best.remove(pick);
            chosen.push((kind, src));
        }
        chosen.sort_by_key(|&(_, src)| src);
        pairs.extend(chosen);
    }
    pairs
}

fn random_alpha(seed: u64) -> ArchParams {
    let mut a = ArchParams::new(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    for t in a.tensors_mut() {
        for v in t.values_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
    }
    a
}

#[test]
fn genotype_derivation_matches_brute_force() {
    let mut checked = 0;
    for seed in 0..100u64 {
        let a = random_alpha(seed);
        let g = derive_genotype(&a).unwrap();
        assert_eq!(g.normal, oracle_derive(a.normal.values()), "seed {seed} normal");
        assert_eq!(g.reduce, oracle_derive(a.reduce.values()), "seed {seed} reduce");

        // per-row additive logit shifts are softmax-invariant, so the
        // derived architecture cannot move
        let mut b = random_alpha(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5113);
        for t in b.tensors_mut() {
            for row in 0..EDGES_PER_CELL {
                let shift = rng.random_range(-5.0..5.0);
                for v in &mut t.values_mut()[row * NUM_OPS..(row + 1) * NUM_OPS] {
                    *v += shift;
                }
            }
        }
        assert_eq!(derive_genotype(&b).unwrap(), g, "seed {seed} shifted");
        checked += 1;
    }

    // crafted ties: all-equal logits select the lowest op index on the
    // lowest two sources
    let zero_alpha = ArchParams::new(0); // ±1e-3 noise init
    let mut flat = random_alpha(0);
    for t in flat.tensors_mut() {
        for v in t.values_mut() {
            *v = 0.0;
        }
    }
    let g = derive_genotype(&flat).unwrap();
    for pairs in [&g.normal, &g.reduce] {
        for node in 0..INTERMEDIATE_NODES {
            assert_eq!(pairs[2 * node], (OpKind::SepConv3x3, 0));
            assert_eq!(pairs[2 * node + 1], (OpKind::SepConv3x3, 1));
        }
    }
    assert_eq!(g.normal, oracle_derive(flat.normal.values()));
    let _ = derive_genotype(&zero_alpha).unwrap();
    report(&format!(
        "PASS genotype derivation: brute-force match on {checked} random draws + shift invariance + tie-breaks"
    ));
}

// ── 5. one-hot equivalence ──────────────────────────────────────────────

/// Architecture logits that make the softmax mixture exactly one-hot:
/// selected op at logit 0, everything else at -1e4 (whose exp underflows to
/// zero). Edges outside the genotype select the zero op.
fn one_hot_alpha(genotype: &Genotype) -> ArchParams {
    let mut alpha = ArchParams::new(0);
    let build = |pairs: &[(OpKind, usize)], t: &mut Tensor| {
        let v = t.values_mut();
        for x in v.iter_mut() {
            *x = -1e4;
        }
        for row in 0..EDGES_PER_CELL {
            v[row * NUM_OPS + OpKind::Zero.index()] = 0.0;
        }
        for (i, &(kind, src)) in pairs.iter().enumerate() {
            let dst = i / 2;
            let row = edge_row(dst, src);
            v[row * NUM_OPS + OpKind::Zero.index()] = -1e4;
            v[row * NUM_OPS + kind.index()] = 0.0;
        }
    };
    build(&genotype.normal, &mut alpha.normal);
    build(&genotype.reduce, &mut alpha.reduce);
    alpha
}

#[test]
fn one_hot_matches_discrete_network() {
    let config = NetworkConfig {
        cells: 4,
        init_channels: 8,
        feat_dim: 16,
    };
    let supernet = Network::new_supernet(config, 3).unwrap();
    let mut worst: f64 = 0.0;
    for seed in 0..3u64 {
        let genotype = derive_genotype(&random_alpha(40 + seed)).unwrap();
        let alpha = one_hot_alpha(&genotype);
        let discrete = supernet.discretize(&genotype).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let input = random_tensor(&mut rng, vec![2, 1, 24, 16]);

        let mut t_sup = Tape::new();
        let f_sup = supernet.forward(&mut t_sup, &input, Some(&alpha)).unwrap();
        let mut t_dis = Tape::new();
        let f_dis = discrete.forward(&mut t_dis, &input, None).unwrap();
        for (a, b) in t_sup
            .values(f_sup.logits)
            .iter()
            .zip(t_dis.values(f_dis.logits))
        {
            worst = worst.max((a - b).abs());
        }
        for (a, b) in t_sup
            .values(f_sup.embedding)
            .iter()
            .zip(t_dis.values(f_dis.embedding))
        {
            worst = worst.max((a - b).abs());
        }
    }
    let ok = worst <= 1e-10;
    report(&format!(
        "{} one-hot equivalence: max |supernet - discrete| {:.3e} (tol 1e-10)",
        if ok { "PASS" } else { "FAIL" },
        worst
    ));
    assert!(worst <= 1e-10);
}

// ── 6. end-to-end desk-scale search ─────────────────────────────────────

/// Hand-rolled energy detector for the synthetic corpus: spoofs carry an
/// alternating-sign checkerboard, so correlating each matrix with the
/// checkerboard pattern separates the classes. Calibrates the 5% EER bound:
/// the bound is only meaningful while this detector stays >= 95% accurate.
fn checkerboard_accuracy(ds: &Dataset) -> f64 {
    let mut correct = 0;
    for (entry, m) in ds.entries.iter().zip(&ds.features) {
        let mut corr = 0.0;
        for r in 0..m.t {
            for c in 0..m.f {
                let sign = if (r + c) % 2 == 0 { 1.0 } else { -1.0 };
                corr += sign * m.values[r * m.f + c];
            }
        }
        corr /= (m.t * m.f) as f64;
        let predicted = if corr > 0.5 { Label::Spoof } else { Label::Bonafide };
        if predicted == entry.label {
            correct += 1;
        }
    }
    correct as f64 / ds.len() as f64
}

fn truncate_manifest(dir: &Path, name: &str, keep: usize, out: &str) {
    let text = std::fs::read_to_string(dir.join(name)).unwrap();
    let mut kept = String::new();
    for line in text.lines().take(keep) {
        let _ = writeln!(kept, "{line}");
    }
    std::fs::write(dir.join(out), kept).unwrap();
}

#[test]
fn end_to_end_desk_scale_search() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    data::gen_synthetic(dir.path(), 400, 40, 16, 42).unwrap();
    truncate_manifest(dir.path(), "val.tsv", 200, "val200.tsv");
    truncate_manifest(dir.path(), "eval.tsv", 200, "eval200.tsv");

    let train = Dataset::load(&dir.path().join("train.tsv"), 40).unwrap();
    let val = Dataset::load(&dir.path().join("val200.tsv"), 40).unwrap();
    let eval = Dataset::load(&dir.path().join("eval200.tsv"), 40).unwrap();
    assert_eq!((train.len(), val.len(), eval.len()), (400, 200, 200));

    let oracle_acc = checkerboard_accuracy(&eval);

    let search_config = SearchConfig {
        epochs: 15,
        lr: 2e-3,
        arch_lr: 3e-3,
        batch_size: 8,
        val_batch_size: Some(4),
        cells: 4,
        init_channels: 8,
        seed: 42,
        order: Order::First,
        target_frames: 40,
        xi: None,
    };
    let outcome = run_search(&search_config, &train, &val).unwrap();

    // retraining runs one utterance per step so the normalization statistics
    // match the per-utterance scoring convention
    let retrain_config = SearchConfig {
        batch_size: 1,
        lr: 1e-3,
        ..search_config
    };
    let (model, _) = retrain_discrete(&outcome.genotype, &retrain_config, 3, &train).unwrap();
    let records = score_dataset(&model.net, &eval).unwrap();
    let (eer, _) = compute_eer(&records).unwrap();
    let elapsed = start.elapsed().as_secs_f64();

    let ok = eer <= 0.05 && elapsed < 600.0 && oracle_acc >= 0.95;
    report(&format!(
        "{} end-to-end desk-scale search: EER {:.2}% (bound 5%), oracle detector {:.1}% (floor 95%, generator v{}), {:.0}s (limit 600s)",
        if ok { "PASS" } else { "FAIL" },
        eer * 100.0,
        oracle_acc * 100.0,
        data::SYNTHETIC_GENERATOR_VERSION,
        elapsed
    ));
    assert!(
        oracle_acc >= 0.95,
        "energy-detector oracle accuracy {oracle_acc} below calibration floor"
    );
    assert!(eer <= 0.05, "retrained EER {:.4} above 5%", eer);
    assert!(elapsed < 600.0, "pipeline took {elapsed:.0}s");
}

// ── 7. determinism ──────────────────────────────────────────────────────

#[test]
fn search_train_eval_determinism() {
    let dir = tempfile::tempdir().unwrap();
    data::gen_synthetic(dir.path(), 24, 16, 16, 7).unwrap();
    let train = Dataset::load(&dir.path().join("train.tsv"), 16).unwrap();
    let val = Dataset::load(&dir.path().join("val.tsv"), 16).unwrap();
    let eval = Dataset::load(&dir.path().join("eval.tsv"), 16).unwrap();

    let config = SearchConfig {
        epochs: 2,
        lr: 1e-3,
        arch_lr: 1e-3,
        batch_size: 4,
        val_batch_size: None,
        cells: 4,
        init_channels: 4,
        seed: 7,
        order: Order::First,
        target_frames: 16,
        xi: None,
    };
    let run = |tag: &str| {
        let outcome = run_search(&config, &train, &val).unwrap();
        let retrain = SearchConfig {
            batch_size: 1,
            ..config
        };
        let (model, _) = retrain_discrete(&outcome.genotype, &retrain, 2, &train).unwrap();
        let model_path = dir.path().join(format!("model_{tag}.fadm"));
        save_model(&model_path, &model).unwrap();
        let records = score_dataset(&model.net, &eval).unwrap();
        (
            outcome.genotype.to_text(),
            std::fs::read(&model_path).unwrap(),
            spoofsearch::eval::format_score_file(&records),
        )
    };
    let a = run("a");
    let b = run("b");
    let ok = a == b;
    report(&format!(
        "{} determinism: genotype/model/score artifacts bitwise identical across reruns",
        if ok { "PASS" } else { "FAIL" }
    ));
    assert_eq!(a.0, b.0, "genotype text differs between runs");
    assert_eq!(a.1, b.1, "model bytes differ between runs");
    assert_eq!(a.2, b.2, "score files differ between runs");
}

// ── 8. shape-law smoke at full feature width ────────────────────────────

#[test]
fn full_width_forward_smoke() {
    // 400 frames x 1024-dim features: the documented shape of externally
    // supplied pretrained speech representations
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let values: Vec<f64> = (0..400 * 1024)
        .map(|_| rng.random_range(-1.0f32..1.0f32) as f64)
        .collect();
    let m = FeatureMatrix::new(400, 1024, values).unwrap();
    let path = dir.path().join("full.fafd");
    data::store_feature(&path, &m).unwrap();
    let loaded = data::load_feature(&path).unwrap();

    let genotype = derive_genotype(&random_alpha(5)).unwrap();
    let config = NetworkConfig {
        cells: 4,
        init_channels: 8,
        feat_dim: 1024,
    };
    let net = instantiate_discrete(&genotype, config, 5).unwrap();
    let start = Instant::now();
    let score = score_utterance(&net, &loaded).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let ok = score.is_finite() && elapsed < 30.0;
    report(&format!(
        "{} full-width forward smoke: 400x1024 scored in {:.1}s (limit 30s), score {:.4}",
        if ok { "PASS" } else { "FAIL" },
        elapsed,
        score
    ));
    assert!(score.is_finite());
    assert!(elapsed < 30.0, "forward took {elapsed:.1}s");
}
