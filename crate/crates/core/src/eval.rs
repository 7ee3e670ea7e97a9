//! Scoring and metrics: detection scores, interpolated equal error rate,
//! DET-curve points, score-file round-tripping, and embedding dumps.

use crate::data::{Dataset, Label};
use crate::error::{Error, Result};
use crate::supernet::Network;
use crate::tensor::{Tape, Tensor};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRecord {
    pub utt_id: String,
    /// higher = more bonafide
    pub score: f64,
    pub label: Label,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

fn split_scores(records: &[ScoreRecord]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut bona = Vec::new();
    let mut spoof = Vec::new();
    for r in records {
        if !r.score.is_finite() {
            return Err(Error::NonFinite(format!("score of utt `{}`", r.utt_id)));
        }
        match r.label {
            Label::Bonafide => bona.push(r.score),
            Label::Spoof => spoof.push(r.score),
            Label::Unknown => {}
        }
    }
    if bona.is_empty() || spoof.is_empty() {
        return Err(Error::invalid(format!(
            "EER needs both classes; got {} bonafide and {} spoof",
            bona.len(),
            spoof.len()
        )));
    }
    Ok((bona, spoof))
}

/// One DET operating point per unique score, plus the ±∞ endpoints.
/// Decision rule: accept as bonafide when score ≥ threshold.
pub fn det_points(records: &[ScoreRecord]) -> Result<Vec<DetPoint>> {
    let (bona, spoof) = split_scores(records)?;
    let mut thresholds: Vec<f64> = bona.iter().chain(&spoof).cloned().collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    let mut points = Vec::with_capacity(thresholds.len() + 2);
    let point = |t: f64| -> DetPoint {
        let far = spoof.iter().filter(|&&s| s >= t).count() as f64 / spoof.len() as f64;
        let frr = bona.iter().filter(|&&s| s < t).count() as f64 / bona.len() as f64;
        DetPoint { threshold: t, far, frr }
    };
    points.push(DetPoint { threshold: f64::NEG_INFINITY, far: 1.0, frr: 0.0 });
    points.extend(thresholds.into_iter().map(point));
    points.push(DetPoint { threshold: f64::INFINITY, far: 0.0, frr: 1.0 });
    Ok(points)
}

/// Interpolated equal error rate: the value where FAR and FRR cross, linearly
/// interpolated between adjacent operating points. Returns (eer, threshold).
pub fn compute_eer(records: &[ScoreRecord]) -> Result<(f64, f64)> {
    let points = det_points(records)?;
    // FAR−FRR starts at +1 and ends at −1; find the sign change
    for (i, p) in points.iter().enumerate() {
        let d = p.far - p.frr;
        if d == 0.0 {
            return Ok((p.far, p.threshold));
        }
        if d < 0.0 {
            let prev = points[i - 1];
            let d1 = prev.far - prev.frr;
            let lambda = d1 / (d1 - d);
            let eer = prev.far + lambda * (p.far - prev.far);
            let threshold = if prev.threshold.is_finite() && p.threshold.is_finite() {
                prev.threshold + lambda * (p.threshold - prev.threshold)
            } else if prev.threshold.is_finite() {
                prev.threshold
            } else {
                p.threshold
            };
            return Ok((eer, threshold));
        }
    }
    unreachable!("FAR-FRR must change sign between the endpoints")
}

// ── model scoring ───────────────────────────────────────────────────────

/// Detection score of a single frame-fixed utterance:
/// bonafide logit − spoof logit.
pub fn score_utterance(net: &Network, m: &crate::data::FeatureMatrix) -> Result<f64> {
    let input = Tensor::new(vec![1, 1, m.t, m.f], m.values.clone())?;
    let mut tape = Tape::new();
    let fwd = net.forward(&mut tape, &input, None)?;
    let logits = tape.values(fwd.logits);
    Ok(logits[0] - logits[1])
}

/// Detection score of each utterance in the dataset.
///
/// Utterances are forwarded one at a time: the normalization layers use
/// in-batch statistics, so per-utterance evaluation is what keeps a score
/// independent of which other utterances it happens to share a batch with.
pub fn score_dataset(net: &Network, ds: &Dataset) -> Result<Vec<ScoreRecord>> {
    Ok(forward_dataset(net, ds)?.0)
}

/// Scores plus penultimate-layer embeddings, one row per utterance.
pub fn forward_dataset(net: &Network, ds: &Dataset) -> Result<(Vec<ScoreRecord>, Vec<Vec<f64>>)> {
    let mut records = Vec::with_capacity(ds.len());
    let mut embeddings = Vec::with_capacity(ds.len());
    for (entry, m) in ds.entries.iter().zip(&ds.features) {
        let input = Tensor::new(vec![1, 1, m.t, m.f], m.values.clone())?;
        let mut tape = Tape::new();
        let fwd = net.forward(&mut tape, &input, None)?;
        let logits = tape.values(fwd.logits);
        records.push(ScoreRecord {
            utt_id: entry.utt_id.clone(),
            score: logits[0] - logits[1],
            label: entry.label,
        });
        embeddings.push(tape.values(fwd.embedding).to_vec());
    }
    Ok((records, embeddings))
}

// ── file formats ────────────────────────────────────────────────────────

/// `utt_id<SPACE>score` per line, six decimal digits.
pub fn format_score_file(records: &[ScoreRecord]) -> String {
    let mut out = String::new();
    for r in records {
        writeln!(out, "{} {:.6}", r.utt_id, r.score).unwrap();
    }
    out
}

/// Parses a score file; labels come back as `unknown` (join with a manifest
/// to attach ground truth).
pub fn parse_score_file(text: &str) -> Result<Vec<ScoreRecord>> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                line: i + 1,
                col: 1,
                msg: format!("expected `utt_id score`, got {} fields", fields.len()),
            });
        }
        let score: f64 = fields[1].parse().map_err(|_| Error::Parse {
            line: i + 1,
            col: fields[0].len() + 2,
            msg: format!("bad score `{}`", fields[1]),
        })?;
        records.push(ScoreRecord {
            utt_id: fields[0].to_string(),
            score,
            label: Label::Unknown,
        });
    }
    Ok(records)
}

/// DET curve as CSV: `threshold,far,frr`.
pub fn format_det_csv(points: &[DetPoint]) -> String {
    let mut out = String::from("threshold,far,frr\n");
    for p in points {
        writeln!(out, "{},{},{}", p.threshold, p.far, p.frr).unwrap();
    }
    out
}

/// Writes penultimate-layer embeddings as CSV with header
/// `utt_id,label,e0,...,e{D-1}`.
pub fn dump_embeddings(net: &Network, ds: &Dataset, out: &Path) -> Result<()> {
    let (records, embeddings) = forward_dataset(net, ds)?;
    let d = net.embedding_dim();
    let mut text = String::from("utt_id,label");
    for i in 0..d {
        write!(text, ",e{i}").unwrap();
    }
    text.push('\n');
    for (r, e) in records.iter().zip(&embeddings) {
        write!(text, "{},{}", r.utt_id, r.label.name()).unwrap();
        for v in e {
            write!(text, ",{v}").unwrap();
        }
        text.push('\n');
    }
    std::fs::write(out, text).map_err(|e| Error::io(format!("writing {}", out.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::supernet::{instantiate_discrete, Genotype, NetworkConfig};
    use crate::ops::OpKind;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn records(bona: &[f64], spoof: &[f64]) -> Vec<ScoreRecord> {
        let mut v = Vec::new();
        for (i, &s) in bona.iter().enumerate() {
            v.push(ScoreRecord { utt_id: format!("b{i}"), score: s, label: Label::Bonafide });
        }
        for (i, &s) in spoof.iter().enumerate() {
            v.push(ScoreRecord { utt_id: format!("s{i}"), score: s, label: Label::Spoof });
        }
        v
    }

    /// Brute-force oracle: dense interpolated sweep over FAR−FRR sign change,
    /// sampling every midpoint between adjacent unique scores as well.
    fn eer_oracle(bona: &[f64], spoof: &[f64]) -> f64 {
        let mut all: Vec<f64> = bona.iter().chain(spoof).cloned().collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        all.dedup();
        let stat = |t: f64| -> (f64, f64) {
            let far = spoof.iter().filter(|&&s| s >= t).count() as f64 / spoof.len() as f64;
            let frr = bona.iter().filter(|&&s| s < t).count() as f64 / bona.len() as f64;
            (far, frr)
        };
        // walk thresholds in order, catching equality or bracketing the sign change
        let mut prev = (f64::NEG_INFINITY, 1.0, 0.0);
        let mut thresholds: Vec<f64> = all.clone();
        thresholds.push(f64::INFINITY);
        for t in thresholds {
            let (far, frr) = if t.is_finite() { stat(t) } else { (0.0, 1.0) };
            let d = far - frr;
            if d == 0.0 {
                return far;
            }
            if d < 0.0 {
                let d1 = prev.1 - prev.2;
                let lambda = d1 / (d1 - d);
                return prev.1 + lambda * (far - prev.1);
            }
            prev = (t, far, frr);
        }
        unreachable!()
    }

    #[test]
    fn separated_scores_give_zero() {
        let r = records(&[0.9, 0.8], &[0.1, 0.2]);
        let (eer, thr) = compute_eer(&r).unwrap();
        assert_eq!(eer, 0.0);
        assert!(thr > 0.2 && thr <= 0.8, "threshold {thr}");
    }

    #[test]
    fn mirrored_scores_give_half() {
        // bonafide and spoof are exact mirrors around 0 → chance performance
        let bona = [-0.3, -0.1, 0.1, 0.3];
        let spoof = [-0.3, -0.1, 0.1, 0.3];
        let (eer, _) = compute_eer(&records(&bona, &spoof)).unwrap();
        assert!((eer - 0.5).abs() < 1e-12, "eer {eer}");
    }

    #[test]
    fn matches_oracle_on_seeded_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let bona: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..1.0)).collect();
            let spoof: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..1.0)).collect();
            let (eer, _) = compute_eer(&records(&bona, &spoof)).unwrap();
            let oracle = eer_oracle(&bona, &spoof);
            assert!((eer - oracle).abs() <= 1e-12, "{eer} vs {oracle}");
        }
    }

    #[test]
    fn invariant_under_increasing_affine_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bona: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..1.0)).collect();
        let spoof: Vec<f64> = (0..50).map(|_| rng.random_range(-0.5..0.8)).collect();
        let (base, _) = compute_eer(&records(&bona, &spoof)).unwrap();
        for (a, b) in [(2.0, 0.0), (0.5, -3.0), (10.0, 7.0)] {
            let bt: Vec<f64> = bona.iter().map(|x| a * x + b).collect();
            let st: Vec<f64> = spoof.iter().map(|x| a * x + b).collect();
            let (eer, _) = compute_eer(&records(&bt, &st)).unwrap();
            assert!((eer - base).abs() <= 1e-12);
        }
    }

    #[test]
    fn eer_bounded_in_the_label_consistent_direction() {
        // a random scorer can land above 0.5 in one polarity, but the better
        // of the two polarities is chance or better
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let bona: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..1.0)).collect();
            let spoof: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..1.0)).collect();
            let (fwd, _) = compute_eer(&records(&bona, &spoof)).unwrap();
            let nb: Vec<f64> = bona.iter().map(|x| -x).collect();
            let ns: Vec<f64> = spoof.iter().map(|x| -x).collect();
            let (rev, _) = compute_eer(&records(&nb, &ns)).unwrap();
            let best = fwd.min(rev);
            assert!((0.0..=0.5 + 1e-9).contains(&best), "eer {best}");
            assert!(fwd >= 0.0 && fwd <= 1.0 && rev >= 0.0 && rev <= 1.0);
        }
    }

    #[test]
    fn single_class_rejected() {
        let r = records(&[0.5], &[]);
        assert!(compute_eer(&r).is_err());
        assert!(det_points(&r).is_err());
    }

    #[test]
    fn det_endpoints_and_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bona: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..1.0)).collect();
        let spoof: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..1.0)).collect();
        let pts = det_points(&records(&bona, &spoof)).unwrap();
        let first = pts.first().unwrap();
        let last = pts.last().unwrap();
        assert_eq!((first.far, first.frr), (1.0, 0.0));
        assert_eq!((last.far, last.frr), (0.0, 1.0));
        for w in pts.windows(2) {
            assert!(w[1].far <= w[0].far + 1e-15);
            assert!(w[1].frr + 1e-15 >= w[0].frr);
        }
    }

    #[test]
    fn det_contains_perfect_point_on_separated_data() {
        let pts = det_points(&records(&[0.9, 0.8], &[0.1, 0.2])).unwrap();
        assert!(pts.iter().any(|p| p.far == 0.0 && p.frr == 0.0));
    }

    #[test]
    fn det_matches_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let bona: Vec<f64> = (0..25).map(|_| rng.random_range(0.0..1.0)).collect();
        let spoof: Vec<f64> = (0..25).map(|_| rng.random_range(0.0..1.0)).collect();
        for p in det_points(&records(&bona, &spoof)).unwrap() {
            if !p.threshold.is_finite() {
                continue;
            }
            let far = spoof.iter().filter(|&&s| s >= p.threshold).count() as f64 / 25.0;
            let frr = bona.iter().filter(|&&s| s < p.threshold).count() as f64 / 25.0;
            assert_eq!((p.far, p.frr), (far, frr));
        }
    }

    #[test]
    fn score_file_round_trip() {
        let r = records(&[0.123456789, -2.0], &[0.5]);
        let text = format_score_file(&r);
        let parsed = parse_score_file(&text).unwrap();
        assert_eq!(parsed.len(), 3);
        for (a, b) in parsed.iter().zip(&r) {
            assert_eq!(a.utt_id, b.utt_id);
            assert!((a.score - b.score).abs() <= 5e-7);
        }
        assert!(parse_score_file("").unwrap().is_empty());
        assert!(parse_score_file("a 1.0 extra\n").is_err());
    }

    fn all_skip_net(feat_dim: usize) -> crate::supernet::Network {
        let pairs: Vec<(OpKind, usize)> = (0..4)
            .flat_map(|_| [(OpKind::SkipConnect, 0), (OpKind::SkipConnect, 1)])
            .collect();
        let g = Genotype { normal: pairs.clone(), reduce: pairs, concat: (2, 5) };
        instantiate_discrete(&g, NetworkConfig { cells: 2, init_channels: 4, feat_dim }, 3).unwrap()
    }

    fn tiny_dataset(n: usize) -> Dataset {
        let dir = tempfile::tempdir().unwrap();
        crate::data::gen_synthetic(dir.path(), n, 10, 8, 17).unwrap();
        Dataset::load(&dir.path().join("eval.tsv"), 10).unwrap()
    }

    #[test]
    fn dataset_scores_match_single_utterance_scores() {
        let net = all_skip_net(8);
        let ds = tiny_dataset(6);
        let all = score_dataset(&net, &ds).unwrap();
        for (r, m) in all.iter().zip(&ds.features) {
            let single = score_utterance(&net, m).unwrap();
            assert!((r.score - single).abs() < 1e-10, "{} vs {single}", r.score);
        }
    }

    #[test]
    fn zero_head_scores_zero() {
        let mut net = all_skip_net(8);
        {
            let mut params = net.params_mut();
            let n = params.len();
            for p in &mut params[n - 2..] {
                p.values_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let ds = tiny_dataset(4);
        for r in score_dataset(&net, &ds).unwrap() {
            assert_eq!(r.score, 0.0);
        }
    }

    #[test]
    fn embeddings_csv_shape() {
        let net = all_skip_net(8);
        let ds = tiny_dataset(4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        dump_embeddings(&net, &ds, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), ds.len() + 1);
        let cols = lines[0].split(',').count();
        assert_eq!(cols, 2 + net.embedding_dim());
        // every row keeps the column count
        for l in &lines[1..] {
            assert_eq!(l.split(',').count(), cols);
        }
    }
}
