//! Feature-file ingestion, frame fixing, manifests, deterministic batching,
//! and the seeded synthetic dataset generator used for desk-scale runs.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Bumped whenever the synthetic generator's output distribution changes, so
/// downstream accuracy thresholds stay calibrated.
pub const SYNTHETIC_GENERATOR_VERSION: u32 = 1;

const FEATURE_MAGIC: &[u8; 4] = b"FAFD";
const FEATURE_VERSION: u32 = 1;
/// Frame count features are fixed to unless configured otherwise.
pub const DEFAULT_TARGET_FRAMES: usize = 400;

/// A T×F matrix of per-frame features, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub t: usize,
    pub f: usize,
    pub values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(t: usize, f: usize, values: Vec<f64>) -> Result<FeatureMatrix> {
        if t < 1 || f < 1 {
            return Err(Error::invalid(format!("feature matrix needs T >= 1 and F >= 1, got {t}x{f}")));
        }
        if values.len() != t * f {
            return Err(Error::shape(format!(
                "feature matrix {t}x{f} expects {} values, got {}",
                t * f,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix values".to_string()));
        }
        Ok(FeatureMatrix { t, f, values })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.f..(r + 1) * self.f]
    }
}

/// Serializes a feature matrix in the binary feature format.
pub fn store_feature(path: &Path, m: &FeatureMatrix) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * m.values.len());
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.t as u32).to_le_bytes());
    buf.extend_from_slice(&(m.f as u32).to_le_bytes());
    for &v in &m.values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(format!("writing feature file {}", path.display()), e))
}

/// Reads a feature matrix, validating magic, version, and payload length.
pub fn load_feature(path: &Path) -> Result<FeatureMatrix> {
    let bytes =
        fs::read(path).map_err(|e| Error::io(format!("reading feature file {}", path.display()), e))?;
    let fail = |msg: String| Error::Format { path: path.to_path_buf(), msg };
    if bytes.len() < 16 {
        return Err(fail(format!("header truncated: {} bytes, need 16", bytes.len())));
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(fail(format!("bad magic {:?}, expected \"FAFD\"", &bytes[0..4])));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != FEATURE_VERSION {
        return Err(fail(format!("unsupported version {version}, expected {FEATURE_VERSION}")));
    }
    let t = u32_at(8) as usize;
    let f = u32_at(12) as usize;
    if t < 1 || f < 1 {
        return Err(fail(format!("dimensions {t}x{f} out of range")));
    }
    let count = t
        .checked_mul(f)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| fail(format!("dimensions {t}x{f} overflow the payload size")))?;
    if bytes.len() - 16 != count {
        return Err(fail(format!(
            "payload is {} bytes but header {t}x{f} requires {count}",
            bytes.len() - 16
        )));
    }
    let values: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(fail("non-finite feature values".to_string()));
    }
    Ok(FeatureMatrix { t, f, values })
}

/// Fixes the frame count: truncate from the head when too long, repeat the
/// utterance's own frames cyclically when too short.
pub fn fix_frames(m: &FeatureMatrix, target: usize) -> FeatureMatrix {
    if m.t == target {
        return m.clone();
    }
    let mut values = Vec::with_capacity(target * m.f);
    for r in 0..target {
        values.extend_from_slice(m.row(r % m.t));
    }
    FeatureMatrix { t: target, f: m.f, values }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Bonafide,
    Spoof,
    /// scoring-only entries with no ground truth
    Unknown,
}

impl Label {
    pub fn parse(s: &str) -> Option<Label> {
        match s {
            "bonafide" => Some(Label::Bonafide),
            "spoof" => Some(Label::Spoof),
            "unknown" => Some(Label::Unknown),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Label::Bonafide => "bonafide",
            Label::Spoof => "spoof",
            Label::Unknown => "unknown",
        }
    }

    /// Class index in the network head (bonafide = 0, spoof = 1).
    pub fn class_index(&self) -> Option<usize> {
        match self {
            Label::Bonafide => Some(0),
            Label::Spoof => Some(1),
            Label::Unknown => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub path: PathBuf,
    pub label: Label,
}

/// Parses a tab-separated manifest: `utt_id<TAB>relative_path<TAB>label`.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(format!("reading manifest {}", path.display()), e))?;
    let mut entries = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: i + 1,
                col: 1,
                msg: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        let label = Label::parse(fields[2]).ok_or(Error::Parse {
            line: i + 1,
            col: fields[0].len() + fields[1].len() + 3,
            msg: format!("unknown label `{}`", fields[2]),
        })?;
        if !seen.insert(fields[0].to_string()) {
            return Err(Error::Parse {
                line: i + 1,
                col: 1,
                msg: format!("duplicate utt_id `{}`", fields[0]),
            });
        }
        entries.push(ManifestEntry {
            utt_id: fields[0].to_string(),
            path: PathBuf::from(fields[1]),
            label,
        });
    }
    Ok(entries)
}

/// In-memory dataset: frame-fixed features and class labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub entries: Vec<ManifestEntry>,
    pub features: Vec<FeatureMatrix>,
    pub target_frames: usize,
    pub feat_dim: usize,
}

impl Dataset {
    /// Loads every manifest entry, resolving paths against the manifest's
    /// directory, and fixes all frame counts to `target_frames`.
    pub fn load(manifest_path: &Path, target_frames: usize) -> Result<Dataset> {
        let entries = load_manifest(manifest_path)?;
        if entries.is_empty() {
            return Err(Error::invalid(format!("manifest {} is empty", manifest_path.display())));
        }
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let mut features = Vec::with_capacity(entries.len());
        let mut feat_dim = None;
        for e in &entries {
            let m = load_feature(&base.join(&e.path))
                .map_err(|err| Error::invalid(format!("utt `{}`: {err}", e.utt_id)))?;
            match feat_dim {
                None => feat_dim = Some(m.f),
                Some(f) if f != m.f => {
                    return Err(Error::shape(format!(
                        "utt `{}` has F={}, but earlier entries have F={f}",
                        e.utt_id, m.f
                    )))
                }
                _ => {}
            }
            features.push(fix_frames(&m, target_frames));
        }
        Ok(Dataset {
            entries,
            features,
            target_frames,
            feat_dim: feat_dim.unwrap(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Assembles the indexed utterances into a [B, 1, T, F] batch tensor plus
    /// class labels. Fails on unlabeled entries.
    pub fn batch_tensor(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let per = self.target_frames * self.feat_dim;
        let mut values = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            values.extend_from_slice(&self.features[i].values);
            labels.push(self.entries[i].label.class_index().ok_or_else(|| {
                Error::invalid(format!("utt `{}` has no ground-truth label", self.entries[i].utt_id))
            })?);
        }
        let tensor = Tensor::new(vec![indices.len(), 1, self.target_frames, self.feat_dim], values)?;
        Ok((tensor, labels))
    }
}

/// Index batches for one epoch: a seeded permutation chunked by `batch_size`,
/// keeping the final short batch. Pure in (n, batch_size, seed, epoch).
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size < 1 {
        return Err(Error::invalid("batch_size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xB7E1),
    );
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

// ── synthetic generator ─────────────────────────────────────────────────

/// Draws one utterance: a smooth Gaussian ridge at a seeded location plus
/// white noise; spoofs add a high-frequency checkerboard artifact.
fn synth_matrix(rng: &mut ChaCha8Rng, t: usize, f: usize, artifact_amplitude: f64) -> FeatureMatrix {
    let rc = rng.random_range(t as f64 / 4.0..3.0 * t as f64 / 4.0);
    let cc = rng.random_range(f as f64 / 4.0..3.0 * f as f64 / 4.0);
    let st = t as f64 / 8.0;
    let sf = f as f64 / 8.0;
    let mut values = Vec::with_capacity(t * f);
    for r in 0..t {
        for c in 0..f {
            let dr = (r as f64 - rc) / st;
            let dc = (c as f64 - cc) / sf;
            let ridge = 2.0 * (-(dr * dr + dc * dc) / 2.0).exp();
            let noise: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.5;
            let artifact = if (r + c) % 2 == 0 { artifact_amplitude } else { -artifact_amplitude };
            values.push(ridge + noise + artifact);
        }
    }
    FeatureMatrix { t, f, values }
}

fn write_split(
    out_dir: &Path,
    split: &str,
    split_idx: u64,
    n: usize,
    t: usize,
    f: usize,
    seed: u64,
    amplitude: f64,
) -> Result<()> {
    let feat_dir = out_dir.join("features");
    fs::create_dir_all(&feat_dir)
        .map_err(|e| Error::io(format!("creating {}", feat_dir.display()), e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(split_idx.wrapping_mul(0x5DEE_CE66_D)));
    let manifest_path = out_dir.join(format!("{split}.tsv"));
    let mut manifest = fs::File::create(&manifest_path)
        .map_err(|e| Error::io(format!("creating {}", manifest_path.display()), e))?;
    for i in 0..n {
        let label = if i % 2 == 0 { Label::Bonafide } else { Label::Spoof };
        let amp = if label == Label::Spoof { amplitude } else { 0.0 };
        let m = synth_matrix(&mut rng, t, f, amp);
        let utt_id = format!("{split}_{i:04}");
        let rel = format!("features/{utt_id}.fafd");
        store_feature(&out_dir.join(&rel), &m)?;
        writeln!(manifest, "{utt_id}\t{rel}\t{}", label.name())
            .map_err(|e| Error::io(format!("writing {}", manifest_path.display()), e))?;
    }
    Ok(())
}

fn gen_synthetic_with_amplitude(
    out_dir: &Path,
    n_per_split: usize,
    t: usize,
    f: usize,
    seed: u64,
    amplitude: f64,
) -> Result<()> {
    if t < 8 || f < 8 {
        return Err(Error::invalid(format!("generator needs T >= 8 and F >= 8, got {t}x{f}")));
    }
    if n_per_split < 2 {
        return Err(Error::invalid("n_per_split must be >= 2 for both classes to appear"));
    }
    for (idx, split) in ["train", "val", "eval"].iter().enumerate() {
        write_split(out_dir, split, idx as u64 + 1, n_per_split, t, f, seed, amplitude)?;
    }
    Ok(())
}

/// Writes train/val/eval manifests plus feature files under `out_dir`.
/// Splits are disjoint by construction (independent seeded streams).
pub fn gen_synthetic(out_dir: &Path, n_per_split: usize, t: usize, f: usize, seed: u64) -> Result<()> {
    gen_synthetic_with_amplitude(out_dir, n_per_split, t, f, seed, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn random_matrix(t: usize, f: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // f32-exact values so the round trip is bitwise
        let values: Vec<f64> = (0..t * f)
            .map(|_| rng.random_range(-1.0f32..1.0f32) as f64)
            .collect();
        FeatureMatrix::new(t, f, values).unwrap()
    }

    #[test]
    fn feature_round_trip_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.fafd");
        let m = random_matrix(40, 16, 0);
        store_feature(&path, &m).unwrap();
        assert_eq!(load_feature(&path).unwrap(), m);
    }

    #[test]
    fn feature_bad_magic_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.fafd");
        let m = random_matrix(4, 4, 1);
        store_feature(&path, &m).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, bytes).unwrap();
        let err = load_feature(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn feature_truncated_payload_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.fafd");
        let m = random_matrix(4, 4, 2);
        store_feature(&path, &m).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load_feature(&path).is_err());
    }

    #[test]
    fn feature_header_overflow_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.fafd");
        let mut buf = Vec::new();
        buf.extend_from_slice(b"FAFD");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&u32::MAX.to_le_bytes());
        buf.extend_from_slice(&u32::MAX.to_le_bytes());
        buf.extend_from_slice(&[0u8; 8]);
        fs::write(&path, buf).unwrap();
        assert!(load_feature(&path).is_err());
    }

    #[test]
    fn fix_frames_identity_truncate_cyclic() {
        let m = random_matrix(400, 4, 3);
        assert_eq!(fix_frames(&m, 400), m);

        let long = random_matrix(1000, 4, 4);
        let cut = fix_frames(&long, 400);
        assert_eq!(cut.t, 400);
        assert_eq!(cut.values, long.values[..400 * 4]);

        let short = random_matrix(150, 4, 5);
        let padded = fix_frames(&short, 400);
        assert_eq!(padded.row(399), short.row(399 % 150));
        assert_eq!(399 % 150, 99);
    }

    #[test]
    fn fix_frames_idempotent() {
        for t in [13, 400, 777] {
            let m = random_matrix(t, 6, t as u64);
            let once = fix_frames(&m, 400);
            assert_eq!(fix_frames(&once, 400), once);
        }
    }

    #[test]
    fn manifest_parse_order_and_errors() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        fs::write(&path, "a\tp/a.fafd\tbonafide\nb\tp/b.fafd\tspoof\nc\tp/c.fafd\tunknown\n").unwrap();
        let entries = load_manifest(&path).unwrap();
        assert_eq!(entries.len(), 3);
        assert_eq!(entries[0].utt_id, "a");
        assert_eq!(entries[2].label, Label::Unknown);

        fs::write(&path, "a\tp\tbonafide\na\tq\tspoof\n").unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");

        fs::write(&path, "a\tp\tfake\n").unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("fake"), "{err}");

        fs::write(&path, "a\tp\n").unwrap();
        assert!(load_manifest(&path).is_err());
    }

    #[test]
    fn batches_deterministic_and_complete() {
        let a = epoch_batches(10, 4, 7, 0).unwrap();
        let b = epoch_batches(10, 4, 7, 0).unwrap();
        assert_eq!(a, b);
        let sizes: Vec<usize> = a.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let mut all: Vec<usize> = a.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn batches_vary_across_epochs() {
        let e0: Vec<usize> = epoch_batches(16, 16, 7, 0).unwrap().into_iter().flatten().collect();
        let e1: Vec<usize> = epoch_batches(16, 16, 7, 1).unwrap().into_iter().flatten().collect();
        assert_ne!(e0, e1);
    }

    #[test]
    fn generator_counts_and_balance() {
        let dir = tempdir().unwrap();
        gen_synthetic(dir.path(), 20, 12, 10, 42).unwrap();
        for split in ["train", "val", "eval"] {
            let entries = load_manifest(&dir.path().join(format!("{split}.tsv"))).unwrap();
            assert_eq!(entries.len(), 20);
            let bona = entries.iter().filter(|e| e.label == Label::Bonafide).count();
            assert_eq!(bona, 10);
        }
        let m = load_feature(&dir.path().join("features/train_0000.fafd")).unwrap();
        assert_eq!((m.t, m.f), (12, 10));
    }

    #[test]
    fn generator_bitwise_deterministic() {
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        gen_synthetic(d1.path(), 6, 10, 10, 9).unwrap();
        gen_synthetic(d2.path(), 6, 10, 10, 9).unwrap();
        for split in ["train", "val", "eval"] {
            assert_eq!(
                fs::read(d1.path().join(format!("{split}.tsv"))).unwrap(),
                fs::read(d2.path().join(format!("{split}.tsv"))).unwrap()
            );
            for i in 0..6 {
                let rel = format!("features/{split}_{i:04}.fafd");
                assert_eq!(
                    fs::read(d1.path().join(&rel)).unwrap(),
                    fs::read(d2.path().join(&rel)).unwrap()
                );
            }
        }
    }

    #[test]
    fn generator_small_dims_rejected() {
        let dir = tempdir().unwrap();
        assert!(gen_synthetic(dir.path(), 4, 4, 16, 0).is_err());
        assert!(gen_synthetic(dir.path(), 4, 16, 4, 0).is_err());
    }

    /// High-frequency residual energy after a 3×3 mean filter.
    fn residual_energy(m: &FeatureMatrix) -> f64 {
        let (t, f) = (m.t, m.f);
        let mut total = 0.0;
        let mut n = 0usize;
        for r in 1..t - 1 {
            for c in 1..f - 1 {
                let mut mean = 0.0;
                for dr in 0..3 {
                    for dc in 0..3 {
                        mean += m.values[(r + dr - 1) * f + (c + dc - 1)];
                    }
                }
                mean /= 9.0;
                let d = m.values[r * f + c] - mean;
                total += d * d;
                n += 1;
            }
        }
        total / n as f64
    }

    #[test]
    fn mean_filter_energy_detector_separates_classes() {
        let dir = tempdir().unwrap();
        gen_synthetic(dir.path(), 200, 40, 16, 11).unwrap();
        // calibrate the threshold on train, score eval
        let calibrate = |split: &str| -> (Vec<(f64, Label)>, f64) {
            let entries = load_manifest(&dir.path().join(format!("{split}.tsv"))).unwrap();
            let scored: Vec<(f64, Label)> = entries
                .iter()
                .map(|e| (residual_energy(&load_feature(&dir.path().join(&e.path)).unwrap()), e.label))
                .collect();
            let mean = |l: Label| {
                let xs: Vec<f64> = scored.iter().filter(|s| s.1 == l).map(|s| s.0).collect();
                xs.iter().sum::<f64>() / xs.len() as f64
            };
            let thr = (mean(Label::Bonafide) + mean(Label::Spoof)) / 2.0;
            (scored, thr)
        };
        let (_, thr) = calibrate("train");
        let (eval_scores, _) = calibrate("eval");
        let correct = eval_scores
            .iter()
            .filter(|(e, l)| (*e > thr) == (*l == Label::Spoof))
            .count();
        let acc = correct as f64 / eval_scores.len() as f64;
        assert!(acc >= 0.95, "detector accuracy {acc}");
    }

    #[test]
    fn zero_amplitude_classes_statistically_indistinguishable() {
        let dir = tempdir().unwrap();
        gen_synthetic_with_amplitude(dir.path(), 100, 20, 16, 5, 0.0).unwrap();
        let entries = load_manifest(&dir.path().join("eval.tsv")).unwrap();
        let mean_energy = |l: Label| {
            let xs: Vec<f64> = entries
                .iter()
                .filter(|e| e.label == l)
                .map(|e| residual_energy(&load_feature(&dir.path().join(&e.path)).unwrap()))
                .collect();
            xs.iter().sum::<f64>() / xs.len() as f64
        };
        let (b, s) = (mean_energy(Label::Bonafide), mean_energy(Label::Spoof));
        // both classes reduce to ridge+noise; energies agree up to sampling noise
        assert!((b - s).abs() / b < 0.15, "bonafide {b} vs spoof {s}");
    }

    #[test]
    fn dataset_load_and_batch_tensor() {
        let dir = tempdir().unwrap();
        gen_synthetic(dir.path(), 10, 12, 8, 1).unwrap();
        let ds = Dataset::load(&dir.path().join("train.tsv"), 16).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.feat_dim, 8);
        assert_eq!(ds.features[0].t, 16);
        let (batch, labels) = ds.batch_tensor(&[0, 1, 2]).unwrap();
        assert_eq!(batch.shape(), &[3, 1, 16, 8]);
        assert_eq!(labels, vec![0, 1, 0]);
    }

    #[test]
    fn dataset_missing_feature_names_utterance() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        fs::write(&path, "missing_one\tnope.fafd\tbonafide\n").unwrap();
        let err = Dataset::load(&path, 16).unwrap_err();
        assert!(err.to_string().contains("missing_one"), "{err}");
    }
}
