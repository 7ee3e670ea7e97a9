//! Command-line entry point: synthetic data generation, architecture search,
//! discrete retraining, scoring, metrics, and the gradient-check suite.

use clap::{Args, Parser, Subcommand};
use spoofsearch::data::{self, Dataset};
use spoofsearch::error::Error;
use spoofsearch::eval;
use spoofsearch::ops;
use spoofsearch::search::{self, Order, SearchConfig};
use spoofsearch::supernet::Genotype;
use spoofsearch::tensor::gradcheck;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "spoofsearch", version, about = "Differentiable architecture search for fake-audio detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic train/val/eval dataset
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_per_split: usize,
        #[arg(long, default_value_t = 40)]
        t: usize,
        #[arg(long, default_value_t = 16)]
        f: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the bilevel architecture search and write the derived genotype
    Search {
        #[arg(long)]
        train_manifest: PathBuf,
        #[arg(long)]
        val_manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// history CSV path (default: <out>.history.csv)
        #[arg(long)]
        history: Option<PathBuf>,
        #[command(flatten)]
        opts: TrainOpts,
    },
    /// Train a discrete model from a genotype
    Train {
        #[arg(long)]
        genotype: PathBuf,
        #[arg(long)]
        train_manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: TrainOpts,
    },
    /// Score a manifest with a trained model; optional DET and embedding dumps
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        det: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Compute EER from a score file joined with a labeled manifest
    Eer {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        labels_manifest: PathBuf,
    },
    /// Run the full analytic-vs-finite-difference gradient suite
    Gradcheck {
        #[arg(long, default_value_t = 2)]
        instances: usize,
    },
}

/// Search/training knobs, mergeable with a `key=value` config file
/// (explicit flags win).
#[derive(Args, Clone)]
struct TrainOpts {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    arch_lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// batch size for the validation-side architecture steps (defaults to
    /// --batch-size)
    #[arg(long)]
    val_batch_size: Option<usize>,
    #[arg(long)]
    cells: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// first (default) or second
    #[arg(long)]
    order: Option<String>,
    /// frame count inputs are fixed to
    #[arg(long)]
    frames: Option<usize>,
}

/// Anything that should abort with a usage error (exit 2) rather than a
/// runtime error (exit 1).
struct UsageError(String);

fn parse_config_file(path: &Path) -> Result<HashMap<String, String>, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
    let mut map = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(Error::Parse {
            line: i + 1,
            col: 1,
            msg: format!("expected key=value, got `{line}`"),
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

impl TrainOpts {
    fn resolve(&self) -> Result<SearchConfig, UsageError> {
        let file = match &self.config {
            Some(p) => parse_config_file(p).map_err(|e| UsageError(e.to_string()))?,
            None => HashMap::new(),
        };
        let lookup = |key: &str| file.get(key).cloned();
        fn merged<T: std::str::FromStr>(
            flag: Option<T>,
            file_val: Option<String>,
            key: &str,
            default: T,
        ) -> Result<T, UsageError> {
            match (flag, file_val) {
                (Some(v), _) => Ok(v),
                (None, Some(s)) => s
                    .parse()
                    .map_err(|_| UsageError(format!("config key {key}: bad value `{s}`"))),
                (None, None) => Ok(default),
            }
        }
        let d = SearchConfig::default();
        let order_str = merged(self.order.clone(), lookup("order"), "order", "first".to_string())?;
        let order = match order_str.as_str() {
            "first" => Order::First,
            "second" => Order::Second,
            other => return Err(UsageError(format!("--order must be first or second, got `{other}`"))),
        };
        let config = SearchConfig {
            epochs: merged(self.epochs, lookup("epochs"), "epochs", d.epochs)?,
            lr: merged(self.lr, lookup("lr"), "lr", d.lr)?,
            arch_lr: merged(self.arch_lr, lookup("arch_lr"), "arch_lr", d.arch_lr)?,
            batch_size: merged(self.batch_size, lookup("batch_size"), "batch_size", d.batch_size)?,
            val_batch_size: match (self.val_batch_size, lookup("val_batch_size")) {
                (Some(v), _) => Some(v),
                (None, Some(s)) => Some(s.parse().map_err(|_| {
                    UsageError(format!("config key val_batch_size: bad value `{s}`"))
                })?),
                (None, None) => d.val_batch_size,
            },
            cells: merged(self.cells, lookup("cells"), "cells", d.cells)?,
            init_channels: merged(self.channels, lookup("channels"), "channels", d.init_channels)?,
            seed: merged(self.seed, lookup("seed"), "seed", d.seed)?,
            order,
            target_frames: merged(self.frames, lookup("frames"), "frames", d.target_frames)?,
            xi: None,
        };
        config.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(config)
    }
}

fn provenance_text(command: &str, config: &SearchConfig, extras: &[(&str, String)]) -> String {
    let mut s = String::new();
    let order = match config.order {
        Order::First => "first",
        Order::Second => "second",
    };
    let _ = writeln!(s, "command={command}");
    let _ = writeln!(s, "epochs={}", config.epochs);
    let _ = writeln!(s, "lr={}", config.lr);
    let _ = writeln!(s, "arch_lr={}", config.arch_lr);
    let _ = writeln!(s, "batch_size={}", config.batch_size);
    if let Some(v) = config.val_batch_size {
        let _ = writeln!(s, "val_batch_size={v}");
    }
    let _ = writeln!(s, "cells={}", config.cells);
    let _ = writeln!(s, "channels={}", config.init_channels);
    let _ = writeln!(s, "seed={}", config.seed);
    let _ = writeln!(s, "order={order}");
    let _ = writeln!(s, "frames={}", config.target_frames);
    for (k, v) in extras {
        let _ = writeln!(s, "{k}={v}");
    }
    s
}

fn write_file(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn provenance_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".provenance");
    out.with_file_name(name)
}

fn print_eer_line(eer: f64) {
    println!("EER% = {:.2}", eer * 100.0);
}

fn cmd_gen_synthetic(out: &Path, n: usize, t: usize, f: usize, seed: u64) -> Result<(), Error> {
    data::gen_synthetic(out, n, t, f, seed)?;
    let mut prov = String::new();
    let _ = writeln!(prov, "command=gen-synthetic");
    let _ = writeln!(prov, "generator_version={}", data::SYNTHETIC_GENERATOR_VERSION);
    let _ = writeln!(prov, "n_per_split={n}");
    let _ = writeln!(prov, "t={t}");
    let _ = writeln!(prov, "f={f}");
    let _ = writeln!(prov, "seed={seed}");
    write_file(&out.join("gen.provenance"), &prov)
}

fn cmd_search(
    train_manifest: &Path,
    val_manifest: &Path,
    out: &Path,
    history_path: Option<&Path>,
    config: &SearchConfig,
) -> Result<(), Error> {
    let train = Dataset::load(train_manifest, config.target_frames)?;
    let val = Dataset::load(val_manifest, config.target_frames)?;
    for (name, ds) in [("train", &train), ("val", &val)] {
        let classes: std::collections::HashSet<_> =
            ds.entries.iter().map(|e| e.label).collect();
        if classes.len() < 2 {
            eprintln!("warning: {name} split contains a single class; the search may not converge");
        }
    }
    let outcome = search::run_search(config, &train, &val)?;
    for h in &outcome.history {
        println!(
            "epoch {:>3}  train_loss {:.4}  val_loss {:.4}  train_acc {:.3}  val_acc {:.3}",
            h.epoch, h.train_loss, h.val_loss, h.train_acc, h.val_acc
        );
    }
    let geno_text = outcome.genotype.to_text();
    write_file(out, &geno_text)?;
    let default_history = out.with_extension("history.csv");
    let history_path = history_path.unwrap_or(&default_history);
    write_file(history_path, &search::format_history_csv(&outcome.history))?;
    write_file(
        &provenance_path(out),
        &provenance_text(
            "search",
            config,
            &[
                ("train_manifest", train_manifest.display().to_string()),
                ("val_manifest", val_manifest.display().to_string()),
                ("history", history_path.display().to_string()),
            ],
        ),
    )?;
    print!("{geno_text}");
    Ok(())
}

fn cmd_train(
    genotype_path: &Path,
    train_manifest: &Path,
    out: &Path,
    config: &SearchConfig,
    epochs_flag_given: bool,
) -> Result<(), Error> {
    let geno_text = std::fs::read_to_string(genotype_path)
        .map_err(|e| Error::io(format!("reading genotype {}", genotype_path.display()), e))?;
    let genotype = Genotype::parse(&geno_text)?;
    let train = Dataset::load(train_manifest, config.target_frames)?;
    // retraining default: twice the search epoch budget
    let epochs = if epochs_flag_given { config.epochs } else { config.epochs * 2 };
    let (model, history) = search::retrain_discrete(&genotype, config, epochs, &train)?;
    for (i, (loss, acc)) in history.iter().enumerate() {
        println!("epoch {i:>3}  train_loss {loss:.4}  train_acc {acc:.3}");
    }
    search::save_model(out, &model)?;
    write_file(
        &provenance_path(out),
        &provenance_text(
            "train",
            config,
            &[
                ("genotype", genotype_path.display().to_string()),
                ("train_manifest", train_manifest.display().to_string()),
                ("retrain_epochs", epochs.to_string()),
            ],
        ),
    )
}

fn cmd_eval(
    model_path: &Path,
    manifest: &Path,
    scores_path: &Path,
    det: Option<&Path>,
    embeddings: Option<&Path>,
) -> Result<(), Error> {
    let model = search::load_model(model_path)?;
    let ds = Dataset::load(manifest, model.target_frames)?;
    if ds.feat_dim != model.net.config.feat_dim {
        return Err(Error::shape(format!(
            "manifest features have F={} but the model expects F={}",
            ds.feat_dim,
            model.net.config.feat_dim
        )));
    }
    let records = eval::score_dataset(&model.net, &ds)?;
    write_file(scores_path, &eval::format_score_file(&records))?;
    if let Some(det_path) = det {
        let points = eval::det_points(&records)?;
        write_file(det_path, &eval::format_det_csv(&points))?;
    }
    if let Some(emb_path) = embeddings {
        eval::dump_embeddings(&model.net, &ds, emb_path)?;
    }
    let mut prov = String::new();
    let _ = writeln!(prov, "command=eval");
    let _ = writeln!(prov, "model={}", model_path.display());
    let _ = writeln!(prov, "manifest={}", manifest.display());
    write_file(&provenance_path(scores_path), &prov)?;
    // labels present for both classes → report the metric
    if eval::compute_eer(&records).is_ok() {
        let (eer, _) = eval::compute_eer(&records)?;
        print_eer_line(eer);
    }
    Ok(())
}

fn cmd_eer(scores_path: &Path, labels_manifest: &Path) -> Result<(), Error> {
    let text = std::fs::read_to_string(scores_path)
        .map_err(|e| Error::io(format!("reading scores {}", scores_path.display()), e))?;
    let mut records = eval::parse_score_file(&text)?;
    let manifest = data::load_manifest(labels_manifest)?;
    let labels: HashMap<&str, data::Label> =
        manifest.iter().map(|e| (e.utt_id.as_str(), e.label)).collect();
    let unmatched: Vec<&str> = records
        .iter()
        .filter(|r| !labels.contains_key(r.utt_id.as_str()))
        .map(|r| r.utt_id.as_str())
        .collect();
    if !unmatched.is_empty() {
        return Err(Error::invalid(format!(
            "score file references utt_ids missing from the manifest: {}",
            unmatched.join(", ")
        )));
    }
    for r in &mut records {
        r.label = labels[r.utt_id.as_str()];
    }
    let (eer, _) = eval::compute_eer(&records)?;
    print_eer_line(eer);
    Ok(())
}

fn cmd_gradcheck(instances: usize) -> Result<(), Error> {
    let eps = gradcheck::DEFAULT_EPS;
    let tol = gradcheck::DEFAULT_TOL;
    let mut failed = false;
    let mut results = gradcheck::run_primitive_suite(instances, eps)?;
    results.extend(ops::run_candidate_op_suite(instances, eps)?);
    for r in &results {
        let status = if r.max_rel_err <= tol { "ok" } else { "FAIL" };
        println!("{status:4} {:<28} max_rel_err {:.3e}", r.name, r.max_rel_err);
        failed |= r.max_rel_err > tol;
    }
    if failed {
        return Err(Error::invalid("gradient check failed"));
    }
    Ok(())
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenSynthetic { out, n_per_split, t, f, seed } => {
            if t < 8 || f < 8 {
                usage_exit(&format!("generator needs --t >= 8 and --f >= 8, got {t}x{f}"));
            }
            cmd_gen_synthetic(&out, n_per_split, t, f, seed)
        }
        Command::Search { train_manifest, val_manifest, out, history, opts } => {
            let config = resolve_or_exit(&opts);
            cmd_search(&train_manifest, &val_manifest, &out, history.as_deref(), &config)
        }
        Command::Train { genotype, train_manifest, out, opts } => {
            let epochs_given = opts.epochs.is_some()
                || opts.config.as_ref().is_some_and(|p| {
                    parse_config_file(p).is_ok_and(|m| m.contains_key("epochs"))
                });
            let config = resolve_or_exit(&opts);
            cmd_train(&genotype, &train_manifest, &out, &config, epochs_given)
        }
        Command::Eval { model, manifest, scores, det, embeddings } => {
            cmd_eval(&model, &manifest, &scores, det.as_deref(), embeddings.as_deref())
        }
        Command::Eer { scores, labels_manifest } => cmd_eer(&scores, &labels_manifest),
        Command::Gradcheck { instances } => {
            if instances < 1 {
                usage_exit("--instances must be >= 1");
            }
            cmd_gradcheck(instances)
        }
    }
}

fn usage_exit(msg: &str) -> ! {
    eprintln!("error: {msg}");
    std::process::exit(2);
}

fn resolve_or_exit(opts: &TrainOpts) -> SearchConfig {
    match opts.resolve() {
        Ok(c) => c,
        Err(UsageError(msg)) => usage_exit(&msg),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
