//! Command-line front end: wires data generation, training, competition,
//! inference, evaluation, and the gradient suite into reproducible runs.
//!
//! Every run that produces artifacts also writes the fully resolved
//! configuration next to them, so any output directory can reproduce its
//! own results bit for bit. Exit codes: 0 success, 1 usage or
//! configuration error, 2 runtime failure; diagnostics go to stderr.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::cts::{stage_log_to_csv, train_cts};
use crate::data::{generate_phantom, normalize_slice, read_volume, split_dataset, write_volume, DatasetSplit, VolumeCase};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::metrics::{evaluate_case, evaluate_set, CaseMetrics};
use crate::network::load_checkpoint;
use crate::rng::{RngStream, STREAM_DROPOUT, STREAM_PHANTOM_BASE, STREAM_SPLIT};
use crate::train::{history_to_csv, train, SliceSet};

#[derive(Parser)]
#[command(
    name = "pyraseg",
    version,
    about = "Desk-scale volumetric segmentation: pyramid network, hard-negative mining, competitive training"
)]
struct Cli {
    /// Worker threads for internal parallelism (default: available cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate deterministic synthetic labeled volumes
    GenData {
        /// Number of volumes to write
        #[arg(long)]
        count: usize,
        /// Volume extent as DX,DY,DZ voxels
        #[arg(long, default_value = "64,64,16")]
        size: String,
        /// Base seed; volume i draws from its own substream of it
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for the .segv files
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a single model; writes best checkpoint and loss history
    Train {
        /// Configuration file (key = value lines); defaults when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory of labeled .segv volumes (overrides data.dir)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory (overrides data.out)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Competitive training; writes winner checkpoint and stage log
    Compete {
        /// Configuration file (key = value lines); defaults when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory of labeled .segv volumes (overrides data.dir)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory (overrides data.out)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment one volume slice by slice with a trained checkpoint
    Predict {
        /// Trained .segc checkpoint
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input .segv volume
        #[arg(long)]
        volume: PathBuf,
        /// Output .segv volume with predicted labels
        #[arg(long)]
        out: PathBuf,
        /// Configuration file for non-default network or evaluation options
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score predicted volumes against ground truth; writes a metrics CSV
    Evaluate {
        /// Directory of predicted labeled volumes
        #[arg(long)]
        pred: PathBuf,
        /// Directory of ground-truth labeled volumes (pairing by filename)
        #[arg(long)]
        gt: PathBuf,
        /// Report CSV path
        #[arg(long)]
        report: PathBuf,
        /// Configuration file for non-default evaluation options
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite
    Gradcheck,
}

/// Parses argv and runs the selected subcommand, returning the process
/// exit code.
pub fn run<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: config error: --threads must be positive");
            return 1;
        }
        // ignore the error when a pool already exists (repeated calls in
        // one process); the first configuration wins
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData { count, size, seed, out } => gen_data(count, &size, seed, &out),
        Command::Train { config, data, out } => {
            let cfg = resolve_config(config.as_deref(), data, out)?;
            cmd_train(cfg)
        }
        Command::Compete { config, data, out } => {
            let cfg = resolve_config(config.as_deref(), data, out)?;
            cmd_compete(cfg)
        }
        Command::Predict { checkpoint, volume, out, config } => {
            let cfg = resolve_config(config.as_deref(), None, None)?;
            cmd_predict(cfg, &checkpoint, &volume, &out)
        }
        Command::Evaluate { pred, gt, report, config } => {
            let cfg = resolve_config(config.as_deref(), None, None)?;
            cmd_evaluate(cfg, &pred, &gt, &report)
        }
        Command::Gradcheck => cmd_gradcheck(),
    }
}

fn parse_dims(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("--size wants DX,DY,DZ, got '{s}'")));
    }
    let mut dims = [0usize; 3];
    for (d, p) in dims.iter_mut().zip(&parts) {
        *d = p
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("--size component '{p}' is not a count")))?;
    }
    Ok(dims)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn gen_data(count: usize, size: &str, seed: u64, out: &Path) -> Result<()> {
    if count == 0 {
        return Err(Error::Config("--count must be positive".into()));
    }
    let dims = parse_dims(size)?;
    create_dir(out)?;
    for i in 0..count {
        let id = format!("case{i:03}");
        let mut rng = RngStream::new(seed, STREAM_PHANTOM_BASE + i as u64);
        let case = generate_phantom(&id, dims, &mut rng)?;
        write_volume(&case, &out.join(format!("{id}.segv")))?;
    }
    println!(
        "wrote {count} volume{} of {}x{}x{} to {}",
        if count == 1 { "" } else { "s" },
        dims[0],
        dims[1],
        dims[2],
        out.display()
    );
    Ok(())
}

/// Loads the config file (or defaults), lets command-line paths override
/// the file's data paths, and validates the result.
fn resolve_config(
    config: Option<&Path>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<RunConfig> {
    let mut cfg = match config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if data.is_some() {
        cfg.data_dir = data;
    }
    if out.is_some() {
        cfg.out_dir = out;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_dir(dir: &Option<PathBuf>, what: &str, flag: &str, key: &str) -> Result<PathBuf> {
    dir.clone()
        .ok_or_else(|| Error::Config(format!("no {what}: pass {flag} or set {key}")))
}

/// All .segv files of a directory in filename order.
fn discover_volumes(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().is_some_and(|e| e == "segv") && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no .segv volumes in {}", dir.display())));
    }
    Ok(files)
}

fn load_labeled_volumes(dir: &Path) -> Result<Vec<VolumeCase>> {
    let mut cases = Vec::new();
    for path in discover_volumes(dir)? {
        let case = read_volume(&path)?;
        if case.label.is_none() {
            return Err(Error::format(&path, "volume has no label data"));
        }
        cases.push(case);
    }
    Ok(cases)
}

fn split_csv(split: &DatasetSplit) -> String {
    let mut out = String::from("id,subset\n");
    for (subset, ids) in [
        ("train", &split.train),
        ("validation", &split.validation),
        ("test", &split.test),
    ] {
        for id in ids {
            out.push_str(&format!("{id},{subset}\n"));
        }
    }
    out
}

/// Splits the cases and assembles the training and validation slice sets.
fn training_sets(cfg: &RunConfig, cases: &[VolumeCase]) -> Result<(SliceSet, SliceSet, DatasetSplit)> {
    let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
    let mut rng = RngStream::new(cfg.split_seed, STREAM_SPLIT);
    let split = split_dataset(&ids, cfg.split_ratios, &mut rng)?;
    for (name, list) in [("training", &split.train), ("validation", &split.validation)] {
        if list.is_empty() {
            return Err(Error::Config(format!(
                "{name} split is empty with {} volumes and ratios {:?}: add data or adjust split.ratios",
                ids.len(),
                cfg.split_ratios
            )));
        }
    }
    let by_id: HashMap<&str, &VolumeCase> = cases.iter().map(|c| (c.id.as_str(), c)).collect();
    let gather = |ids: &[String]| -> Vec<&VolumeCase> {
        ids.iter().map(|id| by_id[id.as_str()]).collect()
    };
    let train_set = SliceSet::from_volumes(gather(&split.train))?;
    let val_set = SliceSet::from_volumes(gather(&split.validation))?;
    Ok((train_set, val_set, split))
}

fn cmd_train(cfg: RunConfig) -> Result<()> {
    let data_dir = require_dir(&cfg.data_dir, "data directory", "--data", "data.dir")?;
    let out_dir = require_dir(&cfg.out_dir, "output directory", "--out", "data.out")?;
    create_dir(&out_dir)?;
    let cases = load_labeled_volumes(&data_dir)?;
    let (train_set, val_set, split) = training_sets(&cfg, &cases)?;

    let outcome = train(&cfg.network, &cfg.train, &train_set, &val_set)?;
    outcome.checkpoint.save(&out_dir.join("checkpoint.segc"))?;
    write_text(&out_dir.join("history.csv"), &history_to_csv(&outcome.history))?;
    write_text(&out_dir.join("split.csv"), &split_csv(&split))?;
    write_text(&out_dir.join("config.txt"), &cfg.to_text())?;
    println!(
        "trained {} epochs on {} volumes; best epoch {} (validation loss {:.6}); outputs in {}",
        cfg.train.epochs,
        cases.len(),
        outcome.checkpoint.epoch,
        outcome.checkpoint.val_loss,
        out_dir.display()
    );
    Ok(())
}

fn cmd_compete(cfg: RunConfig) -> Result<()> {
    cfg.cts.validate(cfg.train.epochs)?;
    let data_dir = require_dir(&cfg.data_dir, "data directory", "--data", "data.dir")?;
    let out_dir = require_dir(&cfg.out_dir, "output directory", "--out", "data.out")?;
    create_dir(&out_dir)?;
    let cases = load_labeled_volumes(&data_dir)?;
    let (train_set, val_set, split) = training_sets(&cfg, &cases)?;

    let outcome = train_cts(&cfg.network, &cfg.train, &cfg.cts, &train_set, &val_set, true)?;
    outcome.checkpoint.save(&out_dir.join("checkpoint.segc"))?;
    write_text(&out_dir.join("stage_log.csv"), &stage_log_to_csv(&outcome.stages))?;
    write_text(&out_dir.join("split.csv"), &split_csv(&split))?;
    write_text(&out_dir.join("config.txt"), &cfg.to_text())?;
    println!(
        "competed {} models over {} stages; winner epoch {} (validation loss {:.6}); outputs in {}",
        cfg.cts.num_competitors,
        cfg.cts.num_stages,
        outcome.checkpoint.epoch,
        outcome.checkpoint.val_loss,
        out_dir.display()
    );
    Ok(())
}

/// Per-pixel argmax over class planes; ties go to the lowest class index.
fn argmax_planes(logits: &[f32], classes: usize, plane: usize) -> Vec<u8> {
    let mut labels = vec![0u8; plane];
    for (p, label) in labels.iter_mut().enumerate() {
        let mut best_class = 0usize;
        let mut best = logits[p];
        for c in 1..classes {
            let v = logits[c * plane + p];
            if v > best {
                best = v;
                best_class = c;
            }
        }
        *label = best_class as u8;
    }
    labels
}

fn cmd_predict(cfg: RunConfig, checkpoint: &Path, volume: &Path, out: &Path) -> Result<()> {
    let (mut model, chk) = load_checkpoint(checkpoint, &cfg.network)?;
    let case = read_volume(volume)?;
    let [dx, dy, dz] = case.dims;
    let (h, w) = cfg.network.input_size;
    if (dy, dx) != (h, w) {
        return Err(Error::Shape(format!(
            "volume slices are {dx}x{dy} but the network takes {w}x{h}"
        )));
    }

    let classes = cfg.network.num_classes;
    let plane = dx * dy;
    let mut labels = vec![0u8; case.voxel_count()];
    let mut rng = RngStream::new(0, STREAM_DROPOUT);
    for k in 0..dz {
        let slice = normalize_slice(case.image_slice(k));
        model.reset();
        let fwd = model.forward(&slice, 1, false, &mut rng)?;
        let logits = model.graph.data(fwd.main);
        labels[k * plane..(k + 1) * plane]
            .copy_from_slice(&argmax_planes(logits, classes, plane));
    }
    if cfg.eval.postprocess {
        labels = crate::metrics::remove_small_components(
            &labels,
            case.dims,
            cfg.eval.component_connectivity,
            cfg.eval.min_fraction,
        )?;
    }

    let id = out
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("prediction")
        .to_string();
    let predicted = VolumeCase {
        id,
        dims: case.dims,
        spacing: case.spacing,
        image: case.image,
        label: Some(labels),
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_volume(&predicted, out)?;
    write_text(&PathBuf::from(format!("{}.conf", out.display())), &cfg.to_text())?;
    let fg = predicted.label.as_ref().unwrap().iter().filter(|&&v| v != 0).count();
    println!(
        "segmented {} slices with checkpoint of epoch {}; {fg} foreground voxels; wrote {}",
        dz,
        chk.epoch,
        out.display()
    );
    Ok(())
}

fn cmd_evaluate(cfg: RunConfig, pred_dir: &Path, gt_dir: &Path, report: &Path) -> Result<()> {
    use rayon::prelude::*;

    let gt_files = discover_volumes(gt_dir)?;
    let pairs: Vec<(PathBuf, PathBuf)> = gt_files
        .into_iter()
        .map(|gt| {
            let name = gt.file_name().expect("discovered file has a name").to_os_string();
            (pred_dir.join(name), gt)
        })
        .collect();

    let cases: Result<Vec<CaseMetrics>> = pairs
        .par_iter()
        .map(|(pred_path, gt_path)| {
            let gt = read_volume(gt_path)?;
            let pred = read_volume(pred_path)?;
            let gt_label = gt
                .label
                .as_ref()
                .ok_or_else(|| Error::format(gt_path, "ground-truth volume has no label data"))?;
            let pred_label = pred
                .label
                .as_ref()
                .ok_or_else(|| Error::format(pred_path, "predicted volume has no label data"))?;
            if pred.dims != gt.dims || pred.spacing != gt.spacing {
                return Err(Error::Shape(format!(
                    "{}: prediction grid {:?}/{:?} does not match ground truth {:?}/{:?}",
                    gt.id, pred.dims, pred.spacing, gt.dims, gt.spacing
                )));
            }
            let spacing = gt.spacing.map(|s| s as f64);
            evaluate_case(&gt.id, pred_label, gt_label, gt.dims, spacing, &cfg.eval)
        })
        .collect();
    let report_data = evaluate_set(cases?);

    if let Some(parent) = report.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_text(report, &report_data.to_csv())?;
    write_text(&PathBuf::from(format!("{}.conf", report.display())), &cfg.to_text())?;
    println!(
        "evaluated {} cases: mean dice {:.6}; report at {}",
        report_data.cases.len(),
        report_data.mean_dice,
        report.display()
    );
    Ok(())
}

fn cmd_gradcheck() -> Result<()> {
    let reports = gradcheck::run_suite()?;
    let mut worst: Option<&gradcheck::GradCheckReport> = None;
    for r in &reports {
        println!(
            "{:<18} max rel err {:>9.3e}  {}",
            r.name,
            r.max_rel_err,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        if worst.is_none_or(|w| r.max_rel_err > w.max_rel_err) {
            worst = Some(r);
        }
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(Error::Numeric(format!(
            "{failed} of {} gradient checks failed (worst: {} at {:.3e})",
            reports.len(),
            worst.map_or("none", |w| w.name.as_str()),
            worst.map_or(f64::NAN, |w| w.max_rel_err),
        )));
    }
    println!(
        "all {} gradient checks passed (worst: {} at {:.3e})",
        reports.len(),
        worst.map_or("none", |w| w.name.as_str()),
        worst.map_or(f64::NAN, |w| w.max_rel_err),
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_parse() {
        assert_eq!(parse_dims("64,64,16").unwrap(), [64, 64, 16]);
        assert_eq!(parse_dims(" 32, 48 ,8").unwrap(), [32, 48, 8]);
        assert!(parse_dims("64,64").is_err());
        assert!(parse_dims("64,64,x").is_err());
    }

    #[test]
    fn argmax_takes_lowest_class_on_ties() {
        // two classes over four pixels; pixel 2 ties exactly
        let logits = vec![0.1, -0.5, 0.25, 0.0, /* class 1 */ 0.0, 0.5, 0.25, -1.0];
        assert_eq!(argmax_planes(&logits, 2, 4), vec![0, 1, 0, 0]);
    }

    #[test]
    fn bad_flags_exit_one() {
        assert_eq!(run(["pyraseg", "no-such-command"]), 1);
        assert_eq!(run(["pyraseg", "gen-data", "--count", "1"]), 1); // missing --out
        assert_eq!(run(["pyraseg", "train", "--nope", "x"]), 1);
    }

    #[test]
    fn help_and_version_exit_zero() {
        assert_eq!(run(["pyraseg", "--help"]), 0);
        assert_eq!(run(["pyraseg", "--version"]), 0);
    }

    #[test]
    fn missing_paths_are_config_errors() {
        // no data/out directories from flags or config file
        assert_eq!(run(["pyraseg", "train"]), 1);
        assert_eq!(run(["pyraseg", "compete"]), 1);
    }
}
