//! The four pipeline commands.

use crate::config::RunConfig;
use crate::CliError;
use hmq_core::checkpoint::{self, Checkpoint, CheckpointKind};
use hmq_core::compression;
use hmq_core::metrics::{self, SchemeRow};
use hmq_core::model::{attach_hmqs, build_model, Arch, QuantMode, QuantModel};
use hmq_core::rng::RunRng;
use hmq_core::train;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub const FLOAT_CKPT: &str = "float.ckpt";
pub const QUANT_CKPT: &str = "quantized.ckpt";
pub const METRICS_CSV: &str = "metrics.csv";
pub const EPOCHS_CSV: &str = "epochs.csv";
pub const PRETRAIN_CSV: &str = "pretrain_epochs.csv";
pub const SCHEME_CSV: &str = "scheme_table.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const LAYER_BITS_CSV: &str = "report_layer_bits.csv";

/// Exclusive lock on the output directory for the duration of a command.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Other(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Other(format!(
                "output directory {} is locked by another command (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(CliError::Other(format!("cannot lock {}: {e}", dir.display()))),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub struct Settings {
    pub config: RunConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Settings {
    pub fn resolve(config_path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self, CliError> {
        let config = RunConfig::load(config_path)?;
        let seed = seed.unwrap_or(config.run.seed);
        let out_dir = out.unwrap_or_else(|| config.run.out_dir.clone());
        Ok(Settings { config, seed, out_dir })
    }
}

pub fn cmd_pretrain(s: &Settings) -> Result<(), CliError> {
    let _lock = DirLock::acquire(&s.out_dir)?;
    let mut rng = RunRng::new(s.seed);
    let (train_ds, test_ds) = s.config.load_datasets(&mut rng)?;
    let arch = Arch::parse(&s.config.model.arch)?;
    let cfg = s.config.train_config(s.seed);
    cfg.validate()?;
    let model = build_model(arch, s.config.input_dims(), train_ds.num_classes, &mut rng);
    let mut qm = QuantModel::bare(model);
    let out = train::pretrain(&mut qm, &train_ds, &test_ds, &cfg, &mut rng)?;
    let ckpt = Checkpoint {
        kind: CheckpointKind::Float,
        quant_model: qm,
        optimizers: vec![out.optimizer],
        rng_seed: s.seed,
        rng_word_pos: rng.word_pos(),
    };
    checkpoint::save(&s.out_dir.join(FLOAT_CKPT), &ckpt)?;
    metrics::write_file(&s.out_dir.join(PRETRAIN_CSV), &metrics::epochs_to_csv(&out.epoch_metrics))?;
    println!("float baseline top-1: {:.4}", out.final_accuracy);
    println!("checkpoint: {}", s.out_dir.join(FLOAT_CKPT).display());
    Ok(())
}

pub fn cmd_quantize(s: &Settings) -> Result<(), CliError> {
    let _lock = DirLock::acquire(&s.out_dir)?;
    let float_path = s.out_dir.join(FLOAT_CKPT);
    if !float_path.exists() {
        return Err(CliError::Config(format!(
            "float checkpoint {} not found; run `hmq pretrain` first",
            float_path.display()
        )));
    }
    let ckpt = checkpoint::load(&float_path)?;
    if ckpt.kind != CheckpointKind::Float {
        return Err(CliError::Config(format!("{} is not a float checkpoint", float_path.display())));
    }
    let mut rng = RunRng::new(s.seed);
    let (train_ds, test_ds) = s.config.load_datasets(&mut rng)?;
    let arch = Arch::parse(&s.config.model.arch)?;
    if ckpt.quant_model.model.arch != arch {
        return Err(CliError::Config(format!(
            "checkpoint architecture {} does not match config {}",
            ckpt.quant_model.model.arch.name(),
            arch.name()
        )));
    }
    let cfg = s.config.train_config(s.seed);
    cfg.validate()?;

    let mut qm = ckpt.quant_model;
    let float_accuracy = train::evaluate(&mut qm, &test_ds, cfg.batch_size, QuantMode::Bypass)?;
    let calibrated = train::calibrate_activations(&mut qm, &train_ds, cfg.batch_size)?;
    let targets = train::resolve_targets(&cfg, &qm)?;
    let mut qm = attach_hmqs(qm.model.clone(), &cfg.weight_bits, &calibrated, targets.activation_budget_bits)?;
    let outcome = train::run_two_phase(&mut qm, &train_ds, &test_ds, &cfg, &targets, &mut rng)?;

    let schemes = train::scheme_table(&qm);
    let ckpt = Checkpoint {
        kind: CheckpointKind::Quantized,
        quant_model: qm,
        optimizers: vec![outcome.weight_optimizer.clone(), outcome.pi_optimizer.clone()],
        rng_seed: s.seed,
        rng_word_pos: rng.word_pos(),
    };
    checkpoint::save(&s.out_dir.join(QUANT_CKPT), &ckpt)?;
    metrics::write_file(&s.out_dir.join(METRICS_CSV), &metrics::steps_to_csv(&outcome.step_metrics))?;
    metrics::write_file(&s.out_dir.join(EPOCHS_CSV), &metrics::epochs_to_csv(&outcome.epoch_metrics))?;
    metrics::write_file(&s.out_dir.join(SCHEME_CSV), &metrics::schemes_to_csv(&schemes))?;

    let summary = summary_csv(
        float_accuracy,
        outcome.quantized_accuracy,
        outcome.final_expected_wcr,
        outcome.final_actual_wcr,
        outcome.final_acr,
        &outcome.targets,
        s.seed,
        outcome.skipped_steps,
    );
    metrics::write_file(&s.out_dir.join(SUMMARY_CSV), &summary)?;

    println!("float top-1:      {float_accuracy:.4}");
    println!("quantized top-1:  {:.4}", outcome.quantized_accuracy);
    println!("actual WCR:       {:.4}", outcome.final_actual_wcr);
    println!("ACR:              {:.4}", outcome.final_acr);
    println!("checkpoint: {}", s.out_dir.join(QUANT_CKPT).display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn summary_csv(
    float_top1: f64,
    quant_top1: f64,
    expected_wcr: f64,
    actual_wcr: f64,
    acr: f64,
    targets: &compression::CompressionTargets,
    seed: u64,
    skipped: u64,
) -> String {
    let mut out = String::new();
    out.push_str(
        "float_top1,quantized_top1,delta_pp,expected_wcr,actual_wcr,acr,r_w_target,r_a_target,lambda,activation_budget_bits,seed,skipped_steps\n",
    );
    let _ = writeln!(
        out,
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        float_top1,
        quant_top1,
        (float_top1 - quant_top1) * 100.0,
        expected_wcr,
        actual_wcr,
        acr,
        targets.weight_rate,
        targets.activation_rate,
        targets.lambda,
        targets.activation_budget_bits,
        seed,
        skipped
    );
    out
}

pub fn cmd_evaluate(s: &Settings, checkpoint_path: &Path) -> Result<(), CliError> {
    let ckpt = checkpoint::load(checkpoint_path)?;
    let mut rng = RunRng::new(s.seed);
    let (_train_ds, test_ds) = s.config.load_datasets(&mut rng)?;
    let cfg = s.config.train_config(s.seed);
    let mut qm = ckpt.quant_model;
    let (mode, kind) = match ckpt.kind {
        CheckpointKind::Float => (QuantMode::Bypass, "float"),
        CheckpointKind::Quantized => (QuantMode::Active, "quantized"),
    };
    let acc = train::evaluate(&mut qm, &test_ds, cfg.batch_size, mode)?;
    println!("{kind} top-1: {acc:.4}");
    Ok(())
}

pub fn cmd_report(run_dir: &Path) -> Result<(), CliError> {
    let summary_path = run_dir.join(SUMMARY_CSV);
    let scheme_path = run_dir.join(SCHEME_CSV);
    let metrics_path = run_dir.join(METRICS_CSV);
    for p in [&summary_path, &scheme_path, &metrics_path] {
        if !p.exists() {
            return Err(CliError::Data(format!(
                "missing {}; run `hmq quantize` to completion first",
                p.display()
            )));
        }
    }
    let summary = fs::read_to_string(&summary_path).map_err(|e| CliError::Data(e.to_string()))?;
    let mut lines = summary.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let values: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    if header.len() != values.len() || header.is_empty() {
        return Err(CliError::Data(format!("{} is malformed", summary_path.display())));
    }
    let get = |key: &str| -> Result<f64, CliError> {
        header
            .iter()
            .position(|&h| h == key)
            .and_then(|i| values[i].parse().ok())
            .ok_or_else(|| CliError::Data(format!("summary is missing {key}")))
    };
    let float_top1 = get("float_top1")?;
    let quant_top1 = get("quantized_top1")?;
    println!("float top-1:      {float_top1:.4}");
    println!("quantized top-1:  {quant_top1:.4}");
    println!("top-1 delta:      {:.2} pp", (float_top1 - quant_top1) * 100.0);
    println!("actual WCR:       {:.4}", get("actual_wcr")?);
    println!("expected WCR:     {:.4}", get("expected_wcr")?);
    println!("ACR (32*max|X|/U): {:.4}", get("acr")?);

    // plot-ready per-layer bit-width table from the scheme table
    let schemes = fs::read_to_string(&scheme_path).map_err(|e| CliError::Data(e.to_string()))?;
    let mut rows: Vec<SchemeRow> = Vec::new();
    for (i, line) in schemes.lines().enumerate() {
        if i == 0 {
            if line != metrics::SCHEME_HEADER {
                return Err(CliError::Data(format!("{} has unexpected header", scheme_path.display())));
            }
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(CliError::Data(format!("{} row {} malformed", scheme_path.display(), i + 1)));
        }
        rows.push(SchemeRow {
            tensor: f[0].to_string(),
            kind: if f[1] == "weight" { "weight" } else { "activation" },
            threshold: f[2].parse().map_err(|_| CliError::Data("bad threshold".into()))?,
            bits: f[3].parse().map_err(|_| CliError::Data("bad bits".into()))?,
            delta: f[4].parse().map_err(|_| CliError::Data("bad delta".into()))?,
            signed: f[5] == "true",
            numel: f[6].parse().map_err(|_| CliError::Data("bad numel".into()))?,
        });
    }
    let mut out = String::from("tensor,kind,bits\n");
    for r in &rows {
        let _ = writeln!(out, "{},{},{}", r.tensor, r.kind, r.bits);
    }
    metrics::write_file(&run_dir.join(LAYER_BITS_CSV), &out)?;
    println!("wrote {}", run_dir.join(LAYER_BITS_CSV).display());

    // sanity-parse the metrics CSV so a truncated run is reported here
    let steps = metrics::parse_steps_csv(&fs::read_to_string(&metrics_path).map_err(|e| CliError::Data(e.to_string()))?)?;
    println!("steps recorded:   {}", steps.len());
    Ok(())
}
