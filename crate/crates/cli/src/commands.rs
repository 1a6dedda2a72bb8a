//! `synth`, `train`, `sweep` and `gradcheck`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mitr_core::data::{save_archive, generate_synthetic, FeatureArchive, SynthSpec};
use mitr_core::evalkit::{default_rates, missing_rate_sweep, sweep_per_seed_csv, write_sweep_csv, write_sweep_summary, METRIC_COLUMNS};
use mitr_core::gradcheck::{registry, CheckReport, UnitKind, TOLERANCE};
use mitr_core::losses::Setting;
use mitr_core::pipeline::{
    load_checkpoint, save_checkpoint, train_student, train_teacher, ModelBundle, Role, CHECKPOINT_FILE,
};
use mitr_core::{Error, Result};

use crate::report::{history_csv, load_config, load_data, resolve_out, with_manifest, write_text};
use crate::{CliError, CliResult, GradcheckArgs, SweepArgs, SynthArgs, TrainArgs};

pub const HISTORY_FILE: &str = "history.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_PER_SEED_FILE: &str = "sweep_per_seed.csv";
pub const AUILC_FILE: &str = "auilc.json";
pub const GRADCHECK_FILE: &str = "gradcheck.csv";

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

pub fn load_spec(path: &Path) -> Result<SynthSpec> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read spec {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Spec(e.to_string()))
}

pub fn cmd_synth(a: &SynthArgs) -> CliResult<()> {
    let mut spec = load_spec(&a.config)?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let out = resolve_out(a.out.as_deref(), None, "synth");
    with_manifest("synth", Some(&a.config), &[spec.seed], &out, || {
        let archive = generate_synthetic(&spec)?;
        save_archive(&archive, &out)?;
        log::info!("wrote {} samples to {}", archive.samples.len(), out.display());
        Ok(())
    })
}

/// A teacher checkpoint directory, or `<root>/seed-<s>/checkpoint` for a
/// train output root.
pub fn resolve_teacher(path: &Path, seed: u64) -> Result<PathBuf> {
    if path.join(CHECKPOINT_FILE).is_file() {
        return Ok(path.to_path_buf());
    }
    let nested = seed_dir(path, seed).join(CHECKPOINT_DIR);
    if nested.join(CHECKPOINT_FILE).is_file() {
        return Ok(nested);
    }
    Err(Error::Config(format!(
        "no teacher checkpoint at {} (nor {})",
        path.display(),
        nested.display()
    )))
}

pub fn load_teacher(path: &Path, seed: u64) -> Result<ModelBundle> {
    let dir = resolve_teacher(path, seed)?;
    let mut bundle = load_checkpoint(&dir)?.bundle;
    if bundle.role != Role::Teacher {
        log::warn!("checkpoint {} is not a teacher; using it as one", dir.display());
    }
    bundle.freeze();
    Ok(bundle)
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = a.setting {
        cfg.train.setting = s.into();
    }
    if !a.seed.is_empty() {
        cfg.train.seeds = a.seed.clone();
    }
    let teacher = a.teacher.clone().or_else(|| cfg.teacher.clone());
    let out = resolve_out(a.out.as_deref(), cfg.out.as_deref(), "train");
    let seeds = cfg.train.seeds.clone();
    with_manifest("train", Some(&a.config), &seeds, &out, || -> CliResult<()> {
        if cfg.train.setting == Setting::Incomplete && teacher.is_none() {
            return Err(Error::Config(
                "the incomplete setting needs a teacher checkpoint (`--teacher` or `teacher` in the config)".into(),
            )
            .into());
        }
        let archive = load_data(&cfg.data)?;
        let mut summary = String::from("seed,best_epoch,epochs,best_val_mae\n");
        for &seed in &seeds {
            let outcome = match cfg.train.setting {
                Setting::Complete => train_teacher(&archive, &cfg.model, &cfg.train, seed)?,
                Setting::Incomplete => {
                    let t = load_teacher(teacher.as_deref().expect("checked above"), seed)?;
                    train_student(&archive, &t, &cfg.model, &cfg.train, seed)?
                }
            };
            let dir = seed_dir(&out, seed);
            save_checkpoint(&outcome.bundle, Some(&cfg.train), &dir.join(CHECKPOINT_DIR))?;
            write_text(&dir.join(HISTORY_FILE), &history_csv(&outcome.history, outcome.setting))?;
            let best = outcome
                .history
                .iter()
                .find(|r| r.epoch == outcome.best_epoch)
                .map(|r| r.val_mae)
                .unwrap_or(f64::NAN);
            let _ = writeln!(summary, "{seed},{},{},{best}", outcome.best_epoch, outcome.history.len());
            log::info!(
                "seed {seed}: {} epochs, best epoch {} (val MAE {best:.4})",
                outcome.history.len(),
                outcome.best_epoch
            );
        }
        write_text(&out.join(SUMMARY_FILE), &summary)?;
        Ok(())
    })
}

/// Rates from the flag, then the config, then the label style's default grid.
pub fn pick_rates(flag: &[f64], config: &[f64], archive: &FeatureArchive) -> Result<Vec<f64>> {
    let rates = if !flag.is_empty() {
        flag.to_vec()
    } else if !config.is_empty() {
        config.to_vec()
    } else {
        default_rates(archive.style())
    };
    if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::Config(format!("rates must lie in [0, 1], got {rates:?}")));
    }
    if rates.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("rates must increase strictly, got {rates:?}")));
    }
    Ok(rates)
}

pub fn cmd_sweep(a: &SweepArgs) -> CliResult<()> {
    let cfg = load_config(&a.config)?;
    let seeds = if a.seed.is_empty() { cfg.sweep.seeds.clone() } else { a.seed.clone() };
    let out = resolve_out(a.out.as_deref(), cfg.out.as_deref(), "sweep");
    with_manifest("sweep", Some(&a.config), &seeds, &out, || -> CliResult<()> {
        if !a.checkpoint.join(CHECKPOINT_FILE).is_file() {
            return Err(Error::Config(format!("no checkpoint at {}", a.checkpoint.display())).into());
        }
        if seeds.is_empty() {
            return Err(Error::Config("a sweep needs at least one seed".into()).into());
        }
        let model = load_checkpoint(&a.checkpoint)?.bundle;
        let archive = load_data(&cfg.data)?;
        let rates = pick_rates(&a.rates, &cfg.sweep.rates, &archive)?;
        let result = missing_rate_sweep(&model, &archive, &rates, &seeds)?;
        write_sweep_csv(&result, &out.join(SWEEP_FILE))?;
        write_text(&out.join(SWEEP_PER_SEED_FILE), &sweep_per_seed_csv(&result))?;
        write_sweep_summary(&result, &out.join(AUILC_FILE))?;
        for (k, col) in METRIC_COLUMNS.iter().enumerate() {
            let mut s = String::from("rate,mean");
            for seed in &result.seeds {
                let _ = write!(s, ",seed_{seed}");
            }
            s.push('\n');
            for p in &result.points {
                let _ = write!(s, "{},{}", p.rate, p.metrics.values()[k]);
                for r in &p.per_seed {
                    let _ = write!(s, ",{}", r.values()[k]);
                }
                s.push('\n');
            }
            write_text(&out.join("charts").join(format!("{col}.csv")), &s)?;
        }
        if let Some(au) = &result.auilc {
            log::info!("MAE-AUILC {:.5} over {} rates", au.mae, rates.len());
        }
        Ok(())
    })
}

pub fn gradcheck_csv(reports: &[(CheckReport, UnitKind)]) -> String {
    let mut s = String::from("unit,kind,max_rel_error,coordinates,passed\n");
    for (r, kind) in reports {
        let kind = match kind {
            UnitKind::Operator => "operator",
            UnitKind::Composite => "composite",
        };
        let _ = writeln!(s, "{},{kind},{:e},{},{}", r.name, r.max_rel_error, r.coordinates, r.passed());
    }
    s
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let out = resolve_out(a.out.as_deref(), None, "gradcheck");
    with_manifest("gradcheck", None, &a.seed, &out, || -> CliResult<()> {
        if a.seed.is_empty() {
            return Err(Error::Config("gradcheck needs at least one seed".into()).into());
        }
        let reports = mitr_core::gradcheck::run_all(&a.seed, a.epsilon).map_err(|e| match e {
            Error::Parameter(m) => Error::Config(m),
            other => other,
        })?;
        let kinds: Vec<UnitKind> = registry().into_iter().map(|(_, k, _)| k).collect();
        let rows: Vec<(CheckReport, UnitKind)> = reports.into_iter().zip(kinds).collect();
        for (r, _) in &rows {
            println!(
                "{:<24} {:>12.3e}  {}",
                r.name,
                r.max_rel_error,
                if r.passed() { "ok" } else { "FAIL" }
            );
        }
        write_text(&out.join(GRADCHECK_FILE), &gradcheck_csv(&rows))?;
        let failed: Vec<&str> = rows.iter().filter(|(r, _)| !r.passed()).map(|(r, _)| r.name.as_str()).collect();
        if failed.is_empty() {
            println!("all {} units within {TOLERANCE:e}", rows.len());
            Ok(())
        } else {
            Err(CliError::Check(format!(
                "{} units exceed {TOLERANCE:e}: {}",
                failed.len(),
                failed.join(", ")
            )))
        }
    })
}
