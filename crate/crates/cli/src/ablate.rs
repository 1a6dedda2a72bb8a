//! `ablate`: one arm per value of the ablated component, all arms sharing
//! seeds.
//!
//! Complete rows evaluate the arm's teacher on the unmasked test split.
//! Incomplete rows evaluate the arm's student over the rate grid and report
//! metrics averaged over rates, plus the MAE-AUILC.

use std::fmt::Write as _;

use mitr_core::evalkit::{missing_rate_sweep, regression_metrics, MetricReport};
use mitr_core::losses::{LossSwitches, Setting};
use mitr_core::pipeline::{predict, train_student, train_teacher, FusionKind, ModelBundle, ModelConfig, RunConfig};
use mitr_core::{Error, Result};

use crate::commands::pick_rates;
use crate::report::{load_config, load_data, metric_cells, metric_header, resolve_out, with_manifest, write_text};
use crate::{AblateArgs, Axis, CliResult};

pub const ABLATE_FILE: &str = "ablate.csv";
pub const ABLATE_PER_SEED_FILE: &str = "ablate_per_seed.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub name: String,
    pub model: ModelConfig,
    pub switches: LossSwitches,
}

pub fn ablate_arms(axis: Axis, cfg: &RunConfig) -> Result<Vec<Arm>> {
    let arm = |name: String, model: ModelConfig, switches: LossSwitches| Arm { name, model, switches };
    let arms = match axis {
        Axis::NBlocks => {
            if cfg.ablate.n_blocks.is_empty() || cfg.ablate.n_blocks.contains(&0) {
                return Err(Error::Config(format!("bad n_blocks grid {:?}", cfg.ablate.n_blocks)));
            }
            cfg.ablate
                .n_blocks
                .iter()
                .map(|&n| {
                    let model = ModelConfig { n_blocks: n, ..cfg.model };
                    arm(format!("n={n}"), model, cfg.train.switches)
                })
                .collect()
        }
        Axis::LossCombo => LossSwitches::combos()
            .into_iter()
            .map(|s| arm(s.label(), cfg.model, s))
            .collect(),
        Axis::NoTf => [("tf", FusionKind::Transformer), ("no_tf", FusionKind::MeanConcat)]
            .into_iter()
            .map(|(name, fusion)| arm(name.to_string(), ModelConfig { fusion, ..cfg.model }, cfg.train.switches))
            .collect(),
    };
    Ok(arms)
}

#[derive(Clone, Debug)]
struct Row {
    arm: String,
    setting: Setting,
    seed: u64,
    metrics: MetricReport,
    mae_auilc: Option<f64>,
}

fn teacher_report(teacher: &ModelBundle, archive: &mitr_core::data::FeatureArchive) -> Result<MetricReport> {
    if archive.splits.test.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    let test = archive.subset(&archive.splits.test);
    let preds: Vec<f64> = predict(teacher, &test, None)?.into_iter().map(f64::from).collect();
    let truth: Vec<f64> = test.iter().map(|s| s.label as f64).collect();
    regression_metrics(&preds, &truth, archive.style())
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn cmd_ablate(a: &AblateArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = a.setting {
        cfg.train.setting = s.into();
    }
    if !a.seed.is_empty() {
        cfg.train.seeds = a.seed.clone();
    }
    let out = resolve_out(a.out.as_deref(), cfg.out.as_deref(), &format!("ablate-{}", a.axis.name()));
    let seeds = cfg.train.seeds.clone();
    with_manifest("ablate", Some(&a.config), &seeds, &out, || -> CliResult<()> {
        let complete_only = cfg.train.setting == Setting::Complete;
        if complete_only && a.axis == Axis::LossCombo {
            return Err(Error::Config("loss combinations only apply to the incomplete setting".into()).into());
        }
        let arms = ablate_arms(a.axis, &cfg)?;
        let archive = load_data(&cfg.data)?;
        let rates = pick_rates(&a.rates, &cfg.sweep.rates, &archive)?;
        // Loss switches do not touch the teacher, so teachers are shared by model config.
        let emit_complete = a.axis != Axis::LossCombo;
        let mut teachers: Vec<(ModelConfig, u64, ModelBundle)> = Vec::new();
        let mut rows = Vec::new();
        for arm in &arms {
            for &seed in &seeds {
                let teacher = match teachers.iter().find(|(m, s, _)| *m == arm.model && *s == seed) {
                    Some((_, _, t)) => t.clone(),
                    None => {
                        log::info!("arm {}: teacher, seed {seed}", arm.name);
                        let t = train_teacher(&archive, &arm.model, &cfg.train, seed)?.bundle;
                        teachers.push((arm.model, seed, t.clone()));
                        t
                    }
                };
                if emit_complete {
                    rows.push(Row {
                        arm: arm.name.clone(),
                        setting: Setting::Complete,
                        seed,
                        metrics: teacher_report(&teacher, &archive)?,
                        mae_auilc: None,
                    });
                }
                if complete_only {
                    continue;
                }
                log::info!("arm {}: student, seed {seed}", arm.name);
                let train = mitr_core::pipeline::TrainConfig {
                    switches: arm.switches,
                    ..cfg.train.clone()
                };
                let student = train_student(&archive, &teacher, &arm.model, &train, seed)?.bundle;
                let sweep = missing_rate_sweep(&student, &archive, &rates, &cfg.sweep.seeds)?;
                let per_rate: Vec<MetricReport> = sweep.points.iter().map(|p| p.metrics).collect();
                rows.push(Row {
                    arm: arm.name.clone(),
                    setting: Setting::Incomplete,
                    seed,
                    metrics: MetricReport::mean(&per_rate),
                    mae_auilc: sweep.auilc.map(|au| au.mae),
                });
            }
        }
        write_text(&out.join(ABLATE_PER_SEED_FILE), &per_seed_csv(&rows))?;
        write_text(&out.join(ABLATE_FILE), &mean_csv(&arms, &rows))?;
        Ok(())
    })
}

fn per_seed_csv(rows: &[Row]) -> String {
    let mut s = format!("arm,setting,seed,{},mae_auilc\n", metric_header());
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.arm,
            r.setting.name(),
            r.seed,
            metric_cells(&r.metrics),
            cell(r.mae_auilc)
        );
    }
    s
}

fn mean_csv(arms: &[Arm], rows: &[Row]) -> String {
    let mut s = format!("arm,setting,{},mae_auilc\n", metric_header());
    for arm in arms {
        for setting in [Setting::Complete, Setting::Incomplete] {
            let group: Vec<&Row> = rows.iter().filter(|r| r.arm == arm.name && r.setting == setting).collect();
            if group.is_empty() {
                continue;
            }
            let metrics = MetricReport::mean(&group.iter().map(|r| r.metrics).collect::<Vec<_>>());
            let au: Option<Vec<f64>> = group.iter().map(|r| r.mae_auilc).collect();
            let au = au.map(|v| v.iter().sum::<f64>() / v.len() as f64);
            let _ = writeln!(s, "{},{},{},{}", arm.name, setting.name(), metric_cells(&metrics), cell(au));
        }
    }
    s
}
