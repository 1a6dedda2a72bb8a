//! Teacher and student training loops.

use rand::seq::SliceRandom;

use crate::data::{FeatureArchive, ModalitySequence, MultimodalSample, MODALITIES};
use crate::error::{Error, Result};
use crate::exec::map_indexed;
use crate::graph::Var;
use crate::layers::Ctx;
use crate::losses::{
    constant_vector, distill_loss, rec_loss, rec_normalizers, simsiam_loss, task_loss, LossBreakdown, LossTerms,
    RecInputs, Representations, Setting,
};
use crate::masking::{mask_batch, MissingPolicy, SampleMasks};
use crate::params::GradBuffer;
use crate::rng::{seeded, stream, streams};
use crate::tensor::Tensor;

use super::config::TrainConfig;
use super::model::{bind_inputs, predict_prepared, ModelBundle, ModelConfig, Prepared, Role};
use super::optim::{Adam, AdamConfig, EarlyStopping, Verdict};

/// Losses of one epoch: batch means of every component plus the validation
/// MAE of the parameters at the end of the epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub val_mae: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub bundle: ModelBundle,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub setting: Setting,
}

/// Every modality resampled to the common length, as a sample.
fn resample_sample(s: &MultimodalSample, t_common: usize) -> Result<MultimodalSample> {
    let p = super::model::prepare(s, t_common)?;
    let seqs = MODALITIES.map(|m| {
        let x = &p.x[m.index()];
        let f = x.shape()[2];
        ModalitySequence::new(m, x.clone().reshape(vec![t_common, f]).expect("same size")).expect("valid shape")
    });
    Ok(MultimodalSample {
        seqs,
        label: s.label,
    })
}

pub(crate) fn resample_all(samples: &[MultimodalSample], t_common: usize) -> Result<Vec<MultimodalSample>> {
    samples.iter().map(|s| resample_sample(s, t_common)).collect()
}

pub(crate) fn to_prepared(s: &MultimodalSample) -> Prepared {
    Prepared {
        x: MODALITIES.map(|m| {
            let seq = s.seq(m);
            seq.features
                .clone()
                .reshape(vec![1, seq.time_steps(), seq.width()])
                .expect("same size")
        }),
        label: s.label,
    }
}

/// Common time length: the text modality's.
pub fn common_length(archive: &FeatureArchive) -> usize {
    archive.meta.dims[crate::data::Modality::T.index()].t
}

fn widths(archive: &FeatureArchive) -> [usize; 3] {
    archive.meta.dims.map(|d| d.f)
}

/// Teacher outputs on complete inputs, reused as constants by the student.
#[derive(Clone, Debug)]
struct TeacherFeatures {
    e_pool: [Tensor<f32>; 3],
    z: [Tensor<f32>; 3],
    z_pool: [Tensor<f32>; 3],
    pooled_y: Tensor<f32>,
}

fn teacher_features(teacher: &ModelBundle, p: &Prepared) -> Result<TeacherFeatures> {
    let mut cx = Ctx::frozen(&teacher.params);
    let inputs = bind_inputs(&mut cx, p);
    let out = teacher.arch.forward(&mut cx, inputs)?;
    let mut pool = |v: Var| -> Result<Tensor<f32>> {
        let p = cx.g.mean_time(v)?;
        Ok(cx.value(p).clone())
    };
    let e_pool = [pool(out.e[0])?, pool(out.e[1])?, pool(out.e[2])?];
    let z_pool = [pool(out.z[0])?, pool(out.z[1])?, pool(out.z[2])?];
    Ok(TeacherFeatures {
        e_pool,
        z: out.z.map(|v| cx.value(v).clone()),
        z_pool,
        pooled_y: cx.value(out.pooled_y).clone(),
    })
}

fn sum_breakdowns(parts: impl Iterator<Item = LossBreakdown>) -> LossBreakdown {
    let mut acc = [0.0f64; 8];
    for b in parts {
        for (a, v) in acc.iter_mut().zip(b.components()) {
            *a += v;
        }
    }
    LossBreakdown::from_components(acc)
}

fn reduce_batch(store_like: &ModelBundle, parts: Vec<(GradBuffer<f32>, LossBreakdown)>) -> (GradBuffer<f32>, LossBreakdown) {
    let mut grads = GradBuffer::zeros_like(&store_like.params);
    let mut losses = Vec::with_capacity(parts.len());
    for (g, l) in parts {
        grads.add(&g);
        losses.push(l);
    }
    (grads, sum_breakdowns(losses.into_iter()))
}

/// One sample's contribution to a teacher batch.
fn teacher_sample(model: &ModelBundle, p: &Prepared, inv_b: f32) -> Result<(GradBuffer<f32>, LossBreakdown)> {
    let mut cx = Ctx::new(&model.params);
    let inputs = bind_inputs(&mut cx, p);
    let out = model.arch.forward(&mut cx, inputs)?;
    let y = constant_vector(&mut cx.g, &[p.label as f64]);
    let task = task_loss(&mut cx.g, out.pred, y)?;
    let task = cx.g.scale(task, inv_b);
    let grads = cx.g.backward(task);
    let mut buf = GradBuffer::zeros_like(&model.params);
    cx.bind.accumulate(&grads, &mut buf);
    Ok((
        buf,
        LossBreakdown {
            task: cx.g.scalar(task) as f64,
            ..Default::default()
        },
    ))
}

struct StudentStep<'a> {
    cfg: &'a TrainConfig,
    norms: [f64; 3],
    inv_b: f32,
}

fn student_sample(
    model: &ModelBundle,
    step: &StudentStep<'_>,
    masked: &Prepared,
    original: &Prepared,
    masks: &SampleMasks,
    teacher: Option<&TeacherFeatures>,
) -> Result<(GradBuffer<f32>, LossBreakdown)> {
    let cfg = step.cfg;
    let sw = cfg.switches;
    let mut cx = Ctx::new(&model.params);
    let inputs = bind_inputs(&mut cx, masked);
    let out = model.arch.forward(&mut cx, inputs)?;
    let y = constant_vector(&mut cx.g, &[masked.label as f64]);
    let task = task_loss(&mut cx.g, out.pred, y)?;
    let task = cx.g.scale(task, step.inv_b);

    let teacher_const = |cx: &mut Ctx<'_, f32>, t: &Tensor<f32>| cx.g.constant(t.clone());
    let dis = match (sw.dis, teacher) {
        (true, Some(tf)) => {
            let tz = [
                teacher_const(&mut cx, &tf.z[0]),
                teacher_const(&mut cx, &tf.z[1]),
                teacher_const(&mut cx, &tf.z[2]),
            ];
            let ty = teacher_const(&mut cx, &tf.pooled_y);
            let t_rep = Representations { z: tz, pooled_y: ty };
            let s_rep = Representations {
                z: out.z,
                pooled_y: out.pooled_y,
            };
            let terms = distill_loss(&mut cx.g, &t_rep, &s_rep)?;
            Some(terms.map(|v| cx.g.scale(v, step.inv_b)))
        }
        _ => None,
    };

    let rec = if sw.rec {
        let originals = [
            cx.g.constant(original.x[0].clone()),
            cx.g.constant(original.x[1].clone()),
            cx.g.constant(original.x[2].clone()),
        ];
        let arch = &model.arch;
        let mut dec_en = [task; 3];
        let mut dec_mib = [task; 3];
        for m in 0..3 {
            dec_en[m] = arch.dec_en[m].forward(&mut cx, out.e[m])?;
            dec_mib[m] = arch.dec_mib[m].forward(&mut cx, out.z[m])?;
        }
        let r = RecInputs {
            originals,
            decoded_en: dec_en,
            decoded_mib: dec_mib,
            missing: [masks[0].missing(), masks[1].missing(), masks[2].missing()],
            norms: step.norms,
        };
        Some(rec_loss(&mut cx.g, &r)?)
    } else {
        None
    };

    let sim = match (sw.sim, teacher) {
        (true, Some(tf)) => {
            let mut se = [task; 3];
            let mut sz = [task; 3];
            let mut te = [task; 3];
            let mut tz = [task; 3];
            for m in 0..3 {
                se[m] = cx.g.mean_time(out.e[m])?;
                sz[m] = cx.g.mean_time(out.z[m])?;
                te[m] = teacher_const(&mut cx, &tf.e_pool[m]);
                tz[m] = teacher_const(&mut cx, &tf.z_pool[m]);
            }
            let heads = &model.arch.simsiam;
            let en = simsiam_loss(&mut cx, heads, &se, &te, cfg.simsiam_stop_gradient)?;
            let mib = simsiam_loss(&mut cx, heads, &sz, &tz, cfg.simsiam_stop_gradient)?;
            Some((cx.g.scale(en, step.inv_b), cx.g.scale(mib, step.inv_b)))
        }
        _ => None,
    };

    let terms = LossTerms { task, dis, rec, sim };
    let objective = terms.objective(&mut cx.g, &cfg.weights)?;
    let grads = cx.g.backward(objective);
    let mut buf = GradBuffer::zeros_like(&model.params);
    cx.bind.accumulate(&grads, &mut buf);
    Ok((buf, terms.values(&cx.g)))
}

/// Validation inputs fixed for a whole run.
fn validation_set(samples: &[MultimodalSample], policy: Option<&MissingPolicy>, seed: u64) -> Result<Vec<Prepared>> {
    match policy {
        None => Ok(samples.iter().map(to_prepared).collect()),
        Some(p) => {
            let (masked, _) = mask_batch(samples, p, &mut stream(seed, &[streams::VAL_MASK]))?;
            Ok(masked.iter().map(to_prepared).collect())
        }
    }
}

fn mae_on(model: &ModelBundle, set: &[Prepared]) -> Result<f64> {
    let preds = map_indexed(set, |_, p| predict_prepared(model, p))
        .into_iter()
        .collect::<Result<Vec<f32>>>()?;
    let n = set.len() as f64;
    Ok(preds.iter().zip(set).map(|(&p, s)| (p - s.label).abs() as f64).sum::<f64>() / n)
}

/// Shared epoch loop. `batch_step` returns the summed gradient and summed
/// per-sample component values of one batch of train indices.
fn fit(
    mut model: ModelBundle,
    n_train: usize,
    val: &[Prepared],
    cfg: &TrainConfig,
    seed: u64,
    setting: Setting,
    mut batch_step: impl FnMut(&ModelBundle, &[usize], usize, usize) -> Result<(GradBuffer<f32>, LossBreakdown)>,
) -> Result<TrainOutcome> {
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), &model.params);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.params.clone();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..n_train).collect();
    for epoch in 1..=cfg.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut stream(seed, &[streams::SHUFFLE, epoch as u64]));
        let mut sums = Vec::new();
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (grads, losses) = batch_step(&model, batch, epoch, bi)?;
            if !losses.all_finite() {
                return Err(Error::Data(format!("non-finite loss at epoch {epoch}, batch {bi}")));
            }
            adam.step(&mut model.params, &grads);
            sums.push(losses);
        }
        let nb = sums.len() as f64;
        let mut mean = sum_breakdowns(sums.into_iter());
        let c = mean.components().map(|v| v / nb);
        mean = LossBreakdown::from_components(c);
        mean = crate::losses::total_loss(&mean, &cfg.weights, setting)?;
        let val_mae = if val.is_empty() { mean.task } else { mae_on(&model, val)? };
        log::debug!("epoch {epoch}: total {:.5} val_mae {:.5}", mean.total, val_mae);
        history.push(EpochRecord {
            epoch,
            loss: mean,
            val_mae,
        });
        match stopper.observe(epoch, val_mae) {
            Verdict::Improved => best = model.params.clone(),
            Verdict::Continue => {}
            Verdict::Stop => break,
        }
    }
    model.params = best;
    Ok(TrainOutcome {
        bundle: model,
        history,
        best_epoch: stopper.best_epoch().unwrap_or(1),
        setting,
    })
}

fn train_split(archive: &FeatureArchive, t_common: usize) -> Result<(Vec<MultimodalSample>, Vec<MultimodalSample>)> {
    if archive.splits.train.is_empty() {
        return Err(Error::Data("train split is empty".into()));
    }
    if archive.splits.val.is_empty() {
        log::warn!("validation split is empty; early stopping falls back to the training task loss");
    }
    let train = resample_all(&archive.subset(&archive.splits.train), t_common)?;
    let val = resample_all(&archive.subset(&archive.splits.val), t_common)?;
    Ok((train, val))
}

/// Trains a teacher on complete inputs with the task loss only. The returned
/// teacher is frozen.
pub fn train_teacher(archive: &FeatureArchive, model: &ModelConfig, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    let t_common = common_length(archive);
    let (train, val) = train_split(archive, t_common)?;
    let train: Vec<Prepared> = train.iter().map(to_prepared).collect();
    let val = validation_set(&val, None, seed)?;
    let bundle = ModelBundle::new(Role::Teacher, *model, widths(archive), t_common, seed)?;
    let mut out = fit(bundle, train.len(), &val, cfg, seed, Setting::Complete, |m, batch, _, _| {
        let inv_b = 1.0 / batch.len() as f32;
        let parts = map_indexed(batch, |_, &i| teacher_sample(m, &train[i], inv_b))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(reduce_batch(m, parts))
    })?;
    out.bundle.freeze();
    Ok(out)
}

/// Trains a student on masked inputs under the guidance of a frozen teacher.
pub fn train_student(
    archive: &FeatureArchive,
    teacher: &ModelBundle,
    model: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let t_common = common_length(archive);
    let bundle = ModelBundle::new(Role::Student, *model, widths(archive), t_common, seed)?;
    if !bundle.same_architecture(teacher) {
        return Err(Error::Config(format!(
            "teacher architecture {:?} (widths {:?}, T {}) does not match student {:?} (widths {:?}, T {})",
            teacher.config, teacher.widths, teacher.t_common, bundle.config, bundle.widths, bundle.t_common
        )));
    }
    let (train, val) = train_split(archive, t_common)?;
    let originals: Vec<Prepared> = train.iter().map(to_prepared).collect();
    let needs_teacher = cfg.switches.dis || cfg.switches.sim;
    let cache: Vec<TeacherFeatures> = if needs_teacher {
        map_indexed(&originals, |_, p| teacher_features(teacher, p))
            .into_iter()
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let val = validation_set(&val, Some(&cfg.policy), seed)?;
    let policy = cfg.policy;
    fit(bundle, train.len(), &val, cfg, seed, Setting::Incomplete, |m, batch, epoch, bi| {
        let picked: Vec<MultimodalSample> = batch.iter().map(|&i| train[i].clone()).collect();
        let mut rng = stream(seed, &[streams::TRAIN_MASK, epoch as u64, bi as u64]);
        let (masked, masks) = mask_batch(&picked, &policy, &mut rng)?;
        let mut missing = [0usize; 3];
        for sm in &masks {
            for (k, mk) in sm.iter().enumerate() {
                missing[k] += mk.missing_count();
            }
        }
        let step = StudentStep {
            cfg,
            norms: rec_normalizers(missing, m.widths),
            inv_b: 1.0 / batch.len() as f32,
        };
        let jobs: Vec<(usize, Prepared)> = batch.iter().zip(&masked).map(|(&i, s)| (i, to_prepared(s))).collect();
        let parts = map_indexed(&jobs, |k, (i, xm)| {
            student_sample(m, &step, xm, &originals[*i], &masks[k], cache.get(*i))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(reduce_batch(m, parts))
    })
}

/// Predictions for raw archive samples, optionally masked first with masks
/// drawn from `seed`.
pub fn predict(
    model: &ModelBundle,
    samples: &[MultimodalSample],
    mask: Option<(&MissingPolicy, u64)>,
) -> Result<Vec<f32>> {
    let resampled = resample_all(samples, model.t_common)?;
    let inputs: Vec<MultimodalSample> = match mask {
        None => resampled,
        Some((policy, seed)) => mask_batch(&resampled, policy, &mut seeded(seed))?.0,
    };
    let prepared: Vec<Prepared> = inputs.iter().map(to_prepared).collect();
    map_indexed(&prepared, |_, p| predict_prepared(model, p))
        .into_iter()
        .collect()
}
