//! Central-difference verification of analytic gradients in 64-bit mode.
//!
//! Every registered unit builds a small random case: inputs, parameters and a
//! graph builder. The scalar under test is `sum(output * r)` for a fixed
//! random `r`. Stop-gradient nodes are replayed with their base-point values
//! during the difference evaluations, so stopped branches act as constants
//! on both sides of the comparison.

use std::sync::Arc;

use rand::Rng;

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::fusion::{Fusion, MeanConcatFusion, PairStream, PredictHead};
use crate::graph::{Graph, Var};
use crate::layers::{AttentionBlock, Ctx, LayerNorm, Linear, Mlp, TemporalConv};
use crate::losses::{distill_loss, rec_loss, simsiam_loss, task_loss, LossTerms, LossWeights, RecInputs, Representations};
use crate::mibtrl::{GenBlock, Mibtrl, MibtrlConfig};
use crate::params::ParamStore;
use crate::pipeline::{Architecture, FusionKind, ModelConfig};
use crate::rng::{derive_seed, seeded, streams, Rng as SeededRng};
use crate::tensor::Tensor;

pub const EPSILON: f64 = 1e-6;
pub const EPSILON_RANGE: (f64, f64) = (1e-7, 1e-3);
/// Acceptance bound on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;

type BuildFn = dyn Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var> + Send + Sync;

/// A differentiable unit at one random point.
pub struct CheckCase {
    pub inputs: Vec<Tensor<f64>>,
    pub params: ParamStore<f64>,
    pub build: Arc<BuildFn>,
}

impl CheckCase {
    pub fn new(
        inputs: Vec<Tensor<f64>>,
        params: ParamStore<f64>,
        build: impl Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        CheckCase {
            inputs,
            params,
            build: Arc::new(build),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnitKind {
    Operator,
    Composite,
}

type Builder = fn(u64) -> Result<CheckCase>;

/// Every checkable unit, operators first.
pub fn registry() -> Vec<(&'static str, UnitKind, Builder)> {
    use UnitKind::*;
    vec![
        ("gated_activation", Operator, op_gate as Builder),
        ("tanh", Operator, op_tanh),
        ("sigmoid", Operator, op_sigmoid),
        ("gelu", Operator, op_gelu),
        ("matmul", Operator, op_matmul),
        ("linear", Operator, op_linear),
        ("conv1x1", Operator, op_conv1x1),
        ("dilated_causal_conv_d1", Operator, |s| op_dconv(s, 1)),
        ("dilated_causal_conv_d2", Operator, |s| op_dconv(s, 2)),
        ("dilated_causal_conv_d4", Operator, |s| op_dconv(s, 4)),
        ("dilated_causal_conv_d8", Operator, |s| op_dconv(s, 8)),
        ("same_conv", Operator, op_same_conv),
        ("layer_norm", Operator, op_layer_norm),
        ("attention_block", Operator, op_self_attention),
        ("cross_attention", Operator, op_cross_attention),
        ("mlp", Operator, op_mlp),
        ("smooth_l1", Operator, op_smooth_l1),
        ("l1_distance", Operator, op_l1),
        ("l2_distance", Operator, op_l2),
        ("cosine_similarity", Operator, op_cosine),
        ("stop_gradient", Operator, op_stop_gradient),
        ("mean_time", Operator, op_mean_time),
        ("reverse_time", Operator, op_reverse),
        ("concat", Operator, op_concat),
        ("constant", Operator, op_constant),
        ("encoder", Composite, comp_encoder),
        ("gen_block", Composite, comp_gen_block),
        ("mibtrl", Composite, comp_mibtrl),
        ("pairwise_sa", Composite, comp_pairwise),
        ("fusion", Composite, comp_fusion),
        ("predict_head", Composite, comp_head),
        ("mean_concat_fusion", Composite, comp_mean_concat),
        ("losses", Composite, comp_losses),
    ]
}

pub fn unit_names() -> Vec<&'static str> {
    registry().into_iter().map(|(n, _, _)| n).collect()
}

pub fn build_case(name: &str, seed: u64) -> Result<CheckCase> {
    let (_, _, b) = registry()
        .into_iter()
        .find(|(n, _, _)| *n == name)
        .ok_or_else(|| Error::Lookup(format!("no gradient check registered as `{name}`")))?;
    b(seed)
}

/// Maximum relative error of a registered unit at a random point.
pub fn grad_check(name: &str, seed: u64, epsilon: f64) -> Result<f64> {
    check_epsilon(epsilon)?;
    let case = build_case(name, seed)?;
    Ok(check_case(name, &case, epsilon)?.max_rel_error)
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    let (lo, hi) = EPSILON_RANGE;
    if !(lo..=hi).contains(&epsilon) {
        return Err(Error::Parameter(format!("epsilon {epsilon} outside [{lo}, {hi}]")));
    }
    Ok(())
}

struct Evaluator<'a> {
    case: &'a CheckCase,
    projection: Tensor<f64>,
    stops: Vec<Tensor<f64>>,
}

impl Evaluator<'_> {
    fn value(&self, inputs: &[Tensor<f64>], params: &ParamStore<f64>) -> Result<f64> {
        let mut cx = Ctx::with_graph(params, Graph::with_stop_replay(self.stops.clone()));
        let vars: Vec<Var> = inputs.iter().map(|t| cx.g.input(t.clone())).collect();
        let out = (self.case.build)(&mut cx, &vars)?;
        let r = cx.g.constant(self.projection.clone());
        let p = cx.g.mul(out, r)?;
        let s = cx.g.sum_all(p);
        Ok(cx.g.scalar(s))
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Compares analytic and central-difference gradients over every input and
/// parameter coordinate.
pub fn check_case(name: &str, case: &CheckCase, epsilon: f64) -> Result<CheckReport> {
    check_epsilon(epsilon)?;
    let mut cx = Ctx::new(&case.params);
    let vars: Vec<Var> = case.inputs.iter().map(|t| cx.g.input(t.clone())).collect();
    let out = (case.build)(&mut cx, &vars)?;
    let mut rng = seeded(derive_seed(streams::GRADCHECK, &[cx.value(out).len() as u64]));
    let projection = Tensor::from_fn(cx.value(out).shape(), |_| rng.random_range(-1.0..1.0));
    let r = cx.g.constant(projection.clone());
    let p = cx.g.mul(out, r)?;
    let s = cx.g.sum_all(p);
    let grads = cx.g.backward(s);
    let eval = Evaluator {
        case,
        projection,
        stops: cx.g.stop_values(),
    };

    let mut worst = 0.0f64;
    let mut coords = 0usize;
    let mut inputs = case.inputs.clone();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(v, inputs[k].len());
        for (i, &a) in analytic.iter().enumerate() {
            let x0 = inputs[k].data()[i];
            inputs[k].data_mut()[i] = x0 + epsilon;
            let fp = eval.value(&inputs, &case.params)?;
            inputs[k].data_mut()[i] = x0 - epsilon;
            let fm = eval.value(&inputs, &case.params)?;
            inputs[k].data_mut()[i] = x0;
            worst = worst.max(rel_error(a, (fp - fm) / (2.0 * epsilon)));
            coords += 1;
        }
    }
    let mut params = case.params.clone();
    for pi in 0..params.len() {
        let (pname, p) = params.at(pi);
        if !p.trainable {
            continue;
        }
        let pname = pname.to_string();
        let n = p.value.len();
        let analytic = match cx.bind.var_at(pi) {
            Some(v) => grads.get_or_zeros(v, n),
            None => vec![0.0; n],
        };
        for (i, &a) in analytic.iter().enumerate() {
            let x0 = params.get(&pname).expect("present").value.data()[i];
            set_param(&mut params, &pname, i, x0 + epsilon);
            let fp = eval.value(&case.inputs, &params)?;
            set_param(&mut params, &pname, i, x0 - epsilon);
            let fm = eval.value(&case.inputs, &params)?;
            set_param(&mut params, &pname, i, x0);
            worst = worst.max(rel_error(a, (fp - fm) / (2.0 * epsilon)));
            coords += 1;
        }
    }
    Ok(CheckReport {
        name: name.to_string(),
        max_rel_error: worst,
        coordinates: coords,
    })
}

fn set_param(params: &mut ParamStore<f64>, name: &str, i: usize, v: f64) {
    params.get_mut(name).expect("present").value.data_mut()[i] = v;
}

/// Runs every registered unit at each seed and keeps the worst error per unit.
pub fn run_all(seeds: &[u64], epsilon: f64) -> Result<Vec<CheckReport>> {
    let reg = registry();
    let results = crate::exec::map_indexed(&reg, |_, (name, _, build)| -> Result<CheckReport> {
        let mut worst = CheckReport {
            name: name.to_string(),
            max_rel_error: 0.0,
            coordinates: 0,
        };
        for &seed in seeds {
            let r = check_case(name, &build(seed)?, epsilon)?;
            worst.max_rel_error = worst.max_rel_error.max(r.max_rel_error);
            worst.coordinates = r.coordinates;
        }
        Ok(worst)
    });
    results.into_iter().collect()
}

fn rng_for(seed: u64, unit: &str) -> SeededRng {
    seeded(derive_seed(seed, &[streams::GRADCHECK, crate::rng::name_hash(unit)]))
}

fn rand_tensor(rng: &mut SeededRng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Replaces every parameter value with a random one, so zero-initialized
/// projections and unit gains are exercised too.
fn randomize(store: &mut ParamStore<f64>, rng: &mut SeededRng, scale: f64) {
    for (_, p) in store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
    }
}

fn unary(seed: u64, unit: &str, f: fn(&mut Graph<f64>, Var) -> Var) -> Result<CheckCase> {
    let mut rng = rng_for(seed, unit);
    let x = rand_tensor(&mut rng, &[2, 3, 4], 2.0);
    Ok(CheckCase::new(vec![x], ParamStore::new(), move |cx, v| Ok(f(&mut cx.g, v[0]))))
}

fn op_gate(seed: u64) -> Result<CheckCase> {
    unary(seed, "gate", |g, x| g.gate(x))
}

fn op_tanh(seed: u64) -> Result<CheckCase> {
    unary(seed, "tanh", |g, x| g.tanh(x))
}

fn op_sigmoid(seed: u64) -> Result<CheckCase> {
    unary(seed, "sigmoid", |g, x| g.sigmoid(x))
}

fn op_gelu(seed: u64) -> Result<CheckCase> {
    unary(seed, "gelu", |g, x| g.gelu(x))
}

fn op_mean_time(seed: u64) -> Result<CheckCase> {
    unary(seed, "mean_time", |g, x| g.mean_time(x).expect("rank 3"))
}

fn op_reverse(seed: u64) -> Result<CheckCase> {
    unary(seed, "reverse", |g, x| g.reverse_time(x).expect("rank 3"))
}

fn op_matmul(seed: u64) -> Result<CheckCase> {
    let mut rng = rng_for(seed, "matmul");
    let x = rand_tensor(&mut rng, &[2, 3, 4], 1.0);
    let w = rand_tensor(&mut rng, &[4, 5], 1.0);
    Ok(CheckCase::new(vec![x, w], ParamStore::new(), |cx, v| cx.g.matmul(v[0], v[1])))
}

/// Layer with randomized parameters applied to one random input.
fn layer_case<L: Send + Sync + 'static>(
    seed: u64,
    unit: &str,
    layer: L,
    shape: &[usize],
    register: fn(&L, &mut ParamStore<f64>) -> Result<()>,
    forward: fn(&L, &mut Ctx<'_, f64>, Var) -> Result<Var>,
) -> Result<CheckCase> {
    let mut rng = rng_for(seed, unit);
    let mut params = ParamStore::new();
    register(&layer, &mut params)?;
    randomize(&mut params, &mut rng, 0.8);
    let x = rand_tensor(&mut rng, shape, 1.0);
    Ok(CheckCase::new(vec![x], params, move |cx, v| forward(&layer, cx, v[0])))
}

fn op_linear(seed: u64) -> Result<CheckCase> {
    layer_case(
        seed,
        "linear",
        Linear::new("l", 4, 3),
        &[2, 3, 4],
        |l, s| l.register(s, 1),
        |l, cx, x| l.forward(cx, x),
    )
}

fn op_conv1x1(seed: u64) -> Result<CheckCase> {
    layer_case(
        seed,
        "conv1x1",
        TemporalConv::with_offsets("c", 4, 4, vec![0]),
        &[2, 5, 4],
        |l, s| l.register(s, 1),
        |l, cx, x| l.forward(cx, x),
    )
}

fn op_dconv(seed: u64, dilation: usize) -> Result<CheckCase> {
    layer_case(
        seed,
        &format!("dconv{dilation}"),
        TemporalConv::causal("c", 3, 2, dilation)?,
        &[2, 10, 3],
        |l, s| l.register(s, 1),
        |l, cx, x| l.forward(cx, x),
    )
}

fn op_same_conv(seed: u64) -> Result<CheckCase> {
    layer_case(
        seed,
        "same_conv",
        TemporalConv::same("c", 3, 3)?,
        &[2, 6, 3],
        |l, s| l.register(s, 1),
        |l, cx, x| l.forward(cx, x),
    )
}

fn op_layer_norm(seed: u64) -> Result<CheckCase> {
    layer_case(
        seed,
        "layer_norm",
        LayerNorm::new("ln", 5),
        &[2, 3, 5],
        |l, s| l.register(s, 1),
        |l, cx, x| l.forward(cx, x),
    )
}

fn op_self_attention(seed: u64) -> Result<CheckCase> {
    layer_case(
        seed,
        "attention",
        AttentionBlock::new("att", 4, 2),
        &[2, 3, 4],
        |l, s| l.register(s, 1),
        |l, cx, x| l.forward(cx, x, x),
    )
}

fn op_cross_attention(seed: u64) -> Result<CheckCase> {
    let mut rng = rng_for(seed, "cross_attention");
    let att = AttentionBlock::new("att", 4, 2);
    let mut params = ParamStore::new();
    att.register(&mut params, 1)?;
    randomize(&mut params, &mut rng, 0.8);
    let q = rand_tensor(&mut rng, &[2, 3, 4], 1.0);
    let kv = rand_tensor(&mut rng, &[2, 5, 4], 1.0);
    Ok(CheckCase::new(vec![q, kv], params, move |cx, v| att.forward(cx, v[0], v[1])))
}

fn op_mlp(seed: u64) -> Result<CheckCase> {
    layer_case(
        seed,
        "mlp",
        Mlp::new("mlp", 4, 6, 3),
        &[2, 3, 4],
        |l, s| l.register(s, 1),
        |l, cx, x| l.forward(cx, x),
    )
}

fn op_smooth_l1(seed: u64) -> Result<CheckCase> {
    let mut rng = rng_for(seed, "smooth_l1");
    let a = rand_tensor(&mut rng, &[2, 3, 4], 2.0);
    let b = rand_tensor(&mut rng, &[2, 3, 4], 2.0);
    let weights: Vec<f64> = (0..24).map(|_| rng.random_range(0.0..1.0)).collect();
    Ok(CheckCase::new(vec![a, b], ParamStore::new(), move |cx, v| {
        cx.g.smooth_l1_weighted(v[0], v[1], weights.clone(), 1.0)
    }))
}

fn binary(seed: u64, unit: &str, f: fn(&mut Graph<f64>, Var, Var) -> Result<Var>) -> Result<CheckCase> {
    let mut rng = rng_for(seed, unit);
    let a = rand_tensor(&mut rng, &[2, 3, 4], 1.0);
    let b = rand_tensor(&mut rng, &[2, 3, 4], 1.0);
    Ok(CheckCase::new(vec![a, b], ParamStore::new(), move |cx, v| f(&mut cx.g, v[0], v[1])))
}

fn op_l1(seed: u64) -> Result<CheckCase> {
    binary(seed, "l1", |g, a, b| g.l1_mean(a, b))
}

fn op_l2(seed: u64) -> Result<CheckCase> {
    binary(seed, "l2", |g, a, b| g.l2_mean(a, b))
}

fn op_cosine(seed: u64) -> Result<CheckCase> {
    binary(seed, "cosine", |g, a, b| g.neg_cosine(a, b))
}

fn op_concat(seed: u64) -> Result<CheckCase> {
    let mut rng = rng_for(seed, "concat");
    let a = rand_tensor(&mut rng, &[2, 3], 1.0);
    let b = rand_tensor(&mut rng, &[2, 4], 1.0);
    Ok(CheckCase::new(vec![a, b], ParamStore::new(), |cx, v| cx.g.concat(&[v[0], v[1]])))
}

fn op_stop_gradient(seed: u64) -> Result<CheckCase> {
    binary(seed, "stop_gradient", |g, a, b| {
        let s = g.stop_gradient(a);
        let p = g.mul(s, b)?;
        let t = g.tanh(a);
        g.add(p, t)
    })
}

fn op_constant(seed: u64) -> Result<CheckCase> {
    let mut rng = rng_for(seed, "constant");
    let x = rand_tensor(&mut rng, &[2, 3], 1.0);
    let c = rand_tensor(&mut rng, &[2, 3], 1.0);
    Ok(CheckCase::new(vec![x], ParamStore::new(), move |cx, v| {
        let z = cx.g.sub(v[0], v[0])?;
        let k = cx.g.constant(c.clone());
        cx.g.add(z, k)
    }))
}

fn comp_encoder(seed: u64) -> Result<CheckCase> {
    layer_case(
        seed,
        "encoder",
        Encoder::new("enc", 3, 8, 2, true)?,
        &[2, 4, 3],
        |l, s| l.register(s, 1),
        |l, cx, x| l.forward(cx, x),
    )
}

fn comp_gen_block(seed: u64) -> Result<CheckCase> {
    layer_case(
        seed,
        "gen_block",
        GenBlock::new("g", 4, 2, 2)?,
        &[2, 6, 4],
        |l, s| l.register(s, 1),
        |l, cx, x| Ok(l.forward(cx, x)?.0),
    )
}

fn comp_mibtrl(seed: u64) -> Result<CheckCase> {
    let cfg = MibtrlConfig {
        d: 4,
        n_blocks: 3,
        kernel_size: 2,
        entry_kernel: 3,
    };
    layer_case(
        seed,
        "mibtrl",
        Mibtrl::new("m", cfg)?,
        &[2, 6, 4],
        |l, s| l.register(s, 1),
        |l, cx, x| Ok(l.forward(cx, x)?.z),
    )
}

fn comp_pairwise(seed: u64) -> Result<CheckCase> {
    let mut rng = rng_for(seed, "pairwise_sa");
    let pair = PairStream::new("p", 8, 2);
    let mut params = ParamStore::new();
    pair.register(&mut params, 1)?;
    randomize(&mut params, &mut rng, 0.5);
    let a = rand_tensor(&mut rng, &[2, 4, 8], 1.0);
    let b = rand_tensor(&mut rng, &[2, 4, 8], 1.0);
    Ok(CheckCase::new(vec![a, b], params, move |cx, v| Ok(pair.forward(cx, v[0], v[1])?.1)))
}

fn comp_fusion(seed: u64) -> Result<CheckCase> {
    let mut rng = rng_for(seed, "fusion");
    let tf = Fusion::new("tf", 8, 2);
    let mut params = ParamStore::new();
    tf.register(&mut params, 1)?;
    randomize(&mut params, &mut rng, 0.5);
    let inputs = (0..3).map(|_| rand_tensor(&mut rng, &[2, 4, 8], 1.0)).collect();
    Ok(CheckCase::new(inputs, params, move |cx, v| Ok(tf.forward(cx, v[1], v[0], v[2])?.y)))
}

fn comp_head(seed: u64) -> Result<CheckCase> {
    layer_case(
        seed,
        "predict_head",
        PredictHead::new("head", 4),
        &[2, 5, 4],
        |l, s| l.register(s, 1),
        |l, cx, x| l.forward(cx, x),
    )
}

fn comp_mean_concat(seed: u64) -> Result<CheckCase> {
    let mut rng = rng_for(seed, "mean_concat");
    let nf = MeanConcatFusion::new("nf", 4);
    let mut params = ParamStore::new();
    nf.register(&mut params, 1)?;
    randomize(&mut params, &mut rng, 0.8);
    let inputs = (0..3).map(|_| rand_tensor(&mut rng, &[2, 3, 4], 1.0)).collect();
    Ok(CheckCase::new(inputs, params, move |cx, v| Ok(nf.forward(cx, v[1], v[0], v[2])?.1)))
}

/// The full student objective of a tiny model on a stacked batch of two.
fn comp_losses(seed: u64) -> Result<CheckCase> {
    let mut rng = rng_for(seed, "losses");
    let (b, t, d) = (2usize, 4usize, 4usize);
    let widths = [2usize, 3, 2];
    let cfg = ModelConfig {
        d,
        heads: 2,
        n_blocks: 2,
        fusion: FusionKind::Transformer,
        ..Default::default()
    };
    let arch = Architecture::new(&cfg, widths)?;
    let mut params = ParamStore::new();
    arch.register(&mut params, 1)?;
    randomize(&mut params, &mut rng, 0.5);
    let mut inputs: Vec<Tensor<f64>> = widths.iter().map(|&f| rand_tensor(&mut rng, &[b, t, f], 1.0)).collect();
    let missing: Vec<Vec<bool>> = (0..3).map(|_| (0..b * t).map(|_| rng.random_bool(0.4)).collect()).collect();
    // Masked inputs are the originals with missing rows zeroed.
    let originals: Vec<Tensor<f64>> = inputs.clone();
    for (m, x) in inputs.iter_mut().enumerate() {
        let f = widths[m];
        for (row, &miss) in x.data_mut().chunks_exact_mut(f).zip(&missing[m]) {
            if miss {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    let teacher_z: Vec<Tensor<f64>> = (0..3).map(|_| rand_tensor(&mut rng, &[b, t, d], 1.0)).collect();
    let teacher_e_pool: Vec<Tensor<f64>> = (0..3).map(|_| rand_tensor(&mut rng, &[b, d], 1.0)).collect();
    let teacher_z_pool: Vec<Tensor<f64>> = (0..3).map(|_| rand_tensor(&mut rng, &[b, d], 1.0)).collect();
    let teacher_y = rand_tensor(&mut rng, &[b, d], 1.0);
    let labels = rand_tensor(&mut rng, &[b], 2.0);
    let norms: [f64; 3] = std::array::from_fn(|m| {
        let n = missing[m].iter().filter(|&&x| x).count() * widths[m];
        if n == 0 {
            0.0
        } else {
            1.0 / n as f64
        }
    });
    Ok(CheckCase::new(inputs, params, move |cx, v| {
        let out = arch.forward(cx, [v[0], v[1], v[2]])?;
        let y = cx.g.constant(labels.clone());
        let task = task_loss(&mut cx.g, out.pred, y)?;
        let c3 = |cx: &mut Ctx<'_, f64>, ts: &[Tensor<f64>]| -> [Var; 3] {
            [
                cx.g.constant(ts[0].clone()),
                cx.g.constant(ts[1].clone()),
                cx.g.constant(ts[2].clone()),
            ]
        };
        let tz = c3(cx, &teacher_z);
        let ty = cx.g.constant(teacher_y.clone());
        let dis = distill_loss(
            &mut cx.g,
            &Representations { z: tz, pooled_y: ty },
            &Representations {
                z: out.z,
                pooled_y: out.pooled_y,
            },
        )?;
        let orig = c3(cx, &originals);
        let mut dec_en = [task; 3];
        let mut dec_mib = [task; 3];
        for m in 0..3 {
            dec_en[m] = arch.dec_en[m].forward(cx, out.e[m])?;
            dec_mib[m] = arch.dec_mib[m].forward(cx, out.z[m])?;
        }
        let rec = rec_loss(
            &mut cx.g,
            &RecInputs {
                originals: orig,
                decoded_en: dec_en,
                decoded_mib: dec_mib,
                missing: [&missing[0], &missing[1], &missing[2]],
                norms,
            },
        )?;
        let mut se = [task; 3];
        let mut sz = [task; 3];
        for m in 0..3 {
            se[m] = cx.g.mean_time(out.e[m])?;
            sz[m] = cx.g.mean_time(out.z[m])?;
        }
        let te = c3(cx, &teacher_e_pool);
        let tzp = c3(cx, &teacher_z_pool);
        let sim_en = simsiam_loss(cx, &arch.simsiam, &se, &te, true)?;
        let sim_mib = simsiam_loss(cx, &arch.simsiam, &sz, &tzp, true)?;
        let terms = LossTerms {
            task,
            dis: Some(dis),
            rec: Some(rec),
            sim: Some((sim_en, sim_mib)),
        };
        terms.objective(&mut cx.g, &LossWeights::MOSI)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_name_and_bad_epsilon() {
        assert!(matches!(grad_check("nope", 0, EPSILON), Err(Error::Lookup(_))));
        assert!(matches!(grad_check("tanh", 0, 1e-2), Err(Error::Parameter(_))));
    }

    #[test]
    fn names_are_unique() {
        let names = unit_names();
        let set: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
    }

    #[test]
    fn gate_and_conv_are_tight() {
        assert!(grad_check("gated_activation", 3, EPSILON).unwrap() < 1e-6);
        assert!(grad_check("dilated_causal_conv_d2", 3, EPSILON).unwrap() < 1e-5);
        assert!(grad_check("constant", 3, EPSILON).unwrap() < 1e-9);
    }
}
