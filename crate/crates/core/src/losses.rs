//! Training objectives and their weighted composition.
//!
//! Every term is built on a [`Graph`] so it can be differentiated. Terms that
//! are averaged over a batch return the batch mean when the batch is stacked
//! in one graph; per-sample graphs scale each term by `1/B` and sum.

use serde::{Deserialize, Serialize};

use crate::data::LabelStyle;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Ctx, Mlp};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Smooth-L1 transition point.
pub const SMOOTH_L1_BETA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl LossWeights {
    pub const MOSI: LossWeights = LossWeights {
        lambda1: 0.01,
        lambda2: 0.1,
        lambda3: 0.1,
    };
    pub const SIMS: LossWeights = LossWeights {
        lambda1: 0.3,
        lambda2: 0.0,
        lambda3: 0.0,
    };

    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self> {
        let w = LossWeights {
            lambda1,
            lambda2,
            lambda3,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn for_style(style: LabelStyle) -> Self {
        match style {
            LabelStyle::Mosi => Self::MOSI,
            LabelStyle::Sims => Self::SIMS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be a finite nonnegative number, got {v}")));
            }
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::MOSI
    }
}

/// Which auxiliary term groups are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LossSwitches {
    pub dis: bool,
    pub rec: bool,
    pub sim: bool,
}

impl LossSwitches {
    pub const ALL: LossSwitches = LossSwitches {
        dis: true,
        rec: true,
        sim: true,
    };
    pub const NONE: LossSwitches = LossSwitches {
        dis: false,
        rec: false,
        sim: false,
    };

    /// All eight on/off combinations, from none to all.
    pub fn combos() -> [LossSwitches; 8] {
        std::array::from_fn(|i| LossSwitches {
            dis: i & 1 != 0,
            rec: i & 2 != 0,
            sim: i & 4 != 0,
        })
    }

    pub fn any(&self) -> bool {
        self.dis || self.rec || self.sim
    }

    /// `dis+rec+sim`, a subset of those, or `task`.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [(self.dis, "dis"), (self.rec, "rec"), (self.sim, "sim")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        if parts.is_empty() {
            "task".to_string()
        } else {
            parts.join("+")
        }
    }
}

impl Default for LossSwitches {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Complete,
    Incomplete,
}

impl Setting {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "complete" => Ok(Setting::Complete),
            "incomplete" => Ok(Setting::Incomplete),
            other => Err(Error::Config(format!("unknown setting {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Setting::Complete => "complete",
            Setting::Incomplete => "incomplete",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub dis_ts_mib: f64,
    pub dis_ts_tf: f64,
    pub dis_ss_tf: f64,
    pub rec_en: f64,
    pub rec_mib: f64,
    pub sim_en: f64,
    pub sim_mib: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const COLUMNS: [&'static str; 9] = [
        "task",
        "dis_ts_mib",
        "dis_ts_tf",
        "dis_ss_tf",
        "rec_en",
        "rec_mib",
        "sim_en",
        "sim_mib",
        "total",
    ];

    /// The weighted total of the components, in a fixed evaluation order.
    pub fn compose(&self, w: &LossWeights) -> f64 {
        self.task
            + w.lambda1 * (self.dis_ts_mib + self.dis_ts_tf + self.dis_ss_tf)
            + w.lambda2 * self.rec_en
            + self.rec_mib
            + self.sim_mib
            + w.lambda3 * self.sim_en
    }

    pub fn components(&self) -> [f64; 8] {
        [
            self.task,
            self.dis_ts_mib,
            self.dis_ts_tf,
            self.dis_ss_tf,
            self.rec_en,
            self.rec_mib,
            self.sim_en,
            self.sim_mib,
        ]
    }

    pub fn from_components(c: [f64; 8]) -> Self {
        LossBreakdown {
            task: c[0],
            dis_ts_mib: c[1],
            dis_ts_tf: c[2],
            dis_ss_tf: c[3],
            rec_en: c[4],
            rec_mib: c[5],
            sim_en: c[6],
            sim_mib: c[7],
            total: 0.0,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.components().iter().all(|v| v.is_finite()) && self.total.is_finite()
    }
}

/// Fills in `total` according to the setting. The complete setting keeps the
/// task term only.
pub fn total_loss(components: &LossBreakdown, weights: &LossWeights, setting: Setting) -> Result<LossBreakdown> {
    weights.validate()?;
    Ok(match setting {
        Setting::Complete => LossBreakdown {
            task: components.task,
            total: components.task,
            ..Default::default()
        },
        Setting::Incomplete => LossBreakdown {
            total: components.compose(weights),
            ..*components
        },
    })
}

/// Mean absolute error between predictions and labels.
pub fn task_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    g.l1_mean(pred, target)
}

/// Representations entering the distillation terms.
#[derive(Clone, Copy, Debug)]
pub struct Representations {
    /// Per-modality MIB-TRL outputs `[B, T, d]`, in `a, t, v` order.
    pub z: [Var; 3],
    /// Temporally pooled fused output `[B, d]`.
    pub pooled_y: Var,
}

fn sum_vars<T: Real>(g: &mut Graph<T>, vs: &[Var]) -> Result<Var> {
    let mut acc = vs[0];
    for &v in &vs[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(acc)
}

/// `(dis_ts_mib, dis_ts_tf, dis_ss_tf)`. Teacher values are wrapped in
/// stop-gradient.
pub fn distill_loss<T: Real>(
    g: &mut Graph<T>,
    teacher: &Representations,
    student: &Representations,
) -> Result<[Var; 3]> {
    let ty = g.stop_gradient(teacher.pooled_y);
    let mut mib = Vec::with_capacity(3);
    let mut ts = Vec::with_capacity(3);
    let mut ss = Vec::with_capacity(3);
    for m in 0..3 {
        let tz = g.stop_gradient(teacher.z[m]);
        mib.push(g.l2_mean(tz, student.z[m])?);
        let pz = g.mean_time(student.z[m])?;
        ts.push(g.l1_mean(ty, pz)?);
        ss.push(g.l2_mean(student.pooled_y, pz)?);
    }
    Ok([sum_vars(g, &mib)?, sum_vars(g, &ts)?, sum_vars(g, &ss)?])
}

/// Smooth-L1 over missing rows only, each selected element weighted by
/// `norm`. `missing` flags rows of the flattened `[B, T]` grid.
pub fn rec_term<T: Real>(g: &mut Graph<T>, decoded: Var, original: Var, missing: &[bool], norm: T) -> Result<Var> {
    let (b, t, f) = g.value(decoded).btd()?;
    if missing.len() != b * t {
        return Err(Error::Shape(format!(
            "reconstruction mask covers {} rows, tensor has {}",
            missing.len(),
            b * t
        )));
    }
    let mut weights = vec![T::zero(); b * t * f];
    for (row, &miss) in weights.chunks_exact_mut(f).zip(missing) {
        if miss {
            row.iter_mut().for_each(|w| *w = norm);
        }
    }
    g.smooth_l1_weighted(decoded, original, weights, T::lit(SMOOTH_L1_BETA))
}

/// Per-modality weights `1 / (selected elements)`, or 0 for an empty
/// selection, given missing-row counts over a batch.
pub fn rec_normalizers(missing_rows: [usize; 3], widths: [usize; 3]) -> [f64; 3] {
    std::array::from_fn(|m| {
        let n = missing_rows[m] * widths[m];
        if n == 0 {
            0.0
        } else {
            1.0 / n as f64
        }
    })
}

/// Inputs to the reconstruction terms, one entry per modality.
pub struct RecInputs<'a> {
    pub originals: [Var; 3],
    pub decoded_en: [Var; 3],
    pub decoded_mib: [Var; 3],
    pub missing: [&'a [bool]; 3],
    pub norms: [f64; 3],
}

/// `(rec_en, rec_mib)`, each summed over modalities.
pub fn rec_loss<T: Real>(g: &mut Graph<T>, r: &RecInputs<'_>) -> Result<(Var, Var)> {
    let mut en = Vec::with_capacity(3);
    let mut mib = Vec::with_capacity(3);
    for m in 0..3 {
        let norm = T::lit(r.norms[m]);
        en.push(rec_term(g, r.decoded_en[m], r.originals[m], r.missing[m], norm)?);
        mib.push(rec_term(g, r.decoded_mib[m], r.originals[m], r.missing[m], norm)?);
    }
    Ok((sum_vars(g, &en)?, sum_vars(g, &mib)?))
}

/// Projector `f` and bottleneck predictor `h` shared by every modality and
/// both feature levels.
#[derive(Clone, Debug)]
pub struct SimSiamHeads {
    pub projector: Mlp,
    pub predictor: Mlp,
    pub d: usize,
}

impl SimSiamHeads {
    pub fn new(prefix: &str, d: usize) -> Self {
        SimSiamHeads {
            projector: Mlp::new(&format!("{prefix}.f"), d, 2 * d, d),
            predictor: Mlp::new(&format!("{prefix}.h"), d, (d / 4).max(1), d),
            d,
        }
    }

    pub fn register<T: Real>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        self.projector.register(store, seed)?;
        self.predictor.register(store, seed)
    }
}

/// Row-wise negative cosine similarity.
pub fn simsiam_d<T: Real>(g: &mut Graph<T>, p1: Var, z2: Var) -> Result<Var> {
    g.neg_cosine(p1, z2)
}

/// Per-row `0.5 D(f(s), sg(h(t))) + 0.5 D(f(t), sg(h(s)))` for pooled
/// features `[B, d]`.
pub fn simsiam_pair<T: Real>(
    cx: &mut Ctx<'_, T>,
    heads: &SimSiamHeads,
    student: Var,
    teacher: Var,
    stop_gradient: bool,
) -> Result<Var> {
    let fs = heads.projector.forward(cx, student)?;
    let ft = heads.projector.forward(cx, teacher)?;
    let mut ht = heads.predictor.forward(cx, teacher)?;
    let mut hs = heads.predictor.forward(cx, student)?;
    if stop_gradient {
        ht = cx.g.stop_gradient(ht);
        hs = cx.g.stop_gradient(hs);
    }
    let d1 = simsiam_d(&mut cx.g, fs, ht)?;
    let d2 = simsiam_d(&mut cx.g, ft, hs)?;
    let s = cx.g.add(d1, d2)?;
    Ok(cx.g.scale(s, T::lit(0.5)))
}

/// Batch mean of [`simsiam_pair`], summed over modalities.
pub fn simsiam_loss<T: Real>(
    cx: &mut Ctx<'_, T>,
    heads: &SimSiamHeads,
    student: &[Var; 3],
    teacher: &[Var; 3],
    stop_gradient: bool,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(3);
    for m in 0..3 {
        let rows = simsiam_pair(cx, heads, student[m], teacher[m], stop_gradient)?;
        terms.push(cx.g.mean_all(rows));
    }
    sum_vars(&mut cx.g, &terms)
}

/// Graph vars of one batch's terms, each already scaled to its contribution.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub task: Var,
    pub dis: Option<[Var; 3]>,
    pub rec: Option<(Var, Var)>,
    /// `(sim_en, sim_mib)`.
    pub sim: Option<(Var, Var)>,
}

impl LossTerms {
    /// The weighted objective as a graph scalar, composed in the same order
    /// as [`LossBreakdown::compose`].
    pub fn objective<T: Real>(&self, g: &mut Graph<T>, w: &LossWeights) -> Result<Var> {
        let mut total = self.task;
        if let Some([a, b, c]) = self.dis {
            let s = g.add(a, b)?;
            let s = g.add(s, c)?;
            let s = g.scale(s, T::lit(w.lambda1));
            total = g.add(total, s)?;
        }
        if let Some((en, mib)) = self.rec {
            let s = g.scale(en, T::lit(w.lambda2));
            total = g.add(total, s)?;
            total = g.add(total, mib)?;
        }
        if let Some((en, mib)) = self.sim {
            total = g.add(total, mib)?;
            let s = g.scale(en, T::lit(w.lambda3));
            total = g.add(total, s)?;
        }
        Ok(total)
    }

    /// Component values; inactive groups read as zero and `total` is unset.
    pub fn values<T: Real>(&self, g: &Graph<T>) -> LossBreakdown {
        let v = |x: Var| g.scalar(x).as_f64();
        let mut b = LossBreakdown {
            task: v(self.task),
            ..Default::default()
        };
        if let Some([x, y, z]) = self.dis {
            b.dis_ts_mib = v(x);
            b.dis_ts_tf = v(y);
            b.dis_ss_tf = v(z);
        }
        if let Some((en, mib)) = self.rec {
            b.rec_en = v(en);
            b.rec_mib = v(mib);
        }
        if let Some((en, mib)) = self.sim {
            b.sim_en = v(en);
            b.sim_mib = v(mib);
        }
        b
    }
}

/// Scalar constant helper for labels and similar targets.
pub fn constant_vector<T: Real>(g: &mut Graph<T>, values: &[f64]) -> Var {
    g.constant(Tensor::from_fn(&[values.len()], |i| T::lit(values[i])))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(g: &mut Graph<f64>, shape: &[usize], vals: &[f64]) -> Var {
        g.input(Tensor::new(shape.to_vec(), vals.to_vec()).unwrap())
    }

    #[test]
    fn task_loss_hand_value() {
        let mut g = Graph::new();
        let p = t1(&mut g, &[2], &[1.0, -1.0]);
        let y = constant_vector(&mut g, &[0.0, 0.0]);
        let l = task_loss(&mut g, p, y).unwrap();
        assert_eq!(g.scalar(l), 1.0);
    }

    #[test]
    fn distill_single_element_oracle() {
        let mut g = Graph::new();
        // One modality carries the example values; the other two agree exactly.
        let mk = |g: &mut Graph<f64>, v: f64| g.input(Tensor::full(&[1, 1, 1], v));
        let tz = [mk(&mut g, 1.0), mk(&mut g, 0.0), mk(&mut g, 0.0)];
        let sz = [mk(&mut g, 0.0), mk(&mut g, 0.0), mk(&mut g, 0.0)];
        let ty = g.input(Tensor::full(&[1, 1], 2.0));
        let sy = g.input(Tensor::full(&[1, 1], 0.5));
        let teacher = Representations { z: tz, pooled_y: ty };
        let student = Representations { z: sz, pooled_y: sy };
        let [a, b, c] = distill_loss(&mut g, &teacher, &student).unwrap();
        assert_eq!(g.scalar(a), 1.0);
        // Modalities t and v still see |2 - 0| and |0.5 - 0|^2.
        assert_eq!(g.scalar(b), 6.0);
        assert_eq!(g.scalar(c), 0.75);
        let total = g.add(a, b).unwrap();
        let total = g.add(total, c).unwrap();
        let grads = g.backward(total);
        for v in tz.iter().chain([&ty]) {
            assert!(grads.get(*v).is_none_or(|d| d.iter().all(|&x| x == 0.0)));
        }
    }

    #[test]
    fn rec_quadratic_zone_and_empty_selection() {
        let mut g = Graph::new();
        let dec = t1(&mut g, &[1, 2, 1], &[0.5, 9.0]);
        let orig = g.constant(Tensor::zeros(&[1, 2, 1]));
        let l = rec_term(&mut g, dec, orig, &[true, false], 1.0).unwrap();
        assert_eq!(g.scalar(l), 0.125);
        let l = rec_term(&mut g, dec, orig, &[false, false], 0.0).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        assert_eq!(rec_normalizers([0, 2, 1], [3, 4, 5]), [0.0, 0.125, 0.2]);
    }

    #[test]
    fn negative_cosine_cases() {
        let mut g = Graph::new();
        let p = t1(&mut g, &[2], &[0.3, -1.2]);
        let n = t1(&mut g, &[2], &[-0.3, 1.2]);
        let a = t1(&mut g, &[2], &[1.0, 0.0]);
        let b = t1(&mut g, &[2], &[0.0, 1.0]);
        let same = simsiam_d(&mut g, p, p).unwrap();
        let opp = simsiam_d(&mut g, p, n).unwrap();
        let orth = simsiam_d(&mut g, a, b).unwrap();
        assert!((g.scalar(same) + 1.0).abs() < 1e-12);
        assert!((g.scalar(opp) - 1.0).abs() < 1e-12);
        assert_eq!(g.scalar(orth), 0.0);
    }

    #[test]
    fn weights_and_settings() {
        assert!(matches!(LossWeights::new(0.1, -0.1, 0.0), Err(Error::Parameter(_))));
        let c = LossBreakdown {
            task: 0.5,
            rec_mib: 0.25,
            sim_mib: -0.5,
            rec_en: 3.0,
            ..Default::default()
        };
        let out = total_loss(&c, &LossWeights::SIMS, Setting::Incomplete).unwrap();
        assert_eq!(out.total, 0.5 + 0.25 - 0.5);
        let out = total_loss(&c, &LossWeights::SIMS, Setting::Complete).unwrap();
        assert_eq!(out.total, 0.5);
        assert_eq!(out.rec_mib, 0.0);
        let zero = LossBreakdown {
            task: 1.5,
            ..Default::default()
        };
        assert_eq!(zero.compose(&LossWeights::MOSI), 1.5);
    }

    #[test]
    fn combos_are_distinct() {
        let c = LossSwitches::combos();
        let set: std::collections::HashSet<_> = c.iter().collect();
        assert_eq!(set.len(), 8);
        assert_eq!(c[0].label(), "task");
        assert_eq!(c[7].label(), "dis+rec+sim");
    }
}
