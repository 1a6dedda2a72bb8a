//! Metrics, missing-rate sweeps and AUILC.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{FeatureArchive, LabelStyle};
use crate::error::{Error, Result};
use crate::exec::map_indexed;
use crate::masking::MissingPolicy;
use crate::pipeline::{predict, ModelBundle};
use crate::rng::{derive_seed, streams};

/// Three-class boundary for SIMS-style labels.
pub const ACC3_THRESHOLD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub corr: f64,
    /// `false` when either side has zero variance; `corr` is then 0.
    pub corr_defined: bool,
    /// Negative vs non-negative.
    pub acc2_nonneg: f64,
    /// Negative vs positive, zero labels excluded.
    pub acc2_posneg: f64,
    pub f1_nonneg: f64,
    pub f1_posneg: f64,
    /// Acc-5 for MOSI-style labels, Acc-3 for SIMS-style.
    pub acck: f64,
}

pub const METRIC_COLUMNS: [&str; 7] = ["mae", "corr", "acc2a", "acc2b", "f1a", "f1b", "acck"];

impl MetricReport {
    /// Values in [`METRIC_COLUMNS`] order.
    pub fn values(&self) -> [f64; 7] {
        [
            self.mae,
            self.corr,
            self.acc2_nonneg,
            self.acc2_posneg,
            self.f1_nonneg,
            self.f1_posneg,
            self.acck,
        ]
    }

    /// Elementwise mean of several reports; `corr_defined` holds if it holds
    /// for all of them.
    pub fn mean(reports: &[MetricReport]) -> MetricReport {
        let n = reports.len() as f64;
        let mut acc = [0.0f64; 7];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        let v = acc.map(|x| x / n);
        MetricReport {
            mae: v[0],
            corr: v[1],
            corr_defined: reports.iter().all(|r| r.corr_defined),
            acc2_nonneg: v[2],
            acc2_posneg: v[3],
            f1_nonneg: v[4],
            f1_posneg: v[5],
            acck: v[6],
        }
    }
}

pub fn acck_name(style: LabelStyle) -> &'static str {
    match style {
        LabelStyle::Mosi => "acc5",
        LabelStyle::Sims => "acc3",
    }
}

/// Pearson correlation, or `None` when either input has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&ranks(x), &ranks(y))
}

fn accuracy(truth: &[usize], pred: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    truth.iter().zip(pred).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

/// Support-weighted F1 over the classes present in `truth`.
fn weighted_f1(truth: &[usize], pred: &[usize], classes: usize) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for c in 0..classes {
        let support = truth.iter().filter(|&&t| t == c).count();
        if support == 0 {
            continue;
        }
        let tp = truth.iter().zip(pred).filter(|(&t, &p)| t == c && p == c).count() as f64;
        let fp = truth.iter().zip(pred).filter(|(&t, &p)| t != c && p == c).count() as f64;
        let fn_ = support as f64 - tp;
        let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
        total += f1 * support as f64;
    }
    total / truth.len() as f64
}

fn class5(v: f64) -> usize {
    (v.clamp(-2.0, 2.0).round_ties_even() + 2.0) as usize
}

fn class3(v: f64) -> usize {
    if v <= -ACC3_THRESHOLD {
        0
    } else if v <= ACC3_THRESHOLD {
        1
    } else {
        2
    }
}

pub fn regression_metrics(pred: &[f64], truth: &[f64], style: LabelStyle) -> Result<MetricReport> {
    if pred.len() != truth.len() {
        return Err(Error::Parameter(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::Parameter("metrics need at least two samples".into()));
    }
    let n = pred.len() as f64;
    let mae = pred.iter().zip(truth).map(|(p, y)| (p - y).abs()).sum::<f64>() / n;
    let corr = pearson(pred, truth);

    let t_nn: Vec<usize> = truth.iter().map(|&y| (y >= 0.0) as usize).collect();
    let p_nn: Vec<usize> = pred.iter().map(|&p| (p >= 0.0) as usize).collect();
    let (t_pn, p_pn): (Vec<usize>, Vec<usize>) = truth
        .iter()
        .zip(pred)
        .filter(|(&y, _)| y != 0.0)
        .map(|(&y, &p)| ((y > 0.0) as usize, (p > 0.0) as usize))
        .unzip();
    let acck = match style {
        LabelStyle::Mosi => {
            let t: Vec<usize> = truth.iter().map(|&v| class5(v)).collect();
            let p: Vec<usize> = pred.iter().map(|&v| class5(v)).collect();
            accuracy(&t, &p)
        }
        LabelStyle::Sims => {
            let t: Vec<usize> = truth.iter().map(|&v| class3(v)).collect();
            let p: Vec<usize> = pred.iter().map(|&v| class3(v)).collect();
            accuracy(&t, &p)
        }
    };
    Ok(MetricReport {
        mae,
        corr: corr.unwrap_or(0.0),
        corr_defined: corr.is_some(),
        acc2_nonneg: accuracy(&t_nn, &p_nn),
        acc2_posneg: accuracy(&t_pn, &p_pn),
        f1_nonneg: weighted_f1(&t_nn, &p_nn, 2),
        f1_posneg: weighted_f1(&t_pn, &p_pn, 2),
        acck,
    })
}

/// Trapezoidal area under `(rate, value)` points with strictly increasing
/// rates.
pub fn auilc(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::Parameter(format!("AUILC needs at least 2 points, got {}", points.len())));
    }
    let base = points[0].1;
    let mut area = 0.0;
    for w in points.windows(2) {
        let ((r0, v0), (r1, v1)) = (w[0], w[1]);
        if !(r1 > r0) {
            return Err(Error::Parameter(format!("rates must increase strictly ({r0} then {r1})")));
        }
        area += ((v0 - base) + (v1 - base)) / 2.0 * (r1 - r0);
    }
    let span = points[points.len() - 1].0 - points[0].0;
    Ok(base * span + area)
}

/// Evaluation grid of a label style: `0.1..=1.0` or `0.1..=0.5` in steps of
/// 0.1.
pub fn default_rates(style: LabelStyle) -> Vec<f64> {
    let n = match style {
        LabelStyle::Mosi => 10,
        LabelStyle::Sims => 5,
    };
    (1..=n).map(|i| i as f64 / 10.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub rate: f64,
    /// Mean over seeds.
    pub metrics: MetricReport,
    /// One report per seed, in seed order.
    pub per_seed: Vec<MetricReport>,
}

/// AUILC of every metric column.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricAuilc {
    pub mae: f64,
    pub corr: f64,
    pub acc2a: f64,
    pub acc2b: f64,
    pub f1a: f64,
    pub f1b: f64,
    pub acck: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub style: LabelStyle,
    pub seeds: Vec<u64>,
    pub points: Vec<SweepPoint>,
    /// Present when the grid has at least two rates.
    pub auilc: Option<MetricAuilc>,
}

impl SweepResult {
    pub fn rates(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.rate).collect()
    }

    /// `(rate, metric column k)` pairs of the seed means.
    pub fn curve(&self, column: usize) -> Vec<(f64, f64)> {
        self.points.iter().map(|p| (p.rate, p.metrics.values()[column])).collect()
    }

    /// AUILC of one column for a single seed (by position in `seeds`).
    pub fn seed_auilc(&self, seed_pos: usize, column: usize) -> Result<f64> {
        let pts: Vec<(f64, f64)> = self
            .points
            .iter()
            .map(|p| (p.rate, p.per_seed[seed_pos].values()[column]))
            .collect();
        auilc(&pts)
    }
}

fn validate_rates(rates: &[f64]) -> Result<()> {
    if rates.is_empty() {
        return Err(Error::Parameter("empty rate grid".into()));
    }
    for &r in rates {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::Parameter(format!("missing rate {r} outside [0, 1]")));
        }
    }
    if rates.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Parameter("rates must increase strictly".into()));
    }
    Ok(())
}

/// Mask seed of one sweep point. It depends on the seed and the rate only, so
/// any grid containing a rate reproduces that point.
pub fn sweep_mask_seed(seed: u64, rate: f64) -> u64 {
    derive_seed(seed, &[streams::SWEEP_MASK, rate.to_bits()])
}

pub fn missing_rate_sweep(
    model: &ModelBundle,
    archive: &FeatureArchive,
    rates: &[f64],
    seeds: &[u64],
) -> Result<SweepResult> {
    validate_rates(rates)?;
    if seeds.is_empty() {
        return Err(Error::Parameter("a sweep needs at least one seed".into()));
    }
    if archive.splits.test.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    let test = archive.subset(&archive.splits.test);
    let truth: Vec<f64> = test.iter().map(|s| s.label as f64).collect();
    let style = archive.style();
    let jobs: Vec<(f64, u64)> = rates
        .iter()
        .flat_map(|&r| seeds.iter().map(move |&s| (r, s)))
        .collect();
    let reports = map_indexed(&jobs, |_, &(rate, seed)| -> Result<MetricReport> {
        let policy = MissingPolicy::fixed(rate);
        let preds = predict(model, &test, Some((&policy, sweep_mask_seed(seed, rate))))?;
        let preds: Vec<f64> = preds.into_iter().map(f64::from).collect();
        regression_metrics(&preds, &truth, style)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let points: Vec<SweepPoint> = rates
        .iter()
        .zip(reports.chunks(seeds.len()))
        .map(|(&rate, per_seed)| SweepPoint {
            rate,
            metrics: MetricReport::mean(per_seed),
            per_seed: per_seed.to_vec(),
        })
        .collect();
    let mut result = SweepResult {
        style,
        seeds: seeds.to_vec(),
        points,
        auilc: None,
    };
    if rates.len() >= 2 {
        let a = |k: usize| auilc(&result.curve(k));
        result.auilc = Some(MetricAuilc {
            mae: a(0)?,
            corr: a(1)?,
            acc2a: a(2)?,
            acc2b: a(3)?,
            f1a: a(4)?,
            f1b: a(5)?,
            acck: a(6)?,
        });
    }
    Ok(result)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Seed-mean curve: `rate,mae,corr,acc2a,acc2b,f1a,f1b,acck`.
pub fn sweep_csv(result: &SweepResult) -> String {
    let mut s = String::from("rate,");
    s.push_str(&METRIC_COLUMNS.join(","));
    s.push('\n');
    for p in &result.points {
        push_row(&mut s, &[p.rate], &p.metrics.values());
    }
    s
}

/// Per-seed curves for plotting: `seed,rate,` followed by the metric columns.
pub fn sweep_per_seed_csv(result: &SweepResult) -> String {
    let mut s = String::from("seed,rate,");
    s.push_str(&METRIC_COLUMNS.join(","));
    s.push('\n');
    for (k, seed) in result.seeds.iter().enumerate() {
        for p in &result.points {
            let _ = write!(s, "{seed},");
            push_row(&mut s, &[p.rate], &p.per_seed[k].values());
        }
    }
    s
}

fn push_row(s: &mut String, lead: &[f64], values: &[f64]) {
    let cells: Vec<String> = lead.iter().chain(values).map(|v| format!("{v}")).collect();
    s.push_str(&cells.join(","));
    s.push('\n');
}

pub fn write_sweep_csv(result: &SweepResult, path: &Path) -> Result<()> {
    write_text(path, &sweep_csv(result))
}

pub fn write_sweep_summary(result: &SweepResult, path: &Path) -> Result<()> {
    let summary = serde_json::json!({
        "style": result.style,
        "acck": acck_name(result.style),
        "seeds": result.seeds,
        "rates": result.rates(),
        "auilc": result.auilc,
    });
    write_text(path, &serde_json::to_string_pretty(&summary).expect("summary serializes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let y = [-1.7, -0.2, 0.0, 0.4, 2.6, 1.1];
        let r = regression_metrics(&y, &y, LabelStyle::Mosi).unwrap();
        assert_eq!(r.mae, 0.0);
        assert!((r.corr - 1.0).abs() < 1e-12);
        for v in [r.acc2_nonneg, r.acc2_posneg, r.f1_nonneg, r.f1_posneg, r.acck] {
            assert_eq!(v, 1.0);
        }
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        let sym = [-1.0, 1.0, -2.0, 2.0];
        let sym_neg: Vec<f64> = sym.iter().map(|v| -v).collect();
        assert!((regression_metrics(&sym_neg, &sym, LabelStyle::Mosi).unwrap().corr + 1.0).abs() < 1e-12);
        assert!(regression_metrics(&neg, &y, LabelStyle::Mosi).unwrap().corr < 0.0);
    }

    #[test]
    fn hand_counted_bins() {
        // truth:      -2.4  -0.6   0.0   0.3   1.4   2.2
        // pred:       -1.6   0.2  -0.1   0.6   0.4   3.0
        // nonneg t:     0     0     1     1     1     1
        // nonneg p:     0     1     0     1     1     1   -> 4/6
        // posneg (zero label dropped): t 0 0 1 1 1, p 0 1 1 1 1 -> 4/5
        // acc5 t: -2 -1 0 0 1 2 ; p: -2 0 0 1 0 2 -> 3/6
        let t = [-2.4, -0.6, 0.0, 0.3, 1.4, 2.2];
        let p = [-1.6, 0.2, -0.1, 0.6, 0.4, 3.0];
        let r = regression_metrics(&p, &t, LabelStyle::Mosi).unwrap();
        assert!((r.acc2_nonneg - 4.0 / 6.0).abs() < 1e-12);
        assert!((r.acc2_posneg - 4.0 / 5.0).abs() < 1e-12);
        assert!((r.acck - 3.0 / 6.0).abs() < 1e-12);
        // Class 0: tp 1, fp 1... nonneg: class0 support 2 (tp1, fp1, fn1) f1 0.5;
        // class1 support 4 (tp3, fp1, fn1) f1 0.75 -> (2*0.5 + 4*0.75)/6.
        assert!((r.f1_nonneg - (1.0 + 3.0) / 6.0).abs() < 1e-12);
        // SIMS-style thresholds at +-0.1.
        let t3 = [-0.5, -0.1, 0.05, 0.1, 0.11, 0.9];
        let p3 = [-0.2, 0.0, 0.1, -0.3, 0.5, 0.05];
        let r = regression_metrics(&p3, &t3, LabelStyle::Sims).unwrap();
        // classes t: 0 0 1 1 2 2 ; p: 0 1 1 0 2 1 -> 3/6
        assert!((r.acck - 0.5).abs() < 1e-12);
    }

    #[test]
    fn constant_labels_flag_correlation() {
        let r = regression_metrics(&[0.1, 0.2, 0.3], &[1.0, 1.0, 1.0], LabelStyle::Mosi).unwrap();
        assert!(!r.corr_defined);
        assert_eq!(r.corr, 0.0);
        assert!(regression_metrics(&[0.1], &[1.0], LabelStyle::Mosi).is_err());
    }

    #[test]
    fn auilc_rectangle_and_errors() {
        let pts: Vec<(f64, f64)> = default_rates(LabelStyle::Sims).into_iter().map(|r| (r, 2.5)).collect();
        assert_eq!(auilc(&pts).unwrap(), 2.5 * (0.5 - 0.1));
        assert!(matches!(auilc(&[(0.1, 1.0)]), Err(Error::Parameter(_))));
        assert!(auilc(&[(0.2, 1.0), (0.1, 1.0)]).is_err());
        assert_eq!(default_rates(LabelStyle::Mosi).len(), 10);
        assert_eq!(default_rates(LabelStyle::Mosi)[9], 1.0);
    }

    #[test]
    fn spearman_of_monotone_data() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[0.1, 5.0, 9.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }
}
