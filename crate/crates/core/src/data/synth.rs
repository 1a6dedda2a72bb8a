use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    ArchiveMeta, FeatureArchive, LabelRange, Modality, ModalityDims, ModalitySequence,
    MultimodalSample, Splits, MODALITIES,
};
use crate::error::{Error, Result};
use crate::rng::{stream, streams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthModality {
    #[serde(rename = "T")]
    pub t: usize,
    pub f: usize,
    #[serde(default)]
    pub noise: f32,
}

/// Parameters of a synthetic archive.
///
/// Each sample draws a latent sentiment `s ~ U(label_range)`. Every modality
/// sees `s` through a fixed random affine map, broadcast over time, plus
/// sinusoidal distractors with zero temporal mean and Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    pub seed: u64,
    pub label_range: LabelRange,
    #[serde(default = "default_distractor")]
    pub distractor: f32,
    pub a: SynthModality,
    pub t: SynthModality,
    pub v: SynthModality,
}

fn default_distractor() -> f32 {
    1.0
}

impl SynthSpec {
    pub fn new(n: usize, t: usize, widths: [usize; 3], noise: f32, seed: u64) -> Self {
        let m = |f| SynthModality { t, f, noise };
        SynthSpec {
            n,
            seed,
            label_range: LabelRange::MOSI,
            distractor: default_distractor(),
            a: m(widths[0]),
            t: m(widths[1]),
            v: m(widths[2]),
        }
    }

    pub fn modality(&self, m: Modality) -> &SynthModality {
        match m {
            Modality::A => &self.a,
            Modality::T => &self.t,
            Modality::V => &self.v,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 3 {
            return Err(Error::Spec(format!("need at least 3 samples (one per split), got {}", self.n)));
        }
        if !(self.label_range.lo < self.label_range.hi) {
            return Err(Error::Spec(format!("empty label range {:?}", self.label_range)));
        }
        if !(self.distractor >= 0.0) {
            return Err(Error::Spec("distractor scale must be >= 0".into()));
        }
        for m in MODALITIES {
            let s = self.modality(m);
            if s.t == 0 || s.f == 0 {
                return Err(Error::Spec(format!("modality {m}: T and f must be >= 1")));
            }
            if !(s.noise >= 0.0) {
                return Err(Error::Spec(format!("modality {m}: noise must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Distractor frequencies in cycles per sequence.
const DISTRACTOR_FREQS: [usize; 2] = [1, 2];

struct Embedding {
    direction: Vec<f32>,
    offset: Vec<f32>,
    distractors: Vec<Vec<f32>>,
}

fn unit_vector(rng: &mut impl Rng, f: usize) -> Vec<f32> {
    let v: Vec<f32> = (0..f).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-6);
    v.into_iter().map(|x| x / n).collect()
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<FeatureArchive> {
    spec.validate()?;
    let embeddings: Vec<Embedding> = MODALITIES
        .iter()
        .map(|&m| {
            let f = spec.modality(m).f;
            let mut rng = stream(spec.seed, &[streams::SYNTH, 0, m.index() as u64]);
            // Scale chosen so the signal term has per-feature magnitude ~1.
            let direction = unit_vector(&mut rng, f)
                .into_iter()
                .map(|x| x * (f as f32).sqrt())
                .collect();
            let offset = (0..f).map(|_| rng.random_range(-0.5..0.5)).collect();
            let distractors = DISTRACTOR_FREQS
                .iter()
                .map(|_| {
                    unit_vector(&mut rng, f)
                        .into_iter()
                        .map(|x| x * (f as f32).sqrt())
                        .collect()
                })
                .collect();
            Embedding {
                direction,
                offset,
                distractors,
            }
        })
        .collect();

    let span = spec.label_range.hi - spec.label_range.lo;
    // Signal enters features as s normalized to [-1, 1].
    let center = 0.5 * (spec.label_range.hi + spec.label_range.lo);
    let mut samples = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let mut rng = stream(spec.seed, &[streams::SYNTH, 1, i as u64]);
        let s: f32 = rng.random_range(spec.label_range.lo..spec.label_range.hi);
        let unit = (s - center) / (0.5 * span);
        let seqs = MODALITIES.map(|m| {
            let ms = spec.modality(m);
            let emb = &embeddings[m.index()];
            let noise = Normal::new(0.0f32, ms.noise).expect("noise validated");
            let comps: Vec<(f32, f32, usize)> = DISTRACTOR_FREQS
                .iter()
                .map(|&k| {
                    let amp = spec.distractor * rng.random_range(0.0f32..1.0);
                    let phase = rng.random_range(0.0f32..std::f32::consts::TAU);
                    (amp, phase, k)
                })
                .collect();
            let mut data = Vec::with_capacity(ms.t * ms.f);
            for t in 0..ms.t {
                for j in 0..ms.f {
                    let mut x = unit * emb.direction[j] + emb.offset[j];
                    for (c, &(amp, phase, k)) in comps.iter().enumerate() {
                        // Integer cycles over T give an exactly zero temporal
                        // mean; skip frequencies aliasing to DC.
                        if k % ms.t == 0 {
                            continue;
                        }
                        let angle = std::f32::consts::TAU * (k * t) as f32 / ms.t as f32 + phase;
                        x += amp * angle.sin() * emb.distractors[c][j];
                    }
                    if ms.noise > 0.0 {
                        x += noise.sample(&mut rng);
                    }
                    data.push(x);
                }
            }
            ModalitySequence::new(m, Tensor::new(vec![ms.t, ms.f], data).expect("dims"))
                .expect("validated dims")
        });
        samples.push(MultimodalSample { seqs, label: s });
    }

    let mut order: Vec<usize> = (0..spec.n).collect();
    order.shuffle(&mut stream(spec.seed, &[streams::SYNTH, 2]));
    let n_val = ((spec.n as f64 * 0.15).round() as usize).max(1);
    let n_test = ((spec.n as f64 * 0.15).round() as usize).max(1);
    let n_train = spec.n - n_val - n_test;
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..n_train + n_val].to_vec();
    let mut test = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();

    let meta = ArchiveMeta {
        dims: MODALITIES.map(|m| {
            let s = spec.modality(m);
            ModalityDims { t: s.t, f: s.f }
        }),
        label_range: spec.label_range,
        provenance: format!(
            "synthetic n={} seed={} noise=({},{},{}) distractor={}",
            spec.n, spec.seed, spec.a.noise, spec.t.noise, spec.v.noise, spec.distractor
        ),
    };
    let archive = FeatureArchive {
        samples,
        splits: Splits { train, val, test },
        meta,
    };
    archive.validate()?;
    Ok(archive)
}
