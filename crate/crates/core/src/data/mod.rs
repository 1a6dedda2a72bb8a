//! Multimodal samples, synthetic archives and the on-disk feature format.

mod archive;
mod synth;

pub use archive::{load_archive, save_archive, ARCHIVE_VERSION, MANIFEST_FILE};
pub use synth::{generate_synthetic, SynthSpec};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    A,
    T,
    V,
}

/// Storage order used everywhere: audio, text, vision.
pub const MODALITIES: [Modality; 3] = [Modality::A, Modality::T, Modality::V];

impl Modality {
    pub fn index(self) -> usize {
        match self {
            Modality::A => 0,
            Modality::T => 1,
            Modality::V => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::A => "a",
            Modality::T => "t",
            Modality::V => "v",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "a" => Some(Modality::A),
            "t" => Some(Modality::T),
            "v" => Some(Modality::V),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One modality's `[T, f]` feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalitySequence {
    pub modality: Modality,
    pub features: Tensor<f32>,
    /// `false` only for sequences produced by masking with at least one
    /// missing step.
    pub complete: bool,
}

impl ModalitySequence {
    pub fn new(modality: Modality, features: Tensor<f32>) -> Result<Self> {
        match features.shape() {
            [t, f] if *t >= 1 && *f >= 1 => Ok(ModalitySequence {
                modality,
                features,
                complete: true,
            }),
            s => Err(Error::Shape(format!(
                "modality {modality} needs a [T>=1, f>=1] matrix, got {s:?}"
            ))),
        }
    }

    pub fn time_steps(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn row(&self, t: usize) -> &[f32] {
        let f = self.width();
        &self.features.data()[t * f..(t + 1) * f]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSample {
    /// Indexed by [`Modality::index`].
    pub seqs: [ModalitySequence; 3],
    pub label: f32,
}

impl MultimodalSample {
    pub fn seq(&self, m: Modality) -> &ModalitySequence {
        &self.seqs[m.index()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityDims {
    #[serde(rename = "T")]
    pub t: usize,
    pub f: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRange {
    pub lo: f32,
    pub hi: f32,
}

impl LabelRange {
    pub const MOSI: LabelRange = LabelRange { lo: -3.0, hi: 3.0 };
    pub const SIMS: LabelRange = LabelRange { lo: -1.0, hi: 1.0 };

    pub fn contains(&self, y: f32) -> bool {
        y >= self.lo && y <= self.hi
    }

    pub fn style(&self) -> LabelStyle {
        if self.hi - self.lo > 2.5 {
            LabelStyle::Mosi
        } else {
            LabelStyle::Sims
        }
    }
}

/// Dataset-style conventions for discretized metrics and sweep grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelStyle {
    Mosi,
    Sims,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (name, idx) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for &i in idx {
                if i >= n {
                    return Err(Error::format(
                        format!("splits.{name}"),
                        format!("index {i} out of range for {n} samples"),
                    ));
                }
                if seen[i] {
                    return Err(Error::format(
                        format!("splits.{name}"),
                        format!("index {i} appears in more than one split"),
                    ));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveMeta {
    /// Indexed by [`Modality::index`].
    pub dims: [ModalityDims; 3],
    pub label_range: LabelRange,
    pub provenance: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureArchive {
    pub samples: Vec<MultimodalSample>,
    pub splits: Splits,
    pub meta: ArchiveMeta,
}

impl FeatureArchive {
    pub fn validate(&self) -> Result<()> {
        self.splits.validate(self.samples.len())?;
        for (i, s) in self.samples.iter().enumerate() {
            for m in MODALITIES {
                let seq = s.seq(m);
                let dims = self.meta.dims[m.index()];
                if seq.modality != m || seq.time_steps() != dims.t || seq.width() != dims.f {
                    return Err(Error::format(
                        format!("samples[{i}].{m}"),
                        format!(
                            "expected [{}, {}], got {:?}",
                            dims.t,
                            dims.f,
                            seq.features.shape()
                        ),
                    ));
                }
            }
            if !self.meta.label_range.contains(s.label) {
                return Err(Error::format(
                    format!("labels[{i}]"),
                    format!("{} outside {:?}", s.label, self.meta.label_range),
                ));
            }
        }
        Ok(())
    }

    /// Non-fatal issues worth reporting after a load.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        for (name, idx) in [
            ("train", &self.splits.train),
            ("val", &self.splits.val),
            ("test", &self.splits.test),
        ] {
            if idx.is_empty() {
                w.push(format!("{name} split is empty"));
            }
        }
        w
    }

    pub fn subset(&self, idx: &[usize]) -> Vec<MultimodalSample> {
        idx.iter().map(|&i| self.samples[i].clone()).collect()
    }

    pub fn style(&self) -> LabelStyle {
        self.meta.label_range.style()
    }
}

/// Linear resampling of a `[T, f]` matrix to `[new_t, f]` along time.
pub fn resample_time(x: &Tensor<f32>, new_t: usize) -> Tensor<f32> {
    let (t, f) = (x.shape()[0], x.shape()[1]);
    if t == new_t {
        return x.clone();
    }
    let mut out = vec![0.0f32; new_t * f];
    for i in 0..new_t {
        let pos = if new_t == 1 {
            0.0
        } else {
            i as f64 * (t - 1) as f64 / (new_t - 1) as f64
        };
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(t - 1);
        let frac = (pos - lo as f64) as f32;
        for j in 0..f {
            let a = x.data()[lo * f + j];
            let b = x.data()[hi * f + j];
            out[i * f + j] = a + (b - a) * frac;
        }
    }
    Tensor::new(vec![new_t, f], out).expect("shape consistent")
}
