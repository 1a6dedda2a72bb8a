//! Random time masks and the masking function producing incomplete sequences.
//!
//! Polarity: a [`TimeMask`] stores `missing[t]`; the availability mask used by
//! the reconstruction loss is its complement, `available[t] = 1 - missing[t]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ModalitySequence, MultimodalSample, MODALITIES};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimeMask {
    missing: Vec<bool>,
}

impl TimeMask {
    /// Mask with no missing steps.
    pub fn none(t: usize) -> Self {
        TimeMask {
            missing: vec![false; t],
        }
    }

    pub fn from_missing(missing: Vec<bool>) -> Self {
        TimeMask { missing }
    }

    pub fn len(&self) -> usize {
        self.missing.len()
    }

    pub fn is_empty(&self) -> bool {
        self.missing.is_empty()
    }

    pub fn missing(&self) -> &[bool] {
        &self.missing
    }

    pub fn is_missing(&self, t: usize) -> bool {
        self.missing[t]
    }

    pub fn missing_count(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }

    /// Fraction of missing steps, exactly `count / T`.
    pub fn realized_rate(&self) -> f64 {
        self.missing_count() as f64 / self.missing.len() as f64
    }

    /// `1.0` where the step is available, `0.0` where it is missing.
    pub fn availability(&self) -> Vec<f32> {
        self.missing.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect()
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Parameter(format!("missing rate {rate} outside [0, 1]")));
    }
    Ok(())
}

/// Marks exactly `round(rate * T)` steps missing, chosen uniformly without
/// replacement.
pub fn sample_mask(t: usize, rate: f64, rng: &mut impl Rng) -> Result<TimeMask> {
    check_rate(rate)?;
    if t == 0 {
        return Err(Error::Parameter("mask length must be positive".into()));
    }
    let k = ((rate * t as f64).round() as usize).min(t);
    let mut missing = vec![false; t];
    for i in rand::seq::index::sample(rng, t, k) {
        missing[i] = true;
    }
    Ok(TimeMask { missing })
}

/// Zero-fills rows at missing steps; other rows are copied bit for bit.
pub fn apply_mask(x: &ModalitySequence, mask: &TimeMask) -> Result<ModalitySequence> {
    if mask.len() != x.time_steps() {
        return Err(Error::Shape(format!(
            "mask of length {} for sequence of {} steps",
            mask.len(),
            x.time_steps()
        )));
    }
    let f = x.width();
    let mut out = x.clone();
    let data = out.features.data_mut();
    for (t, &m) in mask.missing().iter().enumerate() {
        if m {
            data[t * f..(t + 1) * f].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    if mask.missing_count() > 0 {
        out.complete = false;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RateMode {
    FixedRate { rate: f64 },
    UniformRange { lo: f64, hi: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissingPolicy {
    #[serde(flatten)]
    pub mode: RateMode,
    /// Draw separate masks per modality; otherwise modalities of equal length
    /// share mask positions.
    #[serde(default = "default_true")]
    pub independent: bool,
    #[serde(default)]
    pub stream: u64,
}

fn default_true() -> bool {
    true
}

impl MissingPolicy {
    pub fn fixed(rate: f64) -> Self {
        MissingPolicy {
            mode: RateMode::FixedRate { rate },
            independent: true,
            stream: 0,
        }
    }

    pub fn uniform(lo: f64, hi: f64) -> Self {
        MissingPolicy {
            mode: RateMode::UniformRange { lo, hi },
            independent: true,
            stream: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            RateMode::FixedRate { rate } => check_rate(rate),
            RateMode::UniformRange { lo, hi } => {
                check_rate(lo)?;
                check_rate(hi)?;
                if lo > hi {
                    return Err(Error::Parameter(format!("rate_lo {lo} > rate_hi {hi}")));
                }
                Ok(())
            }
        }
    }

    fn draw_rate(&self, rng: &mut impl Rng) -> f64 {
        match self.mode {
            RateMode::FixedRate { rate } => rate,
            RateMode::UniformRange { lo, hi } if lo == hi => lo,
            RateMode::UniformRange { lo, hi } => rng.random_range(lo..=hi),
        }
    }
}

/// Masks for the three modalities of one sample, indexed like [`MODALITIES`].
pub type SampleMasks = [TimeMask; 3];

/// Masks one sample using its own seed stream.
pub fn mask_sample(
    sample: &MultimodalSample,
    policy: &MissingPolicy,
    seed: u64,
) -> Result<(MultimodalSample, SampleMasks)> {
    let mut rng = seeded(seed);
    let rate = policy.draw_rate(&mut rng);
    let shared = rng.random::<u64>();
    let masks: Vec<TimeMask> = MODALITIES
        .iter()
        .map(|&m| {
            let t = sample.seq(m).time_steps();
            if policy.independent {
                sample_mask(t, rate, &mut rng)
            } else {
                sample_mask(t, rate, &mut seeded(shared))
            }
        })
        .collect::<Result<_>>()?;
    let masks: SampleMasks = masks.try_into().expect("three modalities");
    let seqs = MODALITIES.map(|m| apply_mask(sample.seq(m), &masks[m.index()]));
    let [a, t, v] = seqs;
    Ok((
        MultimodalSample {
            seqs: [a?, t?, v?],
            label: sample.label,
        },
        masks,
    ))
}

/// Masks a batch; each sample draws from a stream derived from one value of
/// `rng`, so the result does not depend on evaluation order.
pub fn mask_batch(
    samples: &[MultimodalSample],
    policy: &MissingPolicy,
    rng: &mut impl Rng,
) -> Result<(Vec<MultimodalSample>, Vec<SampleMasks>)> {
    policy.validate()?;
    let base = rng.random::<u64>();
    let pairs: Vec<(MultimodalSample, SampleMasks)> = crate::exec::map_indexed(samples, |i, s| {
        mask_sample(s, policy, derive_seed(base, &[policy.stream, i as u64]))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    Ok(pairs.into_iter().unzip())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::Tensor;
    use crate::data::Modality;

    fn seq(t: usize, f: usize) -> ModalitySequence {
        ModalitySequence::new(
            Modality::A,
            Tensor::from_fn(&[t, f], |i| i as f32 * 0.25 + 1.0),
        )
        .unwrap()
    }

    #[test]
    fn edge_rates() {
        let mut rng = seeded(1);
        let m = sample_mask(10, 0.0, &mut rng).unwrap();
        assert_eq!(m.missing_count(), 0);
        assert_eq!(m.realized_rate(), 0.0);
        let m = sample_mask(5, 1.0, &mut rng).unwrap();
        assert_eq!(m.missing_count(), 5);
        assert!(matches!(sample_mask(5, 1.2, &mut rng), Err(Error::Parameter(_))));
        assert!(matches!(sample_mask(5, -0.1, &mut rng), Err(Error::Parameter(_))));
    }

    #[test]
    fn availability_is_complement() {
        let m = TimeMask::from_missing(vec![true, false, true]);
        assert_eq!(m.availability(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn empty_mask_is_identity() {
        let x = seq(4, 3);
        let y = apply_mask(&x, &TimeMask::none(4)).unwrap();
        assert!(y.complete);
        assert!(y.features.bit_eq(&x.features));
    }

    #[test]
    fn single_missing_row() {
        let x = seq(4, 3);
        let y = apply_mask(&x, &TimeMask::from_missing(vec![false, false, true, false])).unwrap();
        assert!(!y.complete);
        assert!(y.row(2).iter().all(|&v| v == 0.0));
        for t in [0, 1, 3] {
            assert_eq!(
                y.row(t).iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                x.row(t).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn length_mismatch_is_shape_error() {
        assert!(matches!(
            apply_mask(&seq(4, 2), &TimeMask::none(3)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn invalid_policies() {
        assert!(MissingPolicy::uniform(0.5, 0.1).validate().is_err());
        assert!(MissingPolicy::fixed(1.5).validate().is_err());
        assert!(MissingPolicy::uniform(0.1, 0.5).validate().is_ok());
    }

    #[test]
    fn shared_masks_when_not_independent() {
        let mk = |m| ModalitySequence::new(m, Tensor::full(&[10, 2], 1.0f32)).unwrap();
        let s = MultimodalSample {
            seqs: [mk(Modality::A), mk(Modality::T), mk(Modality::V)],
            label: 0.0,
        };
        let mut p = MissingPolicy::fixed(0.5);
        p.independent = false;
        let (_, masks) = mask_sample(&s, &p, 9).unwrap();
        assert_eq!(masks[0], masks[1]);
        assert_eq!(masks[1], masks[2]);
    }
}
