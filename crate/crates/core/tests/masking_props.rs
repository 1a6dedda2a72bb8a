mod common;

use mitr_core::data::{Modality, ModalitySequence};
use mitr_core::masking::{apply_mask, sample_mask, mask_sample, MissingPolicy};
use mitr_core::rng::seeded;
use mitr_core::Tensor;
use proptest::prelude::*;

fn seq(t: usize, f: usize, seed: u64) -> ModalitySequence {
    let mut r = seeded(seed);
    ModalitySequence::new(Modality::V, common::random_tensor(&mut r, &[t, f], 2.0)).unwrap()
}

proptest! {
    #[test]
    fn realized_rate_is_within_half_a_step(t in 1usize..64, rate in 0.0f64..=1.0, seed in any::<u64>()) {
        let m = sample_mask(t, rate, &mut seeded(seed)).unwrap();
        prop_assert!((m.realized_rate() - rate).abs() <= 1.0 / (2.0 * t as f64) + 1e-12);
        prop_assert_eq!(m.len(), t);
    }

    #[test]
    fn availability_complements_missing(t in 1usize..40, rate in 0.0f64..=1.0, seed in any::<u64>()) {
        let m = sample_mask(t, rate, &mut seeded(seed)).unwrap();
        for (miss, avail) in m.missing().iter().zip(m.availability()) {
            prop_assert_eq!(*miss as u8 as f32 + avail, 1.0);
        }
    }

    #[test]
    fn apply_mask_keeps_available_rows_and_is_idempotent(
        t in 1usize..24, f in 1usize..6, rate in 0.0f64..=1.0, seed in any::<u64>()
    ) {
        let x = seq(t, f, seed);
        let m = sample_mask(t, rate, &mut seeded(seed ^ 1)).unwrap();
        let once = apply_mask(&x, &m).unwrap();
        let twice = apply_mask(&once, &m).unwrap();
        prop_assert!(once.features.bit_eq(&twice.features));
        for s in 0..t {
            let expect: Vec<u32> = if m.is_missing(s) { vec![0; f] } else { common::bits(x.row(s)) };
            prop_assert_eq!(common::bits(once.row(s)), expect);
        }
    }

    #[test]
    fn masking_a_sample_is_a_function_of_its_seed(seed in any::<u64>(), rate in 0.0f64..=1.0) {
        let s = mitr_core::data::MultimodalSample {
            seqs: [seq(5, 2, 1), seq(7, 3, 2), seq(6, 2, 3)],
            label: 0.5,
        };
        let s = fix_modalities(s);
        let p = MissingPolicy::fixed(rate);
        let (a, ma) = mask_sample(&s, &p, seed).unwrap();
        let (b, mb) = mask_sample(&s, &p, seed).unwrap();
        prop_assert_eq!(ma, mb);
        for m in 0..3 {
            prop_assert!(a.seqs[m].features.bit_eq(&b.seqs[m].features));
        }
    }
}

fn fix_modalities(mut s: mitr_core::data::MultimodalSample) -> mitr_core::data::MultimodalSample {
    for (q, m) in s.seqs.iter_mut().zip(mitr_core::data::MODALITIES) {
        q.modality = m;
    }
    s
}

#[test]
fn exact_count_over_a_thousand_draws() {
    let mut r = seeded(77);
    for i in 0..1000u64 {
        let t = 1 + (i as usize * 7) % 50;
        let rate = (i as f64 * 0.618_033_988_7).fract();
        let m = sample_mask(t, rate, &mut r).unwrap();
        assert!((m.realized_rate() - rate).abs() <= 1.0 / (2.0 * t as f64) + 1e-12);
    }
}

#[test]
fn positions_are_uniform() {
    let (t, rate, draws) = (10usize, 0.3, 10_000);
    let mut counts = vec![0usize; t];
    let mut r = seeded(5);
    for _ in 0..draws {
        let m = sample_mask(t, rate, &mut r).unwrap();
        for (c, &miss) in counts.iter_mut().zip(m.missing()) {
            *c += miss as usize;
        }
    }
    for c in counts {
        assert!((c as f64 / draws as f64 - rate).abs() <= 0.02);
    }
}

#[test]
fn zero_rate_mask_is_identity() {
    let x = seq(9, 4, 3);
    let m = sample_mask(9, 0.0, &mut seeded(1)).unwrap();
    let y = apply_mask(&x, &m).unwrap();
    assert!(y.features.bit_eq(&x.features));
    let full = sample_mask(9, 1.0, &mut seeded(1)).unwrap();
    assert!(apply_mask(&x, &full).unwrap().features.bit_eq(&Tensor::zeros(&[9, 4])));
}
