mod common;

use mitr_core::data::{generate_synthetic, load_archive, save_archive, FeatureArchive, Modality, SynthSpec, MODALITIES};
use mitr_core::Error;
use proptest::prelude::*;

/// Solves `(A + lambda I) w = b` by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut w = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * w[k]).sum();
        w[r] = (b[r] - s) / a[r][r];
    }
    w
}

/// Train-split MAE of ridge regression on one modality's time-averaged features.
fn oracle_mae(archive: &FeatureArchive, m: Modality) -> f64 {
    let train = archive.subset(&archive.splits.train);
    let rows: Vec<Vec<f64>> = train
        .iter()
        .map(|s| {
            let seq = s.seq(m);
            let (t, f) = (seq.time_steps(), seq.width());
            let mut x: Vec<f64> = (0..f).map(|j| (0..t).map(|k| seq.row(k)[j] as f64).sum::<f64>() / t as f64).collect();
            x.push(1.0);
            x
        })
        .collect();
    let y: Vec<f64> = train.iter().map(|s| s.label as f64).collect();
    let n = rows[0].len();
    let mut a = vec![vec![0.0; n]; n];
    let mut b = vec![0.0; n];
    for (x, &yy) in rows.iter().zip(&y) {
        for i in 0..n {
            b[i] += x[i] * yy;
            for j in 0..n {
                a[i][j] += x[i] * x[j];
            }
        }
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += 1e-6;
    }
    let w = solve(a, b);
    rows.iter()
        .zip(&y)
        .map(|(x, yy)| (x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() - yy).abs())
        .sum::<f64>()
        / y.len() as f64
}

#[test]
fn noiseless_labels_are_linearly_recoverable_from_any_modality() {
    let archive = generate_synthetic(&SynthSpec::new(120, 12, [5, 8, 6], 0.0, 3)).unwrap();
    for m in MODALITIES {
        assert!(oracle_mae(&archive, m) < 0.05, "{m}");
    }
}

#[test]
fn oracle_error_grows_with_noise() {
    for seed in 0..3 {
        let maes: Vec<f64> = [0.0f32, 0.5, 1.5]
            .iter()
            .map(|&noise| oracle_mae(&generate_synthetic(&SynthSpec::new(150, 12, [5, 8, 6], noise, seed)).unwrap(), Modality::T))
            .collect();
        assert!(maes[0] < maes[1] && maes[1] < maes[2], "seed {seed}: {maes:?}");
    }
}

#[test]
fn meta_matches_spec_and_seed_is_deterministic() {
    let spec = SynthSpec::new(30, 12, [5, 8, 6], 0.2, 1);
    let a = generate_synthetic(&spec).unwrap();
    let b = generate_synthetic(&spec).unwrap();
    assert_eq!(a.samples.len(), 30);
    assert_eq!(a.meta.dims.map(|d| (d.t, d.f)), [(12, 5), (12, 8), (12, 6)]);
    for (x, y) in a.samples.iter().zip(&b.samples) {
        assert_eq!(x.label.to_bits(), y.label.to_bits());
        for m in 0..3 {
            assert!(x.seqs[m].features.bit_eq(&y.seqs[m].features));
        }
    }
    assert!(matches!(generate_synthetic(&SynthSpec::new(2, 12, [5, 8, 6], 0.2, 1)), Err(Error::Spec(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn save_then_load_is_bitwise(seed in any::<u64>(), n in 3usize..20, t in 1usize..8, fa in 1usize..5, fv in 1usize..5) {
        let mut spec = SynthSpec::new(n, t, [fa, 3, fv], 0.3, seed);
        spec.t.t = t + 2;
        let a = generate_synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_archive(&a, dir.path()).unwrap();
        let b = load_archive(dir.path()).unwrap();
        prop_assert_eq!(&a.splits, &b.splits);
        prop_assert_eq!(a.samples.len(), b.samples.len());
        for (x, y) in a.samples.iter().zip(&b.samples) {
            prop_assert_eq!(x.label.to_bits(), y.label.to_bits());
            for m in 0..3 {
                prop_assert!(x.seqs[m].features.bit_eq(&y.seqs[m].features));
            }
        }
    }
}
