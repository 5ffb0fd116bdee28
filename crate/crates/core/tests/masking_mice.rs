mod common;

use common::equicorrelated;
use dualimpute::data::{apply_mask, compute_mask, read_csv, split, CsvOptions, DataMatrix, MaskMatrix, Normalizer, Provenance};
use dualimpute::masking::{generate_mask, mask_mar, mask_mcar, mask_mnar, mar_column_rates, CurriculumSchedule, MaskingSpec, Mechanism};
use dualimpute::mice::{mice_fit_impute_seeded, mice_transform, stall_stop, MiceConfig};
use dualimpute::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn schedule_phases_are_ordered_and_cover_every_epoch(total in 1usize..300, a in 0.01f64..0.98, b in 0.01f64..0.99) {
        let schedule = CurriculumSchedule::new([a, (1.0 - a) * b, (1.0 - a) * (1.0 - b)]).unwrap();
        let phases: Vec<Mechanism> = (0..total).map(|e| schedule.phase_for_epoch(e, total)).collect();
        prop_assert!(phases.windows(2).all(|w| w[0] <= w[1]));
        let (b1, b2) = schedule.boundaries(total);
        prop_assert!(b1 <= b2 && b2 <= total);
        prop_assert_eq!(phases.iter().filter(|&&p| p == Mechanism::Mcar).count(), b1);
        prop_assert_eq!(phases.iter().filter(|&&p| p == Mechanism::Mnar).count(), total - b2);
    }

    #[test]
    fn masks_only_ever_hide_more(seed in 0u64..500, mech in 0usize..3) {
        let x = equicorrelated(40, 5, 0.5, seed);
        let mut pre = MaskMatrix::all_observed(40, 5);
        let mut r = rng(seed);
        for k in 0..200 {
            if r.random::<f64>() < 0.1 {
                pre.set(k / 5, k % 5, false);
            }
        }
        // Anchors must stay observed for MAR.
        for i in 0..40 {
            pre.set(i, 0, true);
        }
        let xm = apply_mask(&x, &pre).unwrap();
        let mechanism = [Mechanism::Mcar, Mechanism::Mar, Mechanism::Mnar][mech];
        let spec = MaskingSpec { mechanism, compound: true, ..MaskingSpec::default() };
        let m = generate_mask(&xm, &spec, &mut r).unwrap();
        for k in 0..200 {
            let (i, j) = (k / 5, k % 5);
            if !pre.observed(i, j) {
                prop_assert!(!m.observed(i, j));
            }
        }
    }

    #[test]
    fn mar_rates_average_to_target(target in 0.05f64..0.3, seed in 0u64..100) {
        let x = equicorrelated(300, 6, 0.5, seed);
        let spec = MaskingSpec { mar_target_rate: target, mar_anchors: vec![1], ..MaskingSpec::default() };
        let rates = mar_column_rates(&x, &spec).unwrap();
        prop_assert_eq!(rates[1], 0.0);
        let others: Vec<f64> = rates.iter().enumerate().filter(|(j, _)| *j != 1).map(|(_, &r)| r).collect();
        let mean = others.iter().sum::<f64>() / others.len() as f64;
        prop_assert!(others.iter().all(|&r| (0.0..=1.0).contains(&r)));
        prop_assert!((mean - target).abs() < 1e-9, "mean {} vs {}", mean, target);
    }
}

#[test]
fn mcar_rate_falls_in_the_configured_range() {
    let x = equicorrelated(2000, 8, 0.3, 1);
    let spec = MaskingSpec::default();
    for seed in 0..10 {
        let m = mask_mcar(&x, &spec, &mut rng(seed)).unwrap();
        let rate = m.count_missing() as f64 / 16_000.0;
        assert!((0.09..=0.31).contains(&rate), "rate {rate}");
    }
}

#[test]
fn mnar_masks_large_values_more() {
    let x = equicorrelated(5000, 4, 0.0, 2);
    let spec = MaskingSpec {
        mnar_a: 2.0,
        mnar_b: -1.5,
        ..MaskingSpec::default()
    };
    let m = mask_mnar(&x, &spec, &mut rng(3)).unwrap();
    let (mut pos, mut pos_n, mut neg, mut neg_n) = (0, 0, 0, 0);
    for i in 0..5000 {
        for j in 0..4 {
            let miss = !m.observed(i, j) as usize;
            if x.get(i, j) > 0.0 {
                pos += miss;
                pos_n += 1;
            } else {
                neg += miss;
                neg_n += 1;
            }
        }
    }
    assert!(pos as f64 / pos_n as f64 > 2.0 * neg as f64 / neg_n as f64);
}

#[test]
fn masking_rejects_existing_gaps_unless_compound() {
    let x = DataMatrix::from_rows(&[vec![1.0, f64::NAN], vec![2.0, 3.0]]).unwrap();
    let err = mask_mcar(&x, &MaskingSpec::default(), &mut rng(0)).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
    let spec = MaskingSpec {
        mar_anchors: vec![5],
        ..MaskingSpec::default()
    };
    let x = equicorrelated(10, 3, 0.5, 0);
    assert!(matches!(mask_mar(&x, &spec, &mut rng(0)), Err(Error::Config(_))));
    let bad = MaskingSpec {
        mcar_rate_low: 0.5,
        mcar_rate_high: 0.2,
        ..MaskingSpec::default()
    };
    assert!(matches!(mask_mcar(&x, &bad, &mut rng(0)), Err(Error::Config(_))));
}

#[test]
fn same_seed_same_mask() {
    let x = equicorrelated(100, 6, 0.5, 4);
    for mechanism in [Mechanism::Mcar, Mechanism::Mar, Mechanism::Mnar] {
        let spec = MaskingSpec::default().with_mechanism(mechanism);
        let a = generate_mask(&x, &spec, &mut rng(9)).unwrap();
        let b = generate_mask(&x, &spec, &mut rng(9)).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn csv_round_trip_with_missing_tokens_and_label() {
    let text = "a,b,y\n1.5,NA,1\n,2.0,0\n3,4,1\n";
    let opts = CsvOptions {
        label_column: Some("y".into()),
        ..CsvOptions::default()
    };
    let (x, y) = read_csv(text.as_bytes(), &opts).unwrap();
    assert_eq!(x.column_names(), ["a", "b"]);
    assert_eq!(y.unwrap().y, vec![1.0, 0.0, 1.0]);
    let m = compute_mask(&x);
    assert_eq!(m.bits(), [true, false, false, true, true, true]);
    assert_eq!(x.get(2, 1), 4.0);
}

#[test]
fn normalizer_round_trips_observed_cells() {
    let x = equicorrelated(50, 3, 0.5, 5);
    let x = x.with_values(x.values().iter().map(|v| 10.0 + 3.0 * v).collect()).unwrap();
    let m = compute_mask(&x);
    let norm = Normalizer::fit(&x, &m).unwrap();
    let z = norm.apply(&x).unwrap();
    for j in 0..3 {
        let col = z.column(j);
        assert!((col.iter().sum::<f64>() / 50.0).abs() < 1e-12);
    }
    let back = norm.invert(&z).unwrap();
    for (a, b) in back.values().iter().zip(x.values()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn split_partitions_every_row_once() {
    let x = equicorrelated(101, 2, 0.5, 6);
    let m = compute_mask(&x);
    let parts = split(&x, &m, None, [0.7, 0.0, 0.3], 1).unwrap();
    assert_eq!(parts[0].rows.len(), 70);
    let mut all: Vec<usize> = parts.iter().flat_map(|p| p.rows.clone()).collect();
    all.sort_unstable();
    assert_eq!(all, (0..101).collect::<Vec<_>>());
}

fn mcar_mask(n: usize, d: usize, rate: f64, seed: u64) -> MaskMatrix {
    let mut r = rng(seed);
    MaskMatrix::new(n, d, (0..n * d).map(|_| r.random::<f64>() >= rate).collect()).unwrap()
}

#[test]
fn mice_keeps_observed_cells_and_fills_every_gap() {
    let x = equicorrelated(200, 5, 0.6, 7);
    let m = mcar_mask(200, 5, 0.25, 8);
    let xm = apply_mask(&x, &m).unwrap();
    let (res, model) = mice_fit_impute_seeded(&xm, &m, &MiceConfig::default(), 1).unwrap();
    for k in 0..1000 {
        let v = res.values.values()[k];
        assert!(v.is_finite());
        if m.bits()[k] {
            assert_eq!(v, x.values()[k]);
            assert_eq!(res.provenance[k], Provenance::Observed);
        } else {
            assert_eq!(res.provenance[k], Provenance::Mice);
        }
    }
    assert_eq!(model.loss_trace.len(), model.iterations + 1);
}

#[test]
fn mice_fit_and_transform_agree() {
    let x = equicorrelated(150, 4, 0.6, 9);
    let m = mcar_mask(150, 4, 0.2, 10);
    let xm = apply_mask(&x, &m).unwrap();
    let (res, model) = mice_fit_impute_seeded(&xm, &m, &MiceConfig::default(), 2).unwrap();
    let again = mice_transform(&model, &xm, &m).unwrap();
    assert_eq!(res.values, again.values);
}

#[test]
fn mice_beats_mean_fill_on_correlated_data() {
    let x = equicorrelated(400, 6, 0.7, 11);
    let m = mcar_mask(400, 6, 0.2, 12);
    let xm = apply_mask(&x, &m).unwrap();
    let (res, _) = mice_fit_impute_seeded(&xm, &m, &MiceConfig::default(), 3).unwrap();
    let mean = dualimpute::harness::mean_impute(&xm, &m).unwrap();
    let rmse = |f: &DataMatrix| dualimpute::harness::rmse_masked(&x, f, &m).unwrap();
    assert!(rmse(&res.values) < 0.8 * rmse(&mean.values));
}

#[test]
fn mice_recovers_an_exact_linear_law() {
    let mut r = rng(13);
    let n = 300;
    let mut v = Vec::new();
    let mut bits = Vec::new();
    for _ in 0..n {
        let (a, b): (f64, f64) = (r.random::<f64>() * 4.0 - 2.0, r.random::<f64>() * 4.0 - 2.0);
        v.extend([a, b, 2.0 * a - 0.5 * b + 3.0]);
        bits.extend([true, true, r.random::<f64>() >= 0.3]);
    }
    let x = DataMatrix::new(n, 3, v).unwrap();
    let m = MaskMatrix::new(n, 3, bits).unwrap();
    let cfg = MiceConfig {
        ridge: 1e-10,
        ..MiceConfig::default()
    };
    let (res, _) = mice_fit_impute_seeded(&apply_mask(&x, &m).unwrap(), &m, &cfg, 4).unwrap();
    for i in 0..n {
        assert!((res.values.get(i, 2) - x.get(i, 2)).abs() < 1e-6);
    }
}

#[test]
fn mice_rejects_bad_input() {
    assert!(DataMatrix::from_rows(&[vec![f64::INFINITY, 1.0], vec![2.0, 3.0]]).is_err());
    let x = DataMatrix::from_rows(&[vec![1.0, 1.0], vec![2.0, 3.0]]).unwrap();
    assert!(mice_fit_impute_seeded(&x, &MaskMatrix::all_observed(3, 2), &MiceConfig::default(), 0).is_err());
    let model = mice_fit_impute_seeded(&equicorrelated(20, 3, 0.5, 0), &MaskMatrix::all_observed(20, 3), &MiceConfig::default(), 0)
        .unwrap()
        .1;
    let wrong = equicorrelated(5, 4, 0.5, 0);
    assert!(mice_transform(&model, &wrong, &MaskMatrix::all_observed(5, 4)).is_err());
}

#[test]
fn stall_rule_examples() {
    assert_eq!(stall_stop(&[2.0, 1.0, 1.0, 1.0], 1e-4, 2), Some(3));
    assert_eq!(stall_stop(&[2.0, 1.0, 0.5, 0.25], 1e-4, 2), None);
    assert_eq!(stall_stop(&[2.0, 2.0], 1e-4, 1), Some(1));
    assert_eq!(stall_stop(&[], 1e-4, 2), None);
}
