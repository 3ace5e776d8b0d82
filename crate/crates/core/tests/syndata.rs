use std::collections::BTreeMap;

use ifl_core::schema::{Dataset, Side, Split};
use ifl_core::syndata::{generate, replica_seed, shift_report, GenConfig, GroundTruth, OodMode};

/// Raw value of `field` for every entity of `side`.
fn raw_values(d: &Dataset, side: Side, field: usize) -> Vec<u32> {
    let (users, items, _) = d.to_raw();
    let rows = match side {
        Side::User => users.rows,
        Side::Item => items.rows,
    };
    rows.iter().map(|r| r[field].parse().unwrap()).collect()
}

/// Pearson correlation between the parity of a spurious value and the label.
fn parity_label_corr(d: &Dataset, side: Side, field: usize, split: Split) -> f64 {
    let vals = raw_values(d, side, field);
    let pairs: Vec<(f64, f64)> = d
        .interactions
        .iter()
        .filter(|r| r.split == split)
        .map(|r| {
            let e = if side == Side::User { r.user } else { r.item };
            ((vals[e] % 2) as f64, r.label as f64)
        })
        .collect();
    let n = pairs.len() as f64;
    let (mx, my) = pairs.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x / n, b + y / n));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in &pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx * syy).sqrt()
}

fn spurious_fields(t: &GroundTruth) -> Vec<(Side, usize)> {
    Side::BOTH
        .into_iter()
        .flat_map(|s| t.spurious(s).iter().map(move |f| (s, *f)))
        .collect()
}

#[test]
fn unbiased_generator_plants_no_correlation() {
    let cfg = GenConfig {
        n_users: 5000,
        bias_strength: 0.5,
        ..GenConfig::default()
    };
    assert!(cfg.n_users * cfg.interactions_per_user >= 100_000);
    let (d, t) = generate(&cfg).unwrap();
    for (side, field) in spurious_fields(&t) {
        let rep = shift_report(&d, side, field).unwrap();
        let spread = rep.spread(Split::Train).unwrap();
        assert!(spread < 0.05, "{side} field {field}: train spread {spread}");
        let shift = rep.max_abs_shift(Split::Train, Split::TestOod).unwrap();
        assert!(shift < 0.05, "{side} field {field}: train/ood shift {shift}");
    }
}

#[test]
fn reversed_ood_flips_the_correlation_sign() {
    let (d, t) = generate(&GenConfig::default()).unwrap();
    for (side, field) in spurious_fields(&t) {
        let train = parity_label_corr(&d, side, field, Split::Train);
        let ood = parity_label_corr(&d, side, field, Split::TestOod);
        assert!(train > 0.05 && ood < -0.05, "{side} field {field}: train {train}, ood {ood}");
    }
}

#[test]
fn planted_field_shifts_between_train_and_ood() {
    let (d, t) = generate(&GenConfig::default()).unwrap();
    for (side, field) in spurious_fields(&t) {
        let shift = shift_report(&d, side, field)
            .unwrap()
            .max_abs_shift(Split::Train, Split::TestOod)
            .unwrap();
        assert!(shift > 0.2, "{side} field {field}: shift {shift}");
    }
}

/// Per-value train/OOD gaps of a single dataset mix in finite-sample
/// confounding with the spurious fields, so the gap is averaged over
/// independent replicas.
#[test]
fn invariant_fields_are_split_stable_in_expectation() {
    const REPLICAS: u64 = 8;
    let base = GenConfig::default();
    let mut gaps: BTreeMap<(Side, usize, String), (f64, u64)> = BTreeMap::new();
    for k in 0..REPLICAS {
        let cfg = GenConfig {
            seed: replica_seed(&base, k),
            ..base.clone()
        };
        let (d, t) = generate(&cfg).unwrap();
        for side in Side::BOTH {
            for field in t.invariant(side) {
                for row in shift_report(&d, side, *field).unwrap().rows {
                    let (a, b) = (row.cells[&Split::Train], row.cells[&Split::TestOod]);
                    if a.records < 100 || b.records < 100 {
                        continue;
                    }
                    let e = gaps.entry((side, *field, row.value)).or_default();
                    e.0 += a.p().unwrap() - b.p().unwrap();
                    e.1 += 1;
                }
            }
        }
    }
    let checked: Vec<_> = gaps.iter().filter(|(_, (_, n))| *n == REPLICAS).collect();
    assert!(checked.len() >= 24, "only {} values had enough records", checked.len());
    for ((side, field, value), (sum, n)) in checked {
        let mean = sum / *n as f64;
        assert!(mean.abs() < 0.1, "{side} field {field} value {value}: mean gap {mean}");
    }
}

#[test]
fn uniform_ood_keeps_labels_unbiased() {
    let cfg = GenConfig {
        n_users: 2000,
        ood_mode: OodMode::Uniform,
        ..GenConfig::default()
    };
    let (d, t) = generate(&cfg).unwrap();
    for (side, field) in spurious_fields(&t) {
        let corr = parity_label_corr(&d, side, field, Split::TestOod);
        assert!(corr.abs() < 0.05, "{side} field {field}: ood corr {corr}");
    }
}

#[test]
fn biased_pool_split_shares() {
    let (d, _) = generate(&GenConfig {
        n_users: 2000,
        ..GenConfig::default()
    })
    .unwrap();
    let count = |s: Split| d.interactions.iter().filter(|r| r.split == s).count() as f64;
    let biased = count(Split::Train) + count(Split::Val) + count(Split::TestIid);
    assert!((count(Split::Train) / biased - 0.8).abs() < 0.01);
    assert!((count(Split::Val) / biased - 0.1).abs() < 0.01);
    assert!((count(Split::TestIid) / biased - 0.1).abs() < 0.01);
}

#[test]
fn ground_truth_round_trips() {
    let cfg = GenConfig::default();
    let (_, t) = generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ground_truth.json");
    ifl_core::syndata::write_ground_truth(&p, &t, &cfg).unwrap();
    assert_eq!(ifl_core::syndata::read_ground_truth(&p).unwrap(), t);
}
