mod common;

use common::{off_diagonal_mean, oracle_full_matrix, oracle_rate, probe_capture, random_table};
use gaitchd::data::Condition;
use gaitchd::evaluation::{matrix_csv, rank1_cross_view, rank1_reid, report_csv, FeatureTable};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn reid_oracle(t: &FeatureTable, cond: Condition, nm04: bool) -> Option<f64> {
    let gallery: Vec<usize> = (0..t.rows.len())
        .filter(|&i| t.rows[i].capture.condition == Condition::Nm && t.rows[i].capture.index <= 4)
        .collect();
    let probes: Vec<usize> = (0..t.rows.len()).filter(|&i| probe_capture(t.rows[i].capture, cond, nm04)).collect();
    oracle_rate(t, &probes, &gallery)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn protocols_match_brute_force(seed in any::<u64>(), nm04 in any::<bool>(), sparse in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = rng.gen_range(1..4);
        let t = random_table(&mut rng, 20, dim, if sparse { 0.6 } else { 1.0 });

        let xv = rank1_cross_view(&t, nm04);
        for c in &xv.conditions {
            let (views, full) = oracle_full_matrix(&t, c.condition, nm04);
            prop_assert_eq!(&views, &xv.views);
            let m = c.matrix.as_ref().unwrap();
            for (i, row) in m.iter().enumerate() {
                for (j, cell) in row.iter().enumerate() {
                    let want = if i == j { None } else { full[i][j] };
                    prop_assert_eq!(*cell, want);
                }
            }
            prop_assert_eq!(c.accuracy, off_diagonal_mean(&full));
        }

        let reid = rank1_reid(&t, nm04);
        for c in &reid.conditions {
            prop_assert_eq!(c.accuracy, reid_oracle(&t, c.condition, nm04));
        }
    }

    /// Diagonal cells filled with arbitrary values never move the averages.
    #[test]
    fn diagonal_is_excluded(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_table(&mut rng, 8, 2, 1.0);
        let xv = rank1_cross_view(&t, false);
        for c in &xv.conditions {
            let (_, mut full) = oracle_full_matrix(&t, c.condition, false);
            for (i, row) in full.iter_mut().enumerate() {
                row[i] = Some(if rng.gen() { 0.0 } else { 100.0 });
            }
            prop_assert_eq!(c.accuracy, off_diagonal_mean(&full));
        }
    }

    /// Every subject lives in its own 2-d block as a vector of fixed length;
    /// halving the angles pulls same-subject rows together while every
    /// cross-subject distance (the sum of the two squared lengths) stays put.
    #[test]
    fn shrinking_same_subject_distances_never_hurts(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let template = random_table(&mut rng, 8, 1, 1.0);
        let subjects: Vec<String> = template.subjects().into_iter().map(String::from).collect();
        let dim = 2 * subjects.len();
        let polar: Vec<(usize, f64, f64)> = template
            .rows
            .iter()
            .map(|r| (subjects.iter().position(|x| *x == r.subject).unwrap(), rng.gen_range(1.0..3.0), rng.gen_range(-1.2..1.2)))
            .collect();
        let build = |scale: f64| {
            let mut t = template.clone();
            for (row, &(s, r, phi)) in t.rows.iter_mut().zip(&polar) {
                row.feature = vec![0.0; dim];
                row.feature[2 * s] = r * (scale * phi).cos();
                row.feature[2 * s + 1] = r * (scale * phi).sin();
            }
            t
        };
        let (t, shrunk) = (build(1.0), build(0.5));
        let before = rank1_cross_view(&t, false);
        let after = rank1_cross_view(&shrunk, false);
        for (b, a) in before.conditions.iter().zip(&after.conditions) {
            let (bm, am) = (b.matrix.as_ref().unwrap(), a.matrix.as_ref().unwrap());
            for (br, ar) in bm.iter().zip(am) {
                for (x, y) in br.iter().zip(ar) {
                    prop_assert!(y.unwrap_or(0.0) >= x.unwrap_or(0.0));
                }
            }
        }
        for (b, a) in rank1_reid(&t, false).conditions.iter().zip(&rank1_reid(&shrunk, false).conditions) {
            prop_assert!(a.accuracy.unwrap_or(0.0) >= b.accuracy.unwrap_or(0.0));
        }
    }

    #[test]
    fn reports_are_deterministic(seed in any::<u64>()) {
        let t = random_table(&mut ChaCha8Rng::seed_from_u64(seed), 6, 2, 0.8);
        let a = rank1_cross_view(&t, false);
        let b = rank1_cross_view(&t.clone(), false);
        prop_assert_eq!(report_csv(&[a.row(3)]), report_csv(&[b.row(3)]));
        prop_assert_eq!(matrix_csv(&a), matrix_csv(&b));
    }
}
