#![allow(dead_code)]

use gaitchd::data::{Capture, Condition, VIEWS};
use gaitchd::evaluation::{FeatureRow, FeatureTable};
use gaitchd::tensor::{Shape4, Tensor4};
use rand::Rng;

pub fn random_tensor<R: Rng>(shape: Shape4, rng: &mut R) -> Tensor4 {
    Tensor4::new(shape, (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// A random feature table over all 11 views. Features are small integers so
/// distance ties actually happen; `keep` is the chance a sequence is present.
pub fn random_table<R: Rng>(rng: &mut R, max_subjects: usize, dim: usize, keep: f64) -> FeatureTable {
    let subjects = rng.gen_range(2..=max_subjects);
    let mut rows = Vec::new();
    for s in 0..subjects {
        for capture in Capture::all() {
            for view in VIEWS {
                if rng.gen_bool(keep) {
                    rows.push(FeatureRow {
                        subject: format!("{:03}", s + 1),
                        capture,
                        view,
                        feature: (0..dim).map(|_| f64::from(rng.gen_range(-4i32..=4))).collect(),
                    });
                }
            }
        }
    }
    FeatureTable { rows }
}

pub fn probe_capture(c: Capture, cond: Condition, nm04: bool) -> bool {
    c.condition == cond
        && match cond {
            Condition::Nm => c.index == 5 || c.index == 6 || (nm04 && c.index == 4),
            _ => true,
        }
}

/// Brute force rank-1 hit for one probe: the full distance list is sorted by
/// (distance, table position) and the head decides.
pub fn oracle_hit(table: &FeatureTable, probe: usize, gallery: &[usize]) -> Option<bool> {
    let p = &table.rows[probe];
    let mut d: Vec<(f64, usize)> = gallery
        .iter()
        .filter(|&&g| g != probe)
        .map(|&g| {
            let dist = p.feature.iter().zip(&table.rows[g].feature).map(|(a, b)| (a - b) * (a - b)).sum();
            (dist, g)
        })
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.first().map(|&(_, g)| table.rows[g].subject == p.subject)
}

pub fn oracle_rate(table: &FeatureTable, probes: &[usize], gallery: &[usize]) -> Option<f64> {
    if probes.is_empty() {
        return None;
    }
    let mut hits = 0;
    for &p in probes {
        if oracle_hit(table, p, gallery)? {
            hits += 1;
        }
    }
    Some(100.0 * hits as f64 / probes.len() as f64)
}

/// Full probe-view x gallery-view matrix, diagonal included.
pub fn oracle_full_matrix(table: &FeatureTable, cond: Condition, nm04: bool) -> (Vec<u16>, Vec<Vec<Option<f64>>>) {
    let mut views: Vec<u16> = table.rows.iter().map(|r| r.view).collect();
    views.sort_unstable();
    views.dedup();
    let m = views
        .iter()
        .map(|&vp| {
            let probes: Vec<usize> = (0..table.rows.len())
                .filter(|&i| table.rows[i].view == vp && probe_capture(table.rows[i].capture, cond, nm04))
                .collect();
            views
                .iter()
                .map(|&vg| {
                    let gallery: Vec<usize> = (0..table.rows.len())
                        .filter(|&i| table.rows[i].view == vg && table.rows[i].capture.index <= 4 && table.rows[i].capture.condition == Condition::Nm)
                        .collect();
                    oracle_rate(table, &probes, &gallery)
                })
                .collect()
        })
        .collect();
    (views, m)
}

/// Mean of the off-diagonal cells that exist, in row-major order.
pub fn off_diagonal_mean(m: &[Vec<Option<f64>>]) -> Option<f64> {
    let cells: Vec<f64> = m
        .iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().enumerate().filter(move |(j, _)| *j != i).filter_map(|(_, v)| *v))
        .collect();
    (!cells.is_empty()).then(|| cells.iter().sum::<f64>() / cells.len() as f64)
}
