//! Rank-1 evaluation under the cross-view and re-identification protocols,
//! the drop-number sweep, and the CSV reports.
//!
//! Gallery captures are nm-01 to nm-04. Probes are nm-05/06, bg-01/02 and
//! cl-01/02; nm-04 can be added to the NM probes for a literal reading of
//! the capture list, in which case a probe is never matched against itself.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{backbone_forward, BackboneParams};
use crate::data::{Capture, Condition, DatasetIndex, Skip};
use crate::error::{Error, Result};
use crate::hd::hd_eval;
use crate::training::{train_loop, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    CrossView,
    Reid,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Protocol::CrossView => "cross-view",
            Protocol::Reid => "reid",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross-view" => Ok(Protocol::CrossView),
            "reid" => Ok(Protocol::Reid),
            _ => Err(Error::Config(format!("unknown protocol `{s}` (cross-view or reid)"))),
        }
    }
}

// ---------------------------------------------------------------------------
// features
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub subject: String,
    pub capture: Capture,
    pub view: u16,
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureTable {
    pub rows: Vec<FeatureRow>,
}

impl FeatureTable {
    pub fn views(&self) -> Vec<u16> {
        let v: BTreeSet<u16> = self.rows.iter().map(|r| r.view).collect();
        v.into_iter().collect()
    }

    pub fn subjects(&self) -> Vec<&str> {
        let s: BTreeSet<&str> = self.rows.iter().map(|r| r.subject.as_str()).collect();
        s.into_iter().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FramePolicy {
    /// Leading frames used per sequence, in temporal order.
    pub max_frames: usize,
}

impl Default for FramePolicy {
    fn default() -> Self {
        Self { max_frames: 100 }
    }
}

/// Eval-mode features (no dropout) of every sequence. Sequences that
/// cannot be encoded are reported and left out.
pub fn extract_features(
    params: &BackboneParams,
    data: &DatasetIndex,
    policy: FramePolicy,
) -> Result<(FeatureTable, Vec<Skip>)> {
    if policy.max_frames == 0 {
        return Err(Error::InvalidArgument("frame cap must be positive".into()));
    }
    let encoded: Vec<Result<Vec<f64>>> = data
        .sequences
        .par_iter()
        .map(|seq| {
            let frames = seq.load()?;
            let take = frames.len().min(policy.max_frames);
            let inputs = vec![frames[..take].iter().map(|f| f.to_tensor()).collect::<Vec<_>>()];
            let (feat, _) = backbone_forward(&inputs, params)?;
            Ok(hd_eval(&feat)?.into_data())
        })
        .collect();
    let mut table = FeatureTable::default();
    let mut skipped = Vec::new();
    for (seq, feature) in data.sequences.iter().zip(encoded) {
        match feature {
            Ok(feature) => table.rows.push(FeatureRow {
                subject: seq.subject.clone(),
                capture: seq.capture,
                view: seq.view,
                feature,
            }),
            Err(e @ (Error::Data(_) | Error::Shape { .. } | Error::InvalidArgument(_))) => skipped.push(Skip {
                path: PathBuf::from(seq.label()),
                reason: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    Ok((table, skipped))
}

// ---------------------------------------------------------------------------
// rank-1
// ---------------------------------------------------------------------------

fn is_probe(capture: Capture, condition: Condition, include_nm04: bool) -> bool {
    if capture.condition != condition {
        return false;
    }
    match condition {
        Condition::Nm => capture.index >= 5 || (include_nm04 && capture.index == 4),
        Condition::Bg | Condition::Cl => true,
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index (into `gallery`) of the nearest row; the first one on ties.
fn nearest(table: &FeatureTable, probe: usize, gallery: &[usize]) -> Option<usize> {
    let p = &table.rows[probe];
    let mut best: Option<(usize, f64)> = None;
    for &g in gallery {
        let row = &table.rows[g];
        if row.subject == p.subject && row.capture == p.capture && row.view == p.view {
            continue;
        }
        let d = squared_distance(&p.feature, &row.feature);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((g, d));
        }
    }
    best.map(|(g, _)| g)
}

fn hit_rate(table: &FeatureTable, probes: &[usize], gallery: &[usize]) -> Option<f64> {
    if probes.is_empty() {
        return None;
    }
    let outcomes: Vec<Option<bool>> = probes
        .par_iter()
        .map(|&p| nearest(table, p, gallery).map(|g| table.rows[g].subject == table.rows[p].subject))
        .collect();
    if outcomes.iter().any(|o| o.is_none()) {
        return None;
    }
    let hits = outcomes.iter().filter(|o| **o == Some(true)).count();
    Some(100.0 * hits as f64 / probes.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionResult {
    pub condition: Condition,
    /// `None` when no cell could be evaluated.
    pub accuracy: Option<f64>,
    pub probes: usize,
    /// Cross-view only: probe view x gallery view, `None` on the diagonal
    /// and for absent cells.
    pub matrix: Option<Vec<Vec<Option<f64>>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub views: Vec<u16>,
    /// NM, BG, CL in that order.
    pub conditions: Vec<ConditionResult>,
    pub average: Option<f64>,
    pub warnings: Vec<String>,
    /// Fewer than two test subjects: every nearest neighbour trivially matches.
    pub degenerate: bool,
}

impl EvalReport {
    pub fn accuracy(&self, condition: Condition) -> Option<f64> {
        self.conditions.iter().find(|c| c.condition == condition).and_then(|c| c.accuracy)
    }

    pub fn row(&self, drop_number: usize) -> ReportRow {
        ReportRow {
            drop_number,
            nm: self.accuracy(Condition::Nm),
            bg: self.accuracy(Condition::Bg),
            cl: self.accuracy(Condition::Cl),
            average: self.average,
        }
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn finish(
    protocol: Protocol,
    table: &FeatureTable,
    views: Vec<u16>,
    conditions: Vec<ConditionResult>,
    warnings: Vec<String>,
) -> EvalReport {
    let accs: Vec<f64> = conditions.iter().filter_map(|c| c.accuracy).collect();
    EvalReport {
        protocol,
        views,
        average: (accs.len() == conditions.len()).then(|| mean(&accs)).flatten(),
        conditions,
        warnings,
        degenerate: table.subjects().len() < 2,
    }
}

/// Per probe condition: rank-1 for every (probe view, gallery view) pair
/// with distinct views, averaged over the cells that exist.
pub fn rank1_cross_view(table: &FeatureTable, include_nm04: bool) -> EvalReport {
    let views = table.views();
    let mut warnings = Vec::new();
    let mut conditions = Vec::new();
    for condition in Condition::ALL {
        let mut matrix = vec![vec![None; views.len()]; views.len()];
        let mut present = Vec::new();
        let mut probes_total = 0;
        for (pi, &vp) in views.iter().enumerate() {
            let probes: Vec<usize> = (0..table.rows.len())
                .filter(|&i| table.rows[i].view == vp && is_probe(table.rows[i].capture, condition, include_nm04))
                .collect();
            probes_total += probes.len();
            for (gi, &vg) in views.iter().enumerate() {
                if vg == vp {
                    continue;
                }
                let gallery: Vec<usize> = (0..table.rows.len())
                    .filter(|&i| table.rows[i].view == vg && table.rows[i].capture.is_gallery())
                    .collect();
                match hit_rate(table, &probes, &gallery) {
                    Some(acc) => {
                        matrix[pi][gi] = Some(acc);
                        present.push(acc);
                    }
                    None => warnings.push(format!(
                        "{condition} probe view {vp} / gallery view {vg}: {} probes, {} gallery sequences; cell absent",
                        probes.len(),
                        gallery.len()
                    )),
                }
            }
        }
        conditions.push(ConditionResult {
            condition,
            accuracy: mean(&present),
            probes: probes_total,
            matrix: Some(matrix),
        });
    }
    finish(Protocol::CrossView, table, views, conditions, warnings)
}

/// Per probe condition: rank-1 of all probes jointly against the pooled
/// multi-view gallery.
pub fn rank1_reid(table: &FeatureTable, include_nm04: bool) -> EvalReport {
    let gallery: Vec<usize> = (0..table.rows.len()).filter(|&i| table.rows[i].capture.is_gallery()).collect();
    let mut warnings = Vec::new();
    let mut conditions = Vec::new();
    for condition in Condition::ALL {
        let probes: Vec<usize> = (0..table.rows.len())
            .filter(|&i| is_probe(table.rows[i].capture, condition, include_nm04))
            .collect();
        let accuracy = hit_rate(table, &probes, &gallery);
        if accuracy.is_none() {
            warnings.push(format!(
                "{condition}: {} probes, {} gallery sequences; condition absent",
                probes.len(),
                gallery.len()
            ));
        }
        conditions.push(ConditionResult {
            condition,
            accuracy,
            probes: probes.len(),
            matrix: None,
        });
    }
    finish(Protocol::Reid, table, table.views(), conditions, warnings)
}

pub fn evaluate(table: &FeatureTable, protocol: Protocol, include_nm04: bool) -> EvalReport {
    match protocol {
        Protocol::CrossView => rank1_cross_view(table, include_nm04),
        Protocol::Reid => rank1_reid(table, include_nm04),
    }
}

// ---------------------------------------------------------------------------
// reports
// ---------------------------------------------------------------------------

pub const REPORT_HEADER: &str = "drop_number,NM,BG,CL,Average";
pub const MATRIX_HEADER: &str = "condition,probe_view,gallery_view,rank1";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReportRow {
    pub drop_number: usize,
    pub nm: Option<f64>,
    pub bg: Option<f64>,
    pub cl: Option<f64>,
    pub average: Option<f64>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.3}"))
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.drop_number,
            cell(r.nm),
            cell(r.bg),
            cell(r.cl),
            cell(r.average)
        )
        .expect("write to string");
    }
    out
}

pub fn write_report(rows: &[ReportRow], path: &Path) -> Result<()> {
    fs::write(path, report_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Off-diagonal cells of the cross-view matrices; empty for re-id reports.
pub fn matrix_csv(report: &EvalReport) -> String {
    let mut out = format!("{MATRIX_HEADER}\n");
    for c in &report.conditions {
        let Some(matrix) = &c.matrix else { continue };
        for (pi, vp) in report.views.iter().enumerate() {
            for (gi, vg) in report.views.iter().enumerate() {
                if pi != gi {
                    writeln!(out, "{},{vp},{vg},{}", c.condition, cell(matrix[pi][gi])).expect("write to string");
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

/// Drop numbers tabulated by default, from no dropout to nearly all rows.
pub const DEFAULT_DROP_NUMBERS: [usize; 9] = [0, 1, 2, 4, 8, 13, 16, 27, 31];

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOptions {
    pub drop_numbers: Vec<usize>,
    pub protocol: Protocol,
    pub include_nm04: bool,
    /// Run the points concurrently, each seeded with `seed + drop_number`.
    pub parallel: bool,
    pub frames: FramePolicy,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            drop_numbers: DEFAULT_DROP_NUMBERS.to_vec(),
            protocol: Protocol::CrossView,
            include_nm04: false,
            parallel: false,
            frames: FramePolicy::default(),
        }
    }
}

/// Seed used for one sweep point.
pub fn sweep_seed(cfg: &TrainConfig, drop_number: usize, parallel: bool) -> u64 {
    if parallel {
        cfg.seed.wrapping_add(drop_number as u64)
    } else {
        cfg.seed
    }
}

fn sweep_point(cfg: &TrainConfig, d: usize, train: &DatasetIndex, test: &DatasetIndex, opts: &SweepOptions) -> Result<ReportRow> {
    let cfg = TrainConfig {
        drop_number: d,
        seed: sweep_seed(cfg, d, opts.parallel),
        ..cfg.clone()
    };
    let out = train_loop(&cfg, train)?;
    let (table, _) = extract_features(&out.checkpoint.params, test, opts.frames)?;
    Ok(evaluate(&table, opts.protocol, opts.include_nm04).row(d))
}

/// Trains and evaluates once per drop number. With `out` set, the CSV is
/// rewritten after every completed point so a failure keeps earlier rows.
pub fn sweep(
    cfg: &TrainConfig,
    train: &DatasetIndex,
    test: &DatasetIndex,
    opts: &SweepOptions,
    out: Option<&Path>,
) -> Result<Vec<ReportRow>> {
    for &d in &opts.drop_numbers {
        TrainConfig {
            drop_number: d,
            ..cfg.clone()
        }
        .validate()?;
    }
    let mut rows = Vec::new();
    let save = |rows: &[ReportRow]| out.map_or(Ok(()), |p| write_report(rows, p));
    save(&rows)?;
    if opts.parallel {
        let results: Vec<Result<ReportRow>> = opts
            .drop_numbers
            .par_iter()
            .map(|&d| sweep_point(cfg, d, train, test, opts))
            .collect();
        for r in results {
            match r {
                Ok(row) => rows.push(row),
                Err(e) => {
                    save(&rows)?;
                    return Err(e);
                }
            }
        }
        save(&rows)?;
    } else {
        for &d in &opts.drop_numbers {
            rows.push(sweep_point(cfg, d, train, test, opts)?);
            save(&rows)?;
        }
    }
    Ok(rows)
}
