//! Silhouette datasets in the CASIA-B directory convention.
//!
//! On disk a dataset is `<root>/<subject>/<cond>-<seq>/<view>/<name>.png`
//! with a three-digit subject, `cond` one of `nm`, `bg`, `cl`, a two-digit
//! sequence number and a three-digit view angle. Real captures and the
//! synthetic walker both flow through [`index_casia_b`] and
//! [`preprocess_silhouette`].
//!
//! Frames are kept as 8-bit intensities and converted to `[0, 1]` reals
//! (`v / 255`) only when a network input is built, so an exported and
//! re-ingested synthetic set is bit-identical to the in-memory one.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use image::GrayImage;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{frame_shape, FRAME_HEIGHT, FRAME_WIDTH};
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// The 11 CASIA-B view angles in degrees.
pub const VIEWS: [u16; 11] = [0, 18, 36, 54, 72, 90, 108, 126, 144, 162, 180];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Condition {
    #[serde(rename = "NM")]
    Nm,
    #[serde(rename = "BG")]
    Bg,
    #[serde(rename = "CL")]
    Cl,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Nm, Condition::Bg, Condition::Cl];

    fn prefix(self) -> &'static str {
        match self {
            Condition::Nm => "nm",
            Condition::Bg => "bg",
            Condition::Cl => "cl",
        }
    }

    /// Number of captures recorded under this condition.
    pub fn captures(self) -> u8 {
        match self {
            Condition::Nm => 6,
            Condition::Bg | Condition::Cl => 2,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::Nm => "NM",
            Condition::Bg => "BG",
            Condition::Cl => "CL",
        })
    }
}

/// One of the ten capture names, e.g. `nm-03`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Capture {
    pub condition: Condition,
    pub index: u8,
}

impl Capture {
    pub fn new(condition: Condition, index: u8) -> Result<Self> {
        if index == 0 || index > condition.captures() {
            return Err(Error::Data(format!(
                "{}-{index:02} is not a capture name",
                condition.prefix()
            )));
        }
        Ok(Self { condition, index })
    }

    /// All ten captures in directory order: bg, cl, nm.
    pub fn all() -> Vec<Capture> {
        let mut out: Vec<Capture> = Condition::ALL
            .iter()
            .flat_map(|&c| (1..=c.captures()).map(move |i| Capture { condition: c, index: i }))
            .collect();
        out.sort_by_key(|c| c.to_string());
        out
    }

    /// Gallery captures of both protocols: nm-01 to nm-04.
    pub fn is_gallery(&self) -> bool {
        self.condition == Condition::Nm && self.index <= 4
    }
}

impl fmt::Display for Capture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{:02}", self.condition.prefix(), self.index)
    }
}

impl FromStr for Capture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Data(format!("'{s}' is not a capture name"));
        let (cond, seq) = s.split_once('-').ok_or_else(bad)?;
        let condition = match cond {
            "nm" => Condition::Nm,
            "bg" => Condition::Bg,
            "cl" => Condition::Cl,
            _ => return Err(bad()),
        };
        if seq.len() != 2 || !seq.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        Capture::new(condition, seq.parse().map_err(|_| bad())?).map_err(|_| bad())
    }
}

pub fn parse_view(s: &str) -> Result<u16> {
    let bad = || Error::Data(format!("'{s}' is not a view directory"));
    if s.len() != 3 || !s.bytes().all(|b| b.is_ascii_digit()) {
        return Err(bad());
    }
    let v: u16 = s.parse().map_err(|_| bad())?;
    if VIEWS.contains(&v) {
        Ok(v)
    } else {
        Err(bad())
    }
}

// ---------------------------------------------------------------------------
// frames and sequences
// ---------------------------------------------------------------------------

/// A preprocessed 64x44 silhouette.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Frame {
    pixels: Vec<u8>,
}

impl fmt::Debug for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lit = self.pixels.iter().filter(|&&p| p > 0).count();
        write!(f, "Frame({FRAME_HEIGHT}x{FRAME_WIDTH}, {lit} lit)")
    }
}

impl Frame {
    pub fn from_pixels(pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != FRAME_HEIGHT * FRAME_WIDTH {
            return Err(Error::Data(format!(
                "frame has {} pixels, expected {FRAME_HEIGHT}x{FRAME_WIDTH}",
                pixels.len()
            )));
        }
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.pixels[y * FRAME_WIDTH + x]
    }

    /// `(1, 1, 64, 44)` tensor with values `v / 255`.
    pub fn to_tensor(&self) -> Tensor4 {
        let data = self.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
        Tensor4::new(frame_shape(), data).expect("frame geometry")
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_raw(FRAME_WIDTH as u32, FRAME_HEIGHT as u32, self.pixels.clone()).expect("frame geometry")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FrameSource {
    Memory(Arc<[Frame]>),
    /// PNG files in temporal (file name) order, preprocessed on load.
    Files(Vec<PathBuf>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaitSequence {
    pub subject: String,
    pub capture: Capture,
    pub view: u16,
    pub source: FrameSource,
}

impl GaitSequence {
    pub fn condition(&self) -> Condition {
        self.capture.condition
    }

    pub fn frame_count(&self) -> usize {
        match &self.source {
            FrameSource::Memory(f) => f.len(),
            FrameSource::Files(p) => p.len(),
        }
    }

    /// `subject/capture/view`, as in the on-disk layout.
    pub fn label(&self) -> String {
        format!("{}/{}/{:03}", self.subject, self.capture, self.view)
    }

    /// Preprocessed frames. A file-backed sequence is dropped (error) when
    /// more than half of its frames are empty.
    pub fn load(&self) -> Result<Arc<[Frame]>> {
        match &self.source {
            FrameSource::Memory(f) => Ok(f.clone()),
            FrameSource::Files(paths) => {
                let mut frames = Vec::with_capacity(paths.len());
                let mut rejected = 0;
                for p in paths {
                    let img = image::open(p)
                        .map_err(|e| Error::Image {
                            path: p.clone(),
                            source: e,
                        })?
                        .into_luma8();
                    match preprocess_silhouette(&img) {
                        Ok(f) => frames.push(f),
                        Err(Error::Data(_)) => rejected += 1,
                        Err(e) => return Err(e),
                    }
                }
                if frames.is_empty() || 2 * rejected > paths.len() {
                    return Err(Error::Data(format!(
                        "{}: {rejected} of {} frames are empty",
                        self.label(),
                        paths.len()
                    )));
                }
                Ok(frames.into())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Skip {
    pub path: PathBuf,
    pub reason: String,
}

/// Sequences ordered by (subject, capture, view); subjects lexicographic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetIndex {
    pub subjects: Vec<String>,
    pub sequences: Vec<GaitSequence>,
}

impl DatasetIndex {
    pub fn from_sequences(mut sequences: Vec<GaitSequence>) -> Self {
        sequences.sort_by(|a, b| (&a.subject, a.capture, a.view).cmp(&(&b.subject, b.capture, b.view)));
        let subjects: BTreeSet<String> = sequences.iter().map(|s| s.subject.clone()).collect();
        Self {
            subjects: subjects.into_iter().collect(),
            sequences,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn views(&self) -> Vec<u16> {
        let v: BTreeSet<u16> = self.sequences.iter().map(|s| s.view).collect();
        v.into_iter().collect()
    }

    /// Sequence indices grouped per subject, in subject order.
    pub fn by_subject(&self) -> Vec<(String, Vec<usize>)> {
        self.subjects
            .iter()
            .map(|s| {
                let idx = self
                    .sequences
                    .iter()
                    .enumerate()
                    .filter(|(_, q)| &q.subject == s)
                    .map(|(i, _)| i)
                    .collect();
                (s.clone(), idx)
            })
            .collect()
    }

    pub fn restrict(&self, subjects: &[String]) -> Self {
        let keep: BTreeSet<&String> = subjects.iter().collect();
        Self::from_sequences(
            self.sequences
                .iter()
                .filter(|s| keep.contains(&s.subject))
                .cloned()
                .collect(),
        )
    }

    /// Loads every file-backed sequence into memory. Sequences that fail
    /// the empty-frame rule are dropped and reported.
    pub fn materialize(&self) -> Result<(Self, Vec<Skip>)> {
        let loaded: Vec<Result<Arc<[Frame]>>> = self.sequences.par_iter().map(|s| s.load()).collect();
        let mut kept = Vec::with_capacity(self.sequences.len());
        let mut skipped = Vec::new();
        for (seq, frames) in self.sequences.iter().zip(loaded) {
            match frames {
                Ok(f) => kept.push(GaitSequence {
                    source: FrameSource::Memory(f),
                    ..seq.clone()
                }),
                Err(Error::Data(reason)) => skipped.push(Skip {
                    path: PathBuf::from(seq.label()),
                    reason,
                }),
                Err(e) => return Err(e),
            }
        }
        Ok((Self::from_sequences(kept), skipped))
    }
}

// ---------------------------------------------------------------------------
// indexing
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default, PartialEq)]
pub struct IndexReport {
    pub skipped: Vec<Skip>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        out.push((entry.file_name().to_string_lossy().into_owned(), entry.path()));
    }
    out.sort();
    Ok(out)
}

fn is_subject(name: &str) -> bool {
    name.len() == 3 && name.bytes().all(|b| b.is_ascii_digit())
}

/// Walks a CASIA-B style root. Unparseable directories and sequences
/// without frames are listed in the report instead of failing the walk.
pub fn index_casia_b(root: &Path) -> Result<(DatasetIndex, IndexReport)> {
    let mut report = IndexReport::default();
    let mut sequences = Vec::new();
    let skip = |report: &mut IndexReport, path: &Path, reason: &str| {
        report.skipped.push(Skip {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        })
    };
    for (subject, sdir) in sorted_entries(root)? {
        if !sdir.is_dir() {
            continue;
        }
        if !is_subject(&subject) {
            skip(&mut report, &sdir, "subject directory name is not three digits");
            continue;
        }
        for (cap_name, cdir) in sorted_entries(&sdir)? {
            if !cdir.is_dir() {
                continue;
            }
            let Ok(capture) = cap_name.parse::<Capture>() else {
                skip(&mut report, &cdir, "not a capture name");
                continue;
            };
            for (view_name, vdir) in sorted_entries(&cdir)? {
                if !vdir.is_dir() {
                    continue;
                }
                let Ok(view) = parse_view(&view_name) else {
                    skip(&mut report, &vdir, "not a view angle");
                    continue;
                };
                let frames: Vec<PathBuf> = sorted_entries(&vdir)?
                    .into_iter()
                    .filter(|(n, p)| p.is_file() && n.to_ascii_lowercase().ends_with(".png"))
                    .map(|(_, p)| p)
                    .collect();
                if frames.is_empty() {
                    skip(&mut report, &vdir, "no frames");
                    continue;
                }
                sequences.push(GaitSequence {
                    subject: subject.clone(),
                    capture,
                    view,
                    source: FrameSource::Files(frames),
                });
            }
        }
    }
    if sequences.is_empty() {
        return Err(Error::Data(format!("no sequences found under {}", root.display())));
    }
    Ok((DatasetIndex::from_sequences(sequences), report))
}

// ---------------------------------------------------------------------------
// split
// ---------------------------------------------------------------------------

pub const LT_TRAIN_SUBJECTS: usize = 74;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitRule {
    /// LT for 75 or more subjects, the fraction rule otherwise.
    #[default]
    Auto,
    /// First 74 subjects train, the rest test.
    Lt,
    /// First `ceil(0.6 n)` subjects train.
    Fraction,
}

/// Order-preserving subject partition into (train, test) indices.
pub fn split_lt(index: &DatasetIndex, rule: SplitRule) -> Result<(DatasetIndex, DatasetIndex)> {
    let n = index.subjects.len();
    let lt = match rule {
        SplitRule::Auto => n > LT_TRAIN_SUBJECTS,
        SplitRule::Lt => true,
        SplitRule::Fraction => false,
    };
    let train = if lt {
        if n <= LT_TRAIN_SUBJECTS {
            return Err(Error::Data(format!(
                "LT split needs more than {LT_TRAIN_SUBJECTS} subjects, found {n}"
            )));
        }
        LT_TRAIN_SUBJECTS
    } else {
        if n < 2 {
            return Err(Error::Data(format!("split needs at least 2 subjects, found {n}")));
        }
        ((3 * n + 4) / 5).min(n - 1)
    };
    Ok((
        index.restrict(&index.subjects[..train]),
        index.restrict(&index.subjects[train..]),
    ))
}

// ---------------------------------------------------------------------------
// preprocessing
// ---------------------------------------------------------------------------

/// Crops to the rows holding the silhouette, rescales them to 64 rows
/// (each output pixel takes the maximum over its source footprint, so thin
/// structures survive downscaling), centres the intensity centroid at
/// column 22 and crops or pads to 44 columns.
pub fn preprocess_silhouette(image: &GrayImage) -> Result<Frame> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let raw = image.as_raw();
    let row_lit = |y: usize| raw[y * w..(y + 1) * w].iter().any(|&p| p > 0);
    let top = (0..h).find(|&y| row_lit(y)).ok_or_else(|| Error::Data("empty silhouette".into()))?;
    let bottom = (0..h).rev().find(|&y| row_lit(y)).expect("a lit row exists");

    // Output index i covers source indices [i*rows/64, (i+1)*rows/64),
    // at least one wide.
    let rows = bottom - top + 1;
    let footprint = |i: usize, limit: usize| {
        let a = i * rows / FRAME_HEIGHT;
        let b = ((i + 1) * rows / FRAME_HEIGHT).max(a + 1).min(limit);
        a..b
    };
    let scaled_w = (w * FRAME_HEIGHT).div_ceil(rows);
    let scaled_px = |y: usize, x: usize| {
        let mut v = 0u8;
        for sy in footprint(y, rows) {
            let row = &raw[(top + sy) * w..(top + sy + 1) * w];
            for sx in footprint(x, w) {
                v = v.max(row[sx]);
            }
        }
        v
    };
    let scaled: Vec<u8> = (0..FRAME_HEIGHT)
        .flat_map(|y| (0..scaled_w).map(move |x| (y, x)))
        .map(|(y, x)| scaled_px(y, x))
        .collect();

    let (mut mass, mut moment) = (0u64, 0u64);
    for y in 0..FRAME_HEIGHT {
        for x in 0..scaled_w {
            let v = u64::from(scaled[y * scaled_w + x]);
            mass += v;
            moment += v * x as u64;
        }
    }
    // floor(centroid + 1/2) in exact integer arithmetic
    let centre = ((2 * moment + mass) / (2 * mass)) as i64;
    let shift = centre - (FRAME_WIDTH / 2) as i64;

    let mut pixels = vec![0u8; FRAME_HEIGHT * FRAME_WIDTH];
    for y in 0..FRAME_HEIGHT {
        for x in 0..FRAME_WIDTH {
            let sx = x as i64 + shift;
            if (0..scaled_w as i64).contains(&sx) {
                pixels[y * FRAME_WIDTH + x] = scaled[y * scaled_w + sx as usize];
            }
        }
    }
    Frame::from_pixels(pixels)
}

// ---------------------------------------------------------------------------
// frame sampling
// ---------------------------------------------------------------------------

/// Frame indices in temporal order: without replacement when the sequence
/// is long enough, otherwise independent uniform draws.
pub fn sample_frames<R: Rng + ?Sized>(len: usize, count: usize, rng: &mut R) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::Data("cannot sample frames from an empty sequence".into()));
    }
    let mut idx = if len >= count {
        index::sample(rng, len, count).into_vec()
    } else {
        (0..count).map(|_| rng.gen_range(0..len)).collect()
    };
    idx.sort_unstable();
    Ok(idx)
}

// ---------------------------------------------------------------------------
// synthetic walkers
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub subjects: usize,
    pub views: Vec<u16>,
    pub frames: usize,
    #[serde(default)]
    pub effects: ConditionEffects,
}

/// Strength of the carried bag and the coat, as fractions of body height.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionEffects {
    pub bag_radius: f64,
    pub coat_dilation: f64,
    pub coat_length: f64,
}

impl Default for ConditionEffects {
    fn default() -> Self {
        Self {
            bag_radius: 0.07,
            coat_dilation: 0.45,
            coat_length: 0.14,
        }
    }
}

impl SynthSpec {
    pub fn new(subjects: usize, views: &[u16], frames: usize) -> Self {
        Self {
            subjects,
            views: views.to_vec(),
            frames,
            effects: ConditionEffects::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects < 2 {
            return Err(Error::InvalidArgument(format!(
                "synthetic dataset needs at least 2 subjects, got {}",
                self.subjects
            )));
        }
        if self.subjects > 999 {
            return Err(Error::InvalidArgument("at most 999 subjects fit the directory layout".into()));
        }
        if self.frames < 8 {
            return Err(Error::InvalidArgument(format!("frames per sequence must be >= 8, got {}", self.frames)));
        }
        if self.views.is_empty() {
            return Err(Error::InvalidArgument("view list is empty".into()));
        }
        let mut seen = BTreeSet::new();
        for v in &self.views {
            if !VIEWS.contains(v) || !seen.insert(v) {
                return Err(Error::InvalidArgument(format!(
                    "view {v} is not a distinct angle from 0..=180 in steps of 18"
                )));
            }
        }
        Ok(())
    }
}

/// Body proportions in units of body height, drawn once per subject.
#[derive(Clone, Debug)]
struct Walker {
    head_r: f64,
    neck: f64,
    torso_len: f64,
    torso_side: f64,
    torso_front: f64,
    hip_sep: f64,
    leg_w: f64,
    arm_w: f64,
    arm_len: f64,
    stride: f64,
    arm_swing: f64,
    period: f64,
    lean: f64,
}

impl Walker {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        Self {
            head_r: rng.gen_range(0.050..0.075),
            neck: rng.gen_range(0.01..0.04),
            torso_len: rng.gen_range(0.26..0.36),
            torso_side: rng.gen_range(0.05..0.09),
            torso_front: rng.gen_range(0.09..0.14),
            hip_sep: rng.gen_range(0.03..0.06),
            leg_w: rng.gen_range(0.022..0.040),
            arm_w: rng.gen_range(0.015..0.028),
            arm_len: rng.gen_range(0.26..0.36),
            stride: rng.gen_range(0.08..0.20),
            arm_swing: rng.gen_range(0.03..0.12),
            period: rng.gen_range(14.0..24.0),
            lean: rng.gen_range(-0.04..0.04),
        }
    }
}

/// Axis-aligned ellipse or thick segment, in canvas pixels.
enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Segment { x0: f64, y0: f64, x1: f64, y1: f64, r: f64 },
}

impl Shape {
    fn bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => (cx - rx, cy - ry, cx + rx, cy + ry),
            Shape::Segment { x0, y0, x1, y1, r } => (x0.min(x1) - r, y0.min(y1) - r, x0.max(x1) + r, y0.max(y1) + r),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => {
                let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
                dx * dx + dy * dy <= 1.0
            }
            Shape::Segment { x0, y0, x1, y1, r } => {
                let (vx, vy) = (x1 - x0, y1 - y0);
                let len2 = vx * vx + vy * vy;
                let t = if len2 == 0.0 { 0.0 } else { (((x - x0) * vx + (y - y0) * vy) / len2).clamp(0.0, 1.0) };
                let (dx, dy) = (x - x0 - t * vx, y - y0 - t * vy);
                dx * dx + dy * dy <= r * r
            }
        }
    }
}

const CANVAS_H: usize = 128;
const CANVAS_W: usize = 96;
/// Canvas pixels per unit body height.
const BODY_SCALE: f64 = 116.0;

fn render(shapes: &[Shape]) -> GrayImage {
    let mut img = GrayImage::new(CANVAS_W as u32, CANVAS_H as u32);
    for s in shapes {
        let (x0, y0, x1, y1) = s.bounds();
        let xs = (x0.floor().max(0.0) as usize)..((x1.ceil() + 1.0).clamp(0.0, CANVAS_W as f64) as usize);
        let ys = (y0.floor().max(0.0) as usize)..((y1.ceil() + 1.0).clamp(0.0, CANVAS_H as f64) as usize);
        for y in ys {
            for x in xs.clone() {
                if s.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    img.put_pixel(x as u32, y as u32, image::Luma([255]));
                }
            }
        }
    }
    img
}

/// Shapes of one walker at gait phase `phase` (radians) seen from `view`.
fn pose(w: &Walker, capture: Capture, effects: &ConditionEffects, view: u16, phase: f64, jitter: f64) -> Vec<Shape> {
    let theta = f64::from(view).to_radians();
    let (side, front) = (theta.sin(), theta.cos());
    // apparent half width of a body part with side-view half width `a` and
    // frontal half width `b`
    let width = |a: f64, b: f64| a * side + b * front.abs();
    let s = BODY_SCALE;
    let top = 0.5 * (CANVAS_H as f64 - s);
    let cx = 0.5 * CANVAS_W as f64 + jitter;
    let lean = w.lean * front;

    let mut torso_len = w.torso_len;
    let mut torso_a = w.torso_side;
    let mut torso_b = w.torso_front;
    if capture.condition == Condition::Cl {
        torso_a *= 1.0 + effects.coat_dilation;
        torso_b *= 1.0 + 0.5 * effects.coat_dilation;
        torso_len += effects.coat_length;
    }
    let head_y = top + w.head_r * s;
    let shoulder_y = top + (2.0 * w.head_r + w.neck) * s;
    let hip_y = top + (2.0 * w.head_r + w.neck + w.torso_len) * s;
    let foot_y = top + s - w.leg_w * s;
    let bob = 0.01 * s * (2.0 * phase).cos();

    let mut shapes = vec![Shape::Ellipse {
        cx: cx + lean * s,
        cy: head_y + bob,
        rx: w.head_r * s * (0.85 + 0.15 * side),
        ry: w.head_r * s,
    }];
    let torso_cy = shoulder_y + 0.5 * torso_len * s;
    shapes.push(Shape::Ellipse {
        cx: cx + 0.5 * lean * s,
        cy: torso_cy + bob,
        rx: width(torso_a, torso_b) * s,
        ry: 0.5 * torso_len * s,
    });
    for leg in [0.0, PI] {
        let swing = (phase + leg).sin();
        let sep = if leg == 0.0 { 1.0 } else { -1.0 } * w.hip_sep * front.abs();
        let hip_x = cx + sep * s;
        let foot_x = hip_x + w.stride * swing * side * s;
        let knee_x = 0.5 * (hip_x + foot_x) + 0.02 * s * side * (phase + leg).cos().max(0.0);
        let knee_y = 0.5 * (hip_y + foot_y) - 0.02 * s * (phase + leg).cos().max(0.0);
        let r = w.leg_w * s * (0.8 + 0.2 * side);
        shapes.push(Shape::Segment { x0: hip_x, y0: hip_y + bob, x1: knee_x, y1: knee_y, r });
        shapes.push(Shape::Segment { x0: knee_x, y0: knee_y, x1: foot_x, y1: foot_y, r });

        let arm_side = if leg == 0.0 { 1.0 } else { -1.0 };
        let sh_x = cx + arm_side * width(0.3 * torso_a, torso_b) * s;
        let hand_x = sh_x - w.arm_swing * swing * side * s;
        shapes.push(Shape::Segment {
            x0: sh_x,
            y0: shoulder_y + 0.03 * s + bob,
            x1: hand_x,
            y1: shoulder_y + (0.03 + w.arm_len) * s + bob,
            r: w.arm_w * s,
        });
    }
    if capture.condition == Condition::Bg {
        let r = effects.bag_radius * s;
        shapes.push(Shape::Ellipse {
            cx: cx + width(torso_a, torso_b) * s * (0.6 + 0.4 * side) + 0.6 * r,
            cy: hip_y - 0.04 * s + bob,
            rx: r,
            ry: 1.2 * r,
        });
    }
    shapes
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Deterministic synthetic dataset: every subject walks all ten captures at
/// every requested view. Frames are rendered on a larger canvas and pass
/// through [`preprocess_silhouette`] like real data.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<DatasetIndex> {
    spec.validate()?;
    let captures = Capture::all();
    let mut jobs = Vec::new();
    for s in 0..spec.subjects {
        for (ci, &capture) in captures.iter().enumerate() {
            for &view in &spec.views {
                jobs.push((s, ci, capture, view));
            }
        }
    }
    let sequences: Vec<Result<GaitSequence>> = jobs
        .par_iter()
        .map(|&(s, ci, capture, view)| {
            let walker = Walker::draw(&mut stream_rng(seed, s as u64));
            let key = ((s as u64) << 16) | ((ci as u64) << 8) | u64::from(view / 18);
            let mut rng = stream_rng(seed ^ 0x5eed_0f_5eed, key);
            let start = rng.gen_range(0.0..2.0 * PI);
            let speed = 2.0 * PI / (walker.period * rng.gen_range(0.93..1.07));
            let drift = rng.gen_range(-3.0..3.0);
            let frames = (0..spec.frames)
                .map(|f| {
                    let jitter = drift * f as f64 / spec.frames as f64;
                    let shapes = pose(&walker, capture, &spec.effects, view, start + speed * f as f64, jitter);
                    preprocess_silhouette(&render(&shapes))
                })
                .collect::<Result<Vec<Frame>>>()?;
            Ok(GaitSequence {
                subject: format!("{:03}", s + 1),
                capture,
                view,
                source: FrameSource::Memory(frames.into()),
            })
        })
        .collect();
    Ok(DatasetIndex::from_sequences(sequences.into_iter().collect::<Result<_>>()?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub generator: String,
    pub seed: u64,
    pub spec: SynthSpec,
}

pub const SYNTH_MANIFEST: &str = "synth.json";

/// Writes `index` in the CASIA-B layout (frames `000.png`, `001.png`, ...).
pub fn export_dataset(index: &DatasetIndex, root: &Path) -> Result<()> {
    index.sequences.par_iter().try_for_each(|seq| {
        let dir = root
            .join(&seq.subject)
            .join(seq.capture.to_string())
            .join(format!("{:03}", seq.view));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (i, frame) in seq.load()?.iter().enumerate() {
            let path = dir.join(format!("{i:03}.png"));
            frame.to_image().save(&path).map_err(|e| Error::Image { path, source: e })?;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob_frame(cx: usize) -> Frame {
        // spans all 64 rows; centroid column exactly cx
        let mut px = vec![0u8; FRAME_HEIGHT * FRAME_WIDTH];
        for y in 0..FRAME_HEIGHT {
            let half = 2 + (y % 7) / 2;
            for x in cx - half..=cx + half {
                px[y * FRAME_WIDTH + x] = 255;
            }
        }
        Frame::from_pixels(px).unwrap()
    }

    #[test]
    fn capture_names() {
        let names: Vec<String> = Capture::all().iter().map(|c| c.to_string()).collect();
        assert_eq!(
            names,
            ["bg-01", "bg-02", "cl-01", "cl-02", "nm-01", "nm-02", "nm-03", "nm-04", "nm-05", "nm-06"]
        );
        assert!("xx-99".parse::<Capture>().is_err());
        assert!("nm-07".parse::<Capture>().is_err());
        assert!("nm-1".parse::<Capture>().is_err());
        assert_eq!("cl-02".parse::<Capture>().unwrap(), Capture::new(Condition::Cl, 2).unwrap());
    }

    #[test]
    fn views_parse() {
        assert_eq!(parse_view("090").unwrap(), 90);
        assert!(parse_view("90").is_err());
        assert!(parse_view("091").is_err());
    }

    #[test]
    fn conformant_frame_is_unchanged() {
        let f = blob_frame(22);
        assert_eq!(preprocess_silhouette(&f.to_image()).unwrap(), f);
    }

    #[test]
    fn doubled_frame_round_trips() {
        let f = blob_frame(22);
        let big = image::imageops::resize(&f.to_image(), 88, 128, image::imageops::FilterType::Nearest);
        assert_eq!(preprocess_silhouette(&big).unwrap(), f);
    }

    #[test]
    fn off_centre_frame_is_recentred() {
        let f = preprocess_silhouette(&blob_frame(10).to_image()).unwrap();
        assert_eq!(f, blob_frame(22));
    }

    #[test]
    fn empty_image_is_rejected() {
        assert!(matches!(
            preprocess_silhouette(&GrayImage::new(30, 40)),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn single_row_silhouette() {
        let mut img = GrayImage::new(10, 5);
        img.put_pixel(4, 2, image::Luma([200]));
        // one pixel scaled to 64 rows keeps its aspect: a 64x64 block
        let f = preprocess_silhouette(&img).unwrap();
        assert!(f.pixels().iter().all(|&p| p == 200));
    }

    #[test]
    fn frame_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(sample_frames(30, 30, &mut rng).unwrap(), (0..30).collect::<Vec<_>>());
        let idx = sample_frames(100, 30, &mut rng).unwrap();
        assert_eq!(idx.len(), 30);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        let idx = sample_frames(10, 30, &mut rng).unwrap();
        assert_eq!(idx.len(), 30);
        assert!(idx.windows(2).all(|w| w[0] <= w[1]) && idx.iter().all(|&i| i < 10));
        assert!(sample_frames(0, 3, &mut rng).is_err());
    }

    #[test]
    fn split_rules() {
        let seqs = |n: usize| {
            DatasetIndex::from_sequences(
                (0..n)
                    .map(|s| GaitSequence {
                        subject: format!("{:03}", s + 1),
                        capture: Capture::new(Condition::Nm, 1).unwrap(),
                        view: 90,
                        source: FrameSource::Memory(vec![blob_frame(22)].into()),
                    })
                    .collect(),
            )
        };
        let (tr, te) = split_lt(&seqs(124), SplitRule::Auto).unwrap();
        assert_eq!((tr.subjects.len(), te.subjects.len()), (74, 50));
        assert_eq!(tr.subjects.last().unwrap(), "074");
        let (tr, te) = split_lt(&seqs(20), SplitRule::Auto).unwrap();
        assert_eq!((tr.subjects.len(), te.subjects.len()), (12, 8));
        assert!(split_lt(&seqs(20), SplitRule::Lt).is_err());
        assert!(split_lt(&seqs(1), SplitRule::Auto).is_err());
        let (tr, te) = split_lt(&seqs(2), SplitRule::Fraction).unwrap();
        assert_eq!((tr.subjects.len(), te.subjects.len()), (1, 1));
    }

    #[test]
    fn synthetic_set_is_deterministic_and_complete() {
        let spec = SynthSpec::new(2, &[36, 90], 8);
        let a = synth_dataset(&spec, 9).unwrap();
        let b = synth_dataset(&spec, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.subjects, ["001", "002"]);
        assert_eq!(a.sequences.len(), 2 * 10 * 2);
        for seq in &a.sequences {
            let frames = seq.load().unwrap();
            assert_eq!(frames.len(), 8);
            for f in frames.iter() {
                assert_eq!(&preprocess_silhouette(&f.to_image()).unwrap(), f, "{}", seq.label());
            }
        }
        let c = synth_dataset(&spec, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synth_spec_validation() {
        assert!(SynthSpec::new(1, &[90], 8).validate().is_err());
        assert!(SynthSpec::new(2, &[91], 8).validate().is_err());
        assert!(SynthSpec::new(2, &[90, 90], 8).validate().is_err());
        assert!(SynthSpec::new(2, &[90], 7).validate().is_err());
        assert!(SynthSpec::new(2, &[0, 180], 8).validate().is_ok());
    }
}
