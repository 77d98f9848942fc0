//! Frame encoder and set pooling producing the HD layer input `In(n, c, 32, w)`.
//!
//! Each 64x44 silhouette runs through a stack of conv -> leaky ReLU (-> 2x2
//! max pool) stages; the first stage pools, the rest keep the 32x22 grid with
//! "same" padding. A sequence is treated as an unordered set: its frame maps
//! are merged by an elementwise maximum. With `mgp_branch` on, the set-pooled
//! first-stage map also feeds one extra conv stage whose output is
//! concatenated along channels.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv2d, leaky_relu, maxpool2d, Conv2dRecord, LeakyReluRecord, MaxPoolRecord, Shape4, Tensor4};

pub const FRAME_HEIGHT: usize = 64;
pub const FRAME_WIDTH: usize = 44;
/// Height of the backbone output, and therefore the largest drop-number.
pub const FEATURE_HEIGHT: usize = 32;
pub const FEATURE_WIDTH: usize = FRAME_WIDTH / 2;

pub fn frame_shape() -> Shape4 {
    Shape4::new(1, 1, FRAME_HEIGHT, FRAME_WIDTH)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub widths: Vec<usize>,
    pub kernel_size: usize,
    pub slope: f64,
    pub mgp_branch: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            widths: vec![8, 16, 32],
            kernel_size: 3,
            slope: 0.01,
            mgp_branch: false,
        }
    }
}

impl BackboneConfig {
    pub fn with_widths(widths: &[usize]) -> Self {
        Self {
            widths: widths.to_vec(),
            ..Self::default()
        }
    }

    /// Channels of `In`.
    pub fn output_channels(&self) -> usize {
        let last = self.widths.last().copied().unwrap_or(0);
        if self.mgp_branch {
            2 * last
        } else {
            last
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Config("backbone needs at least one stage width".into()));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config(format!("zero channel width in {:?}", self.widths)));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!("kernel_size {} must be odd", self.kernel_size)));
        }
        if !(0.0..1.0).contains(&self.slope) {
            return Err(Error::Config(format!("slope {} outside [0, 1)", self.slope)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvStage {
    /// `(cout, cin, k, k)`.
    pub kernels: Tensor4,
    pub bias: Vec<f64>,
    pub pool: bool,
}

impl ConvStage {
    fn padding(&self) -> usize {
        (self.kernels.shape().h - 1) / 2
    }

    fn in_channels(&self) -> usize {
        self.kernels.shape().c
    }

    fn out_channels(&self) -> usize {
        self.kernels.shape().n
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub stages: Vec<ConvStage>,
    pub mgp: Option<ConvStage>,
}

fn xavier_stage<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, pool: bool, rng: &mut R) -> ConvStage {
    let fan = ((cin + cout) * k * k) as f64;
    let bound = (6.0 / fan).sqrt();
    let kernels = Tensor4::from_fn(Shape4::new(cout, cin, k, k), |_, _, _, _| rng.gen_range(-bound..=bound));
    ConvStage {
        kernels,
        bias: vec![0.0; cout],
        pool,
    }
}

/// Draws kernels uniformly from `±sqrt(6 / (fan_in + fan_out))` with zero
/// biases. Rejects configurations whose output height is not 32.
pub fn init_params<R: Rng + ?Sized>(config: &BackboneConfig, rng: &mut R) -> Result<BackboneParams> {
    config.validate()?;
    let k = config.kernel_size;
    let mut stages = Vec::with_capacity(config.widths.len());
    let mut cin = 1;
    for (i, &cout) in config.widths.iter().enumerate() {
        stages.push(xavier_stage(cin, cout, k, i == 0, rng));
        cin = cout;
    }
    let mgp = config
        .mgp_branch
        .then(|| xavier_stage(config.widths[0], *config.widths.last().unwrap(), k, false, rng));
    let params = BackboneParams {
        config: config.clone(),
        stages,
        mgp,
    };
    let (h, w) = params.output_geometry()?;
    if h != FEATURE_HEIGHT {
        return Err(Error::Config(format!(
            "backbone output height {h} (width {w}), expected {FEATURE_HEIGHT}"
        )));
    }
    Ok(params)
}

impl BackboneParams {
    /// Wraps hand-built stages, checking that channels chain.
    pub fn from_stages(config: BackboneConfig, stages: Vec<ConvStage>, mgp: Option<ConvStage>) -> Result<Self> {
        let mut cin = 1;
        for (i, s) in stages.iter().enumerate() {
            if s.in_channels() != cin || s.bias.len() != s.out_channels() {
                return Err(Error::shape(
                    "backbone",
                    format!("stage {i} kernels {} do not chain from {cin} channels", s.kernels.shape()),
                ));
            }
            cin = s.out_channels();
        }
        if let Some(m) = &mgp {
            if stages.is_empty() || m.in_channels() != stages[0].out_channels() {
                return Err(Error::shape("backbone", "mgp stage does not match first stage output"));
            }
        }
        Ok(Self { config, stages, mgp })
    }

    /// Spatial `(h, w)` of the encoded map for one 64x44 frame.
    pub fn output_geometry(&self) -> Result<(usize, usize)> {
        let (mut h, mut w) = (FRAME_HEIGHT, FRAME_WIDTH);
        for s in &self.stages {
            let k = s.kernels.shape();
            let p = s.padding();
            h = (h + 2 * p + 1).checked_sub(k.h).ok_or_else(|| Error::shape("backbone", "kernel taller than map"))?;
            w = (w + 2 * p + 1).checked_sub(k.w).ok_or_else(|| Error::shape("backbone", "kernel wider than map"))?;
            if s.pool {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::shape("backbone", format!("cannot pool a {h}x{w} map")));
                }
                h /= 2;
                w /= 2;
            }
        }
        Ok((h, w))
    }

    pub fn output_channels(&self) -> usize {
        let main = self.stages.last().map_or(1, |s| s.out_channels());
        main + self.mgp.as_ref().map_or(0, |m| m.out_channels())
    }

    fn all_stages(&self) -> impl Iterator<Item = (String, &ConvStage)> {
        self.stages
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("stage{i}"), s))
            .chain(self.mgp.iter().map(|s| ("mgp".to_string(), s)))
    }

    /// Named parameter tensors in canonical order: per stage its kernels then
    /// its bias (as `(cout, 1, 1, 1)`), the optional branch last.
    pub fn named_tensors(&self) -> Vec<(String, Shape4, &[f64])> {
        let mut out = Vec::new();
        for (name, s) in self.all_stages() {
            out.push((format!("{name}.kernels"), s.kernels.shape(), s.kernels.data()));
            out.push((format!("{name}.bias"), Shape4::new(s.bias.len(), 1, 1, 1), &s.bias[..]));
        }
        out
    }

    /// Mutable views in the order of [`BackboneParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for s in self.stages.iter_mut().chain(self.mgp.iter_mut()) {
            out.push(s.kernels.data_mut());
            out.push(&mut s.bias[..]);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, s, _)| s.len()).sum()
    }

    /// Flat copy of every parameter, canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        self.named_tensors().into_iter().flat_map(|(_, _, d)| d.iter().copied()).collect()
    }

    /// Overwrites every parameter from a flat vector.
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::shape(
                "load_flat",
                format!("{} values for {} parameters", flat.len(), self.parameter_count()),
            ));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.named_tensors().iter().map(|(_, s, _)| vec![0.0; s.len()]).collect()
    }
}

// ---------------------------------------------------------------------------
// per-frame encoding
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
struct StageRecord {
    conv: Conv2dRecord,
    relu: LeakyReluRecord,
    pool: Option<MaxPoolRecord>,
}

#[derive(Clone, Debug)]
pub struct FrameRecord {
    stages: Vec<StageRecord>,
}

pub struct FrameEncoding {
    pub output: Tensor4,
    /// First-stage output, consumed by the optional branch.
    pub tap: Option<Tensor4>,
    pub record: FrameRecord,
}

fn run_stage(stage: &ConvStage, x: &Tensor4, slope: f64) -> Result<(Tensor4, StageRecord)> {
    let (y, conv) = conv2d(x, &stage.kernels, &stage.bias, stage.padding())?;
    let (y, relu) = leaky_relu(&y, slope)?;
    let (y, pool) = if stage.pool {
        let (p, rec) = maxpool2d(&y)?;
        (p, Some(rec))
    } else {
        (y, None)
    };
    Ok((y, StageRecord { conv, relu, pool }))
}

fn check_frame(frame: &Tensor4) -> Result<()> {
    if frame.shape() != frame_shape() {
        return Err(Error::shape(
            "encode_frame",
            format!("frame {} is not {}", frame.shape(), frame_shape()),
        ));
    }
    if frame.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("frame values must lie in [0, 1]".into()));
    }
    Ok(())
}

/// Runs the conv stack on one `(1, 1, 64, 44)` frame.
pub fn encode_frame(frame: &Tensor4, params: &BackboneParams) -> Result<FrameEncoding> {
    check_frame(frame)?;
    let slope = params.config.slope;
    let mut x = frame.clone();
    let mut stages = Vec::with_capacity(params.stages.len());
    let mut tap = None;
    for (i, stage) in params.stages.iter().enumerate() {
        let (y, rec) = run_stage(stage, &x, slope)?;
        stages.push(rec);
        if i == 0 && params.mgp.is_some() {
            tap = Some(y.clone());
        }
        x = y;
    }
    Ok(FrameEncoding {
        output: x,
        tap,
        record: FrameRecord { stages },
    })
}

// ---------------------------------------------------------------------------
// set pooling
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct SetPoolRecord {
    shape: Shape4,
    /// Frame index holding the maximum at each position (first on ties).
    winner: Vec<u32>,
    frames: usize,
}

/// Elementwise maximum over equally shaped frame maps.
pub fn set_pool(maps: &[Tensor4]) -> Result<(Tensor4, SetPoolRecord)> {
    let first = maps.first().ok_or_else(|| Error::shape("set_pool", "empty frame set"))?;
    let shape = first.shape();
    if let Some(m) = maps.iter().find(|m| m.shape() != shape) {
        return Err(Error::shape("set_pool", format!("frame maps {} and {} differ", shape, m.shape())));
    }
    let mut out = first.data().to_vec();
    let mut winner = vec![0u32; out.len()];
    for (f, m) in maps.iter().enumerate().skip(1) {
        for ((o, w), &v) in out.iter_mut().zip(winner.iter_mut()).zip(m.data()) {
            if v > *o {
                *o = v;
                *w = f as u32;
            }
        }
    }
    Ok((
        Tensor4::new(shape, out)?,
        SetPoolRecord {
            shape,
            winner,
            frames: maps.len(),
        },
    ))
}

impl SetPoolRecord {
    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Gradient reaching frame `f`; `None` when the frame won nowhere.
    pub fn backward_frame(&self, upstream: &Tensor4, f: usize) -> Result<Option<Tensor4>> {
        if upstream.shape() != self.shape {
            return Err(Error::shape(
                "set_pool backward",
                format!("upstream {} vs {}", upstream.shape(), self.shape),
            ));
        }
        let f = f as u32;
        if !self.winner.contains(&f) {
            return Ok(None);
        }
        let data = self
            .winner
            .iter()
            .zip(upstream.data())
            .map(|(&w, &g)| if w == f { g } else { 0.0 })
            .collect();
        Ok(Some(Tensor4::new(self.shape, data)?))
    }

    pub fn backward(&self, upstream: &Tensor4) -> Result<Vec<Tensor4>> {
        (0..self.frames)
            .map(|f| Ok(self.backward_frame(upstream, f)?.unwrap_or_else(|| Tensor4::zeros(self.shape))))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// batch forward / backward
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
struct BranchRecord {
    pool: SetPoolRecord,
    stage: StageRecord,
}

#[derive(Clone, Debug)]
struct SequenceRecord {
    frames: Vec<FrameRecord>,
    pool: SetPoolRecord,
    branch: Option<BranchRecord>,
}

#[derive(Clone, Debug)]
pub struct BackboneRecord {
    sequences: Vec<SequenceRecord>,
    out_shape: Shape4,
}

impl BackboneRecord {
    pub fn out_shape(&self) -> Shape4 {
        self.out_shape
    }
}

pub struct BackboneGrads {
    /// Aligned with [`BackboneParams::named_tensors`].
    pub params: Vec<Vec<f64>>,
    /// Per sequence, per frame input gradients when requested.
    pub frames: Option<Vec<Vec<Tensor4>>>,
}

fn encode_sequence(frames: &[Tensor4], params: &BackboneParams) -> Result<(Tensor4, SequenceRecord)> {
    let encoded: Vec<FrameEncoding> = frames
        .par_iter()
        .map(|f| encode_frame(f, params))
        .collect::<Result<_>>()?;
    let mut outputs = Vec::with_capacity(encoded.len());
    let mut taps = Vec::new();
    let mut records = Vec::with_capacity(encoded.len());
    for e in encoded {
        outputs.push(e.output);
        taps.extend(e.tap);
        records.push(e.record);
    }
    let (pooled, pool) = set_pool(&outputs)?;
    let (feature, branch) = match &params.mgp {
        Some(stage) => {
            let (tap_pooled, tap_pool) = set_pool(&taps)?;
            let (extra, stage_rec) = run_stage(stage, &tap_pooled, params.config.slope)?;
            (
                Tensor4::concat_channels(&pooled, &extra)?,
                Some(BranchRecord {
                    pool: tap_pool,
                    stage: stage_rec,
                }),
            )
        }
        None => (pooled, None),
    };
    Ok((
        feature,
        SequenceRecord {
            frames: records,
            pool,
            branch,
        },
    ))
}

/// Encodes a batch of sequences, each given as `f` frames of `(1, 1, 64, 44)`,
/// into `In(n, c, 32, w)`.
pub fn backbone_forward(batch: &[Vec<Tensor4>], params: &BackboneParams) -> Result<(Tensor4, BackboneRecord)> {
    let first = batch.first().ok_or_else(|| Error::shape("backbone_forward", "empty batch"))?;
    let f = first.len();
    if f == 0 {
        return Err(Error::shape("backbone_forward", "sequence without frames"));
    }
    if let Some(s) = batch.iter().find(|s| s.len() != f) {
        return Err(Error::shape(
            "backbone_forward",
            format!("ragged batch: {} frames vs {f}", s.len()),
        ));
    }
    let mut features = Vec::with_capacity(batch.len());
    let mut sequences = Vec::with_capacity(batch.len());
    for seq in batch {
        let (feat, rec) = encode_sequence(seq, params)?;
        features.push(feat);
        sequences.push(rec);
    }
    let out = Tensor4::stack(&features)?;
    if out.shape().h != FEATURE_HEIGHT {
        return Err(Error::shape(
            "backbone_forward",
            format!("output {} must have height {FEATURE_HEIGHT}", out.shape()),
        ));
    }
    let out_shape = out.shape();
    Ok((out, BackboneRecord { sequences, out_shape }))
}

fn accumulate(into: &mut [Vec<f64>], from: &[Vec<f64>]) {
    for (a, b) in into.iter_mut().zip(from) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

/// Backward through one stage; returns the input gradient when asked and
/// adds kernel/bias gradients into `kernels`/`bias`.
fn stage_backward(
    rec: &StageRecord,
    upstream: Tensor4,
    want_input: bool,
    kernels: &mut [f64],
    bias: &mut [f64],
) -> Result<Option<Tensor4>> {
    let g = match &rec.pool {
        Some(p) => p.backward(&upstream)?,
        None => upstream,
    };
    let g = rec.relu.backward(&g)?;
    let grads = rec.conv.backward_with(&g, want_input)?;
    for (a, b) in kernels.iter_mut().zip(grads.kernels.data()) {
        *a += b;
    }
    for (a, b) in bias.iter_mut().zip(&grads.bias) {
        *a += b;
    }
    Ok(grads.input)
}

fn frame_backward(
    params: &BackboneParams,
    record: &FrameRecord,
    upstream: Tensor4,
    tap_grad: Option<Tensor4>,
    want_frame_grad: bool,
) -> Result<(Vec<Vec<f64>>, Option<Tensor4>)> {
    let mut grads = params.zero_grads();
    let mut g = upstream;
    let mut tap_grad = tap_grad;
    if record.stages.len() == 1 {
        if let Some(t) = tap_grad.take() {
            g.add_assign(&t)?;
        }
    }
    for i in (0..record.stages.len()).rev() {
        let want_input = i > 0 || want_frame_grad;
        let (head, tail) = grads.split_at_mut(2 * i + 1);
        let next = stage_backward(&record.stages[i], g, want_input, &mut head[2 * i], &mut tail[0])?;
        match next {
            Some(mut next) => {
                if i == 1 {
                    if let Some(t) = tap_grad.take() {
                        next.add_assign(&t)?;
                    }
                }
                g = next;
            }
            None => return Ok((grads, None)),
        }
    }
    Ok((grads, Some(g)))
}

/// Gradients of all parameters (and optionally of the input frames) given
/// the gradient of `In`.
pub fn backbone_backward(
    params: &BackboneParams,
    record: &BackboneRecord,
    grad: &Tensor4,
    want_frame_grads: bool,
) -> Result<BackboneGrads> {
    if grad.shape() != record.out_shape {
        return Err(Error::shape(
            "backbone_backward",
            format!("gradient {} vs output {}", grad.shape(), record.out_shape),
        ));
    }
    let s = record.out_shape;
    let sample_shape = Shape4::new(1, s.c, s.h, s.w);
    let main_c = params.stages.last().map_or(1, |st| st.out_channels());
    let mgp_offset = 2 * params.stages.len();

    let mut total = params.zero_grads();
    let mut frame_grads = want_frame_grads.then(Vec::new);

    for (n, seq) in record.sequences.iter().enumerate() {
        let g = Tensor4::new(sample_shape, grad.sample(n).to_vec())?;
        let (g_main, tap_grads) = match (&seq.branch, &params.mgp) {
            (Some(branch), Some(_)) => {
                let (g_main, g_extra) = g.split_channels(main_c)?;
                let (kernels, bias) = total[mgp_offset..].split_at_mut(1);
                let g_tap = stage_backward(&branch.stage, g_extra, true, &mut kernels[0], &mut bias[0])?
                    .expect("input gradient requested");
                (g_main, Some((branch.pool.clone(), g_tap)))
            }
            _ => (g, None),
        };

        let per_frame: Vec<(Vec<Vec<f64>>, Option<Tensor4>)> = seq
            .frames
            .par_iter()
            .enumerate()
            .map(|(f, frame_rec)| {
                let up = seq.pool.backward_frame(&g_main, f)?;
                let tap = match &tap_grads {
                    Some((pool, g_tap)) => pool.backward_frame(g_tap, f)?,
                    None => None,
                };
                if up.is_none() && tap.is_none() && !want_frame_grads {
                    return Ok((Vec::new(), None));
                }
                let up = up.unwrap_or_else(|| Tensor4::zeros(seq.pool.shape));
                frame_backward(params, frame_rec, up, tap, want_frame_grads)
            })
            .collect::<Result<_>>()?;

        let mut seq_frames = Vec::new();
        for (grads, frame_grad) in per_frame {
            if !grads.is_empty() {
                accumulate(&mut total, &grads);
            }
            if want_frame_grads {
                seq_frames.push(frame_grad.expect("frame gradient requested"));
            }
        }
        if let Some(fg) = frame_grads.as_mut() {
            fg.push(seq_frames);
        }
    }
    Ok(BackboneGrads {
        params: total,
        frames: frame_grads,
    })
}
