//! Batch-all triplet training of the backbone through the HD head.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{backbone_backward, backbone_forward, init_params, BackboneConfig, FEATURE_HEIGHT};
use crate::checkpoint::Checkpoint;
use crate::data::{sample_frames, DatasetIndex};
use crate::error::{Error, Result};
use crate::hd::{hd_backward, hd_forward, HdConfig, HdRecord, MaskScope, Mode, Structure, WIDTH_AXIS};
use crate::optim::adam_step;
use crate::tensor::{add, reduce_max, reduce_mean, AddRecord, ReduceMaxRecord, ReduceMeanRecord, Tensor4};

/// Training configuration. The JSON form is flat and rejects unknown keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub margin: f64,
    /// Subjects per batch.
    pub batch_p: usize,
    /// Sequences per subject.
    pub batch_k: usize,
    pub frame_number: usize,
    pub iterations: usize,
    pub seed: u64,
    pub structure: Structure,
    pub drop_number: usize,
    pub mask_scope: MaskScope,
    pub rescale: bool,
    pub widths: Vec<usize>,
    pub kernel_size: usize,
    pub slope: f64,
    pub mgp_branch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let bb = BackboneConfig::default();
        Self {
            learning_rate: 0.001,
            margin: 0.2,
            batch_p: 11,
            batch_k: 16,
            frame_number: 30,
            iterations: 500,
            seed: 0,
            structure: Structure::Consecutive,
            drop_number: 16,
            mask_scope: MaskScope::default(),
            rescale: false,
            widths: bb.widths,
            kernel_size: bb.kernel_size,
            slope: bb.slope,
            mgp_branch: bb.mgp_branch,
        }
    }
}

impl TrainConfig {
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            widths: self.widths.clone(),
            kernel_size: self.kernel_size,
            slope: self.slope,
            mgp_branch: self.mgp_branch,
        }
    }

    pub fn hd(&self, mode: Mode) -> HdConfig {
        HdConfig {
            structure: self.structure,
            drop_number: self.drop_number,
            mode,
            mask_scope: self.mask_scope,
            rescale: self.rescale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return bad(format!("margin must be positive, got {}", self.margin));
        }
        if self.batch_p < 2 || self.batch_k < 2 {
            return bad(format!(
                "batch_p and batch_k must be at least 2, got {}x{}",
                self.batch_p, self.batch_k
            ));
        }
        if self.frame_number == 0 {
            return bad("frame_number must be positive".into());
        }
        if self.drop_number > FEATURE_HEIGHT {
            return bad(format!(
                "drop_number {} exceeds the feature height {FEATURE_HEIGHT}",
                self.drop_number
            ));
        }
        self.backbone().validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// batches
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct PkBatch {
    /// Position of each sequence's subject in the subject list.
    pub labels: Vec<usize>,
    /// Index of each sequence in the dataset.
    pub sequences: Vec<usize>,
    pub frame_indices: Vec<Vec<usize>>,
    pub inputs: Vec<Vec<Tensor4>>,
}

/// Draws `p` distinct subjects, `k` sequences each (with replacement only
/// when a subject has fewer than `k`) and `frame_number` frames per sequence.
pub fn sample_pk_batch<R: Rng + ?Sized>(
    data: &DatasetIndex,
    groups: &[(String, Vec<usize>)],
    p: usize,
    k: usize,
    frame_number: usize,
    rng: &mut R,
) -> Result<PkBatch> {
    let usable: Vec<usize> = (0..groups.len()).filter(|&g| !groups[g].1.is_empty()).collect();
    if usable.len() < p {
        return Err(Error::Data(format!(
            "batch needs {p} subjects with sequences, training set has {}",
            usable.len()
        )));
    }
    let mut batch = PkBatch {
        labels: Vec::with_capacity(p * k),
        sequences: Vec::with_capacity(p * k),
        frame_indices: Vec::with_capacity(p * k),
        inputs: Vec::with_capacity(p * k),
    };
    for pick in index::sample(rng, usable.len(), p) {
        let g = usable[pick];
        let seqs = &groups[g].1;
        let chosen: Vec<usize> = if seqs.len() >= k {
            index::sample(rng, seqs.len(), k).into_iter().map(|i| seqs[i]).collect()
        } else {
            (0..k).map(|_| seqs[rng.gen_range(0..seqs.len())]).collect()
        };
        for s in chosen {
            let frames = data.sequences[s].load()?;
            let idx = sample_frames(frames.len(), frame_number, rng)?;
            batch.inputs.push(idx.iter().map(|&i| frames[i].to_tensor()).collect());
            batch.frame_indices.push(idx);
            batch.labels.push(g);
            batch.sequences.push(s);
        }
    }
    Ok(batch)
}

// ---------------------------------------------------------------------------
// distances and loss
// ---------------------------------------------------------------------------

/// Row-major `n x n` Euclidean distances between the rows of `features`.
pub fn pairwise_euclidean(features: &[f64], dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || features.len() % dim != 0 {
        return Err(Error::shape(
            "pairwise_euclidean",
            format!("{} values do not form rows of {dim}", features.len()),
        ));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite feature".into()));
    }
    let n = features.len() / dim;
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        let fi = &features[i * dim..(i + 1) * dim];
        for j in i + 1..n {
            let fj = &features[j * dim..(j + 1) * dim];
            let s: f64 = fi.iter().zip(fj).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = s.sqrt();
            d[j * n + i] = d[i * n + j];
        }
    }
    Ok(d)
}

/// Gradient of a scalar with respect to the features given its gradient
/// with respect to the distance matrix. Coincident pairs contribute zero.
pub fn pairwise_euclidean_backward(features: &[f64], dim: usize, dist: &[f64], grad: &[f64]) -> Result<Vec<f64>> {
    let n = features.len() / dim;
    if dist.len() != n * n || grad.len() != n * n {
        return Err(Error::shape(
            "pairwise_euclidean backward",
            format!("{n} rows but distance/gradient sizes {} and {}", dist.len(), grad.len()),
        ));
    }
    let mut out = vec![0.0; features.len()];
    for i in 0..n {
        for j in 0..n {
            let d = dist[i * n + j];
            let g = grad[i * n + j] + grad[j * n + i];
            if i == j || d == 0.0 || g == 0.0 {
                continue;
            }
            let scale = g / d;
            for t in 0..dim {
                out[i * dim + t] += scale * (features[i * dim + t] - features[j * dim + t]);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletLoss {
    pub loss: f64,
    pub active: usize,
    pub valid: usize,
    /// Gradient with respect to the distance matrix.
    pub grad: Vec<f64>,
    /// Smallest `|margin + d_ap - d_an|` over valid triplets; the loss is not
    /// differentiable where this is zero.
    pub hinge_gap: f64,
}

/// Mean hinge over margin-violating (anchor, positive, negative) triplets.
pub fn triplet_loss_batch_all(dist: &[f64], labels: &[usize], margin: f64) -> Result<TripletLoss> {
    let n = labels.len();
    if dist.len() != n * n {
        return Err(Error::shape(
            "triplet_loss_batch_all",
            format!("{n} labels but {} distances", dist.len()),
        ));
    }
    let mut sum = 0.0;
    let mut active = Vec::new();
    let mut valid = 0;
    let mut hinge_gap = f64::INFINITY;
    for a in 0..n {
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for q in 0..n {
                if labels[q] == labels[a] {
                    continue;
                }
                valid += 1;
                let term = margin + dist[a * n + p] - dist[a * n + q];
                hinge_gap = hinge_gap.min(term.abs());
                if term > 0.0 {
                    sum += term;
                    active.push((a * n + p, a * n + q));
                }
            }
        }
    }
    if valid == 0 {
        return Err(Error::InvalidArgument(
            "batch has no valid triplet (needs two labels, one of them repeated)".into(),
        ));
    }
    let mut grad = vec![0.0; n * n];
    let loss = if active.is_empty() {
        0.0
    } else {
        let w = 1.0 / active.len() as f64;
        for &(ap, an) in &active {
            grad[ap] += w;
            grad[an] -= w;
        }
        sum / active.len() as f64
    };
    Ok(TripletLoss {
        loss,
        active: active.len(),
        valid,
        grad,
        hinge_gap,
    })
}

// ---------------------------------------------------------------------------
// heads
// ---------------------------------------------------------------------------

/// What turns `In` into the per-sequence feature.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Head {
    /// Width max + mean with horizontal dropout in training.
    #[default]
    Hd,
    /// Width max + mean with no mask stage at all.
    WidthPool,
}

pub enum HeadRecord {
    Hd(HdRecord),
    WidthPool(ReduceMaxRecord, ReduceMeanRecord, AddRecord),
}

impl Head {
    pub fn forward<R: Rng + ?Sized>(&self, input: &Tensor4, cfg: &HdConfig, rng: &mut R) -> Result<(Tensor4, HeadRecord)> {
        match self {
            Head::Hd => {
                let out = hd_forward(input, cfg, rng)?;
                Ok((out.sum, HeadRecord::Hd(out.record)))
            }
            Head::WidthPool => {
                let (mx, rmax) = reduce_max(input, WIDTH_AXIS)?;
                let (mean, rmean) = reduce_mean(input, WIDTH_AXIS)?;
                let (sum, radd) = add(&mx, &mean)?;
                Ok((sum, HeadRecord::WidthPool(rmax, rmean, radd)))
            }
        }
    }
}

impl HeadRecord {
    pub fn backward(&self, grad: &Tensor4) -> Result<Tensor4> {
        match self {
            HeadRecord::Hd(r) => hd_backward(r, grad),
            HeadRecord::WidthPool(rmax, rmean, radd) => {
                let (ga, gb) = radd.backward(grad)?;
                let mut g = rmax.backward(&ga)?;
                g.add_assign(&rmean.backward(&gb)?)?;
                Ok(g)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// loop
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub active_triplets: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub trace: Vec<TraceRow>,
}

/// Independent random streams derived from the run seed.
pub(crate) mod streams {
    pub const INIT: u64 = 0;
    pub const BATCH: u64 = 1;
    pub const MASK: u64 = 2;
}

pub(crate) fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn train_loop(cfg: &TrainConfig, train: &DatasetIndex) -> Result<TrainOutput> {
    train_with_head(cfg, train, Head::Hd)
}

/// Trains from the seeded initialisation. Batches, masks and parameters use
/// separate random streams, so the mask stage never shifts batch sampling.
pub fn train_with_head(cfg: &TrainConfig, train: &DatasetIndex, head: Head) -> Result<TrainOutput> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let params = init_params(&cfg.backbone(), &mut seeded(cfg.seed, streams::INIT))?;
    let mut ckpt = Checkpoint::new(params);
    let mut batch_rng = seeded(cfg.seed, streams::BATCH);
    let mut mask_rng = seeded(cfg.seed, streams::MASK);
    let groups = train.by_subject();
    let hd_cfg = cfg.hd(Mode::Train);
    let mut trace = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let batch = sample_pk_batch(train, &groups, cfg.batch_p, cfg.batch_k, cfg.frame_number, &mut batch_rng)?;
        let (feat, bb_rec) = backbone_forward(&batch.inputs, &ckpt.params)?;
        let (sum, head_rec) = head.forward(&feat, &hd_cfg, &mut mask_rng)?;
        let dim = sum.shape().c * sum.shape().h;
        let dist = pairwise_euclidean(sum.data(), dim).map_err(|e| diagnose(e, it, train, &batch))?;
        let loss = triplet_loss_batch_all(&dist, &batch.labels, cfg.margin)?;
        if !loss.loss.is_finite() {
            return Err(diagnose(Error::Numeric(format!("loss {}", loss.loss)), it, train, &batch));
        }
        let g_feat = pairwise_euclidean_backward(sum.data(), dim, &dist, &loss.grad)?;
        let g_sum = Tensor4::new(sum.shape(), g_feat)?;
        let g_in = head_rec.backward(&g_sum)?;
        let grads = backbone_backward(&ckpt.params, &bb_rec, &g_in, false)?;
        let mut tensors = ckpt.params.tensors_mut();
        adam_step(&mut tensors, &grads.params, &mut ckpt.optimizer, cfg.learning_rate)
            .map_err(|e| diagnose(e, it, train, &batch))?;
        trace.push(TraceRow {
            iteration: it,
            loss: loss.loss,
            active_triplets: loss.active,
        });
    }
    Ok(TrainOutput {
        checkpoint: ckpt,
        trace,
    })
}

fn diagnose(e: Error, iteration: usize, data: &DatasetIndex, batch: &PkBatch) -> Error {
    let members: Vec<String> = batch.sequences.iter().map(|&s| data.sequences[s].label()).collect();
    Error::Numeric(format!("iteration {iteration}: {e}; batch [{}]", members.join(", ")))
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("iteration,loss,active_triplets\n");
    for r in trace {
        writeln!(out, "{},{},{}", r.iteration, r.loss, r.active_triplets).expect("write to string");
    }
    out
}

pub fn write_trace(trace: &[TraceRow], path: &Path) -> Result<()> {
    fs::write(path, trace_csv(trace)).map_err(|e| Error::io(path, e))
}

/// Mean loss of the first and last `window` iterations.
pub fn loss_windows(trace: &[TraceRow], window: usize) -> Option<(f64, f64)> {
    if window == 0 || trace.len() < window {
        return None;
    }
    let mean = |rows: &[TraceRow]| rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64;
    Some((mean(&trace[..window]), mean(&trace[trace.len() - window..])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthSpec};

    #[test]
    fn distances() {
        let d = pairwise_euclidean(&[0.0, 0.0, 3.0, 4.0, 0.0, 0.0], 2).unwrap();
        assert_eq!(d, vec![0.0, 5.0, 0.0, 5.0, 0.0, 5.0, 0.0, 5.0, 0.0]);
        assert!(pairwise_euclidean(&[1.0, 2.0, 3.0], 2).is_err());
    }

    #[test]
    fn separated_clusters_have_zero_loss() {
        // labels 0,0,1,1: intra 0, inter 1
        let d = [0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let l = triplet_loss_batch_all(&d, &[0, 0, 1, 1], 0.2).unwrap();
        assert_eq!((l.loss, l.active, l.valid), (0.0, 0, 8));
        assert!(l.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn single_triplet_hinge() {
        // a=0, p=1 (same label), n=2
        let mut d = [0.0; 9];
        let mut set = |i: usize, j: usize, v: f64| {
            d[i * 3 + j] = v;
            d[j * 3 + i] = v;
        };
        set(0, 1, 1.0);
        set(0, 2, 0.5);
        set(1, 2, 5.0);
        let l = triplet_loss_batch_all(&d, &[0, 0, 1], 0.2).unwrap();
        // triplets (0,1,2): 0.7 and (1,0,2): max(0, 0.2 + 1 - 5) = 0
        assert_eq!(l.valid, 2);
        assert_eq!(l.active, 1);
        assert!((l.loss - 0.7).abs() < 1e-15);
    }

    #[test]
    fn no_triplet_is_rejected() {
        assert!(triplet_loss_batch_all(&[0.0; 4], &[0, 1], 0.2).is_err());
        assert!(triplet_loss_batch_all(&[0.0; 4], &[0, 0], 0.2).is_err());
    }

    #[test]
    fn config_defaults_and_rejections() {
        let cfg = TrainConfig::from_json("{}").unwrap();
        assert_eq!(cfg.learning_rate, 0.001);
        assert_eq!(cfg.margin, 0.2);
        assert_eq!(cfg.frame_number, 30);
        assert_eq!(cfg.structure, Structure::Consecutive);
        let err = TrainConfig::from_json(r#"{"learning_rat": 0.1}"#).unwrap_err();
        assert!(err.to_string().contains("learning_rat"), "{err}");
        assert!(TrainConfig::from_json(r#"{"drop_number": 33}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"drop_number": 32}"#).is_ok());
        assert!(TrainConfig::from_json(r#"{"batch_k": 1}"#).is_err());
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(TrainConfig::from_json(&text).unwrap(), cfg);
    }

    fn tiny() -> (TrainConfig, DatasetIndex) {
        let data = synth_dataset(&SynthSpec::new(3, &[90], 8), 5).unwrap();
        let cfg = TrainConfig {
            batch_p: 2,
            batch_k: 2,
            frame_number: 4,
            iterations: 3,
            widths: vec![2, 3],
            seed: 11,
            ..TrainConfig::default()
        };
        (cfg, data)
    }

    #[test]
    fn pk_batch_composition() {
        let (_, data) = tiny();
        let groups = data.by_subject();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_pk_batch(&data, &groups, 2, 2, 4, &mut rng).unwrap();
        assert_eq!(b.labels.len(), 4);
        assert_eq!(b.labels[0], b.labels[1]);
        assert_eq!(b.labels[2], b.labels[3]);
        assert_ne!(b.labels[0], b.labels[2]);
        assert!(b.inputs.iter().all(|s| s.len() == 4));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let again = sample_pk_batch(&data, &groups, 2, 2, 4, &mut rng).unwrap();
        assert_eq!(b.sequences, again.sequences);
        assert_eq!(b.frame_indices, again.frame_indices);
        assert!(sample_pk_batch(&data, &groups, 4, 2, 4, &mut rng).is_err());
    }

    #[test]
    fn zero_iterations_return_the_initialisation() {
        let (cfg, data) = tiny();
        let cfg = TrainConfig { iterations: 0, ..cfg };
        let out = train_loop(&cfg, &data).unwrap();
        let init = init_params(&cfg.backbone(), &mut seeded(cfg.seed, streams::INIT)).unwrap();
        assert_eq!(out.checkpoint.params, init);
        assert!(out.trace.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let (cfg, data) = tiny();
        let a = train_loop(&cfg, &data).unwrap();
        let b = train_loop(&cfg, &data).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.checkpoint.encode().unwrap(), b.checkpoint.encode().unwrap());
        assert_eq!(a.checkpoint.optimizer.step, 3);
        assert!(a.trace.iter().all(|r| r.loss >= 0.0));
    }

    #[test]
    fn trace_format() {
        let rows = [TraceRow {
            iteration: 0,
            loss: 0.25,
            active_triplets: 7,
        }];
        assert_eq!(trace_csv(&rows), "iteration,loss,active_triplets\n0,0.25,7\n");
    }
}
