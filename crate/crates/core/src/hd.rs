//! Horizontal dropout on width-reduced feature maps.
//!
//! The backbone feature map `In(n, c, h, w)` is reduced along width by both
//! max and mean. During training a set of `d` horizontal rows is zeroed in
//! both reductions, across every channel, and the two are summed into the
//! per-sample feature `Sum(n, c, h)`.
//!
//! * CHD drops `d` consecutive rows starting at a random row, wrapping past
//!   the bottom back to the top.
//! * SHD drops `d` distinct rows chosen uniformly.
//!
//! Because max and mean of an all-zero row are both zero, masking the input,
//! masking the two reductions, or masking their sum all give the same result;
//! [`placement_variant`] exposes the three placements.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{add, reduce_max, reduce_mean, AddRecord, ReduceMaxRecord, ReduceMeanRecord, Shape4, Tensor4};

/// Width axis of an `(n, c, h, w)` map.
pub const WIDTH_AXIS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Structure {
    #[serde(rename = "CHD")]
    Consecutive,
    #[serde(rename = "SHD")]
    Sporadic,
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Structure::Consecutive => "CHD",
            Structure::Sporadic => "SHD",
        })
    }
}

impl FromStr for Structure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CHD" => Ok(Structure::Consecutive),
            "SHD" => Ok(Structure::Sporadic),
            _ => Err(Error::Config(format!("unknown dropout structure `{s}` (CHD or SHD)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskScope {
    /// An independent mask for every sample of the batch.
    PerSample,
    /// One mask shared by the whole batch, so every pairwise distance in the
    /// batch compares the same rows.
    #[default]
    PerBatch,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DropMask {
    height: usize,
    structure: Structure,
    /// Dropped row indices in ascending order.
    rows: Vec<usize>,
    start: Option<usize>,
}

impl DropMask {
    /// The CHD mask of `drop_number` rows beginning at `start`, modulo `height`.
    pub fn consecutive(height: usize, drop_number: usize, start: usize) -> Result<Self> {
        validate(height, drop_number)?;
        if start >= height {
            return Err(Error::InvalidArgument(format!(
                "start row {start} outside height {height}"
            )));
        }
        let rows: BTreeSet<usize> = (0..drop_number).map(|i| (start + i) % height).collect();
        Ok(Self {
            height,
            structure: Structure::Consecutive,
            rows: rows.into_iter().collect(),
            start: Some(start),
        })
    }

    /// An SHD mask over an explicit row set.
    pub fn sporadic(height: usize, rows: impl IntoIterator<Item = usize>) -> Result<Self> {
        let rows: BTreeSet<usize> = rows.into_iter().collect();
        if let Some(&r) = rows.iter().find(|&&r| r >= height) {
            return Err(Error::InvalidArgument(format!("row {r} outside height {height}")));
        }
        validate(height, rows.len())?;
        Ok(Self {
            height,
            structure: Structure::Sporadic,
            rows: rows.into_iter().collect(),
            start: None,
        })
    }

    pub fn empty(height: usize, structure: Structure) -> Self {
        Self {
            height,
            structure,
            rows: Vec::new(),
            start: None,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn structure(&self) -> Structure {
        self.structure
    }

    pub fn drop_number(&self) -> usize {
        self.rows.len()
    }

    pub fn dropped_rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn start(&self) -> Option<usize> {
        self.start
    }

    pub fn is_dropped(&self, row: usize) -> bool {
        self.rows.binary_search(&row).is_ok()
    }

    /// Keep flags per row.
    pub fn keep_flags(&self) -> Vec<bool> {
        let mut keep = vec![true; self.height];
        for &r in &self.rows {
            keep[r] = false;
        }
        keep
    }
}

fn validate(height: usize, drop_number: usize) -> Result<()> {
    if height == 0 {
        return Err(Error::InvalidArgument("mask height must be at least 1".into()));
    }
    if drop_number > height {
        return Err(Error::InvalidArgument(format!(
            "drop-number {drop_number} exceeds height {height}"
        )));
    }
    Ok(())
}

/// Draws a CHD mask: a uniform start row, then `d` rows downward with wrap-around.
pub fn make_chd_mask<R: Rng + ?Sized>(height: usize, drop_number: usize, rng: &mut R) -> Result<DropMask> {
    validate(height, drop_number)?;
    if drop_number == 0 {
        return Ok(DropMask::empty(height, Structure::Consecutive));
    }
    let start = rng.gen_range(0..height);
    DropMask::consecutive(height, drop_number, start)
}

/// Draws an SHD mask: `d` distinct rows uniformly without replacement.
pub fn make_shd_mask<R: Rng + ?Sized>(height: usize, drop_number: usize, rng: &mut R) -> Result<DropMask> {
    validate(height, drop_number)?;
    if drop_number == 0 {
        return Ok(DropMask::empty(height, Structure::Sporadic));
    }
    DropMask::sporadic(height, index::sample(rng, height, drop_number).into_iter())
}

pub fn make_mask<R: Rng + ?Sized>(
    structure: Structure,
    height: usize,
    drop_number: usize,
    rng: &mut R,
) -> Result<DropMask> {
    match structure {
        Structure::Consecutive => make_chd_mask(height, drop_number, rng),
        Structure::Sporadic => make_shd_mask(height, drop_number, rng),
    }
}

/// Multiplier applied to kept rows when rescaling is on.
fn keep_scale(mask: &DropMask, rescale: bool) -> f64 {
    let kept = mask.height - mask.drop_number();
    if rescale && kept > 0 && kept < mask.height {
        mask.height as f64 / kept as f64
    } else {
        1.0
    }
}

fn mask_for(masks: &[DropMask], n: usize) -> &DropMask {
    if masks.len() == 1 {
        &masks[0]
    } else {
        &masks[n]
    }
}

fn check_masks(op: &'static str, shape: Shape4, masks: &[DropMask]) -> Result<()> {
    if masks.len() != 1 && masks.len() != shape.n {
        return Err(Error::shape(
            op,
            format!("{} masks for a batch of {} (expected 1 or {})", masks.len(), shape.n, shape.n),
        ));
    }
    if let Some(m) = masks.iter().find(|m| m.height != shape.h) {
        return Err(Error::shape(
            op,
            format!("mask height {} does not match tensor height {} of {shape}", m.height, shape.h),
        ));
    }
    Ok(())
}

/// Zeroes the dropped rows of every sample across all channels and columns.
/// With one mask it is broadcast over the batch; otherwise masks pair with
/// samples. Kept rows are untouched unless `rescale` multiplies them by
/// `h / (h - d)`.
pub fn apply_row_mask(t: &Tensor4, masks: &[DropMask], rescale: bool) -> Result<Tensor4> {
    let s = t.shape();
    check_masks("apply_row_mask", s, masks)?;
    let mut out = t.clone();
    let data = out.data_mut();
    for n in 0..s.n {
        let mask = mask_for(masks, n);
        let scale = keep_scale(mask, rescale);
        for c in 0..s.c {
            for h in 0..s.h {
                let row = &mut data[s.offset(n, c, h, 0)..][..s.w];
                if mask.is_dropped(h) {
                    row.fill(0.0);
                } else if scale != 1.0 {
                    row.iter_mut().for_each(|v| *v *= scale);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HdConfig {
    pub structure: Structure,
    pub drop_number: usize,
    pub mode: Mode,
    pub mask_scope: MaskScope,
    pub rescale: bool,
}

impl HdConfig {
    pub fn eval() -> Self {
        Self {
            structure: Structure::Consecutive,
            drop_number: 0,
            mode: Mode::Eval,
            mask_scope: MaskScope::default(),
            rescale: false,
        }
    }

    pub fn train(structure: Structure, drop_number: usize) -> Self {
        Self {
            structure,
            drop_number,
            mode: Mode::Train,
            mask_scope: MaskScope::default(),
            rescale: false,
        }
    }

    pub fn with_mode(self, mode: Mode) -> Self {
        Self { mode, ..self }
    }
}

/// Everything [`hd_backward`] needs.
#[derive(Clone, Debug)]
pub struct HdRecord {
    in_shape: Shape4,
    max: ReduceMaxRecord,
    mean: ReduceMeanRecord,
    add: AddRecord,
    masks: Vec<DropMask>,
    rescale: bool,
}

impl HdRecord {
    pub fn masks(&self) -> &[DropMask] {
        &self.masks
    }

    pub fn in_shape(&self) -> Shape4 {
        self.in_shape
    }
}

#[derive(Clone, Debug)]
pub struct HdOutput {
    /// `(n, c, h, 1)`.
    pub sum: Tensor4,
    /// Masks actually applied; empty in eval mode.
    pub masks: Vec<DropMask>,
    pub record: HdRecord,
}

/// Samples the masks `cfg` asks for, one per sample or one per batch.
pub fn sample_masks<R: Rng + ?Sized>(shape: Shape4, cfg: &HdConfig, rng: &mut R) -> Result<Vec<DropMask>> {
    let count = match cfg.mask_scope {
        MaskScope::PerSample => shape.n,
        MaskScope::PerBatch => 1,
    };
    (0..count)
        .map(|_| make_mask(cfg.structure, shape.h, cfg.drop_number, rng))
        .collect()
}

/// Width max + width mean with optional row dropout, using masks the caller
/// already drew. An empty `masks` slice means no dropout (evaluation).
pub fn hd_forward_with_masks(input: &Tensor4, masks: Vec<DropMask>, rescale: bool) -> Result<HdOutput> {
    let s = input.shape();
    if !masks.is_empty() {
        check_masks("hd_forward", s, &masks)?;
    }
    let (max, max_rec) = reduce_max(input, WIDTH_AXIS)?;
    let (mean, mean_rec) = reduce_mean(input, WIDTH_AXIS)?;
    let (max, mean) = if masks.is_empty() {
        (max, mean)
    } else {
        (
            apply_row_mask(&max, &masks, rescale)?,
            apply_row_mask(&mean, &masks, rescale)?,
        )
    };
    let (sum, add_rec) = add(&max, &mean)?;
    Ok(HdOutput {
        sum,
        masks: masks.clone(),
        record: HdRecord {
            in_shape: s,
            max: max_rec,
            mean: mean_rec,
            add: add_rec,
            masks,
            rescale,
        },
    })
}

/// Forward pass of the HD layer. In train mode masks are drawn from `rng`
/// and applied identically to the max and mean reductions; in eval mode the
/// rng is left untouched and `Sum = Max + Mean`.
pub fn hd_forward<R: Rng + ?Sized>(input: &Tensor4, cfg: &HdConfig, rng: &mut R) -> Result<HdOutput> {
    let s = input.shape();
    if cfg.drop_number > s.h {
        return Err(Error::Config(format!(
            "drop-number {} exceeds feature height {}",
            cfg.drop_number, s.h
        )));
    }
    let masks = match cfg.mode {
        Mode::Eval => Vec::new(),
        Mode::Train => sample_masks(s, cfg, rng)?,
    };
    hd_forward_with_masks(input, masks, cfg.rescale)
}

/// Eval-mode forward without an rng.
pub fn hd_eval(input: &Tensor4) -> Result<Tensor4> {
    Ok(hd_forward_with_masks(input, Vec::new(), false)?.sum)
}

pub fn hd_backward(record: &HdRecord, grad_sum: &Tensor4) -> Result<Tensor4> {
    let expected = record.in_shape.collapse(WIDTH_AXIS);
    if grad_sum.shape() != expected {
        return Err(Error::shape(
            "hd_backward",
            format!("gradient {} does not match Sum {}", grad_sum.shape(), expected),
        ));
    }
    let (g_max, g_mean) = record.add.backward(grad_sum)?;
    let (g_max, g_mean) = if record.masks.is_empty() {
        (g_max, g_mean)
    } else {
        // The row mask is linear: its adjoint is itself.
        (
            apply_row_mask(&g_max, &record.masks, record.rescale)?,
            apply_row_mask(&g_mean, &record.masks, record.rescale)?,
        )
    };
    let mut grad = record.max.backward(&g_max)?;
    grad.add_assign(&record.mean.backward(&g_mean)?)?;
    Ok(grad)
}

/// Where the mask is applied relative to the reductions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Placement {
    /// Mask the rows of `In`, then reduce and add.
    BeforeReduce,
    /// Reduce, mask `Max` and `Mean` separately, then add.
    AfterReduce,
    /// Reduce, add, then mask `Sum`.
    AfterSum,
}

impl Placement {
    pub const ALL: [Placement; 3] = [Placement::BeforeReduce, Placement::AfterReduce, Placement::AfterSum];
}

/// Computes `Sum` under a fixed mask with the requested placement.
pub fn placement_variant(input: &Tensor4, masks: &[DropMask], placement: Placement) -> Result<Tensor4> {
    check_masks("placement_variant", input.shape(), masks)?;
    Ok(match placement {
        Placement::BeforeReduce => {
            let masked = apply_row_mask(input, masks, false)?;
            let (max, _) = reduce_max(&masked, WIDTH_AXIS)?;
            let (mean, _) = reduce_mean(&masked, WIDTH_AXIS)?;
            add(&max, &mean)?.0
        }
        Placement::AfterReduce => {
            let (max, _) = reduce_max(input, WIDTH_AXIS)?;
            let (mean, _) = reduce_mean(input, WIDTH_AXIS)?;
            let max = apply_row_mask(&max, masks, false)?;
            let mean = apply_row_mask(&mean, masks, false)?;
            add(&max, &mean)?.0
        }
        Placement::AfterSum => {
            let (max, _) = reduce_max(input, WIDTH_AXIS)?;
            let (mean, _) = reduce_mean(input, WIDTH_AXIS)?;
            apply_row_mask(&add(&max, &mean)?.0, masks, false)?
        }
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rows_example() -> Tensor4 {
        Tensor4::new(Shape4::new(1, 1, 2, 3), vec![1.0, 5.0, 3.0, 2.0, 2.0, 2.0]).unwrap()
    }

    fn random_tensor(shape: Shape4, rng: &mut ChaCha8Rng) -> Tensor4 {
        Tensor4::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn chd_wraps_to_top() {
        let m = DropMask::consecutive(8, 3, 6).unwrap();
        assert_eq!(m.dropped_rows(), &[0, 6, 7]);
        assert_eq!(m.start(), Some(6));
        assert!(DropMask::consecutive(32, 0, 17).unwrap().dropped_rows().is_empty());
        assert_eq!(DropMask::consecutive(32, 32, 5).unwrap().drop_number(), 32);
    }

    #[test]
    fn mask_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(make_chd_mask(8, 9, &mut rng).is_err());
        assert!(make_shd_mask(8, 9, &mut rng).is_err());
        assert_eq!(make_shd_mask(4, 4, &mut rng).unwrap().dropped_rows(), &[0, 1, 2, 3]);
        assert!(make_shd_mask(32, 0, &mut rng).unwrap().dropped_rows().is_empty());
        assert_eq!(make_chd_mask(32, 32, &mut rng).unwrap().drop_number(), 32);
    }

    #[test]
    fn shd_single_row_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 32];
        let draws = 10_000;
        for _ in 0..draws {
            let m = make_shd_mask(32, 1, &mut rng).unwrap();
            assert_eq!(m.drop_number(), 1);
            counts[m.dropped_rows()[0]] += 1;
        }
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((f - 1.0 / 32.0).abs() <= 0.01, "frequency {f}");
        }
    }

    #[test]
    fn row_mask_examples() {
        let x = Tensor4::from_fn(Shape4::new(1, 2, 4, 1), |_, c, h, _| (c * 4 + h) as f64 + 0.5);
        let m = DropMask::sporadic(4, [1, 3]).unwrap();
        let y = apply_row_mask(&x, &[m], false).unwrap();
        for c in 0..2 {
            assert_eq!(y.get(0, c, 0, 0), x.get(0, c, 0, 0));
            assert_eq!(y.get(0, c, 1, 0), 0.0);
            assert_eq!(y.get(0, c, 2, 0), x.get(0, c, 2, 0));
            assert_eq!(y.get(0, c, 3, 0), 0.0);
        }
        let empty = DropMask::empty(4, Structure::Sporadic);
        assert_eq!(apply_row_mask(&x, &[empty], false).unwrap(), x);
        let full = DropMask::sporadic(4, 0..4).unwrap();
        assert!(apply_row_mask(&x, &[full], false).unwrap().data().iter().all(|&v| v == 0.0));
        let wrong = DropMask::empty(5, Structure::Sporadic);
        assert!(apply_row_mask(&x, &[wrong], false).is_err());
    }

    #[test]
    fn rescale_multiplies_kept_rows() {
        let x = Tensor4::full(Shape4::new(1, 1, 4, 1), 1.0);
        let m = DropMask::sporadic(4, [0]).unwrap();
        let y = apply_row_mask(&x, &[m], true).unwrap();
        assert_eq!(y.data(), &[0.0, 4.0 / 3.0, 4.0 / 3.0, 4.0 / 3.0]);
    }

    #[test]
    fn eval_forward_example() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = hd_forward(&rows_example(), &HdConfig::eval(), &mut rng).unwrap();
        assert_eq!(out.sum.data(), &[8.0, 4.0]);
        assert!(out.masks.is_empty());
    }

    #[test]
    fn zero_drop_train_equals_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(Shape4::new(3, 4, 32, 6), &mut rng);
        let eval = hd_eval(&x).unwrap();
        for structure in [Structure::Consecutive, Structure::Sporadic] {
            let out = hd_forward(&x, &HdConfig::train(structure, 0), &mut rng).unwrap();
            assert_eq!(out.sum, eval);
        }
    }

    #[test]
    fn full_drop_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_tensor(Shape4::new(2, 3, 8, 5), &mut rng);
        let out = hd_forward(&x, &HdConfig::train(Structure::Consecutive, 8), &mut rng).unwrap();
        assert!(out.sum.data().iter().all(|&v| v == 0.0));
        let g = hd_backward(&out.record, &Tensor4::full(out.sum.shape(), 1.0)).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_width_backward_doubles() {
        let x = Tensor4::from_fn(Shape4::new(2, 2, 4, 1), |n, c, h, _| (n + c + h) as f64);
        let out = hd_forward_with_masks(&x, vec![DropMask::empty(4, Structure::Consecutive)], false).unwrap();
        let g_sum = Tensor4::from_fn(out.sum.shape(), |n, c, h, _| (n * 8 + c * 4 + h) as f64 - 3.0);
        let g = hd_backward(&out.record, &g_sum).unwrap();
        assert_eq!(g, g_sum.scale(2.0));
    }

    #[test]
    fn dropped_rows_receive_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_tensor(Shape4::new(2, 3, 8, 5), &mut rng);
        let cfg = HdConfig::train(Structure::Consecutive, 3);
        let out = hd_forward(&x, &cfg, &mut rng).unwrap();
        let g = hd_backward(&out.record, &Tensor4::full(out.sum.shape(), 1.0)).unwrap();
        for n in 0..2 {
            let mask = &out.masks[n % out.masks.len()];
            for c in 0..3 {
                for h in 0..8 {
                    let row: Vec<f64> = (0..5).map(|w| g.get(n, c, h, w)).collect();
                    if mask.is_dropped(h) {
                        assert!(row.iter().all(|&v| v == 0.0));
                    } else {
                        // one argmax hit plus five uniform shares of 1/5
                        assert!((row.iter().sum::<f64>() - 2.0).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn placements_agree_on_fixed_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor(Shape4::new(2, 2, 8, 4), &mut rng);
        let m = [DropMask::sporadic(8, [2, 3, 4]).unwrap()];
        let a = placement_variant(&x, &m, Placement::BeforeReduce).unwrap();
        let b = placement_variant(&x, &m, Placement::AfterReduce).unwrap();
        let c = placement_variant(&x, &m, Placement::AfterSum).unwrap();
        assert_eq!(a, b);
        assert_eq!(b, c);

        let empty = [DropMask::empty(8, Structure::Consecutive)];
        let eval = hd_eval(&x).unwrap();
        for p in Placement::ALL {
            assert_eq!(placement_variant(&x, &empty, p).unwrap(), eval);
        }
        let full = [DropMask::consecutive(8, 8, 0).unwrap()];
        for p in Placement::ALL {
            assert!(placement_variant(&x, &full, p).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn per_batch_scope_shares_one_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random_tensor(Shape4::new(4, 2, 16, 3), &mut rng);
        let cfg = HdConfig::train(Structure::Sporadic, 5);
        assert_eq!(cfg.mask_scope, MaskScope::PerBatch);
        let out = hd_forward(&x, &cfg, &mut rng).unwrap();
        assert_eq!(out.masks.len(), 1);
        let cfg = HdConfig {
            mask_scope: MaskScope::PerSample,
            ..cfg
        };
        assert_eq!(hd_forward(&x, &cfg, &mut rng).unwrap().masks.len(), 4);
    }

    #[test]
    fn structure_parses() {
        assert_eq!("chd".parse::<Structure>().unwrap(), Structure::Consecutive);
        assert_eq!("SHD".parse::<Structure>().unwrap(), Structure::Sporadic);
        assert!("XHD".parse::<Structure>().is_err());
    }
}
