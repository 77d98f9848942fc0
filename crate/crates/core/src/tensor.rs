//! Dense rank-4 tensors in `(n, c, h, w)` layout and the handful of
//! differentiable operations the gait pipeline is composed of.
//!
//! Every forward op returns its output together with a record holding exactly
//! what the matching backward pass needs. There is no tape: callers compose
//! records by hand in reverse order.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extents of a rank-4 tensor. A shape with `w == 1` doubles as the rank-3
/// shape `(n, c, h)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub fn from_dims(dims: [usize; 4]) -> Self {
        Self::new(dims[0], dims[1], dims[2], dims[3])
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major strides, `w` innermost.
    pub fn strides(&self) -> [usize; 4] {
        [self.c * self.h * self.w, self.h * self.w, self.w, 1]
    }

    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    /// The shape with `axis` collapsed to length one.
    pub fn collapse(&self, axis: usize) -> Self {
        let mut dims = self.dims();
        dims[axis] = 1;
        Self::from_dims(dims)
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(shape: Shape4, data: Vec<f64>) -> Result<Self> {
        if shape.dims().contains(&0) {
            return Err(Error::shape("tensor", format!("zero-sized dimension in {shape}")));
        }
        if data.len() != shape.len() {
            return Err(Error::shape(
                "tensor",
                format!("{} values for shape {shape} ({} expected)", data.len(), shape.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape4) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape4, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Self { shape, data }
    }

    /// Builds an `(n, c, h, 1)` tensor from rank-3 data.
    pub fn from_rank3(n: usize, c: usize, h: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Shape4::new(n, c, h, 1), data)
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.offset(n, c, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: f64) {
        let i = self.shape.offset(n, c, h, w);
        self.data[i] = value;
    }

    /// Same values under a different shape of equal volume.
    pub fn reshape(self, shape: Shape4) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// `(n, c, h)` when the tensor has unit width.
    pub fn rank3_dims(&self) -> Option<(usize, usize, usize)> {
        (self.shape.w == 1).then_some((self.shape.n, self.shape.c, self.shape.h))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Flat slice of sample `n`.
    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.shape.c * self.shape.h * self.shape.w;
        &self.data[n * len..(n + 1) * len]
    }

    /// Stacks equally shaped tensors along the batch axis.
    pub fn stack(parts: &[Tensor4]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("stack", "no tensors to stack"))?
            .shape;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        let mut n = 0;
        for p in parts {
            if (p.shape.c, p.shape.h, p.shape.w) != (first.c, first.h, first.w) {
                return Err(Error::shape(
                    "stack",
                    format!("mismatched shapes {} and {}", first, p.shape),
                ));
            }
            n += p.shape.n;
            data.extend_from_slice(&p.data);
        }
        Self::new(Shape4::new(n, first.c, first.h, first.w), data)
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(a: &Tensor4, b: &Tensor4) -> Result<Self> {
        let (sa, sb) = (a.shape, b.shape);
        if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
            return Err(Error::shape(
                "concat_channels",
                format!("cannot concatenate {sa} with {sb}"),
            ));
        }
        let plane_a = sa.c * sa.h * sa.w;
        let plane_b = sb.c * sb.h * sb.w;
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        for n in 0..sa.n {
            data.extend_from_slice(&a.data[n * plane_a..(n + 1) * plane_a]);
            data.extend_from_slice(&b.data[n * plane_b..(n + 1) * plane_b]);
        }
        Self::new(Shape4::new(sa.n, sa.c + sb.c, sa.h, sa.w), data)
    }

    /// Inverse of [`Tensor4::concat_channels`]: splits off the first `c_first` channels.
    pub fn split_channels(&self, c_first: usize) -> Result<(Tensor4, Tensor4)> {
        let s = self.shape;
        if c_first == 0 || c_first >= s.c {
            return Err(Error::shape(
                "split_channels",
                format!("cannot split {c_first} channels off {s}"),
            ));
        }
        let plane = s.h * s.w;
        let mut a = Vec::with_capacity(s.n * c_first * plane);
        let mut b = Vec::with_capacity(s.n * (s.c - c_first) * plane);
        for n in 0..s.n {
            let base = n * s.c * plane;
            a.extend_from_slice(&self.data[base..base + c_first * plane]);
            b.extend_from_slice(&self.data[base + c_first * plane..base + s.c * plane]);
        }
        Ok((
            Self::new(Shape4::new(s.n, c_first, s.h, s.w), a)?,
            Self::new(Shape4::new(s.n, s.c - c_first, s.h, s.w), b)?,
        ))
    }

    /// Elementwise in-place accumulation.
    pub fn add_assign(&mut self, other: &Tensor4) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "add_assign",
                format!("{} vs {}", self.shape, other.shape),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, factor: f64) -> Tensor4 {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }
}

fn check_axis(op: &'static str, axis: usize) -> Result<()> {
    if axis > 3 {
        return Err(Error::shape(op, format!("axis {axis} out of range 0..=3")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

/// Convolution operands laid out for long contiguous inner loops: each input
/// plane is zero-padded to width `wp`, and outputs are computed on a "wide"
/// grid of row stride `wp` whose trailing `wp - ow` columns are discarded.
#[derive(Clone, Debug)]
struct WideGeometry {
    hp: usize,
    wp: usize,
    oh: usize,
    ow: usize,
    /// Length of a wide output plane: `(oh - 1) * wp + ow`.
    span: usize,
}

impl WideGeometry {
    fn new(h: usize, w: usize, kh: usize, kw: usize, pad: usize) -> Self {
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let (oh, ow) = (hp - kh + 1, wp - kw + 1);
        Self {
            hp,
            wp,
            oh,
            ow,
            span: (oh - 1) * wp + ow,
        }
    }

    /// Flat offsets of the kernel taps within a padded plane, row-major.
    fn taps(&self, kh: usize, kw: usize) -> Vec<usize> {
        (0..kh).flat_map(|ky| (0..kw).map(move |kx| ky * self.wp + kx)).collect()
    }
}

const LANES: usize = 8;
const BLOCK: usize = 4;

/// `out[o][i] = init[o] + sum_c sum_t w[o][c][t] * src[c][offs[t] + i]` for
/// `i < span`. `src` holds planes of length `plane` and every
/// `offs[t] + span` must fit in a plane. Summation order is fixed.
fn correlate_wide(
    src: &[f64],
    plane: usize,
    offs: &[usize],
    weights: &[f64],
    init: &[f64],
    span: usize,
    out: &mut [f64],
) {
    let mut o = 0;
    while o + BLOCK <= init.len() {
        correlate_block::<BLOCK>(src, plane, offs, weights, init, span, o, out);
        o += BLOCK;
    }
    while o < init.len() {
        correlate_block::<1>(src, plane, offs, weights, init, span, o, out);
        o += 1;
    }
}

#[allow(clippy::too_many_arguments)]
fn correlate_block<const B: usize>(
    src: &[f64],
    plane: usize,
    offs: &[usize],
    weights: &[f64],
    init: &[f64],
    span: usize,
    o0: usize,
    out: &mut [f64],
) {
    let cin = src.len() / plane;
    let nt = offs.len();
    // Weights of the block packed as [c][t][b].
    let packed: Vec<[f64; B]> = (0..cin * nt)
        .map(|ct| std::array::from_fn(|b| weights[(o0 + b) * cin * nt + ct]))
        .collect();
    let bias: [f64; B] = std::array::from_fn(|b| init[o0 + b]);
    let mut i = 0;
    while i + LANES <= span {
        let mut acc: [[f64; LANES]; B] = std::array::from_fn(|b| [bias[b]; LANES]);
        for c in 0..cin {
            let p = &src[c * plane..(c + 1) * plane];
            let wc = &packed[c * nt..(c + 1) * nt];
            for (w, &off) in wc.iter().zip(offs) {
                let s: [f64; LANES] = p[off + i..off + i + LANES].try_into().expect("lane slice");
                for b in 0..B {
                    for j in 0..LANES {
                        acc[b][j] += w[b] * s[j];
                    }
                }
            }
        }
        for (b, a) in acc.iter().enumerate() {
            out[(o0 + b) * span + i..][..LANES].copy_from_slice(a);
        }
        i += LANES;
    }
    for k in i..span {
        let mut acc = bias;
        for c in 0..cin {
            let p = &src[c * plane..(c + 1) * plane];
            let wc = &packed[c * nt..(c + 1) * nt];
            for (w, &off) in wc.iter().zip(offs) {
                for b in 0..B {
                    acc[b] += w[b] * p[off + k];
                }
            }
        }
        for (b, a) in acc.iter().enumerate() {
            out[(o0 + b) * span + k] = *a;
        }
    }
}

/// `out[o][t] += sum_i g[o][i] * p[offs[t] + i]` for one input plane `p`,
/// with `out[o]` rows `stride` apart.
fn correlate_taps(g: &[f64], span: usize, p: &[f64], offs: &[usize], out: &mut [f64], stride: usize) {
    let cout = g.len() / span;
    let mut o = 0;
    while o + BLOCK <= cout {
        correlate_taps_block::<BLOCK>(g, span, p, offs, out, stride, o);
        o += BLOCK;
    }
    while o < cout {
        correlate_taps_block::<1>(g, span, p, offs, out, stride, o);
        o += 1;
    }
}

fn correlate_taps_block<const B: usize>(
    g: &[f64],
    span: usize,
    p: &[f64],
    offs: &[usize],
    out: &mut [f64],
    stride: usize,
    o0: usize,
) {
    let rows: [&[f64]; B] = std::array::from_fn(|b| &g[(o0 + b) * span..(o0 + b + 1) * span]);
    let whole = span - span % LANES;
    for (t, &off) in offs.iter().enumerate() {
        let src = &p[off..off + span];
        let mut acc = [[0.0f64; LANES]; B];
        let mut i = 0;
        while i < whole {
            let s: [f64; LANES] = src[i..i + LANES].try_into().expect("lane slice");
            for b in 0..B {
                let gv: [f64; LANES] = rows[b][i..i + LANES].try_into().expect("lane slice");
                for j in 0..LANES {
                    acc[b][j] += gv[j] * s[j];
                }
            }
            i += LANES;
        }
        for b in 0..B {
            let a = &acc[b];
            let mut sum = a.iter().sum::<f64>();
            for k in whole..span {
                sum += rows[b][k] * src[k];
            }
            out[(o0 + b) * stride + t] += sum;
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2dRecord {
    /// Zero-padded input planes, `(n, cin, hp, wp)` flattened.
    padded: Vec<f64>,
    in_shape: Shape4,
    kernels: Tensor4,
    padding: usize,
    out_shape: Shape4,
}

#[derive(Clone, Debug)]
pub struct Conv2dGrads {
    /// `None` when the input gradient was not requested.
    pub input: Option<Tensor4>,
    pub kernels: Tensor4,
    pub bias: Vec<f64>,
}

/// Stride-1 cross-correlation (no kernel flip) with symmetric zero padding.
pub fn conv2d(
    input: &Tensor4,
    kernels: &Tensor4,
    bias: &[f64],
    padding: usize,
) -> Result<(Tensor4, Conv2dRecord)> {
    let si = input.shape();
    let sk = kernels.shape();
    if sk.c != si.c {
        return Err(Error::shape(
            "conv2d",
            format!("input {si} has {} channels but kernels {sk} expect {}", si.c, sk.c),
        ));
    }
    // Odd extents are only required for "same" padding; valid convolution
    // accepts any window.
    if padding != 0 && (2 * padding + 1 != sk.h || 2 * padding + 1 != sk.w) {
        return Err(Error::shape(
            "conv2d",
            format!("padding {padding} is neither 0 nor 'same' for a {}x{} kernel", sk.h, sk.w),
        ));
    }
    if bias.len() != sk.n {
        return Err(Error::shape(
            "conv2d",
            format!("{} bias entries for {} output channels", bias.len(), sk.n),
        ));
    }
    if si.h + 2 * padding < sk.h || si.w + 2 * padding < sk.w {
        return Err(Error::shape("conv2d", format!("kernel {sk} larger than padded input {si}")));
    }
    let geo = WideGeometry::new(si.h, si.w, sk.h, sk.w, padding);
    let out_shape = Shape4::new(si.n, sk.n, geo.oh, geo.ow);
    let plane = geo.hp * geo.wp;
    let offs = geo.taps(sk.h, sk.w);

    let mut padded = vec![0.0; si.n * si.c * plane];
    for (src, dst) in input.data().chunks_exact(si.h * si.w).zip(padded.chunks_exact_mut(plane)) {
        for y in 0..si.h {
            let row = (y + padding) * geo.wp + padding;
            dst[row..row + si.w].copy_from_slice(&src[y * si.w..(y + 1) * si.w]);
        }
    }

    let mut wide = vec![0.0; sk.n * geo.span];
    let mut out = Vec::with_capacity(out_shape.len());
    for n in 0..si.n {
        let src = &padded[n * si.c * plane..(n + 1) * si.c * plane];
        correlate_wide(src, plane, &offs, kernels.data(), bias, geo.span, &mut wide);
        for w in wide.chunks_exact(geo.span) {
            for oy in 0..geo.oh {
                out.extend_from_slice(&w[oy * geo.wp..oy * geo.wp + geo.ow]);
            }
        }
    }
    let record = Conv2dRecord {
        padded,
        in_shape: si,
        kernels: kernels.clone(),
        padding,
        out_shape,
    };
    Ok((Tensor4::new(out_shape, out)?, record))
}

impl Conv2dRecord {
    pub fn backward(&self, upstream: &Tensor4) -> Result<Conv2dGrads> {
        self.backward_with(upstream, true)
    }

    /// Backward pass; the input gradient is skipped when `want_input` is false.
    pub fn backward_with(&self, upstream: &Tensor4, want_input: bool) -> Result<Conv2dGrads> {
        if upstream.shape() != self.out_shape {
            return Err(Error::shape(
                "conv2d backward",
                format!("upstream {} does not match output {}", upstream.shape(), self.out_shape),
            ));
        }
        let si = self.in_shape;
        let sk = self.kernels.shape();
        let so = self.out_shape;
        let pad = self.padding;
        let geo = WideGeometry::new(si.h, si.w, sk.h, sk.w, pad);
        let plane = geo.hp * geo.wp;
        let offs = geo.taps(sk.h, sk.w);
        let nt = offs.len();
        let out_plane = so.h * so.w;
        let g = upstream.data();

        // Input gradient as a correlation of the zero-extended upstream with
        // the channel-transposed kernels at mirrored tap offsets.
        let reach = *offs.last().expect("kernel has taps");
        let ext_plane = plane + reach;
        let first = pad * geo.wp + pad;
        let in_span = (si.h - 1) * geo.wp + si.w;
        let mirrored: Vec<usize> = offs.iter().map(|&o| reach - o + first).collect();
        let transposed: Vec<f64> = if want_input {
            let k = self.kernels.data();
            let mut t = vec![0.0; k.len()];
            for co in 0..sk.n {
                for ci in 0..sk.c {
                    t[(ci * sk.n + co) * nt..][..nt].copy_from_slice(&k[(co * sk.c + ci) * nt..][..nt]);
                }
            }
            t
        } else {
            Vec::new()
        };
        let zero_init = vec![0.0; si.c];

        let mut gk = vec![0.0; sk.len()];
        let mut gb = vec![0.0; sk.n];
        let mut gx = if want_input { Vec::with_capacity(si.len()) } else { Vec::new() };
        // Upstream re-laid on the wide grid; discarded columns stay zero.
        let mut wide = vec![0.0; sk.n * geo.span];
        let mut ext = vec![0.0; if want_input { sk.n * ext_plane } else { 0 }];
        let mut gwide = vec![0.0; if want_input { si.c * in_span } else { 0 }];

        for n in 0..si.n {
            for co in 0..sk.n {
                let gplane = &g[(n * so.c + co) * out_plane..][..out_plane];
                gb[co] += gplane.iter().sum::<f64>();
                let w = &mut wide[co * geo.span..(co + 1) * geo.span];
                for oy in 0..so.h {
                    w[oy * geo.wp..oy * geo.wp + so.w].copy_from_slice(&gplane[oy * so.w..(oy + 1) * so.w]);
                }
            }
            for ci in 0..si.c {
                let base = (n * si.c + ci) * plane;
                let p = &self.padded[base..base + plane];
                correlate_taps(&wide, geo.span, p, &offs, &mut gk[ci * nt..], sk.c * nt);
            }
            if want_input {
                for co in 0..sk.n {
                    ext[co * ext_plane + reach..][..geo.span].copy_from_slice(&wide[co * geo.span..(co + 1) * geo.span]);
                }
                correlate_wide(&ext, ext_plane, &mirrored, &transposed, &zero_init, in_span, &mut gwide);
                for gw in gwide.chunks_exact(in_span) {
                    for y in 0..si.h {
                        gx.extend_from_slice(&gw[y * geo.wp..y * geo.wp + si.w]);
                    }
                }
            }
        }

        let input = if want_input { Some(Tensor4::new(si, gx)?) } else { None };
        Ok(Conv2dGrads {
            input,
            kernels: Tensor4::new(sk, gk)?,
            bias: gb,
        })
    }
}

// ---------------------------------------------------------------------------
// leaky_relu
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct LeakyReluRecord {
    shape: Shape4,
    nonnegative: Vec<bool>,
    slope: f64,
}

pub fn leaky_relu(input: &Tensor4, slope: f64) -> Result<(Tensor4, LeakyReluRecord)> {
    if !(0.0..1.0).contains(&slope) {
        return Err(Error::InvalidArgument(format!("leaky_relu slope {slope} outside [0, 1)")));
    }
    if !input.all_finite() {
        return Err(Error::Numeric("leaky_relu received a non-finite input".into()));
    }
    let nonnegative: Vec<bool> = input.data().iter().map(|&v| v >= 0.0).collect();
    let out = input
        .data()
        .iter()
        .zip(&nonnegative)
        .map(|(&v, &keep)| if keep { v } else { slope * v })
        .collect();
    Ok((
        Tensor4::new(input.shape(), out)?,
        LeakyReluRecord {
            shape: input.shape(),
            nonnegative,
            slope,
        },
    ))
}

impl LeakyReluRecord {
    pub fn backward(&self, upstream: &Tensor4) -> Result<Tensor4> {
        if upstream.shape() != self.shape {
            return Err(Error::shape(
                "leaky_relu backward",
                format!("upstream {} vs {}", upstream.shape(), self.shape),
            ));
        }
        let data = upstream
            .data()
            .iter()
            .zip(&self.nonnegative)
            .map(|(&g, &keep)| if keep { g } else { self.slope * g })
            .collect();
        Tensor4::new(self.shape, data)
    }
}

// ---------------------------------------------------------------------------
// maxpool2d (2x2, stride 2)
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct MaxPoolRecord {
    in_shape: Shape4,
    /// Flat input offset of the winning element, per output element.
    argmax: Vec<usize>,
}

pub fn maxpool2d(input: &Tensor4) -> Result<(Tensor4, MaxPoolRecord)> {
    let s = input.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::shape("maxpool2d", format!("spatial extent of {s} must be even")));
    }
    let out_shape = Shape4::new(s.n, s.c, s.h / 2, s.w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(out_shape.len());
    let mut argmax = Vec::with_capacity(out_shape.len());
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..out_shape.h {
                for ox in 0..out_shape.w {
                    // Row-major window order; strict comparison keeps the first maximum.
                    let mut best = s.offset(n, c, 2 * oy, 2 * ox);
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = s.offset(n, c, 2 * oy + dy, 2 * ox + dx);
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
    }
    Ok((
        Tensor4::new(out_shape, out)?,
        MaxPoolRecord {
            in_shape: s,
            argmax,
        },
    ))
}

impl MaxPoolRecord {
    pub fn backward(&self, upstream: &Tensor4) -> Result<Tensor4> {
        if upstream.data().len() != self.argmax.len() {
            return Err(Error::shape(
                "maxpool2d backward",
                format!("upstream {} vs pooled input {}", upstream.shape(), self.in_shape),
            ));
        }
        let mut grad = vec![0.0; self.in_shape.len()];
        for (&i, &g) in self.argmax.iter().zip(upstream.data()) {
            grad[i] += g;
        }
        Tensor4::new(self.in_shape, grad)
    }

    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

// ---------------------------------------------------------------------------
// axis reductions
// ---------------------------------------------------------------------------

/// Visits every slice along `axis`, handing the callback the flat output
/// index, the flat input offset of the slice start, and the axis stride.
fn for_each_slice(shape: Shape4, axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let out = shape.collapse(axis);
    let stride = shape.strides()[axis];
    let mut o = 0;
    for n in 0..out.n {
        for c in 0..out.c {
            for h in 0..out.h {
                for w in 0..out.w {
                    f(o, shape.offset(n, c, h, w), stride);
                    o += 1;
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReduceMaxRecord {
    in_shape: Shape4,
    axis: usize,
    /// Position along `axis` of each slice maximum (smallest index on ties).
    argmax: Vec<usize>,
}

pub fn reduce_max(input: &Tensor4, axis: usize) -> Result<(Tensor4, ReduceMaxRecord)> {
    check_axis("reduce_max", axis)?;
    let s = input.shape();
    let len = s.dims()[axis];
    let x = input.data();
    let out_shape = s.collapse(axis);
    let mut out = vec![0.0; out_shape.len()];
    let mut argmax = vec![0; out_shape.len()];
    for_each_slice(s, axis, |o, base, stride| {
        let mut best = 0;
        let mut value = x[base];
        for j in 1..len {
            let v = x[base + j * stride];
            if v > value {
                value = v;
                best = j;
            }
        }
        out[o] = value;
        argmax[o] = best;
    });
    Ok((
        Tensor4::new(out_shape, out)?,
        ReduceMaxRecord {
            in_shape: s,
            axis,
            argmax,
        },
    ))
}

impl ReduceMaxRecord {
    pub fn backward(&self, upstream: &Tensor4) -> Result<Tensor4> {
        let out_shape = self.in_shape.collapse(self.axis);
        if upstream.shape() != out_shape {
            return Err(Error::shape(
                "reduce_max backward",
                format!("upstream {} vs {}", upstream.shape(), out_shape),
            ));
        }
        let g = upstream.data();
        let mut grad = vec![0.0; self.in_shape.len()];
        for_each_slice(self.in_shape, self.axis, |o, base, stride| {
            grad[base + self.argmax[o] * stride] = g[o];
        });
        Tensor4::new(self.in_shape, grad)
    }

    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

#[derive(Clone, Debug)]
pub struct ReduceMeanRecord {
    in_shape: Shape4,
    axis: usize,
}

pub fn reduce_mean(input: &Tensor4, axis: usize) -> Result<(Tensor4, ReduceMeanRecord)> {
    check_axis("reduce_mean", axis)?;
    let s = input.shape();
    let len = s.dims()[axis];
    let x = input.data();
    let out_shape = s.collapse(axis);
    let mut out = vec![0.0; out_shape.len()];
    for_each_slice(s, axis, |o, base, stride| {
        let mut acc = 0.0;
        for j in 0..len {
            acc += x[base + j * stride];
        }
        out[o] = acc / len as f64;
    });
    Ok((
        Tensor4::new(out_shape, out)?,
        ReduceMeanRecord { in_shape: s, axis },
    ))
}

impl ReduceMeanRecord {
    pub fn backward(&self, upstream: &Tensor4) -> Result<Tensor4> {
        let out_shape = self.in_shape.collapse(self.axis);
        if upstream.shape() != out_shape {
            return Err(Error::shape(
                "reduce_mean backward",
                format!("upstream {} vs {}", upstream.shape(), out_shape),
            ));
        }
        let len = self.in_shape.dims()[self.axis] as f64;
        let g = upstream.data();
        let mut grad = vec![0.0; self.in_shape.len()];
        for_each_slice(self.in_shape, self.axis, |o, base, stride| {
            let share = g[o] / len;
            for j in 0..self.in_shape.dims()[self.axis] {
                grad[base + j * stride] = share;
            }
        });
        Tensor4::new(self.in_shape, grad)
    }
}

// ---------------------------------------------------------------------------
// add
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct AddRecord {
    shape: Shape4,
}

pub fn add(a: &Tensor4, b: &Tensor4) -> Result<(Tensor4, AddRecord)> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", format!("{} vs {}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok((Tensor4::new(a.shape(), data)?, AddRecord { shape: a.shape() }))
}

impl AddRecord {
    pub fn backward(&self, upstream: &Tensor4) -> Result<(Tensor4, Tensor4)> {
        if upstream.shape() != self.shape {
            return Err(Error::shape(
                "add backward",
                format!("upstream {} vs {}", upstream.shape(), self.shape),
            ));
        }
        Ok((upstream.clone(), upstream.clone()))
    }
}

/// Type-erased record, so any forward op can be differentiated uniformly.
#[derive(Clone, Debug)]
pub enum OpRecord {
    Conv2d(Conv2dRecord),
    LeakyRelu(LeakyReluRecord),
    MaxPool2d(MaxPoolRecord),
    ReduceMax(ReduceMaxRecord),
    ReduceMean(ReduceMeanRecord),
    Add(AddRecord),
}

impl OpRecord {
    /// Gradients for each differentiable operand, in argument order. For
    /// `conv2d` that is input, kernels and bias (as a `(cout, 1, 1, 1)` tensor).
    pub fn backward(&self, upstream: &Tensor4) -> Result<Vec<Tensor4>> {
        Ok(match self {
            OpRecord::Conv2d(r) => {
                let g = r.backward(upstream)?;
                let cout = g.bias.len();
                vec![
                    g.input.expect("input gradient requested"),
                    g.kernels,
                    Tensor4::new(Shape4::new(cout, 1, 1, 1), g.bias)?,
                ]
            }
            OpRecord::LeakyRelu(r) => vec![r.backward(upstream)?],
            OpRecord::MaxPool2d(r) => vec![r.backward(upstream)?],
            OpRecord::ReduceMax(r) => vec![r.backward(upstream)?],
            OpRecord::ReduceMean(r) => vec![r.backward(upstream)?],
            OpRecord::Add(r) => {
                let (a, b) = r.backward(upstream)?;
                vec![a, b]
            }
        })
    }
}
