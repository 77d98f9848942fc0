//! The finite-difference suite: every differentiable op of the pipeline and
//! two end-to-end compositions, each checked on random points.
//!
//! Every objective is a random linear functional of the op output (the
//! triplet objective is already scalar), so the analytic gradient is the
//! op's backward pass applied to the functional's weights.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{
    backbone_backward, backbone_forward, frame_shape, init_params, set_pool, BackboneConfig, BackboneParams,
};
use crate::error::{Error, Result};
use crate::gradcheck::{check_random, GradCheck, Objective, Probe, SuiteEntry};
use crate::hd::{hd_backward, hd_forward_with_masks, make_mask, Structure, WIDTH_AXIS};
use crate::tensor::{add, conv2d, leaky_relu, maxpool2d, reduce_max, reduce_mean, Shape4, Tensor4};
use crate::training::{pairwise_euclidean, pairwise_euclidean_backward, triplet_loss_batch_all};

type ValueFn = Box<dyn Fn(&[f64]) -> Result<f64>>;
type GradFn = Box<dyn Fn(&[f64]) -> Result<Vec<f64>>>;

struct Closure {
    name: String,
    dim: usize,
    value: ValueFn,
    gradient: GradFn,
    kink: Option<ValueFn>,
}

impl Objective for Closure {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        (self.value)(x)
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        (self.gradient)(x)
    }

    fn kink_gap(&self, x: &[f64]) -> Result<f64> {
        self.kink.as_ref().map_or(Ok(f64::INFINITY), |k| k(x))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuiteConfig {
    pub instances: usize,
    pub seed: u64,
    pub check: GradCheck,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            instances: 20,
            seed: 7,
            check: GradCheck::default(),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_shape(rng: &mut ChaCha8Rng, max: [usize; 4]) -> Shape4 {
    Shape4::new(
        rng.gen_range(1..=max[0]),
        rng.gen_range(1..=max[1]),
        rng.gen_range(1..=max[2]),
        rng.gen_range(1..=max[3]),
    )
}

/// Smallest gap between the largest and second largest value of `values`.
fn top_two_gap(values: impl Iterator<Item = f64>) -> f64 {
    let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for v in values {
        if v > a {
            b = a;
            a = v;
        } else if v > b {
            b = v;
        }
    }
    a - b
}

/// Minimum top-two gap over the slices of `t` along `axis`.
fn axis_gap(t: &Tensor4, axis: usize) -> f64 {
    let s = t.shape();
    let dims = s.dims();
    if dims[axis] < 2 {
        return f64::INFINITY;
    }
    let out = s.collapse(axis);
    let stride = s.strides()[axis];
    let mut gap = f64::INFINITY;
    for n in 0..out.n {
        for c in 0..out.c {
            for h in 0..out.h {
                for w in 0..out.w {
                    let base = s.offset(n, c, h, w);
                    gap = gap.min(top_two_gap((0..dims[axis]).map(|i| t.data()[base + i * stride])));
                }
            }
        }
    }
    gap
}

fn linear_probe(
    name: &str,
    point: Vec<f64>,
    weights: Vec<f64>,
    forward: impl Fn(&[f64]) -> Result<Tensor4> + Clone + 'static,
    backward: impl Fn(&[f64], &[f64]) -> Result<Vec<f64>> + 'static,
    kink: Option<ValueFn>,
) -> Probe {
    let w = weights.clone();
    let f = forward.clone();
    Probe {
        objective: Box::new(Closure {
            name: name.to_string(),
            dim: point.len(),
            value: Box::new(move |x| Ok(dot(f(x)?.data(), &w))),
            gradient: Box::new(move |x| backward(x, &weights)),
            kink,
        }),
        point,
        coords: None,
    }
}

fn conv_probe(rng: &mut ChaCha8Rng) -> Result<Probe> {
    let (n, cin, cout) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
    let k = if rng.gen_bool(0.5) { 3 } else { 1 };
    let pad = if k == 3 && rng.gen_bool(0.5) { 1 } else { 0 };
    let si = Shape4::new(n, cin, rng.gen_range(3..=6), rng.gen_range(3..=6));
    let sk = Shape4::new(cout, cin, k, k);
    let split = move |x: &[f64]| -> Result<(Tensor4, Tensor4, Vec<f64>)> {
        let (xi, rest) = x.split_at(si.len());
        let (xk, xb) = rest.split_at(sk.len());
        Ok((Tensor4::new(si, xi.to_vec())?, Tensor4::new(sk, xk.to_vec())?, xb.to_vec()))
    };
    let point = uniform(rng, si.len() + sk.len() + cout, -1.0, 1.0);
    let out_len = n * cout * (si.h + 2 * pad + 1 - k) * (si.w + 2 * pad + 1 - k);
    let weights = uniform(rng, out_len, -1.0, 1.0);
    Ok(linear_probe(
        "conv2d",
        point,
        weights,
        move |x| {
            let (i, k, b) = split(x)?;
            Ok(conv2d(&i, &k, &b, pad)?.0)
        },
        move |x, w| {
            let (i, k, b) = split(x)?;
            let (y, rec) = conv2d(&i, &k, &b, pad)?;
            let g = rec.backward(&Tensor4::new(y.shape(), w.to_vec())?)?;
            let mut out = g.input.expect("input gradient requested").into_data();
            out.extend_from_slice(g.kernels.data());
            out.extend_from_slice(&g.bias);
            Ok(out)
        },
        None,
    ))
}

fn unary_probe(
    name: &str,
    rng: &mut ChaCha8Rng,
    shape: Shape4,
    out_len: usize,
    forward: impl Fn(&Tensor4) -> Result<Tensor4> + Clone + 'static,
    backward: impl Fn(&Tensor4, &[f64]) -> Result<Tensor4> + 'static,
    kink: Option<Box<dyn Fn(&Tensor4) -> f64>>,
) -> Probe {
    let point = uniform(rng, shape.len(), -1.0, 1.0);
    let weights = uniform(rng, out_len, -1.0, 1.0);
    let kink = kink.map(|k| -> ValueFn { Box::new(move |x: &[f64]| Ok(k(&Tensor4::new(shape, x.to_vec())?))) });
    linear_probe(
        name,
        point,
        weights,
        move |x| forward(&Tensor4::new(shape, x.to_vec())?),
        move |x, w| Ok(backward(&Tensor4::new(shape, x.to_vec())?, w)?.into_data()),
        kink,
    )
}

fn leaky_probe(rng: &mut ChaCha8Rng) -> Result<Probe> {
    let shape = random_shape(rng, [2, 3, 5, 5]);
    let slope = rng.gen_range(0.0..0.5);
    Ok(unary_probe(
        "leaky_relu",
        rng,
        shape,
        shape.len(),
        move |t| Ok(leaky_relu(t, slope)?.0),
        move |t, w| {
            let (y, rec) = leaky_relu(t, slope)?;
            rec.backward(&Tensor4::new(y.shape(), w.to_vec())?)
        },
        Some(Box::new(|t: &Tensor4| t.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs())))),
    ))
}

fn maxpool_probe(rng: &mut ChaCha8Rng) -> Result<Probe> {
    let shape = Shape4::new(rng.gen_range(1..=2), rng.gen_range(1..=3), 2 * rng.gen_range(1..=3), 2 * rng.gen_range(1..=3));
    let out_len = shape.len() / 4;
    Ok(unary_probe(
        "maxpool2d",
        rng,
        shape,
        out_len,
        |t| Ok(maxpool2d(t)?.0),
        |t, w| {
            let (y, rec) = maxpool2d(t)?;
            rec.backward(&Tensor4::new(y.shape(), w.to_vec())?)
        },
        Some(Box::new(|t: &Tensor4| {
            let s = t.shape();
            let mut gap = f64::INFINITY;
            for n in 0..s.n {
                for c in 0..s.c {
                    for y in (0..s.h).step_by(2) {
                        for x in (0..s.w).step_by(2) {
                            let win = [(0, 0), (0, 1), (1, 0), (1, 1)].map(|(dy, dx)| t.get(n, c, y + dy, x + dx));
                            gap = gap.min(top_two_gap(win.into_iter()));
                        }
                    }
                }
            }
            gap
        })),
    ))
}

fn reduce_probe(rng: &mut ChaCha8Rng, axis: usize, max: bool) -> Result<Probe> {
    let shape = random_shape(rng, [3, 3, 4, 4]);
    let out_len = shape.collapse(axis).len();
    let name = format!("{}[axis {axis}]", if max { "reduce_max" } else { "reduce_mean" });
    Ok(if max {
        unary_probe(
            &name,
            rng,
            shape,
            out_len,
            move |t| Ok(reduce_max(t, axis)?.0),
            move |t, w| {
                let (y, rec) = reduce_max(t, axis)?;
                rec.backward(&Tensor4::new(y.shape(), w.to_vec())?)
            },
            Some(Box::new(move |t: &Tensor4| axis_gap(t, axis))),
        )
    } else {
        unary_probe(
            &name,
            rng,
            shape,
            out_len,
            move |t| Ok(reduce_mean(t, axis)?.0),
            move |t, w| {
                let (y, rec) = reduce_mean(t, axis)?;
                rec.backward(&Tensor4::new(y.shape(), w.to_vec())?)
            },
            None,
        )
    })
}

fn add_probe(rng: &mut ChaCha8Rng) -> Result<Probe> {
    let shape = random_shape(rng, [2, 3, 4, 4]);
    let split = move |x: &[f64]| -> Result<(Tensor4, Tensor4)> {
        let (a, b) = x.split_at(shape.len());
        Ok((Tensor4::new(shape, a.to_vec())?, Tensor4::new(shape, b.to_vec())?))
    };
    let point = uniform(rng, 2 * shape.len(), -1.0, 1.0);
    let weights = uniform(rng, shape.len(), -1.0, 1.0);
    Ok(linear_probe(
        "add",
        point,
        weights,
        move |x| {
            let (a, b) = split(x)?;
            Ok(add(&a, &b)?.0)
        },
        move |x, w| {
            let (a, b) = split(x)?;
            let (y, rec) = add(&a, &b)?;
            let (ga, gb) = rec.backward(&Tensor4::new(y.shape(), w.to_vec())?)?;
            let mut out = ga.into_data();
            out.extend_from_slice(gb.data());
            Ok(out)
        },
        None,
    ))
}

fn set_pool_probe(rng: &mut ChaCha8Rng) -> Result<Probe> {
    let frames = rng.gen_range(1..=4);
    let shape = Shape4::new(1, rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=4));
    let maps = move |x: &[f64]| -> Result<Vec<Tensor4>> {
        x.chunks(shape.len()).map(|c| Tensor4::new(shape, c.to_vec())).collect()
    };
    let point = uniform(rng, frames * shape.len(), -1.0, 1.0);
    let weights = uniform(rng, shape.len(), -1.0, 1.0);
    let m = maps.clone();
    Ok(linear_probe(
        "set_pool",
        point,
        weights,
        move |x| Ok(set_pool(&maps(x)?)?.0),
        move |x, w| {
            let (y, rec) = set_pool(&m(x)?)?;
            let grads = rec.backward(&Tensor4::new(y.shape(), w.to_vec())?)?;
            Ok(grads.into_iter().flat_map(|g| g.into_data()).collect())
        },
        Some(Box::new(move |x: &[f64]| {
            let f = x.len() / shape.len();
            Ok((0..shape.len())
                .map(|i| top_two_gap((0..f).map(|j| x[j * shape.len() + i])))
                .fold(f64::INFINITY, f64::min))
        })),
    ))
}

fn hd_probe(rng: &mut ChaCha8Rng) -> Result<Probe> {
    let shape = Shape4::new(rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(2..=8), rng.gen_range(1..=5));
    let structure = if rng.gen_bool(0.5) {
        Structure::Consecutive
    } else {
        Structure::Sporadic
    };
    let d = rng.gen_range(0..=shape.h);
    let rescale = rng.gen_bool(0.3);
    let masks = (0..shape.n)
        .map(|_| make_mask(structure, shape.h, d, rng))
        .collect::<Result<Vec<_>>>()?;
    let m2 = masks.clone();
    Ok(unary_probe(
        "hd_forward (fixed mask)",
        rng,
        shape,
        shape.collapse(WIDTH_AXIS).len(),
        move |t| Ok(hd_forward_with_masks(t, masks.clone(), rescale)?.sum),
        move |t, w| {
            let out = hd_forward_with_masks(t, m2.clone(), rescale)?;
            hd_backward(&out.record, &Tensor4::new(out.sum.shape(), w.to_vec())?)
        },
        Some(Box::new(|t: &Tensor4| axis_gap(t, WIDTH_AXIS))),
    ))
}

fn triplet_probe(rng: &mut ChaCha8Rng) -> Result<Probe> {
    let (p, k, dim) = (rng.gen_range(2..=3), rng.gen_range(2..=3), rng.gen_range(1..=4));
    let labels: Vec<usize> = (0..p).flat_map(|l| std::iter::repeat_n(l, k)).collect();
    let margin = rng.gen_range(0.1..1.0);
    let point = uniform(rng, p * k * dim, -1.0, 1.0);
    let (l1, l2, l3) = (labels.clone(), labels.clone(), labels);
    Ok(Probe {
        objective: Box::new(Closure {
            name: "pairwise_euclidean + triplet_loss_batch_all".into(),
            dim: point.len(),
            value: Box::new(move |x| Ok(triplet_loss_batch_all(&pairwise_euclidean(x, dim)?, &l1, margin)?.loss)),
            gradient: Box::new(move |x| {
                let d = pairwise_euclidean(x, dim)?;
                let loss = triplet_loss_batch_all(&d, &l2, margin)?;
                pairwise_euclidean_backward(x, dim, &d, &loss.grad)
            }),
            kink: Some(Box::new(move |x| {
                let d = pairwise_euclidean(x, dim)?;
                let n = l3.len();
                let closest = (0..n)
                    .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                    .map(|(i, j)| d[i * n + j])
                    .fold(f64::INFINITY, f64::min);
                Ok(triplet_loss_batch_all(&d, &l3, margin)?.hinge_gap.min(closest))
            })),
        }),
        point,
        coords: None,
    })
}

/// Backbone + HD under a fixed mask, differentiated with respect to every
/// parameter and a random subset of frame pixels.
fn backbone_probe(rng: &mut ChaCha8Rng) -> Result<Probe> {
    let cfg = BackboneConfig {
        widths: vec![2, 3],
        mgp_branch: rng.gen_bool(0.5),
        ..BackboneConfig::default()
    };
    let params = init_params(&cfg, rng)?;
    let template = params.clone();
    let np = params.parameter_count();
    let (n, f) = (2, rng.gen_range(2..=4));
    let fl = frame_shape().len();
    // biases away from zero so rectifier kinks are not systematic
    let mut point = params.flatten();
    for v in point.iter_mut().filter(|v| **v == 0.0) {
        *v = rng.gen_range(-0.2..0.2);
    }
    point.extend(uniform(rng, n * f * fl, 0.05, 0.95));
    let structure = if rng.gen_bool(0.5) {
        Structure::Consecutive
    } else {
        Structure::Sporadic
    };
    let d = rng.gen_range(0..=16);
    let masks = (0..n)
        .map(|_| make_mask(structure, 32, d, rng))
        .collect::<Result<Vec<_>>>()?;
    let out_len = n * cfg.output_channels() * 32;
    let weights = uniform(rng, out_len, -1.0, 1.0);

    let unpack = move |x: &[f64]| -> Result<(BackboneParams, Vec<Vec<Tensor4>>)> {
        let mut params = template.clone();
        params.load_flat(&x[..np])?;
        let batch = x[np..]
            .chunks(f * fl)
            .map(|seq| seq.chunks(fl).map(|fr| Tensor4::new(frame_shape(), fr.to_vec())).collect())
            .collect::<Result<_>>()?;
        Ok((params, batch))
    };
    let forward = {
        let masks = masks.clone();
        let weights = weights.clone();
        let unpack = unpack.clone();
        move |x: &[f64]| -> Result<f64> {
            let (params, batch) = unpack(x)?;
            let (feat, _) = backbone_forward(&batch, &params)?;
            Ok(dot(hd_forward_with_masks(&feat, masks.clone(), false)?.sum.data(), &weights))
        }
    };
    let gradient = move |x: &[f64]| -> Result<Vec<f64>> {
        let (params, batch) = unpack(x)?;
        let (feat, rec) = backbone_forward(&batch, &params)?;
        let out = hd_forward_with_masks(&feat, masks.clone(), false)?;
        let g_in = hd_backward(&out.record, &Tensor4::new(out.sum.shape(), weights.clone())?)?;
        let grads = backbone_backward(&params, &rec, &g_in, true)?;
        let mut flat: Vec<f64> = grads.params.into_iter().flatten().collect();
        for seq in grads.frames.expect("frame gradients requested") {
            for fr in seq {
                flat.extend_from_slice(fr.data());
            }
        }
        Ok(flat)
    };
    let frame_coords = index::sample(rng, n * f * fl, 24).into_iter().map(|i| np + i);
    let coords: Vec<usize> = (0..np).chain(frame_coords).collect();
    Ok(Probe {
        objective: Box::new(Closure {
            name: "backbone + hd_forward (fixed mask)".into(),
            dim: point.len(),
            value: Box::new(forward),
            gradient: Box::new(gradient),
            kink: None,
        }),
        point,
        coords: Some(coords),
    })
}

/// Runs every entry of the suite. Entry order is fixed.
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<SuiteEntry>> {
    if cfg.instances == 0 {
        return Err(Error::InvalidArgument("suite needs at least one instance".into()));
    }
    let redraws = 50 * cfg.instances;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entries = Vec::new();
    let mut run = |name: &str, draw: &mut dyn FnMut(&mut ChaCha8Rng) -> Result<Probe>| -> Result<()> {
        entries.push(check_random(name, &cfg.check, cfg.instances, redraws, &mut rng, |r| draw(r))?);
        Ok(())
    };
    run("conv2d", &mut conv_probe)?;
    run("leaky_relu", &mut leaky_probe)?;
    run("maxpool2d", &mut maxpool_probe)?;
    for axis in 0..4 {
        run(&format!("reduce_max[axis {axis}]"), &mut |r| reduce_probe(r, axis, true))?;
    }
    for axis in 0..4 {
        run(&format!("reduce_mean[axis {axis}]"), &mut |r| reduce_probe(r, axis, false))?;
    }
    run("add", &mut add_probe)?;
    run("set_pool", &mut set_pool_probe)?;
    run("hd_forward (fixed mask)", &mut hd_probe)?;
    run("pairwise_euclidean + triplet", &mut triplet_probe)?;
    run("backbone + hd (fixed mask)", &mut backbone_probe)?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaps() {
        assert_eq!(top_two_gap([1.0, 5.0, 3.0].into_iter()), 2.0);
        assert_eq!(top_two_gap([2.0, 2.0].into_iter()), 0.0);
        let t = Tensor4::new(Shape4::new(1, 1, 2, 3), vec![1.0, 5.0, 3.0, 2.0, 2.5, 2.0]).unwrap();
        assert_eq!(axis_gap(&t, 3), 0.5);
        assert_eq!(axis_gap(&t, 2), 1.0);
    }

    #[test]
    fn small_suite_passes() {
        let cfg = SuiteConfig {
            instances: 2,
            ..SuiteConfig::default()
        };
        let entries = run_suite(&cfg).unwrap();
        assert_eq!(entries.len(), 16);
        for e in &entries {
            assert!(e.passed, "{e:?}");
            assert_eq!(e.instances, 2);
        }
    }
}
