//! Differentiable building blocks for the branch autoencoders.
//!
//! All layers read their weights from an externally owned flat slice and
//! accumulate gradients into a matching slice, so a whole network is a
//! layer list plus one parameter vector. Convolutions go through
//! im2col + matrix multiplication; transposed convolutions reuse the same
//! machinery as the conv's adjoint, which keeps the two consistent by
//! construction.

use ndarray::{Array2, Array3, ArrayView2};

use crate::rng::stream;
use rand::Rng;
use rand_distr::StandardNormal;

pub const LEAKY_SLOPE: f64 = 0.01;

/// Elementwise nonlinearity selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Relu,
    LeakyRelu,
}

impl Nonlinearity {
    fn apply(&self, z: f64) -> f64 {
        match self {
            Nonlinearity::Relu => z.max(0.0),
            Nonlinearity::LeakyRelu => {
                if z > 0.0 {
                    z
                } else {
                    LEAKY_SLOPE * z
                }
            }
        }
    }

    fn slope(&self, z: f64) -> f64 {
        match self {
            Nonlinearity::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Nonlinearity::LeakyRelu => {
                if z > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
        }
    }
}

/// Geometry of one convolution: the "big" side is the conv input, the
/// "small" side its strided output. A transposed convolution runs the same
/// geometry from small to big.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_big: usize,
    pub c_small: usize,
    pub h_big: usize,
    pub w_big: usize,
    pub h_small: usize,
    pub w_small: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(
        c_big: usize,
        c_small: usize,
        h_big: usize,
        w_big: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> ConvGeom {
        let h_small = (h_big + 2 * pad - k) / stride + 1;
        let w_small = (w_big + 2 * pad - k) / stride + 1;
        ConvGeom {
            c_big,
            c_small,
            h_big,
            w_big,
            h_small,
            w_small,
            k,
            stride,
            pad,
        }
    }

    pub fn weight_count(&self) -> usize {
        self.c_small * self.c_big * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.h_small * self.w_small
    }

    fn rows(&self) -> usize {
        self.c_big * self.k * self.k
    }
}

fn im2col(x: &Array3<f64>, g: &ConvGeom) -> Array2<f64> {
    debug_assert_eq!(x.dim(), (g.c_big, g.h_big, g.w_big));
    let mut col = Array2::<f64>::zeros((g.rows(), g.cols()));
    for c in 0..g.c_big {
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = (c * g.k + kh) * g.k + kw;
                for oh in 0..g.h_small {
                    let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h_big as isize {
                        continue;
                    }
                    for ow in 0..g.w_small {
                        let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                        if iw < 0 || iw >= g.w_big as isize {
                            continue;
                        }
                        col[[row, oh * g.w_small + ow]] = x[[c, ih as usize, iw as usize]];
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &Array2<f64>, g: &ConvGeom) -> Array3<f64> {
    let mut x = Array3::<f64>::zeros((g.c_big, g.h_big, g.w_big));
    for c in 0..g.c_big {
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = (c * g.k + kh) * g.k + kw;
                for oh in 0..g.h_small {
                    let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h_big as isize {
                        continue;
                    }
                    for ow in 0..g.w_small {
                        let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                        if iw < 0 || iw >= g.w_big as isize {
                            continue;
                        }
                        x[[c, ih as usize, iw as usize]] += col[[row, oh * g.w_small + ow]];
                    }
                }
            }
        }
    }
    x
}

fn weight_view<'a>(g: &ConvGeom, w: &'a [f64]) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((g.c_small, g.rows()), w).expect("conv weight slice")
}

/// `y = W * im2col(x) (+ bias)`, big side in, small side out.
fn conv_forward(x: &Array3<f64>, w: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> (Array3<f64>, Array2<f64>) {
    let col = im2col(x, g);
    let y_mat = weight_view(g, w).dot(&col);
    let mut y = Array3::<f64>::zeros((g.c_small, g.h_small, g.w_small));
    for c in 0..g.c_small {
        let b = bias.map_or(0.0, |b| b[c]);
        for oh in 0..g.h_small {
            for ow in 0..g.w_small {
                y[[c, oh, ow]] = y_mat[[c, oh * g.w_small + ow]] + b;
            }
        }
    }
    (y, col)
}

/// Adjoint of [`conv_forward`]: maps a small-side array back to the big
/// side. Used both as the conv's input-gradient and as the transposed
/// convolution's forward pass.
fn conv_backward_data(dy: &Array3<f64>, w: &[f64], g: &ConvGeom) -> Array3<f64> {
    debug_assert_eq!(dy.dim(), (g.c_small, g.h_small, g.w_small));
    let dy_mat = ArrayView2::from_shape(
        (g.c_small, g.cols()),
        dy.as_slice().expect("contiguous small-side array"),
    )
    .expect("small-side view");
    let dcol = weight_view(g, w).t().dot(&dy_mat);
    col2im(&dcol, g)
}

/// Accumulates `dW += mat(dy) * im2col(x)^T` into `dw`.
fn conv_weight_grads(x_big: &Array3<f64>, dy_small: &Array3<f64>, g: &ConvGeom, dw: &mut [f64]) {
    let col = im2col(x_big, g);
    let dy_mat = ArrayView2::from_shape(
        (g.c_small, g.cols()),
        dy_small.as_slice().expect("contiguous small-side array"),
    )
    .expect("small-side view");
    let grad = dy_mat.dot(&col.t());
    for (acc, gval) in dw.iter_mut().zip(grad.iter()) {
        *acc += gval;
    }
}

/// Reuses a cached column matrix instead of recomputing im2col.
fn conv_weight_grads_cached(col: &Array2<f64>, dy_small: &Array3<f64>, g: &ConvGeom, dw: &mut [f64]) {
    let dy_mat = ArrayView2::from_shape(
        (g.c_small, g.cols()),
        dy_small.as_slice().expect("contiguous small-side array"),
    )
    .expect("small-side view");
    let grad = dy_mat.dot(&col.t());
    for (acc, gval) in dw.iter_mut().zip(grad.iter()) {
        *acc += gval;
    }
}

fn channel_sums(a: &Array3<f64>) -> Vec<f64> {
    let c = a.dim().0;
    let mut out = vec![0.0; c];
    for (ch, plane) in a.outer_iter().enumerate() {
        out[ch] = plane.sum();
    }
    out
}

/// One network layer. Weights live in the flat parameter vector; each
/// variant documents its slice layout.
#[derive(Debug, Clone)]
pub enum Layer {
    /// Strided conv, big -> small. Params: weight `(c_small, c_big*k*k)`
    /// row-major, then bias `(c_small)`.
    Conv(ConvGeom),
    /// Transposed conv, small -> big. Params: weight with the same shape as
    /// the adjoint conv, then bias `(c_big)`.
    ConvT(ConvGeom),
    /// Affine map on the flattened input. Params: `W (n_out, n_in)` then
    /// `b (n_out)`. Output shape `(n_out, 1, 1)`.
    Linear { n_in: usize, n_out: usize },
    /// Elementwise nonlinearity; no params.
    Act(Nonlinearity),
    /// Shape bookkeeping between linear and conv stages; no params.
    Reshape {
        from: (usize, usize, usize),
        to: (usize, usize, usize),
    },
    /// Squeeze-excite channel gate. Params: `W1 (r, c)`, `b1 (r)`,
    /// `W2 (c, r)`, `b2 (c)`.
    ChannelAttn { c: usize, r: usize },
    /// Mean/max spatial gate via a 3x3 conv on the 2-channel pooled map.
    /// Params: `W (1, 2*9)`, `b (1)`.
    SpatialAttn { c: usize, h: usize, w: usize },
}

/// Per-layer forward state needed by the backward pass.
pub enum LayerCache {
    None,
    Conv { col: Array2<f64> },
    ConvT { x_small: Array3<f64> },
    Linear {
        x_flat: Vec<f64>,
        in_shape: (usize, usize, usize),
    },
    Act { z: Array3<f64> },
    ChannelAttn {
        f: Array3<f64>,
        z: Vec<f64>,
        a1_pre: Vec<f64>,
        gate_pre: Vec<f64>,
    },
    SpatialAttn {
        f: Array3<f64>,
        stack: Array3<f64>,
        pre: Array3<f64>,
        argmax: Vec<usize>,
    },
}

fn logistic(t: f64) -> f64 {
    crate::evidential::logistic(t)
}

fn spatial_geom(h: usize, w: usize) -> ConvGeom {
    ConvGeom::new(2, 1, h, w, 3, 1, 1)
}

impl Layer {
    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv(g) => g.weight_count() + g.c_small,
            Layer::ConvT(g) => g.weight_count() + g.c_big,
            Layer::Linear { n_in, n_out } => n_out * n_in + n_out,
            Layer::Act(_) | Layer::Reshape { .. } => 0,
            Layer::ChannelAttn { c, r } => r * c + r + c * r + c,
            Layer::SpatialAttn { .. } => 2 * 9 + 1,
        }
    }

    pub fn out_shape(&self, in_shape: (usize, usize, usize)) -> (usize, usize, usize) {
        match self {
            Layer::Conv(g) => (g.c_small, g.h_small, g.w_small),
            Layer::ConvT(g) => (g.c_big, g.h_big, g.w_big),
            Layer::Linear { n_out, .. } => (*n_out, 1, 1),
            Layer::Act(_) | Layer::ChannelAttn { .. } | Layer::SpatialAttn { .. } => in_shape,
            Layer::Reshape { to, .. } => *to,
        }
    }

    /// Seeded weight initialization: Kaiming-style normal scaled by fan-in
    /// for maps, zero biases.
    pub fn init_params(&self, out: &mut Vec<f64>, seed: u64, tag: u64) {
        let mut rng = stream(seed, 0x1A7E_0000 ^ tag);
        let mut normal = |n: usize, fan_in: usize, buf: &mut Vec<f64>| {
            let scale = (2.0 / fan_in.max(1) as f64).sqrt();
            for _ in 0..n {
                buf.push(scale * rng.sample::<f64, _>(StandardNormal));
            }
        };
        match self {
            Layer::Conv(g) => {
                normal(g.weight_count(), g.rows(), out);
                out.extend(std::iter::repeat_n(0.0, g.c_small));
            }
            Layer::ConvT(g) => {
                normal(g.weight_count(), g.c_small * g.k * g.k, out);
                out.extend(std::iter::repeat_n(0.0, g.c_big));
            }
            Layer::Linear { n_in, n_out } => {
                normal(n_out * n_in, *n_in, out);
                out.extend(std::iter::repeat_n(0.0, *n_out));
            }
            Layer::Act(_) | Layer::Reshape { .. } => {}
            Layer::ChannelAttn { c, r } => {
                normal(r * c, *c, out);
                out.extend(std::iter::repeat_n(0.0, *r));
                normal(c * r, *r, out);
                out.extend(std::iter::repeat_n(0.0, *c));
            }
            Layer::SpatialAttn { .. } => {
                normal(18, 18, out);
                out.push(0.0);
            }
        }
    }

    pub fn forward(&self, params: &[f64], x: &Array3<f64>) -> (Array3<f64>, LayerCache) {
        match self {
            Layer::Conv(g) => {
                let (w, b) = params.split_at(g.weight_count());
                let (y, col) = conv_forward(x, w, Some(b), g);
                (y, LayerCache::Conv { col })
            }
            Layer::ConvT(g) => {
                let (w, b) = params.split_at(g.weight_count());
                let mut y = conv_backward_data(x, w, g);
                for (c, &bias) in b.iter().enumerate() {
                    y.slice_mut(ndarray::s![c, .., ..]).mapv_inplace(|v| v + bias);
                }
                (y, LayerCache::ConvT { x_small: x.clone() })
            }
            Layer::Linear { n_in, n_out } => {
                assert_eq!(x.len(), *n_in, "linear input length");
                let x_flat: Vec<f64> = x.iter().copied().collect();
                let (w, b) = params.split_at(n_out * n_in);
                let mut y = Array3::<f64>::zeros((*n_out, 1, 1));
                for o in 0..*n_out {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    y[[o, 0, 0]] =
                        row.iter().zip(&x_flat).map(|(wi, xi)| wi * xi).sum::<f64>() + b[o];
                }
                (
                    y,
                    LayerCache::Linear {
                        x_flat,
                        in_shape: x.dim(),
                    },
                )
            }
            Layer::Act(nl) => {
                let y = x.mapv(|z| nl.apply(z));
                (y, LayerCache::Act { z: x.clone() })
            }
            Layer::Reshape { from, to } => {
                assert_eq!(x.dim(), *from, "reshape input shape");
                assert_eq!(x.len(), to.0 * to.1 * to.2, "reshape volume");
                let y = Array3::from_shape_vec(*to, x.iter().copied().collect())
                    .expect("reshape volume checked");
                (y, LayerCache::None)
            }
            Layer::ChannelAttn { c, r } => {
                let (cn, hn, wn) = x.dim();
                assert_eq!(cn, *c, "channel attention width");
                let area = (hn * wn) as f64;
                let z: Vec<f64> = channel_sums(x).iter().map(|s| s / area).collect();
                let (w1, rest) = params.split_at(r * c);
                let (b1, rest) = rest.split_at(*r);
                let (w2, b2) = rest.split_at(c * r);
                let a1_pre: Vec<f64> = (0..*r)
                    .map(|i| {
                        w1[i * c..(i + 1) * c]
                            .iter()
                            .zip(&z)
                            .map(|(wi, zi)| wi * zi)
                            .sum::<f64>()
                            + b1[i]
                    })
                    .collect();
                let a1: Vec<f64> = a1_pre.iter().map(|&t| t.max(0.0)).collect();
                let gate_pre: Vec<f64> = (0..*c)
                    .map(|i| {
                        w2[i * r..(i + 1) * r]
                            .iter()
                            .zip(&a1)
                            .map(|(wi, ai)| wi * ai)
                            .sum::<f64>()
                            + b2[i]
                    })
                    .collect();
                let mut y = x.clone();
                for (ch, mut plane) in y.outer_iter_mut().enumerate() {
                    let gate = logistic(gate_pre[ch]);
                    plane.mapv_inplace(|v| v * gate);
                }
                (
                    y,
                    LayerCache::ChannelAttn {
                        f: x.clone(),
                        z,
                        a1_pre,
                        gate_pre,
                    },
                )
            }
            Layer::SpatialAttn { c, h, w } => {
                let (cn, hn, wn) = x.dim();
                assert_eq!((cn, hn, wn), (*c, *h, *w), "spatial attention shape");
                let mut stack = Array3::<f64>::zeros((2, *h, *w));
                let mut argmax = vec![0usize; h * w];
                for i in 0..*h {
                    for j in 0..*w {
                        let mut sum = 0.0;
                        let mut best = f64::NEG_INFINITY;
                        let mut best_c = 0;
                        for ch in 0..*c {
                            let v = x[[ch, i, j]];
                            sum += v;
                            if v > best {
                                best = v;
                                best_c = ch;
                            }
                        }
                        stack[[0, i, j]] = sum / *c as f64;
                        stack[[1, i, j]] = best;
                        argmax[i * w + j] = best_c;
                    }
                }
                let g = spatial_geom(*h, *w);
                let (wp, bp) = params.split_at(18);
                let (pre, _) = conv_forward(&stack, wp, Some(bp), &g);
                let mut y = x.clone();
                for ch in 0..*c {
                    for i in 0..*h {
                        for j in 0..*w {
                            y[[ch, i, j]] *= logistic(pre[[0, i, j]]);
                        }
                    }
                }
                (
                    y,
                    LayerCache::SpatialAttn {
                        f: x.clone(),
                        stack,
                        pre,
                        argmax,
                    },
                )
            }
        }
    }

    /// Backpropagates `dy` through the layer: accumulates parameter
    /// gradients into `grad` and returns the input gradient.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &LayerCache,
        dy: &Array3<f64>,
        grad: &mut [f64],
    ) -> Array3<f64> {
        match (self, cache) {
            (Layer::Conv(g), LayerCache::Conv { col }) => {
                let (w, _) = params.split_at(g.weight_count());
                let (dw, db) = grad.split_at_mut(g.weight_count());
                conv_weight_grads_cached(col, dy, g, dw);
                for (c, s) in channel_sums(dy).into_iter().enumerate() {
                    db[c] += s;
                }
                conv_backward_data(dy, w, g)
            }
            (Layer::ConvT(g), LayerCache::ConvT { x_small }) => {
                let (w, _) = params.split_at(g.weight_count());
                let (dw, db) = grad.split_at_mut(g.weight_count());
                conv_weight_grads(dy, x_small, g, dw);
                for (c, s) in channel_sums(dy).into_iter().enumerate() {
                    db[c] += s;
                }
                let (dx, _) = conv_forward(dy, w, None, g);
                dx
            }
            (Layer::Linear { n_in, n_out }, LayerCache::Linear { x_flat, in_shape }) => {
                let (w, _) = params.split_at(n_out * n_in);
                let (dw, db) = grad.split_at_mut(n_out * n_in);
                let mut dx_flat = vec![0.0; *n_in];
                for o in 0..*n_out {
                    let go = dy[[o, 0, 0]];
                    db[o] += go;
                    let row = &w[o * n_in..(o + 1) * n_in];
                    let drow = &mut dw[o * n_in..(o + 1) * n_in];
                    for i in 0..*n_in {
                        drow[i] += go * x_flat[i];
                        dx_flat[i] += go * row[i];
                    }
                }
                Array3::from_shape_vec(*in_shape, dx_flat).expect("linear input gradient")
            }
            (Layer::Act(nl), LayerCache::Act { z }) => {
                let mut dx = dy.clone();
                dx.zip_mut_with(z, |g, &zv| *g *= nl.slope(zv));
                dx
            }
            (Layer::Reshape { from, .. }, LayerCache::None) => {
                Array3::from_shape_vec(*from, dy.iter().copied().collect())
                    .expect("reshape gradient volume")
            }
            (
                Layer::ChannelAttn { c, r },
                LayerCache::ChannelAttn { f, z, a1_pre, gate_pre },
            ) => {
                let (_, hn, wn) = f.dim();
                let area = (hn * wn) as f64;
                let (w1, rest) = params.split_at(r * c);
                let (_b1, rest) = rest.split_at(*r);
                let (w2, _b2) = rest.split_at(c * r);
                let (gw1, grest) = grad.split_at_mut(r * c);
                let (gb1, grest) = grest.split_at_mut(*r);
                let (gw2, gb2) = grest.split_at_mut(c * r);

                let a1: Vec<f64> = a1_pre.iter().map(|&t| t.max(0.0)).collect();
                let gates: Vec<f64> = gate_pre.iter().map(|&t| logistic(t)).collect();
                let mut dgate = vec![0.0; *c];
                let mut dx = dy.clone();
                for ch in 0..*c {
                    let mut acc = 0.0;
                    for i in 0..hn {
                        for j in 0..wn {
                            acc += dy[[ch, i, j]] * f[[ch, i, j]];
                            dx[[ch, i, j]] = dy[[ch, i, j]] * gates[ch];
                        }
                    }
                    dgate[ch] = acc;
                }
                let dgate_pre: Vec<f64> = dgate
                    .iter()
                    .zip(&gates)
                    .map(|(dg, g)| dg * g * (1.0 - g))
                    .collect();
                let mut da1 = vec![0.0; *r];
                for ch in 0..*c {
                    gb2[ch] += dgate_pre[ch];
                    for i in 0..*r {
                        gw2[ch * r + i] += dgate_pre[ch] * a1[i];
                        da1[i] += dgate_pre[ch] * w2[ch * r + i];
                    }
                }
                let mut dz = vec![0.0; *c];
                for i in 0..*r {
                    let d_pre = if a1_pre[i] > 0.0 { da1[i] } else { 0.0 };
                    gb1[i] += d_pre;
                    for ch in 0..*c {
                        gw1[i * c + ch] += d_pre * z[ch];
                        dz[ch] += d_pre * w1[i * c + ch];
                    }
                }
                for ch in 0..*c {
                    let spread = dz[ch] / area;
                    for i in 0..hn {
                        for j in 0..wn {
                            dx[[ch, i, j]] += spread;
                        }
                    }
                }
                dx
            }
            (
                Layer::SpatialAttn { c, h, w },
                LayerCache::SpatialAttn { f, stack, pre, argmax },
            ) => {
                let g = spatial_geom(*h, *w);
                let (wp, _) = params.split_at(18);
                let (gw, gb) = grad.split_at_mut(18);
                let mut ds = Array3::<f64>::zeros((1, *h, *w));
                let mut dx = dy.clone();
                for i in 0..*h {
                    for j in 0..*w {
                        let gate = logistic(pre[[0, i, j]]);
                        let mut acc = 0.0;
                        for ch in 0..*c {
                            acc += dy[[ch, i, j]] * f[[ch, i, j]];
                            dx[[ch, i, j]] = dy[[ch, i, j]] * gate;
                        }
                        ds[[0, i, j]] = acc * gate * (1.0 - gate);
                    }
                }
                conv_weight_grads(stack, &ds, &g, gw);
                gb[0] += ds.sum();
                let dstack = conv_backward_data(&ds, wp, &g);
                for i in 0..*h {
                    for j in 0..*w {
                        let mean_part = dstack[[0, i, j]] / *c as f64;
                        for ch in 0..*c {
                            dx[[ch, i, j]] += mean_part;
                        }
                        dx[[argmax[i * w + j], i, j]] += dstack[[1, i, j]];
                    }
                }
                dx
            }
            _ => unreachable!("layer/cache variant mismatch"),
        }
    }
}
