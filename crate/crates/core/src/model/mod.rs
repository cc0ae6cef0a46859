//! Branch autoencoders, complement-band integration and the reconstruction
//! loss with its frequency-domain penalty.
//!
//! Each frequency branch owns an independent autoencoder: a stack of
//! stride-2 convolutions with channel-then-spatial attention, a linear
//! bottleneck, and mirrored transposed convolutions back to the input
//! shape. The raw output is completed with the opposite band of the input
//! before any loss or scoring sees it, so a branch only has to model its
//! own band.

pub mod layers;

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{gaussian_masks, ifftshift2, Dft2};
use layers::{Layer, LayerCache, Nonlinearity};

pub use layers::ConvGeom;

/// Architecture of one branch autoencoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AEConfig {
    pub in_planes: usize,
    pub h: usize,
    pub w: usize,
    /// Encoder channel widths per stride-2 stage; the decoder mirrors them.
    pub widths: Vec<usize>,
    pub latent: usize,
    pub attention: bool,
    pub nonlinearity: Nonlinearity,
    pub init_seed: u64,
}

impl Default for AEConfig {
    fn default() -> Self {
        AEConfig {
            in_planes: 8,
            h: 32,
            w: 32,
            widths: vec![32, 64, 128],
            latent: 128,
            attention: true,
            nonlinearity: Nonlinearity::LeakyRelu,
            init_seed: 0,
        }
    }
}

impl AEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_planes == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::Config("sample dimensions must be positive".into()));
        }
        if self.widths.is_empty() {
            return Err(Error::Config("need at least one encoder stage".into()));
        }
        if self.widths.contains(&0) || self.latent == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        let down = 1usize << self.widths.len();
        if !self.h.is_multiple_of(down) || !self.w.is_multiple_of(down) {
            return Err(Error::Config(format!(
                "{}x{} planes cannot pass {} stride-2 stages; dimensions must be divisible by {}",
                self.h,
                self.w,
                self.widths.len(),
                down
            )));
        }
        Ok(())
    }
}

/// Which frequency view a reconstruction belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchKind {
    Low,
    High,
    Fused,
}

/// A branch's raw autoencoder output and its complement-integrated
/// reconstruction.
#[derive(Debug, Clone)]
pub struct BranchOutput {
    pub ae_out: Array3<f64>,
    pub x_tilde: Array3<f64>,
    pub kind: BranchKind,
}

/// Adds the complementary input band to the autoencoder output.
///
/// By linearity of the transform this spatial sum equals summing the two
/// spectra and inverting; the equivalence is pinned by tests.
pub fn integrate_complement(ae_out: &Array3<f64>, complement: &Array3<f64>) -> Array3<f64> {
    assert_eq!(
        ae_out.dim(),
        complement.dim(),
        "complement band must match the reconstruction shape"
    );
    ae_out + complement
}

/// One branch autoencoder: a layer list over an externally owned flat
/// parameter vector.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    cfg: AEConfig,
    layers: Vec<Layer>,
    spans: Vec<std::ops::Range<usize>>,
    n_params: usize,
}

/// Forward activations retained for one backward pass.
pub struct AeCache {
    caches: Vec<LayerCache>,
}

impl Autoencoder {
    pub fn new(cfg: AEConfig) -> Result<Autoencoder> {
        cfg.validate()?;
        let nl = cfg.nonlinearity;
        let mut layers = Vec::new();
        let (mut c, mut h, mut w) = (cfg.in_planes, cfg.h, cfg.w);
        for &width in &cfg.widths {
            layers.push(Layer::Conv(ConvGeom::new(c, width, h, w, 3, 2, 1)));
            layers.push(Layer::Act(nl));
            h /= 2;
            w /= 2;
            if cfg.attention {
                layers.push(Layer::ChannelAttn {
                    c: width,
                    r: (width / 4).max(1),
                });
                layers.push(Layer::SpatialAttn { c: width, h, w });
            }
            c = width;
        }
        let n_flat = c * h * w;
        layers.push(Layer::Reshape {
            from: (c, h, w),
            to: (n_flat, 1, 1),
        });
        layers.push(Layer::Linear {
            n_in: n_flat,
            n_out: cfg.latent,
        });
        layers.push(Layer::Act(nl));
        layers.push(Layer::Linear {
            n_in: cfg.latent,
            n_out: n_flat,
        });
        layers.push(Layer::Act(nl));
        layers.push(Layer::Reshape {
            from: (n_flat, 1, 1),
            to: (c, h, w),
        });
        for i in (0..cfg.widths.len()).rev() {
            let c_out = if i == 0 { cfg.in_planes } else { cfg.widths[i - 1] };
            layers.push(Layer::ConvT(ConvGeom::new(
                c_out,
                cfg.widths[i],
                h * 2,
                w * 2,
                3,
                2,
                1,
            )));
            if i > 0 {
                layers.push(Layer::Act(nl));
            }
            h *= 2;
            w *= 2;
        }
        let mut spans = Vec::with_capacity(layers.len());
        let mut offset = 0;
        for layer in &layers {
            let n = layer.param_count();
            spans.push(offset..offset + n);
            offset += n;
        }
        Ok(Autoencoder {
            cfg,
            layers,
            spans,
            n_params: offset,
        })
    }

    pub fn config(&self) -> &AEConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.n_params
    }

    /// Fresh seeded parameter vector for this architecture.
    pub fn init_params(&self) -> Vec<f64> {
        self.init_params_seeded(self.cfg.init_seed)
    }

    /// Fresh parameter vector drawn from an explicit seed, so several
    /// branches can share one architecture with independent weights.
    pub fn init_params_seeded(&self, seed: u64) -> Vec<f64> {
        let mut params = Vec::with_capacity(self.n_params);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.init_params(&mut params, seed, i as u64);
        }
        debug_assert_eq!(params.len(), self.n_params);
        params
    }

    fn check_input(&self, x: &Array3<f64>) {
        assert_eq!(
            x.dim(),
            (self.cfg.in_planes, self.cfg.h, self.cfg.w),
            "autoencoder input shape"
        );
    }

    pub fn forward(&self, params: &[f64], x: &Array3<f64>) -> Array3<f64> {
        self.check_input(x);
        assert_eq!(params.len(), self.n_params, "parameter vector length");
        let mut cur = x.clone();
        for (layer, span) in self.layers.iter().zip(&self.spans) {
            cur = layer.forward(&params[span.clone()], &cur).0;
        }
        cur
    }

    /// Forward pass that retains per-layer state for [`Self::backward`].
    pub fn forward_cached(&self, params: &[f64], x: &Array3<f64>) -> (Array3<f64>, AeCache) {
        self.check_input(x);
        assert_eq!(params.len(), self.n_params, "parameter vector length");
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (layer, span) in self.layers.iter().zip(&self.spans) {
            let (next, cache) = layer.forward(&params[span.clone()], &cur);
            caches.push(cache);
            cur = next;
        }
        (cur, AeCache { caches })
    }

    /// Accumulates parameter gradients for the upstream output gradient
    /// `g_out` and returns the gradient at the input.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &AeCache,
        g_out: &Array3<f64>,
        grad_params: &mut [f64],
    ) -> Array3<f64> {
        assert_eq!(grad_params.len(), self.n_params, "gradient vector length");
        let mut g = g_out.clone();
        for ((layer, span), lc) in self
            .layers
            .iter()
            .zip(&self.spans)
            .zip(&cache.caches)
            .rev()
        {
            g = layer.backward(&params[span.clone()], lc, &g, &mut grad_params[span.clone()]);
        }
        g
    }
}

fn sgn(t: f64) -> f64 {
    if t == 0.0 {
        0.0
    } else {
        t.signum()
    }
}

/// Reconstruction loss evaluator for one branch, holding the FFT plans and
/// the branch's natural-layout mask.
///
/// The loss is the mean absolute spatial residual plus `lambda_f` times the
/// mean absolute real/imaginary residual of the mask-filtered spectra of
/// target and reconstruction.
pub struct RecLossCtx {
    plans: Dft2,
    /// Mask in natural (unshifted) layout; `None` means the identity mask.
    mask: Option<Array2<f64>>,
    pub kind: BranchKind,
    pub lambda_f: f64,
}

impl RecLossCtx {
    pub fn new(kind: BranchKind, h: usize, w: usize, cutoff: f64, lambda_f: f64) -> Result<RecLossCtx> {
        if lambda_f < 0.0 {
            return Err(Error::Config("lambda_f must be nonnegative".into()));
        }
        let mask = match kind {
            BranchKind::Low => Some(gaussian_masks(h, w, cutoff)?.low),
            BranchKind::High => Some(gaussian_masks(h, w, cutoff)?.high),
            BranchKind::Fused => None,
        };
        Ok(RecLossCtx {
            plans: Dft2::new(h, w),
            mask: mask.map(|m| ifftshift2(m.view())),
            kind,
            lambda_f,
        })
    }

    pub fn loss(&self, x: &Array3<f64>, x_tilde: &Array3<f64>) -> f64 {
        self.eval(x, x_tilde, false).0
    }

    /// Returns the loss and its gradient with respect to the reconstruction.
    pub fn loss_and_grad(&self, x: &Array3<f64>, x_tilde: &Array3<f64>) -> (f64, Array3<f64>) {
        let (loss, grad) = self.eval(x, x_tilde, true);
        (loss, grad.expect("gradient requested"))
    }

    fn eval(&self, x: &Array3<f64>, x_tilde: &Array3<f64>, want_grad: bool) -> (f64, Option<Array3<f64>>) {
        assert_eq!(x.dim(), x_tilde.dim(), "loss operand shapes");
        let (p, h, w) = x.dim();
        let n = (p * h * w) as f64;

        let mut spatial = 0.0;
        let mut grad = want_grad.then(|| Array3::<f64>::zeros(x.dim()));
        for ((idx, &xv), &rv) in x.indexed_iter().zip(x_tilde.iter()) {
            let r = xv - rv;
            spatial += r.abs() / n;
            if let Some(g) = grad.as_mut() {
                g[idx] = -sgn(r) / n;
            }
        }
        if self.lambda_f == 0.0 {
            return (spatial, grad);
        }

        let mut freq = 0.0;
        for k in 0..p {
            let fx = self.plans.forward_plane(x.slice(ndarray::s![k, .., ..]));
            let ft = self.plans.forward_plane(x_tilde.slice(ndarray::s![k, .., ..]));
            let mut signs = want_grad.then(|| Array2::<Complex64>::zeros((h, w)));
            for i in 0..h {
                for j in 0..w {
                    let m = self.mask.as_ref().map_or(1.0, |m| m[[i, j]]);
                    let delta = (fx[[i, j]] - ft[[i, j]]) * m;
                    freq += (delta.re.abs() + delta.im.abs()) / n;
                    if let Some(s) = signs.as_mut() {
                        s[[i, j]] = Complex64::new(sgn(delta.re), sgn(delta.im)) * m;
                    }
                }
            }
            if let (Some(signs), Some(g)) = (signs, grad.as_mut()) {
                let back = self.plans.inverse_plane_unnorm(signs.view());
                let scale = -self.lambda_f / n;
                for i in 0..h {
                    for j in 0..w {
                        g[[k, i, j]] += scale * back[[i, j]].re;
                    }
                }
            }
        }
        (spatial + self.lambda_f * freq, grad)
    }
}

/// One-shot reconstruction loss; hot paths should hold a [`RecLossCtx`].
pub fn rec_loss(
    x: &Array3<f64>,
    x_tilde: &Array3<f64>,
    kind: BranchKind,
    cutoff: f64,
    lambda_f: f64,
) -> Result<f64> {
    let (_, h, w) = x.dim();
    Ok(RecLossCtx::new(kind, h, w, cutoff, lambda_f)?.loss(x, x_tilde))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::spectral::{self, decouple_array};
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn tiny_cfg() -> AEConfig {
        AEConfig {
            in_planes: 2,
            h: 8,
            w: 8,
            widths: vec![4, 6],
            latent: 5,
            attention: true,
            nonlinearity: Nonlinearity::LeakyRelu,
            init_seed: 42,
        }
    }

    fn random_sample(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
        let mut rng = stream(seed, 0x5A5A);
        Array3::from_shape_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn forward_preserves_shape() {
        let ae = Autoencoder::new(tiny_cfg()).unwrap();
        let params = ae.init_params();
        let x = random_sample((2, 8, 8), 1);
        let y = ae.forward(&params, &x);
        assert_eq!(y.dim(), x.dim());
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn forward_is_deterministic() {
        let ae = Autoencoder::new(tiny_cfg()).unwrap();
        let params = ae.init_params();
        let x = random_sample((2, 8, 8), 2);
        let a = ae.forward(&params, &x);
        let b = ae.forward(&params, &x);
        assert_eq!(a, b);
    }

    #[test]
    fn forward_without_attention() {
        let cfg = AEConfig {
            attention: false,
            ..tiny_cfg()
        };
        let with_attn = Autoencoder::new(tiny_cfg()).unwrap();
        let without = Autoencoder::new(cfg).unwrap();
        assert!(without.param_count() < with_attn.param_count());
        let x = random_sample((2, 8, 8), 3);
        let y = without.forward(&without.init_params(), &x);
        assert_eq!(y.dim(), x.dim());
    }

    #[test]
    fn config_rejects_indivisible_planes() {
        let cfg = AEConfig {
            h: 12,
            w: 12,
            widths: vec![4, 8, 16],
            ..tiny_cfg()
        };
        assert!(Autoencoder::new(cfg).is_err());
    }

    #[test]
    fn init_params_depend_on_seed() {
        let ae1 = Autoencoder::new(tiny_cfg()).unwrap();
        let ae2 = Autoencoder::new(AEConfig {
            init_seed: 43,
            ..tiny_cfg()
        })
        .unwrap();
        assert_ne!(ae1.init_params(), ae2.init_params());
        assert_eq!(ae1.init_params(), ae1.init_params());
    }

    #[test]
    fn complement_restores_source_from_band_split() {
        let x = random_sample((2, 16, 16), 4);
        let bands = decouple_array(&x, 5.0).unwrap();
        let x_tilde = integrate_complement(&bands.low, &bands.high);
        let err = (&x_tilde - &x).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
        assert!(err < 1e-4);
    }

    #[test]
    fn complement_with_zero_output_is_identity() {
        let comp = random_sample((1, 4, 4), 5);
        let zero = Array3::zeros((1, 4, 4));
        assert_eq!(integrate_complement(&zero, &comp), comp);
    }

    #[test]
    fn complement_spatial_path_equals_frequency_path() {
        let ae_out = random_sample((2, 8, 8), 6);
        let comp = random_sample((2, 8, 8), 7);
        let spatial = integrate_complement(&ae_out, &comp);
        // frequency path: sum the spectra, then invert
        let mut spec = spectral::dft2(&ae_out);
        let spec_c = spectral::dft2(&comp);
        spec.data += &spec_c.data;
        let freq_path = spectral::idft2(&spec).unwrap();
        let err = (&spatial - &freq_path)
            .mapv(f64::abs)
            .iter()
            .cloned()
            .fold(0.0, f64::max);
        assert!(err < 1e-5, "paths diverge by {err}");
    }

    #[test]
    fn rec_loss_zero_on_perfect_reconstruction() {
        let x = random_sample((2, 8, 8), 8);
        for kind in [BranchKind::Low, BranchKind::High, BranchKind::Fused] {
            let ctx = RecLossCtx::new(kind, 8, 8, 5.0, 1e-2).unwrap();
            let (loss, grad) = ctx.loss_and_grad(&x, &x.clone());
            assert_eq!(loss, 0.0);
            assert!(grad.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn rec_loss_positive_when_different() {
        let x = random_sample((1, 8, 8), 9);
        let y = random_sample((1, 8, 8), 10);
        let ctx = RecLossCtx::new(BranchKind::Fused, 8, 8, 5.0, 1e-2).unwrap();
        assert!(ctx.loss(&x, &y) > 0.0);
    }

    #[test]
    fn rec_loss_spatial_worked_case() {
        let x = Array3::from_shape_vec((1, 2, 2), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let zeros = Array3::zeros((1, 2, 2));
        let loss = rec_loss(&x, &zeros, BranchKind::Fused, 5.0, 0.0).unwrap();
        assert!((loss - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rec_loss_spatial_permutation_invariant() {
        let x = random_sample((1, 4, 4), 11);
        let y = random_sample((1, 4, 4), 12);
        let base = rec_loss(&x, &y, BranchKind::Fused, 5.0, 0.0).unwrap();
        let mut order: Vec<usize> = (0..16).collect();
        order.shuffle(&mut stream(13, 1));
        let xs: Vec<f64> = x.iter().copied().collect();
        let ys: Vec<f64> = y.iter().copied().collect();
        let xp = Array3::from_shape_vec((1, 4, 4), order.iter().map(|&i| xs[i]).collect()).unwrap();
        let yp = Array3::from_shape_vec((1, 4, 4), order.iter().map(|&i| ys[i]).collect()).unwrap();
        let permuted = rec_loss(&xp, &yp, BranchKind::Fused, 5.0, 0.0).unwrap();
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn rec_loss_negative_lambda_rejected() {
        assert!(RecLossCtx::new(BranchKind::Low, 8, 8, 5.0, -0.1).is_err());
    }

    /// Central-difference check, resampling away from kink points of the
    /// absolute values.
    #[test]
    fn rec_loss_gradient_matches_finite_differences() {
        for (kind, seed) in [
            (BranchKind::Fused, 20u64),
            (BranchKind::Low, 21),
            (BranchKind::High, 22),
        ] {
            let ctx = RecLossCtx::new(kind, 8, 8, 3.0, 1e-2).unwrap();
            let x = random_sample((1, 8, 8), seed);
            let x_tilde = random_sample((1, 8, 8), seed + 100);
            let (_, grad) = ctx.loss_and_grad(&x, &x_tilde);
            let mut rng = stream(seed, 0xFDFD);
            let h_step = 1e-6;
            let mut checked = 0;
            while checked < 6 {
                let idx = (
                    0,
                    rng.gen_range(0..8usize),
                    rng.gen_range(0..8usize),
                );
                if (x[idx] - x_tilde[idx]).abs() < 1e-4 {
                    continue; // too close to the spatial kink
                }
                let mut xp = x_tilde.clone();
                xp[idx] += h_step;
                let up = ctx.loss(&x, &xp);
                xp[idx] -= 2.0 * h_step;
                let down = ctx.loss(&x, &xp);
                let fd = (up - down) / (2.0 * h_step);
                let an = grad[idx];
                assert!(
                    (fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-3),
                    "{kind:?} {idx:?}: fd {fd} vs analytic {an}"
                );
                checked += 1;
            }
        }
    }

    #[test]
    fn autoencoder_backward_matches_finite_differences() {
        let cfg = AEConfig {
            in_planes: 1,
            h: 4,
            w: 4,
            widths: vec![3],
            latent: 4,
            attention: true,
            nonlinearity: Nonlinearity::LeakyRelu,
            init_seed: 7,
        };
        let ae = Autoencoder::new(cfg).unwrap();
        let params = ae.init_params();
        let x = random_sample((1, 4, 4), 30);
        let probe = random_sample((1, 4, 4), 31);
        let loss = |ps: &[f64], xs: &Array3<f64>| -> f64 {
            ae.forward(ps, xs)
                .iter()
                .zip(probe.iter())
                .map(|(a, b)| a * b)
                .sum()
        };
        let (y, cache) = ae.forward_cached(&params, &x);
        let _ = y;
        let mut grad = vec![0.0; ae.param_count()];
        let g_in = ae.backward(&params, &cache, &probe, &mut grad);

        let mut rng = stream(32, 0xAE);
        let h = 1e-6;
        for _ in 0..20 {
            let i = rng.gen_range(0..params.len());
            let mut pp = params.clone();
            pp[i] += h;
            let up = loss(&pp, &x);
            pp[i] -= 2.0 * h;
            let down = loss(&pp, &x);
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() <= 1e-4 * fd.abs().max(grad[i].abs()).max(1.0),
                "param {i}: fd {fd} vs analytic {}",
                grad[i]
            );
        }
        for _ in 0..6 {
            let idx = (0, rng.gen_range(0..4usize), rng.gen_range(0..4usize));
            let mut xp = x.clone();
            xp[idx] += h;
            let up = loss(&params, &xp);
            xp[idx] -= 2.0 * h;
            let down = loss(&params, &xp);
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - g_in[idx]).abs() <= 1e-4 * fd.abs().max(g_in[idx].abs()).max(1.0),
                "input {idx:?}: fd {fd} vs analytic {}",
                g_in[idx]
            );
        }
    }
}
