//! Normal-Inverse-Gamma (NIG) evidential heads over reconstructions.
//!
//! Each branch predicts one `(v, alpha, beta)` triple per sample via an
//! affine map on the flattened reconstruction, squashed through softplus
//! with small additive floors so the triple always parameterizes a valid
//! NIG distribution. The epistemic variance `beta / (v (alpha - 1))` is the
//! branch-level anomaly signal; the NLL and evidence-penalty losses below
//! train the head jointly with the autoencoder.

use ndarray::Array3;
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::rng::stream;

pub const V_FLOOR: f64 = 1e-6;
pub const ALPHA_FLOOR: f64 = 1.0 + 1e-6;
pub const BETA_FLOOR: f64 = 1e-6;

/// Numerically stable `ln(1 + e^t)`.
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Logistic function, the derivative of [`softplus`].
pub fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// One NIG triple; valid by construction (floored and finite).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NigParams {
    pub v: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl NigParams {
    pub fn new(v: f64, alpha: f64, beta: f64) -> Result<NigParams> {
        let p = NigParams { v, alpha, beta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.v.is_finite()
            && self.alpha.is_finite()
            && self.beta.is_finite()
            && self.v >= V_FLOOR
            && self.alpha >= ALPHA_FLOOR
            && self.beta >= BETA_FLOOR;
        if ok {
            Ok(())
        } else {
            Err(Error::Data(format!(
                "invalid NIG triple v={} alpha={} beta={}",
                self.v, self.alpha, self.beta
            )))
        }
    }

    /// Maps raw affine outputs to a valid triple.
    pub fn from_raw(raw: [f64; 3]) -> Result<NigParams> {
        if raw.iter().any(|r| !r.is_finite()) {
            return Err(Error::Divergence(format!(
                "evidential head produced non-finite raw outputs {raw:?}"
            )));
        }
        Ok(NigParams {
            v: softplus(raw[0]) + V_FLOOR,
            alpha: 1.0 + softplus(raw[1]) + 1e-6,
            beta: softplus(raw[2]) + BETA_FLOOR,
        })
    }
}

/// Epistemic variance `beta / (v (alpha - 1))`; the per-branch anomaly score.
pub fn uncertainty(p: &NigParams) -> f64 {
    p.beta / (p.v * (p.alpha - 1.0))
}

/// Negative log likelihood of the residuals under the NIG triple, averaged
/// over elements. Uses log-gamma for stability.
pub fn nll_loss(x: &Array3<f64>, x_tilde: &Array3<f64>, p: &NigParams) -> f64 {
    assert_eq!(x.dim(), x_tilde.dim(), "residual shapes must match");
    let (v, a, b) = (p.v, p.alpha, p.beta);
    let omega = 2.0 * b * (1.0 + v);
    let constant =
        0.5 * (std::f64::consts::PI / v).ln() - a * omega.ln() + ln_gamma(a) - ln_gamma(a + 0.5);
    let n = x.len() as f64;
    let mut acc = 0.0;
    for (xv, rv) in x.iter().zip(x_tilde.iter()) {
        let r = xv - rv;
        acc += (a + 0.5) * (v * r * r + omega).ln();
    }
    constant + acc / n
}

/// Gradients of [`nll_loss`]: elementwise w.r.t. the reconstruction, plus
/// the triple `(d/dv, d/dalpha, d/dbeta)`.
pub fn nll_grads(x: &Array3<f64>, x_tilde: &Array3<f64>, p: &NigParams) -> (Array3<f64>, [f64; 3]) {
    assert_eq!(x.dim(), x_tilde.dim(), "residual shapes must match");
    let (v, a, b) = (p.v, p.alpha, p.beta);
    let omega = 2.0 * b * (1.0 + v);
    let n = x.len() as f64;
    let mut g_x = Array3::zeros(x.dim());
    let (mut gv, mut ga, mut gb) = (0.0, 0.0, 0.0);
    for ((idx, xv), rv) in x.indexed_iter().zip(x_tilde.iter()) {
        let r = xv - rv;
        let s = v * r * r + omega;
        g_x[idx] = -(a + 0.5) * 2.0 * v * r / (s * n);
        gv += -0.5 / v - a * 2.0 * b / omega + (a + 0.5) * (r * r + 2.0 * b) / s;
        ga += -omega.ln() + s.ln() + digamma(a) - digamma(a + 0.5);
        gb += -a * 2.0 * (1.0 + v) / omega + (a + 0.5) * 2.0 * (1.0 + v) / s;
    }
    (g_x, [gv / n, ga / n, gb / n])
}

/// Evidence penalty: mean absolute residual scaled by the total evidence
/// `2v + alpha`, discouraging confident heads on badly reconstructed input.
pub fn pen_loss(x: &Array3<f64>, x_tilde: &Array3<f64>, p: &NigParams) -> f64 {
    assert_eq!(x.dim(), x_tilde.dim(), "residual shapes must match");
    let n = x.len() as f64;
    let mean_abs: f64 = x
        .iter()
        .zip(x_tilde.iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n;
    mean_abs * (2.0 * p.v + p.alpha)
}

/// Gradients of [`pen_loss`] w.r.t. the reconstruction and the triple.
/// The penalty does not involve `beta`, so that slot is zero.
pub fn pen_grads(x: &Array3<f64>, x_tilde: &Array3<f64>, p: &NigParams) -> (Array3<f64>, [f64; 3]) {
    let n = x.len() as f64;
    let evidence = 2.0 * p.v + p.alpha;
    let mut g_x = Array3::zeros(x.dim());
    let mut mean_abs = 0.0;
    for ((idx, xv), rv) in x.indexed_iter().zip(x_tilde.iter()) {
        let r = xv - rv;
        mean_abs += r.abs() / n;
        let sgn = if r == 0.0 { 0.0 } else { r.signum() };
        g_x[idx] = -sgn * evidence / n;
    }
    (g_x, [2.0 * mean_abs, mean_abs, 0.0])
}

/// Affine head mapping a flattened reconstruction to the three raw NIG
/// outputs. Weights live externally as a flat slice: `3 * n_in` row-major
/// weight entries followed by 3 biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvidentialHead {
    pub n_in: usize,
}

impl EvidentialHead {
    pub fn new(n_in: usize) -> EvidentialHead {
        EvidentialHead { n_in }
    }

    pub fn param_count(&self) -> usize {
        3 * self.n_in + 3
    }

    /// Small random weights, zero biases; near-zero raw outputs at start so
    /// the initial triple sits near `(ln 2, 1 + ln 2, ln 2)`.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, 0x43AD_0001);
        let scale = 0.1 / (self.n_in as f64).sqrt();
        let mut params: Vec<f64> = (0..3 * self.n_in)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        params.extend([0.0; 3]);
        params
    }

    fn check(&self, params: &[f64], x: &Array3<f64>) {
        assert_eq!(params.len(), self.param_count(), "head parameter slice");
        assert_eq!(x.len(), self.n_in, "head input length");
    }

    /// Raw affine outputs `(r_v, r_alpha, r_beta)`.
    pub fn raw_outputs(&self, params: &[f64], x: &Array3<f64>) -> [f64; 3] {
        self.check(params, x);
        let n = self.n_in;
        let mut raw = [0.0f64; 3];
        for (k, r) in raw.iter_mut().enumerate() {
            let row = &params[k * n..(k + 1) * n];
            *r = x.iter().zip(row).map(|(xi, wi)| xi * wi).sum::<f64>() + params[3 * n + k];
        }
        raw
    }

    /// Predicts the NIG triple, also returning the raw outputs for reuse in
    /// the backward pass.
    pub fn predict(&self, params: &[f64], x: &Array3<f64>) -> Result<(NigParams, [f64; 3])> {
        let raw = self.raw_outputs(params, x);
        Ok((NigParams::from_raw(raw)?, raw))
    }

    /// Accumulates parameter gradients for a loss gradient `g_nig` w.r.t.
    /// `(v, alpha, beta)` and returns the gradient w.r.t. the input.
    pub fn backward(
        &self,
        params: &[f64],
        x: &Array3<f64>,
        raw: [f64; 3],
        g_nig: [f64; 3],
        grad_params: &mut [f64],
    ) -> Array3<f64> {
        self.check(params, x);
        assert_eq!(grad_params.len(), self.param_count());
        let n = self.n_in;
        // chain through the softplus transforms
        let g_raw = [
            g_nig[0] * logistic(raw[0]),
            g_nig[1] * logistic(raw[1]),
            g_nig[2] * logistic(raw[2]),
        ];
        let mut g_x = Array3::zeros(x.dim());
        for k in 0..3 {
            let row = &params[k * n..(k + 1) * n];
            for ((i, (idx, xv)), wi) in x.indexed_iter().enumerate().zip(row) {
                grad_params[k * n + i] += g_raw[k] * xv;
                g_x[idx] += g_raw[k] * wi;
            }
            grad_params[3 * n + k] += g_raw[k];
        }
        g_x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn arr(values: &[f64], shape: (usize, usize, usize)) -> Array3<f64> {
        Array3::from_shape_vec(shape, values.to_vec()).unwrap()
    }

    #[test]
    fn zero_raw_outputs_give_softplus_defaults() {
        let p = NigParams::from_raw([0.0, 0.0, 0.0]).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((p.v - (ln2 + 1e-6)).abs() < 1e-12);
        assert!((p.alpha - (1.0 + ln2 + 1e-6)).abs() < 1e-12);
        assert!((p.beta - (ln2 + 1e-6)).abs() < 1e-12);
    }

    #[test]
    fn large_negative_raw_outputs_hit_floors() {
        let p = NigParams::from_raw([-60.0, -60.0, -60.0]).unwrap();
        assert!((p.v - V_FLOOR).abs() < 1e-18);
        assert!((p.alpha - ALPHA_FLOOR).abs() < 1e-12);
        assert!((p.beta - BETA_FLOOR).abs() < 1e-18);
        p.validate().unwrap();
    }

    #[test]
    fn non_finite_raw_outputs_rejected() {
        match NigParams::from_raw([f64::NAN, 0.0, 0.0]) {
            Err(Error::Divergence(_)) => {}
            other => panic!("expected divergence error, got {other:?}"),
        }
    }

    #[test]
    fn uncertainty_worked_values() {
        let p = NigParams::new(1.0, 2.0, 2.0).unwrap();
        assert_eq!(uncertainty(&p), 2.0);
        let floor_beta = NigParams::new(1.0, 2.0, BETA_FLOOR).unwrap();
        assert!((uncertainty(&floor_beta) - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn uncertainty_scaling_structure() {
        let p = NigParams::new(1.5, 2.5, 3.0).unwrap();
        let u = uncertainty(&p);
        let double_beta = NigParams { beta: 6.0, ..p };
        assert!((uncertainty(&double_beta) - 2.0 * u).abs() < 1e-12);
        let double_v = NigParams { v: 3.0, ..p };
        assert!((uncertainty(&double_v) - 0.5 * u).abs() < 1e-12);
    }

    #[test]
    fn uncertainty_monotone_on_grids() {
        let base = NigParams::new(1.0, 2.0, 1.0).unwrap();
        let mut last = 0.0;
        for beta in [0.5, 1.0, 2.0, 4.0, 8.0] {
            let u = uncertainty(&NigParams { beta, ..base });
            assert!(u > last);
            last = u;
        }
        last = f64::INFINITY;
        for v in [0.5, 1.0, 2.0, 4.0] {
            let u = uncertainty(&NigParams { v, ..base });
            assert!(u < last);
            last = u;
        }
        last = f64::INFINITY;
        for alpha in [1.5, 2.0, 3.0, 5.0] {
            let u = uncertainty(&NigParams { alpha, ..base });
            assert!(u < last);
            last = u;
        }
    }

    #[test]
    fn nll_zero_residual_worked_value() {
        let x = arr(&[0.3, 0.7, 0.1, 0.9], (1, 2, 2));
        let p = NigParams::new(1.0, 2.0, 1.0).unwrap();
        let loss = nll_loss(&x, &x.clone(), &p);
        assert!(
            (loss - 0.9808292530117262).abs() < 1e-10,
            "nll = {loss:.16}"
        );
    }

    #[test]
    fn nll_symmetric_in_residual_sign() {
        let x = arr(&[0.5; 4], (1, 2, 2));
        let plus = arr(&[0.7, 0.4, 0.55, 0.9], (1, 2, 2));
        let minus = arr(&[0.3, 0.6, 0.45, 0.1], (1, 2, 2));
        let p = NigParams::new(0.8, 1.7, 0.6).unwrap();
        assert!((nll_loss(&x, &plus, &p) - nll_loss(&x, &minus, &p)).abs() < 1e-12);
    }

    #[test]
    fn pen_worked_values() {
        let x = arr(&[0.2, 0.8], (1, 1, 2));
        let p = NigParams::new(1.0, 2.0, 1.0).unwrap();
        assert_eq!(pen_loss(&x, &x.clone(), &p), 0.0);
        // mean |residual| = 1 with evidence 2v + alpha = 4
        let x1 = arr(&[1.0, 1.0], (1, 1, 2));
        let x0 = arr(&[0.0, 0.0], (1, 1, 2));
        assert!((pen_loss(&x1, &x0, &p) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn pen_increasing_in_evidence() {
        let x = arr(&[0.9, 0.1], (1, 1, 2));
        let y = arr(&[0.5, 0.5], (1, 1, 2));
        let base = pen_loss(&x, &y, &NigParams::new(1.0, 2.0, 1.0).unwrap());
        assert!(pen_loss(&x, &y, &NigParams::new(2.0, 2.0, 1.0).unwrap()) > base);
        assert!(pen_loss(&x, &y, &NigParams::new(1.0, 3.0, 1.0).unwrap()) > base);
    }

    fn fd_check<F: Fn(f64) -> f64>(f: F, at: f64, analytic: f64, tol: f64) {
        let h = 1e-3 * at.abs().max(1e-3);
        let fd = (f(at + h) - f(at - h)) / (2.0 * h);
        let denom = analytic.abs().max(fd.abs()).max(1e-8);
        assert!(
            (fd - analytic).abs() / denom <= tol,
            "fd {fd} vs analytic {analytic}"
        );
    }

    #[test]
    fn nll_gradients_match_finite_differences() {
        let x = arr(&[0.3, 0.8, 0.45, 0.05, 0.6, 0.95], (1, 2, 3));
        let xt = arr(&[0.35, 0.6, 0.5, 0.2, 0.55, 0.7], (1, 2, 3));
        let p = NigParams::new(1.3, 2.2, 0.8).unwrap();
        let (g_x, g_p) = nll_grads(&x, &xt, &p);
        for idx in [(0, 0, 0), (0, 1, 2), (0, 0, 1)] {
            fd_check(
                |t| {
                    let mut xt2 = xt.clone();
                    xt2[idx] = t;
                    nll_loss(&x, &xt2, &p)
                },
                xt[idx],
                g_x[idx],
                1e-3,
            );
        }
        fd_check(|v| nll_loss(&x, &xt, &NigParams { v, ..p }), p.v, g_p[0], 1e-3);
        fd_check(
            |alpha| nll_loss(&x, &xt, &NigParams { alpha, ..p }),
            p.alpha,
            g_p[1],
            1e-3,
        );
        fd_check(
            |beta| nll_loss(&x, &xt, &NigParams { beta, ..p }),
            p.beta,
            g_p[2],
            1e-3,
        );
    }

    #[test]
    fn pen_gradients_match_finite_differences() {
        let x = arr(&[0.9, 0.2, 0.4, 0.7], (1, 2, 2));
        let xt = arr(&[0.5, 0.35, 0.6, 0.1], (1, 2, 2));
        let p = NigParams::new(0.9, 1.8, 0.7).unwrap();
        let (g_x, g_p) = pen_grads(&x, &xt, &p);
        for idx in [(0, 0, 0), (0, 1, 1)] {
            fd_check(
                |t| {
                    let mut xt2 = xt.clone();
                    xt2[idx] = t;
                    pen_loss(&x, &xt2, &p)
                },
                xt[idx],
                g_x[idx],
                1e-3,
            );
        }
        fd_check(|v| pen_loss(&x, &xt, &NigParams { v, ..p }), p.v, g_p[0], 1e-3);
        fd_check(
            |alpha| pen_loss(&x, &xt, &NigParams { alpha, ..p }),
            p.alpha,
            g_p[1],
            1e-3,
        );
        assert_eq!(g_p[2], 0.0);
    }

    #[test]
    fn head_predicts_independent_triples_per_input() {
        let head = EvidentialHead::new(8);
        let params = head.init_params(7);
        let a = arr(&[0.1; 8], (2, 2, 2));
        let b = arr(&[0.9; 8], (2, 2, 2));
        let (pa, _) = head.predict(&params, &a).unwrap();
        let (pb, _) = head.predict(&params, &b).unwrap();
        assert_ne!(pa, pb);
        pa.validate().unwrap();
        pb.validate().unwrap();
    }

    #[test]
    fn head_backward_matches_finite_differences() {
        let head = EvidentialHead::new(6);
        let params = head.init_params(11);
        let x = arr(&[0.2, 0.9, 0.4, 0.6, 0.05, 0.75], (1, 2, 3));
        let target = arr(&[0.25, 0.8, 0.35, 0.7, 0.1, 0.6], (1, 2, 3));

        // loss(head params, input) = nll under the predicted triple
        let loss = |ps: &[f64], input: &Array3<f64>| -> f64 {
            let (p, _) = head.predict(ps, input).unwrap();
            nll_loss(&target, input, &p)
        };

        let (p, raw) = head.predict(&params, &x).unwrap();
        let (g_x_direct, g_nig) = nll_grads(&target, &x, &p);
        let mut g_params = vec![0.0; head.param_count()];
        let g_x_through_head = head.backward(&params, &x, raw, g_nig, &mut g_params);
        let g_x_total = &g_x_direct + &g_x_through_head;

        let mut rng = crate::rng::stream(3, 1);
        for _ in 0..10 {
            let i = rng.gen_range(0..params.len());
            let mut pp = params.clone();
            let h = 1e-4;
            pp[i] += h;
            let up = loss(&pp, &x);
            pp[i] -= 2.0 * h;
            let down = loss(&pp, &x);
            let fd = (up - down) / (2.0 * h);
            let denom = fd.abs().max(g_params[i].abs()).max(1e-8);
            assert!(
                (fd - g_params[i]).abs() / denom < 1e-3,
                "param {i}: fd {fd} vs {}",
                g_params[i]
            );
        }
        for idx in [(0, 0, 0), (0, 1, 2)] {
            let h = 1e-5;
            let mut xp = x.clone();
            xp[idx] += h;
            let up = loss(&params, &xp);
            xp[idx] -= 2.0 * h;
            let down = loss(&params, &xp);
            let fd = (up - down) / (2.0 * h);
            let denom = fd.abs().max(g_x_total[idx].abs()).max(1e-8);
            assert!(
                (fd - g_x_total[idx]).abs() / denom < 1e-3,
                "input {idx:?}: fd {fd} vs {}",
                g_x_total[idx]
            );
        }
    }

    #[test]
    fn head_fit_reduces_nll_monotonically() {
        // Fixed residual field; the head alone should learn to explain it.
        let head = EvidentialHead::new(16);
        let mut params = head.init_params(5);
        let mut rng = crate::rng::stream(9, 2);
        let x = Array3::from_shape_fn((1, 4, 4), |_| rng.gen_range(0.0..1.0));
        let x_tilde = Array3::from_shape_fn((1, 4, 4), |_| rng.gen_range(0.0..1.0));
        let mut last = f64::INFINITY;
        for _ in 0..30 {
            let (p, raw) = head.predict(&params, &x_tilde).unwrap();
            let loss = nll_loss(&x, &x_tilde, &p);
            assert!(loss < last, "loss {loss} did not decrease from {last}");
            last = loss;
            let (_, g_nig) = nll_grads(&x, &x_tilde, &p);
            let mut g = vec![0.0; head.param_count()];
            head.backward(&params, &x_tilde, raw, g_nig, &mut g);
            for (w, gi) in params.iter_mut().zip(&g) {
                *w -= 0.05 * gi;
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn prop_predicted_params_always_valid(seed in 0u64..10_000, scale in 0.1f64..50.0) {
            let head = EvidentialHead::new(12);
            let mut params = head.init_params(seed);
            for p in params.iter_mut() {
                *p *= scale;
            }
            let mut rng = crate::rng::stream(seed, 3);
            let x = Array3::from_shape_fn((3, 2, 2), |_| rng.gen_range(0.0..1.0));
            let (p, _) = head.predict(&params, &x).unwrap();
            prop_assert!(p.validate().is_ok());
            let u = uncertainty(&p);
            prop_assert!(u.is_finite() && u >= 0.0);
        }

        #[test]
        fn prop_losses_finite(
            v in 1e-6f64..20.0,
            alpha_off in 1e-6f64..20.0,
            beta in 1e-6f64..20.0,
            r in -5.0f64..5.0,
        ) {
            let p = NigParams::new(v, 1.0 + alpha_off, beta).unwrap();
            let x = arr(&[r, 0.0], (1, 1, 2));
            let zero = arr(&[0.0, 0.0], (1, 1, 2));
            prop_assert!(nll_loss(&x, &zero, &p).is_finite());
            prop_assert!(pen_loss(&x, &zero, &p).is_finite());
        }
    }
}
