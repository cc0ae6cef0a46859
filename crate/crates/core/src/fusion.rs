//! Closed-form merging of the two branches' evidential outputs and the
//! fused anomaly score.
//!
//! The merged reconstruction is the evidence-weighted mean of the branch
//! reconstructions; evidence parameters add, and the fused `beta` absorbs
//! the mean squared disagreement between each branch and the consensus, so
//! branch conflict directly raises the reported uncertainty.

use ndarray::Array3;

use crate::evidential::NigParams;

/// One branch's reconstruction together with its NIG triple.
#[derive(Debug, Clone)]
pub struct BranchEvidence {
    pub x_tilde: Array3<f64>,
    pub params: NigParams,
}

/// Result of merging two branches.
#[derive(Debug, Clone)]
pub struct FusedEvidence {
    pub x_tilde_f: Array3<f64>,
    pub v_f: f64,
    pub alpha_f: f64,
    pub beta_f: f64,
}

impl FusedEvidence {
    pub fn nig(&self) -> NigParams {
        NigParams {
            v: self.v_f,
            alpha: self.alpha_f,
            beta: self.beta_f,
        }
    }
}

/// Merges the two branches' evidential outputs.
///
/// With `s = v_l + v_h` and elementwise mean `m`:
/// the fused reconstruction is `(v_l x_l + v_h x_h) / s`, `v` and `alpha`
/// accumulate (`alpha` gains an extra 1/2), and
/// `beta_f = beta_l + beta_h + v_l m(d_l^2)/2 + v_h m(d_h^2)/2` where `d_b`
/// is each branch's deviation from the fused reconstruction.
pub fn fuse_nig(low: &BranchEvidence, high: &BranchEvidence) -> FusedEvidence {
    assert_eq!(
        low.x_tilde.dim(),
        high.x_tilde.dim(),
        "branch reconstructions must share one shape"
    );
    let (vl, vh) = (low.params.v, high.params.v);
    let s = vl + vh;
    let x_tilde_f = (&low.x_tilde * vl + &high.x_tilde * vh) / s;
    let n = x_tilde_f.len() as f64;
    let (mut m_dl2, mut m_dh2) = (0.0, 0.0);
    for ((idx, &xf), (&xl, &xh)) in x_tilde_f
        .indexed_iter()
        .zip(low.x_tilde.iter().zip(high.x_tilde.iter()))
    {
        let _ = idx;
        let dl = xl - xf;
        let dh = xh - xf;
        m_dl2 += dl * dl / n;
        m_dh2 += dh * dh / n;
    }
    FusedEvidence {
        x_tilde_f,
        v_f: s,
        alpha_f: low.params.alpha + high.params.alpha + 0.5,
        beta_f: low.params.beta + high.params.beta + 0.5 * vl * m_dl2 + 0.5 * vh * m_dh2,
    }
}

/// Fused epistemic variance `beta_f / (v_f (alpha_f - 1))`; the anomaly score.
pub fn anomaly_score(f: &FusedEvidence) -> f64 {
    f.beta_f / (f.v_f * (f.alpha_f - 1.0))
}

/// Gradient of some scalar loss with respect to one branch's outputs.
#[derive(Debug, Clone)]
pub struct BranchGrad {
    pub g_x: Array3<f64>,
    pub g_v: f64,
    pub g_alpha: f64,
    pub g_beta: f64,
}

/// Backpropagates through [`fuse_nig`].
///
/// Inputs are the upstream gradients with respect to the fused outputs:
/// `g_xf` (array) and the scalars `(g_vf, g_alpha_f, g_beta_f)`. The
/// weighted deviations cancel (`v_l d_l + v_h d_h = 0`), which collapses the
/// chain rule to the closed forms used here; correctness is pinned by
/// finite-difference tests.
pub fn fuse_backward(
    low: &BranchEvidence,
    high: &BranchEvidence,
    fused: &FusedEvidence,
    g_xf: &Array3<f64>,
    g_vf: f64,
    g_alpha_f: f64,
    g_beta_f: f64,
) -> (BranchGrad, BranchGrad) {
    let (vl, vh) = (low.params.v, high.params.v);
    let s = vl + vh;
    let n = fused.x_tilde_f.len() as f64;
    let (wl, wh) = (vl / s, vh / s);

    let d_l = &low.x_tilde - &fused.x_tilde_f;
    let d_h = &high.x_tilde - &fused.x_tilde_f;
    let m_dl2 = d_l.iter().map(|d| d * d).sum::<f64>() / n;
    let m_dh2 = d_h.iter().map(|d| d * d).sum::<f64>() / n;
    let gf_dot_dl = g_xf.iter().zip(d_l.iter()).map(|(g, d)| g * d).sum::<f64>();
    let gf_dot_dh = g_xf.iter().zip(d_h.iter()).map(|(g, d)| g * d).sum::<f64>();

    let low_grad = BranchGrad {
        g_x: g_xf * wl + &d_l * (g_beta_f * vl / n),
        g_v: g_vf + g_beta_f * 0.5 * m_dl2 + gf_dot_dl / s,
        g_alpha: g_alpha_f,
        g_beta: g_beta_f,
    };
    let high_grad = BranchGrad {
        g_x: g_xf * wh + &d_h * (g_beta_f * vh / n),
        g_v: g_vf + g_beta_f * 0.5 * m_dh2 + gf_dot_dh / s,
        g_alpha: g_alpha_f,
        g_beta: g_beta_f,
    };
    (low_grad, high_grad)
}

/// Scoring-time combination rules used as fusion baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StaticFuseMode {
    Product,
    WeightedSum,
}

/// Combines two per-branch scores without evidential weighting.
/// `w` only affects [`StaticFuseMode::WeightedSum`]; pass 0.5 for the
/// unweighted mean.
pub fn static_fuse(score_l: f64, score_h: f64, mode: StaticFuseMode, w: f64) -> f64 {
    match mode {
        StaticFuseMode::Product => score_l * score_h,
        StaticFuseMode::WeightedSum => w * score_l + (1.0 - w) * score_h,
    }
}
