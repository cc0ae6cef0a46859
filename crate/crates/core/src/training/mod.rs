//! Multi-task trainer for the dual-branch detector.
//!
//! A model is one or two branches, each a frequency-constrained autoencoder
//! followed by an evidential head, optimized jointly with Adam. The dual
//! model adds a fused term: per sample the two branches' evidence is merged
//! in closed form and the merged reconstruction/NIG triple incur the same
//! loss as a branch, so gradients flow back through the fusion into both
//! branches. Training uses normal traffic only; runs are deterministic for
//! a fixed seed and resumable bit for bit from saved state.

pub mod checkpoint;

pub use checkpoint::{Checkpoint, TrainState};

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evidential::{
    nll_grads, nll_loss, pen_grads, pen_loss, uncertainty, EvidentialHead, NigParams,
};
use crate::fusion::{
    anomaly_score, fuse_backward, fuse_nig, static_fuse, BranchEvidence, StaticFuseMode,
};
use crate::ingest::{Label, TrafficSample};
use crate::model::{integrate_complement, AEConfig, AeCache, Autoencoder, BranchKind, RecLossCtx};
use crate::rng::{mix_seed, stream};
use crate::spectral::{gaussian_masks, ifftshift2, Dft2};

/// Relative improvement of the epoch-mean loss below which an epoch counts
/// as a plateau strike.
pub const MIN_REL_IMPROVEMENT: f64 = 1e-4;

const SHUFFLE_TAG: u64 = 0xE70C_0001;
const AE_INIT_TAG: u64 = 0xB7A9_C000;
const HEAD_INIT_TAG: u64 = 0x6EAD_0000;

/// Full training configuration; serializes to/from TOML with these exact
/// field names, and unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lambda_nll: f64,
    pub lambda_pen: f64,
    pub lambda_f: f64,
    /// Packet planes per flow image; must match `ae.in_planes`.
    pub p: usize,
    /// Gaussian mask cutoff (standard deviation in frequency bins).
    pub d: f64,
    pub seed: u64,
    /// Plateau strikes tolerated before early stop.
    pub patience: usize,
    /// Seeds per experiment when aggregating metrics across repeats.
    pub n_runs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub ae: AEConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 128,
            max_epochs: 60,
            lambda_nll: 1e-2,
            lambda_pen: 1e-4,
            lambda_f: 1e-2,
            p: 8,
            d: 5.0,
            seed: 0,
            patience: 10,
            n_runs: 5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            ae: AEConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("d", self.d),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("lambda_nll", self.lambda_nll),
            ("lambda_pen", self.lambda_pen),
            ("lambda_f", self.lambda_f),
        ];
        for (name, v) in nonneg {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("p", self.p),
            ("patience", self.patience),
            ("n_runs", self.n_runs),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !b.is_finite() || !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.p != self.ae.in_planes {
            return Err(Error::Config(format!(
                "p = {} does not match ae.in_planes = {}",
                self.p, self.ae.in_planes
            )));
        }
        self.ae.validate()
    }

    /// SHA-256 of the canonical TOML serialization; identifies the exact
    /// effective configuration in reports and artifact names.
    pub fn config_hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        hex::encode(hasher.finalize())
    }
}

/// Model variants: the full dual model, or one with a named part removed or
/// replaced by a baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Full dual-branch model with evidential fusion.
    None,
    /// High-frequency branch only.
    NoLowBranch,
    /// Low-frequency branch only.
    NoHighBranch,
    /// Single full-spectrum autoencoder and head; no band splitting.
    NoDecouple,
    /// Dual model trained without the frequency-domain loss term.
    NoFreqLoss,
    /// Dual model scored by multiplying per-branch scores instead of
    /// evidential fusion.
    StaticFusionProduct,
    /// Dual model scored by an equal-weight sum of per-branch scores.
    StaticFusionSum,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::None,
        Ablation::NoLowBranch,
        Ablation::NoHighBranch,
        Ablation::NoDecouple,
        Ablation::NoFreqLoss,
        Ablation::StaticFusionProduct,
        Ablation::StaticFusionSum,
    ];

    /// Short name used in checkpoint file names and reports.
    pub fn tag(self) -> &'static str {
        match self {
            Ablation::None => "full",
            Ablation::NoLowBranch => "no_low_branch",
            Ablation::NoHighBranch => "no_high_branch",
            Ablation::NoDecouple => "no_decouple",
            Ablation::NoFreqLoss => "no_freq_loss",
            Ablation::StaticFusionProduct => "static_fusion_product",
            Ablation::StaticFusionSum => "static_fusion_sum",
        }
    }

    pub fn parse(s: &str) -> Result<Ablation> {
        match s {
            "none" | "full" => Ok(Ablation::None),
            "no_low_branch" => Ok(Ablation::NoLowBranch),
            "no_high_branch" => Ok(Ablation::NoHighBranch),
            "no_decouple" => Ok(Ablation::NoDecouple),
            "no_freq_loss" => Ok(Ablation::NoFreqLoss),
            "static_fusion" | "static_fusion_product" => Ok(Ablation::StaticFusionProduct),
            "static_fusion_sum" => Ok(Ablation::StaticFusionSum),
            other => Err(Error::Config(format!("unknown ablation '{other}'"))),
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Ablation::None => 0,
            Ablation::NoLowBranch => 1,
            Ablation::NoHighBranch => 2,
            Ablation::NoDecouple => 3,
            Ablation::NoFreqLoss => 4,
            Ablation::StaticFusionProduct => 5,
            Ablation::StaticFusionSum => 6,
        }
    }

    pub(crate) fn from_code(code: u8) -> Result<Ablation> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.code() == code)
            .ok_or_else(|| Error::Checkpoint(format!("unknown ablation code {code}")))
    }

    /// Whether this variant trains two branches.
    pub fn is_dual(self) -> bool {
        matches!(
            self,
            Ablation::None
                | Ablation::NoFreqLoss
                | Ablation::StaticFusionProduct
                | Ablation::StaticFusionSum
        )
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Number of weights in one branch's flat `[autoencoder | head]` vector.
pub fn branch_param_count(cfg: &TrainConfig) -> Result<usize> {
    cfg.validate()?;
    let ae = Autoencoder::new(cfg.ae.clone())?;
    let head = EvidentialHead::new(cfg.p * cfg.ae.h * cfg.ae.w);
    Ok(ae.param_count() + head.param_count())
}

/// One branch's composite loss: reconstruction (spatial plus weighted
/// frequency term via `ctx`) plus weighted NIG likelihood and penalty terms.
pub fn branch_loss(
    x: &Array3<f64>,
    x_tilde: &Array3<f64>,
    nig: &NigParams,
    ctx: &RecLossCtx,
    lambda_nll: f64,
    lambda_pen: f64,
) -> Result<f64> {
    let loss = ctx.loss(x, x_tilde)
        + lambda_nll * nll_loss(x, x_tilde, nig)
        + lambda_pen * pen_loss(x, x_tilde, nig);
    if !loss.is_finite() {
        return Err(Error::Divergence(format!(
            "branch loss is not finite ({loss})"
        )));
    }
    Ok(loss)
}

/// Splits samples into low/high bands with shared FFT plans.
///
/// The high band is computed as `x - low`, which is the linearity identity
/// for the complementary mask and keeps recombination exact.
struct Decoupler {
    plans: Dft2,
    mask_low_nat: Array2<f64>,
}

impl Decoupler {
    fn new(h: usize, w: usize, cutoff: f64) -> Result<Decoupler> {
        let masks = gaussian_masks(h, w, cutoff)?;
        Ok(Decoupler {
            plans: Dft2::new(h, w),
            mask_low_nat: ifftshift2(masks.low.view()),
        })
    }

    fn split(&self, x: &Array3<f64>) -> (Array3<f64>, Array3<f64>) {
        let (p, h, w) = x.dim();
        let mut low = Array3::zeros((p, h, w));
        for pi in 0..p {
            let mut f = self.plans.forward_plane(x.index_axis(Axis(0), pi));
            f.zip_mut_with(&self.mask_low_nat, |c, &m| *c *= m);
            let inv = self.plans.inverse_plane(f.view());
            low.index_axis_mut(Axis(0), pi)
                .assign(&inv.mapv(|c| c.re));
        }
        let high = x - &low;
        (low, high)
    }
}

struct BranchSpec {
    kind: BranchKind,
    ctx: RecLossCtx,
}

struct BranchFwd {
    ev: BranchEvidence,
    raw: [f64; 3],
    cache: Option<AeCache>,
}

/// The differentiable model for one ablation variant: shared architecture,
/// per-branch loss contexts, and the optional fused term.
///
/// Weights live outside the graph as flat vectors (one per branch, layout
/// `[autoencoder | head]`), so the same graph serves training, finite
/// difference probes, and scoring.
pub struct TrainingGraph {
    ae: Autoencoder,
    head: EvidentialHead,
    branches: Vec<BranchSpec>,
    fused_ctx: Option<RecLossCtx>,
    dec: Option<Decoupler>,
    ablation: Ablation,
    lambda_nll: f64,
    lambda_pen: f64,
}

impl TrainingGraph {
    pub fn new(cfg: &TrainConfig, ablation: Ablation) -> Result<TrainingGraph> {
        cfg.validate()?;
        let ae = Autoencoder::new(cfg.ae.clone())?;
        let head = EvidentialHead::new(cfg.p * cfg.ae.h * cfg.ae.w);
        let lambda_f = if ablation == Ablation::NoFreqLoss {
            0.0
        } else {
            cfg.lambda_f
        };
        let kinds: Vec<BranchKind> = match ablation {
            _ if ablation.is_dual() => vec![BranchKind::Low, BranchKind::High],
            Ablation::NoLowBranch => vec![BranchKind::High],
            Ablation::NoHighBranch => vec![BranchKind::Low],
            Ablation::NoDecouple => vec![BranchKind::Fused],
            _ => unreachable!(),
        };
        let (h, w) = (cfg.ae.h, cfg.ae.w);
        let branches = kinds
            .into_iter()
            .map(|kind| {
                Ok(BranchSpec {
                    kind,
                    ctx: RecLossCtx::new(kind, h, w, cfg.d, lambda_f)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let fused_ctx = if ablation.is_dual() {
            Some(RecLossCtx::new(BranchKind::Fused, h, w, cfg.d, lambda_f)?)
        } else {
            None
        };
        let dec = if ablation == Ablation::NoDecouple {
            None
        } else {
            Some(Decoupler::new(h, w, cfg.d)?)
        };
        Ok(TrainingGraph {
            ae,
            head,
            branches,
            fused_ctx,
            dec,
            ablation,
            lambda_nll: cfg.lambda_nll,
            lambda_pen: cfg.lambda_pen,
        })
    }

    pub fn n_sets(&self) -> usize {
        self.branches.len()
    }

    /// Length of each branch's flat weight vector.
    pub fn param_len(&self) -> usize {
        self.ae.param_count() + self.head.param_count()
    }

    /// Independent initial weights per branch, derived from one run seed.
    pub fn init_param_sets(&self, seed: u64) -> Vec<Vec<f64>> {
        (0..self.n_sets())
            .map(|i| {
                let mut set = self
                    .ae
                    .init_params_seeded(mix_seed(seed, AE_INIT_TAG + i as u64));
                set.extend(self.head.init_params(mix_seed(seed, HEAD_INIT_TAG + i as u64)));
                set
            })
            .collect()
    }

    fn check_sets(&self, param_sets: &[Vec<f64>]) {
        assert_eq!(param_sets.len(), self.n_sets(), "weight set count");
        for s in param_sets {
            assert_eq!(s.len(), self.param_len(), "weight set length");
        }
    }

    /// Per-branch (band, complement) inputs for one sample.
    fn bands(&self, x: &Array3<f64>) -> Vec<(Array3<f64>, Array3<f64>)> {
        match &self.dec {
            Some(dec) => {
                let (low, high) = dec.split(x);
                self.branches
                    .iter()
                    .map(|b| match b.kind {
                        BranchKind::Low => (low.clone(), high.clone()),
                        BranchKind::High => (high.clone(), low.clone()),
                        BranchKind::Fused => unreachable!("full-spectrum branch with decoupler"),
                    })
                    .collect()
            }
            None => vec![(x.clone(), Array3::zeros(x.dim()))],
        }
    }

    fn forward(
        &self,
        param_sets: &[Vec<f64>],
        x: &Array3<f64>,
        with_cache: bool,
    ) -> Result<Vec<BranchFwd>> {
        self.check_sets(param_sets);
        let n_ae = self.ae.param_count();
        self.bands(x)
            .into_iter()
            .zip(param_sets)
            .map(|((band, complement), set)| {
                let (p_ae, p_head) = set.split_at(n_ae);
                let (out, cache) = if with_cache {
                    let (out, cache) = self.ae.forward_cached(p_ae, &band);
                    (out, Some(cache))
                } else {
                    (self.ae.forward(p_ae, &band), None)
                };
                let x_tilde = integrate_complement(&out, &complement);
                let (nig, raw) = self.head.predict(p_head, &x_tilde)?;
                Ok(BranchFwd {
                    ev: BranchEvidence {
                        x_tilde,
                        params: nig,
                    },
                    raw,
                    cache,
                })
            })
            .collect()
    }

    /// Per-term losses for one sample: one entry per branch, plus the fused
    /// term last for dual models.
    pub fn sample_loss_parts(&self, param_sets: &[Vec<f64>], x: &Array3<f64>) -> Result<Vec<f64>> {
        let fwd = self.forward(param_sets, x, false)?;
        let mut parts = Vec::with_capacity(fwd.len() + 1);
        for (spec, f) in self.branches.iter().zip(&fwd) {
            parts.push(branch_loss(
                x,
                &f.ev.x_tilde,
                &f.ev.params,
                &spec.ctx,
                self.lambda_nll,
                self.lambda_pen,
            )?);
        }
        if let Some(ctx_f) = &self.fused_ctx {
            let fused = fuse_nig(&fwd[0].ev, &fwd[1].ev);
            parts.push(branch_loss(
                x,
                &fused.x_tilde_f,
                &fused.nig(),
                ctx_f,
                self.lambda_nll,
                self.lambda_pen,
            )?);
        }
        Ok(parts)
    }

    /// Total loss for one sample (sum of the per-term losses).
    pub fn sample_loss(&self, param_sets: &[Vec<f64>], x: &Array3<f64>) -> Result<f64> {
        Ok(self.sample_loss_parts(param_sets, x)?.iter().sum())
    }

    /// Computes the total loss for one sample and accumulates its weight
    /// gradients (`+=`) into `grads`, one flat vector per branch.
    pub fn sample_grad(
        &self,
        param_sets: &[Vec<f64>],
        x: &Array3<f64>,
        grads: &mut [Vec<f64>],
    ) -> Result<f64> {
        self.check_sets(param_sets);
        assert_eq!(grads.len(), self.n_sets(), "gradient set count");
        let (ln, lp) = (self.lambda_nll, self.lambda_pen);
        let n_ae = self.ae.param_count();
        let fwd = self.forward(param_sets, x, true)?;

        let mut total = 0.0;
        // Gradients reaching each branch through the fused term.
        let mut via_fusion: Vec<(Array3<f64>, [f64; 3])> = Vec::new();
        if let Some(ctx_f) = &self.fused_ctx {
            let fused = fuse_nig(&fwd[0].ev, &fwd[1].ev);
            let nig_f = fused.nig();
            total += branch_loss(x, &fused.x_tilde_f, &nig_f, ctx_f, ln, lp)?;
            let (_, mut g_xf) = ctx_f.loss_and_grad(x, &fused.x_tilde_f);
            let (g_nll_x, g_nll_nig) = nll_grads(x, &fused.x_tilde_f, &nig_f);
            let (g_pen_x, g_pen_nig) = pen_grads(x, &fused.x_tilde_f, &nig_f);
            g_xf.scaled_add(ln, &g_nll_x);
            g_xf.scaled_add(lp, &g_pen_x);
            let g_vf = ln * g_nll_nig[0] + lp * g_pen_nig[0];
            let g_af = ln * g_nll_nig[1] + lp * g_pen_nig[1];
            let g_bf = ln * g_nll_nig[2] + lp * g_pen_nig[2];
            let (low, high) = fuse_backward(&fwd[0].ev, &fwd[1].ev, &fused, &g_xf, g_vf, g_af, g_bf);
            via_fusion = vec![
                (low.g_x, [low.g_v, low.g_alpha, low.g_beta]),
                (high.g_x, [high.g_v, high.g_alpha, high.g_beta]),
            ];
        }

        for (bi, f) in fwd.iter().enumerate() {
            let ctx = &self.branches[bi].ctx;
            let xt = &f.ev.x_tilde;
            let nig = &f.ev.params;
            total += branch_loss(x, xt, nig, ctx, ln, lp)?;

            let (_, mut g_xt) = ctx.loss_and_grad(x, xt);
            let (g_nll_x, g_nll_nig) = nll_grads(x, xt, nig);
            let (g_pen_x, g_pen_nig) = pen_grads(x, xt, nig);
            g_xt.scaled_add(ln, &g_nll_x);
            g_xt.scaled_add(lp, &g_pen_x);
            let mut g_nig = [
                ln * g_nll_nig[0] + lp * g_pen_nig[0],
                ln * g_nll_nig[1] + lp * g_pen_nig[1],
                ln * g_nll_nig[2] + lp * g_pen_nig[2],
            ];
            if !via_fusion.is_empty() {
                g_xt += &via_fusion[bi].0;
                for (g, extra) in g_nig.iter_mut().zip(via_fusion[bi].1) {
                    *g += extra;
                }
            }

            let (p_ae, p_head) = param_sets[bi].split_at(n_ae);
            let (g_ae, g_head) = grads[bi].split_at_mut(n_ae);
            let g_from_head = self.head.backward(p_head, xt, f.raw, g_nig, g_head);
            g_xt += &g_from_head;
            let cache = f.cache.as_ref().expect("cached forward");
            self.ae.backward(p_ae, cache, &g_xt, g_ae);
        }
        if !total.is_finite() {
            return Err(Error::Divergence(format!(
                "sample loss is not finite ({total})"
            )));
        }
        Ok(total)
    }

    /// `(fused, low, high)` anomaly scores for one sample. Branches absent
    /// from this variant report `NaN`; the full-spectrum variant reports its
    /// single score in the fused slot only.
    pub fn sample_scores(&self, param_sets: &[Vec<f64>], x: &Array3<f64>) -> Result<(f64, f64, f64)> {
        let fwd = self.forward(param_sets, x, false)?;
        Ok(match self.ablation {
            Ablation::None | Ablation::NoFreqLoss => {
                let s_l = uncertainty(&fwd[0].ev.params);
                let s_h = uncertainty(&fwd[1].ev.params);
                let fused = anomaly_score(&fuse_nig(&fwd[0].ev, &fwd[1].ev));
                (fused, s_l, s_h)
            }
            Ablation::StaticFusionProduct | Ablation::StaticFusionSum => {
                let s_l = uncertainty(&fwd[0].ev.params);
                let s_h = uncertainty(&fwd[1].ev.params);
                let mode = if self.ablation == Ablation::StaticFusionProduct {
                    StaticFuseMode::Product
                } else {
                    StaticFuseMode::WeightedSum
                };
                (static_fuse(s_l, s_h, mode, 0.5), s_l, s_h)
            }
            Ablation::NoLowBranch => {
                let s = uncertainty(&fwd[0].ev.params);
                (s, f64::NAN, s)
            }
            Ablation::NoHighBranch => {
                let s = uncertainty(&fwd[0].ev.params);
                (s, s, f64::NAN)
            }
            Ablation::NoDecouple => {
                let s = uncertainty(&fwd[0].ev.params);
                (s, f64::NAN, f64::NAN)
            }
        })
    }
}

/// Reconstructions produced for one sample; branch slots are `None` when
/// the variant lacks that branch.
#[derive(Debug, Clone)]
pub struct SampleRecon {
    pub recon_low: Option<Array3<f64>>,
    pub recon_high: Option<Array3<f64>>,
    /// The model's final reconstruction: the fused one for dual models,
    /// otherwise the single branch's output.
    pub recon_fused: Array3<f64>,
}

impl TrainingGraph {
    pub fn sample_reconstructions(
        &self,
        param_sets: &[Vec<f64>],
        x: &Array3<f64>,
    ) -> Result<SampleRecon> {
        let mut fwd = self.forward(param_sets, x, false)?;
        Ok(if self.fused_ctx.is_some() {
            let fused = fuse_nig(&fwd[0].ev, &fwd[1].ev);
            let high = fwd.pop().expect("high branch");
            let low = fwd.pop().expect("low branch");
            SampleRecon {
                recon_low: Some(low.ev.x_tilde),
                recon_high: Some(high.ev.x_tilde),
                recon_fused: fused.x_tilde_f,
            }
        } else {
            let only = fwd.pop().expect("single branch");
            let xt = only.ev.x_tilde;
            match self.branches[0].kind {
                BranchKind::Low => SampleRecon {
                    recon_low: Some(xt.clone()),
                    recon_high: None,
                    recon_fused: xt,
                },
                BranchKind::High => SampleRecon {
                    recon_low: None,
                    recon_high: Some(xt.clone()),
                    recon_fused: xt,
                },
                BranchKind::Fused => SampleRecon {
                    recon_low: None,
                    recon_high: None,
                    recon_fused: xt,
                },
            }
        })
    }
}

struct Adam {
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn step(&mut self, params: &mut [f64], g: &[f64]) {
        assert_eq!(params.len(), g.len());
        assert_eq!(self.m.len(), g.len());
        self.t += 1;
        let bc1 = 1.0 - self.b1.powi(self.t as i32);
        let bc2 = 1.0 - self.b2.powi(self.t as i32);
        for i in 0..g.len() {
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g[i];
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g[i] * g[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// True when `loss` beats `best` by at least the relative plateau margin.
fn is_improvement(best: f64, loss: f64) -> bool {
    if !best.is_finite() {
        return loss.is_finite();
    }
    loss < best - MIN_REL_IMPROVEMENT * best.abs()
}

/// Result of a training call: the best-loss weights as a checkpoint, plus
/// the full optimizer state for resumption.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub state: TrainState,
}

fn check_train_samples(samples: &[TrafficSample], cfg: &TrainConfig) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::InsufficientNormals { need: 1, have: 0 });
    }
    for s in samples {
        if s.label != Label::Normal {
            return Err(Error::Data(format!(
                "training set must contain only normal traffic; '{}' is labeled {}",
                s.source_id,
                s.label.as_str()
            )));
        }
    }
    check_sample_shapes(samples, cfg)
}

fn check_sample_shapes(samples: &[TrafficSample], cfg: &TrainConfig) -> Result<()> {
    for s in samples {
        let shape = s.shape();
        if (shape.p, shape.h, shape.w) != (cfg.p, cfg.ae.h, cfg.ae.w) {
            return Err(Error::Shape(format!(
                "sample '{}' has shape {}x{}x{}, model expects {}x{}x{}",
                s.source_id, shape.p, shape.h, shape.w, cfg.p, cfg.ae.h, cfg.ae.w
            )));
        }
    }
    Ok(())
}

/// Trains a model from fresh weights until plateau or the epoch budget.
pub fn train(samples: &[TrafficSample], cfg: &TrainConfig, ablation: Ablation) -> Result<TrainOutcome> {
    train_partial(samples, cfg, ablation, usize::MAX)
}

/// Like [`train`] but runs at most `epoch_cap` epochs in this call; the
/// returned state can be saved and passed to [`resume`].
pub fn train_partial(
    samples: &[TrafficSample],
    cfg: &TrainConfig,
    ablation: Ablation,
    epoch_cap: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_train_samples(samples, cfg)?;
    let graph = TrainingGraph::new(cfg, ablation)?;
    let param_sets = graph.init_param_sets(cfg.seed);
    let n = graph.param_len();
    let state = TrainState {
        cfg: cfg.clone(),
        ablation,
        epoch: 0,
        best_loss: f64::INFINITY,
        strikes: 0,
        adam_t: 0,
        loss_history: Vec::new(),
        best_params: param_sets.clone(),
        adam_m: vec![vec![0.0; n]; param_sets.len()],
        adam_v: vec![vec![0.0; n]; param_sets.len()],
        param_sets,
    };
    run_epochs(&graph, samples, state, epoch_cap)
}

/// Continues an interrupted run; the remaining epochs reproduce what an
/// uninterrupted run would have computed, bit for bit.
pub fn resume(state: TrainState, samples: &[TrafficSample]) -> Result<TrainOutcome> {
    state.cfg.validate()?;
    check_train_samples(samples, &state.cfg)?;
    let graph = TrainingGraph::new(&state.cfg, state.ablation)?;
    if state.param_sets.len() != graph.n_sets()
        || state.param_sets.iter().any(|s| s.len() != graph.param_len())
    {
        return Err(Error::Checkpoint(
            "saved state does not match the architecture in its config".into(),
        ));
    }
    run_epochs(&graph, samples, state, usize::MAX)
}

fn run_epochs(
    graph: &TrainingGraph,
    samples: &[TrafficSample],
    mut state: TrainState,
    epoch_cap: usize,
) -> Result<TrainOutcome> {
    let cfg = state.cfg.clone();
    let end = cfg.max_epochs.min(state.epoch.saturating_add(epoch_cap));
    let mut adams: Vec<Adam> = (0..state.param_sets.len())
        .map(|i| Adam {
            lr: cfg.learning_rate,
            b1: cfg.adam_beta1,
            b2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            t: state.adam_t,
            m: std::mem::take(&mut state.adam_m[i]),
            v: std::mem::take(&mut state.adam_v[i]),
        })
        .collect();
    let mut grads: Vec<Vec<f64>> = state
        .param_sets
        .iter()
        .map(|p| vec![0.0; p.len()])
        .collect();

    while state.epoch < end && state.strikes < cfg.patience {
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut stream(cfg.seed, SHUFFLE_TAG ^ epoch as u64));

        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            for g in &mut grads {
                g.fill(0.0);
            }
            let mut batch_loss = 0.0;
            for &i in batch {
                let x = samples[i].to_f64();
                batch_loss += graph.sample_grad(&state.param_sets, &x, &mut grads)?;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "batch loss diverged at epoch {epoch}"
                )));
            }
            let inv = 1.0 / batch.len() as f64;
            for (k, adam) in adams.iter_mut().enumerate() {
                for g in &mut grads[k] {
                    *g *= inv;
                }
                adam.step(&mut state.param_sets[k], &grads[k]);
            }
            loss_sum += batch_loss;
        }

        let mean = loss_sum / samples.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence(format!(
                "epoch {epoch} mean loss diverged"
            )));
        }
        state.loss_history.push(mean);
        if is_improvement(state.best_loss, mean) {
            state.best_loss = mean;
            state.strikes = 0;
            state.best_params = state.param_sets.clone();
        } else {
            state.strikes += 1;
        }
        state.epoch = epoch + 1;
    }

    for (i, adam) in adams.into_iter().enumerate() {
        state.adam_t = adam.t;
        state.adam_m[i] = adam.m;
        state.adam_v[i] = adam.v;
    }
    Ok(TrainOutcome {
        checkpoint: state.to_checkpoint(),
        state,
    })
}

/// One scored sample; absent branch columns hold `NaN`.
#[derive(Debug, Clone)]
pub struct ScoreRow {
    pub source_id: String,
    pub label: Label,
    pub score_fused: f64,
    pub score_low: f64,
    pub score_high: f64,
}

/// Scores every sample with a trained model, preserving input order.
pub fn score_dataset(ckpt: &Checkpoint, samples: &[TrafficSample]) -> Result<Vec<ScoreRow>> {
    ckpt.validate()?;
    check_sample_shapes(samples, &ckpt.cfg)?;
    let graph = TrainingGraph::new(&ckpt.cfg, ckpt.ablation)?;
    samples
        .iter()
        .map(|s| {
            let x = s.to_f64();
            let (fused, low, high) = graph.sample_scores(&ckpt.param_sets, &x)?;
            Ok(ScoreRow {
                source_id: s.source_id.clone(),
                label: s.label,
                score_fused: fused,
                score_low: low,
                score_high: high,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::layers::Nonlinearity;
    use ndarray::Array3;
    use rand::Rng;
    use tempfile::TempDir;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            p: 2,
            d: 1.5,
            ae: AEConfig {
                in_planes: 2,
                h: 4,
                w: 4,
                widths: vec![2],
                latent: 3,
                attention: true,
                nonlinearity: Nonlinearity::LeakyRelu,
                init_seed: 0,
            },
            batch_size: 4,
            max_epochs: 2,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            p: 2,
            d: 2.0,
            ae: AEConfig {
                in_planes: 2,
                h: 8,
                w: 8,
                widths: vec![4],
                latent: 8,
                attention: true,
                nonlinearity: Nonlinearity::LeakyRelu,
                init_seed: 0,
            },
            batch_size: 8,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    fn mk_samples(n: usize, p: usize, h: usize, w: usize, seed: u64) -> Vec<TrafficSample> {
        let mut rng = stream(seed, 0x7E57_0001);
        (0..n)
            .map(|i| {
                let data = Array3::from_shape_fn((p, h, w), |(pi, r, c)| {
                    let base = 0.25 + 0.5 * (((pi + r + c) % 7) as f32 / 7.0);
                    let noise: f32 = rng.gen_range(-0.05..0.05);
                    (base + noise).clamp(0.0, 1.0)
                });
                TrafficSample::new(data, Label::Normal, format!("flow-{i}")).unwrap()
            })
            .collect()
    }

    fn rand_x(p: usize, h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut rng = stream(seed, 0x7E57_0002);
        Array3::from_shape_fn((p, h, w), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn config_defaults_round_trip_toml() {
        let cfg = TrainConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: TrainConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        // empty file means all defaults
        let empty: TrainConfig = toml::from_str("").unwrap();
        assert_eq!(empty, cfg);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(toml::from_str::<TrainConfig>("bogus_knob = 1").is_err());
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let bad = [
            TrainConfig {
                lambda_f: -0.5,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                p: 4, // ae.in_planes stays 8
                ..TrainConfig::default()
            },
            TrainConfig {
                d: 0.0,
                ..TrainConfig::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let cfg = TrainConfig::default();
        let h1 = cfg.config_hash();
        let h2 = cfg.config_hash();
        assert_eq!(h1, h2);
        assert_eq!(h1.len(), 64);
        assert!(h1.chars().all(|c| c.is_ascii_hexdigit()));
        let other = TrainConfig {
            seed: 1,
            ..TrainConfig::default()
        };
        assert_ne!(h1, other.config_hash());
    }

    #[test]
    fn ablation_tags_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(Ablation::parse(a.tag()).unwrap(), a);
            assert_eq!(Ablation::from_code(a.code()).unwrap(), a);
        }
        assert_eq!(Ablation::parse("static_fusion").unwrap(), Ablation::StaticFusionProduct);
        assert!(Ablation::parse("nonsense").is_err());
    }

    #[test]
    fn branch_loss_reduces_to_reconstruction_when_lambdas_zero() {
        let ctx = RecLossCtx::new(BranchKind::Fused, 4, 4, 1.5, 1e-2).unwrap();
        let x = rand_x(2, 4, 4, 1);
        let xt = rand_x(2, 4, 4, 2);
        let nig = NigParams::new(1.0, 2.0, 1.0).unwrap();
        let bl = branch_loss(&x, &xt, &nig, &ctx, 0.0, 0.0).unwrap();
        assert_eq!(bl, ctx.loss(&x, &xt));
    }

    #[test]
    fn branch_loss_matches_hand_computed_value_on_perfect_reconstruction() {
        // zero residual kills the reconstruction and penalty terms; with
        // (v, alpha, beta) = (1, 2, 1) the likelihood term is known exactly
        let ctx = RecLossCtx::new(BranchKind::Fused, 4, 4, 1.5, 1e-2).unwrap();
        let x = Array3::from_elem((1, 4, 4), 0.3);
        let nig = NigParams::new(1.0, 2.0, 1.0).unwrap();
        let bl = branch_loss(&x, &x.clone(), &nig, &ctx, 1e-2, 1e-4).unwrap();
        assert!((bl - 9.808292530117262e-3).abs() < 1e-12, "got {bl}");
    }

    #[test]
    fn branch_loss_symmetric_for_identical_artifacts() {
        // with the frequency term disabled the loss cannot depend on which
        // band a branch owns, so identical artifacts give identical losses
        let ctx_low = RecLossCtx::new(BranchKind::Low, 4, 4, 1.5, 0.0).unwrap();
        let ctx_high = RecLossCtx::new(BranchKind::High, 4, 4, 1.5, 0.0).unwrap();
        let x = rand_x(2, 4, 4, 3);
        let xt = rand_x(2, 4, 4, 4);
        let nig = NigParams::new(0.5, 1.7, 0.9).unwrap();
        let l = branch_loss(&x, &xt, &nig, &ctx_low, 1e-2, 1e-4).unwrap();
        let h = branch_loss(&x, &xt, &nig, &ctx_high, 1e-2, 1e-4).unwrap();
        assert_eq!(l, h);

        // with zero residual the masked spectra match exactly, so the
        // frequency term vanishes for both branch masks
        let ctx_low = RecLossCtx::new(BranchKind::Low, 4, 4, 1.5, 1e-2).unwrap();
        let ctx_high = RecLossCtx::new(BranchKind::High, 4, 4, 1.5, 1e-2).unwrap();
        let l = branch_loss(&x, &x.clone(), &nig, &ctx_low, 1e-2, 1e-4).unwrap();
        let h = branch_loss(&x, &x.clone(), &nig, &ctx_high, 1e-2, 1e-4).unwrap();
        assert!((l - h).abs() < 1e-15);
    }

    #[test]
    fn total_loss_is_sum_of_parts() {
        let cfg = tiny_cfg();
        let graph = TrainingGraph::new(&cfg, Ablation::None).unwrap();
        let params = graph.init_param_sets(cfg.seed);
        let x = rand_x(2, 4, 4, 5);
        let parts = graph.sample_loss_parts(&params, &x).unwrap();
        assert_eq!(parts.len(), 3);
        let total = graph.sample_loss(&params, &x).unwrap();
        assert_eq!(total, parts.iter().sum::<f64>());
        assert!(parts.iter().all(|p| p.is_finite() && *p > 0.0));
    }

    #[test]
    fn dropping_frequency_term_lowers_loss() {
        let mut cfg = tiny_cfg();
        cfg.lambda_f = 0.5;
        let x = rand_x(2, 4, 4, 6);
        let full = TrainingGraph::new(&cfg, Ablation::None).unwrap();
        let params = full.init_param_sets(cfg.seed);
        let with_term = full.sample_loss(&params, &x).unwrap();
        let without = TrainingGraph::new(&cfg, Ablation::NoFreqLoss)
            .unwrap()
            .sample_loss(&params, &x)
            .unwrap();
        assert!(with_term > without);
    }

    #[test]
    fn composite_gradient_matches_finite_differences_through_fusion() {
        let cfg = tiny_cfg();
        let graph = TrainingGraph::new(&cfg, Ablation::None).unwrap();
        let params = graph.init_param_sets(cfg.seed);
        let x = rand_x(2, 4, 4, 8);

        let mut grads: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        graph.sample_grad(&params, &x, &mut grads).unwrap();

        let mut rng = stream(99, 0x7E57_0003);
        let eps = 1e-6;
        for _ in 0..24 {
            let set = rng.gen_range(0..params.len());
            let idx = rng.gen_range(0..params[set].len());
            let mut plus = params.clone();
            plus[set][idx] += eps;
            let mut minus = params.clone();
            minus[set][idx] -= eps;
            let fd = (graph.sample_loss(&plus, &x).unwrap()
                - graph.sample_loss(&minus, &x).unwrap())
                / (2.0 * eps);
            let an = grads[set][idx];
            let scale = an.abs().max(fd.abs()).max(1e-3);
            assert!(
                (fd - an).abs() / scale < 1e-2,
                "set {set} idx {idx}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn training_rejects_anomalous_and_empty_sets() {
        let cfg = tiny_cfg();
        let mut samples = mk_samples(4, 2, 4, 4, 1);
        samples[2].label = Label::Anomalous;
        match train(&samples, &cfg, Ablation::None) {
            Err(Error::Data(msg)) => assert!(msg.contains("normal")),
            other => panic!("expected data error, got {other:?}"),
        }
        match train(&[], &cfg, Ablation::None) {
            Err(Error::InsufficientNormals { need: 1, have: 0 }) => {}
            other => panic!("expected insufficient normals, got {other:?}"),
        }
    }

    #[test]
    fn training_rejects_shape_mismatch() {
        let cfg = tiny_cfg();
        let samples = mk_samples(2, 2, 8, 8, 1);
        assert!(matches!(
            train(&samples, &cfg, Ablation::None),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn improvement_rule_applies_relative_margin() {
        assert!(is_improvement(f64::INFINITY, 1.0));
        assert!(!is_improvement(f64::INFINITY, f64::NAN));
        assert!(!is_improvement(1.0, 0.9999)); // exactly at the margin
        assert!(is_improvement(1.0, 0.99989));
        assert!(!is_improvement(1.0, 1.2));
    }

    #[test]
    fn constant_loss_triggers_early_stop() {
        let mut cfg = tiny_cfg();
        cfg.learning_rate = 1e-12; // effectively frozen weights
        cfg.max_epochs = 50;
        cfg.patience = 3;
        let samples = mk_samples(6, 2, 4, 4, 2);
        let out = train(&samples, &cfg, Ablation::None).unwrap();
        // first epoch sets the best loss, then `patience` plateau strikes
        assert_eq!(out.state.epoch, 1 + cfg.patience);
        assert_eq!(out.state.loss_history.len(), 1 + cfg.patience);
        assert_eq!(out.state.strikes, cfg.patience);
    }

    #[test]
    fn loss_decreases_over_epochs() {
        let mut cfg = small_cfg();
        cfg.max_epochs = 10;
        let samples = mk_samples(16, 2, 8, 8, 3);
        let out = train(&samples, &cfg, Ablation::None).unwrap();
        let hist = &out.state.loss_history;
        assert!(hist.len() >= 2);
        assert!(
            hist.last().unwrap() < &hist[0],
            "loss failed to decrease: {hist:?}"
        );
        assert_eq!(out.state.best_loss, hist.iter().copied().fold(f64::INFINITY, f64::min));
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny_cfg();
        let samples = mk_samples(6, 2, 4, 4, 4);
        let a = train(&samples, &cfg, Ablation::None).unwrap();
        let b = train(&samples, &cfg, Ablation::None).unwrap();
        assert_eq!(a.state.loss_history, b.state.loss_history);
        for (pa, pb) in a.checkpoint.param_sets.iter().zip(&b.checkpoint.param_sets) {
            assert!(pa.iter().zip(pb).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn full_spectrum_variant_halves_weight_count() {
        let cfg = tiny_cfg();
        let samples = mk_samples(4, 2, 4, 4, 5);
        let dual = train(&samples, &cfg, Ablation::None).unwrap().checkpoint;
        let single = train(&samples, &cfg, Ablation::NoDecouple).unwrap().checkpoint;
        assert_eq!(dual.param_sets.len(), 2);
        assert_eq!(single.param_sets.len(), 1);
        let dual_total: usize = dual.param_sets.iter().map(Vec::len).sum();
        let single_total: usize = single.param_sets.iter().map(Vec::len).sum();
        assert_eq!(dual_total, 2 * single_total);
    }

    #[test]
    fn interrupted_run_resumes_bit_for_bit() {
        let mut cfg = tiny_cfg();
        cfg.max_epochs = 6;
        let samples = mk_samples(8, 2, 4, 4, 6);
        let straight = train(&samples, &cfg, Ablation::None).unwrap();

        let part = train_partial(&samples, &cfg, Ablation::None, 3).unwrap();
        assert_eq!(part.state.epoch, 3);
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("run.state");
        part.state.save(&path).unwrap();
        let resumed = resume(TrainState::load(&path).unwrap(), &samples).unwrap();

        assert_eq!(straight.state.loss_history, resumed.state.loss_history);
        for (a, b) in straight
            .checkpoint
            .param_sets
            .iter()
            .zip(&resumed.checkpoint.param_sets)
        {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_scores() {
        let cfg = tiny_cfg();
        let samples = mk_samples(5, 2, 4, 4, 7);
        let out = train(&samples, &cfg, Ablation::None).unwrap();
        let before = score_dataset(&out.checkpoint, &samples).unwrap();
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("model.ckpt");
        out.checkpoint.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let after = score_dataset(&loaded, &samples).unwrap();
        assert_eq!(before.len(), after.len());
        for (a, b) in before.iter().zip(&after) {
            assert_eq!(a.source_id, b.source_id);
            assert_eq!(a.score_fused.to_bits(), b.score_fused.to_bits());
            assert_eq!(a.score_low.to_bits(), b.score_low.to_bits());
            assert_eq!(a.score_high.to_bits(), b.score_high.to_bits());
        }
    }

    #[test]
    fn branch_weights_are_isolated() {
        let cfg = tiny_cfg();
        let samples = mk_samples(5, 2, 4, 4, 8);
        let out = train(&samples, &cfg, Ablation::None).unwrap();
        let base = score_dataset(&out.checkpoint, &samples).unwrap();
        let mut bumped = out.checkpoint.clone();
        bumped.param_sets[0][0] += 0.25;
        let after = score_dataset(&bumped, &samples).unwrap();
        for (a, b) in base.iter().zip(&after) {
            assert_eq!(a.score_high.to_bits(), b.score_high.to_bits());
        }
        assert!(base
            .iter()
            .zip(&after)
            .any(|(a, b)| a.score_low.to_bits() != b.score_low.to_bits()));
    }

    #[test]
    fn score_columns_follow_variant_conventions() {
        let cfg = tiny_cfg();
        let samples = mk_samples(4, 2, 4, 4, 9);

        let only_low = train(&samples, &cfg, Ablation::NoHighBranch).unwrap();
        for r in score_dataset(&only_low.checkpoint, &samples).unwrap() {
            assert!(r.score_high.is_nan());
            assert_eq!(r.score_fused.to_bits(), r.score_low.to_bits());
        }

        let only_high = train(&samples, &cfg, Ablation::NoLowBranch).unwrap();
        for r in score_dataset(&only_high.checkpoint, &samples).unwrap() {
            assert!(r.score_low.is_nan());
            assert_eq!(r.score_fused.to_bits(), r.score_high.to_bits());
        }

        let full_spectrum = train(&samples, &cfg, Ablation::NoDecouple).unwrap();
        for r in score_dataset(&full_spectrum.checkpoint, &samples).unwrap() {
            assert!(r.score_low.is_nan() && r.score_high.is_nan());
            assert!(r.score_fused.is_finite());
        }

        let product = train(&samples, &cfg, Ablation::StaticFusionProduct).unwrap();
        for r in score_dataset(&product.checkpoint, &samples).unwrap() {
            assert_eq!(r.score_fused, r.score_low * r.score_high);
        }
        let sum = train(&samples, &cfg, Ablation::StaticFusionSum).unwrap();
        for r in score_dataset(&sum.checkpoint, &samples).unwrap() {
            assert!((r.score_fused - 0.5 * (r.score_low + r.score_high)).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_first_step_size_is_learning_rate() {
        let mut adam = Adam {
            lr: 0.05,
            b1: 0.9,
            b2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0],
            v: vec![0.0],
        };
        let mut p = vec![1.0];
        adam.step(&mut p, &[0.37]);
        // bias correction makes the first update lr * sign(g) up to eps
        assert!((p[0] - (1.0 - 0.05)).abs() < 1e-6, "got {}", p[0]);
    }

    #[test]
    fn adam_drives_quadratic_to_zero() {
        let mut adam = Adam {
            lr: 0.05,
            b1: 0.9,
            b2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0],
            v: vec![0.0],
        };
        let mut p = vec![1.0];
        for _ in 0..2000 {
            let g = [p[0]];
            adam.step(&mut p, &g);
        }
        assert!(p[0].abs() < 1e-2, "got {}", p[0]);
    }

    #[test]
    fn decoupler_bands_recombine_exactly() {
        let dec = Decoupler::new(8, 8, 2.0).unwrap();
        let x = rand_x(2, 8, 8, 10);
        let (low, high) = dec.split(&x);
        let sum = &low + &high;
        for (a, b) in sum.iter().zip(x.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // matches the reference band splitter closely
        let bands = crate::spectral::decouple_array(&x, 2.0).unwrap();
        let max_dev = low
            .iter()
            .zip(bands.low.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_dev < 1e-10, "band deviation {max_dev}");
    }
}
