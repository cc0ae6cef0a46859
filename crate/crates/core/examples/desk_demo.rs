//! Desk-scale end-to-end run: synthesizes a labeled traffic corpus, trains
//! the full dual-branch model and each ablation, and prints a metric table.
//!
//! All arguments are optional `key=value` pairs, for example:
//!
//! ```text
//! cargo run --release -p freeup-core --example desk_demo -- seed=7 epochs=20
//! ```
//!
//! Keys and defaults: seed=42 epochs=40 train=2000 test=200 anoms=200 p=8
//! hw=16 width=16 latent=32 attention=1 d=5 classes=2 tpc=2 amp=0.18
//! noise=0.02 cutoff=5 mix=1.0 shift=0.0

use std::collections::BTreeMap;
use std::time::Instant;

use freeup_core::eval::{acc_f1_at_best_threshold, auroc};
use freeup_core::ingest::{build_split, synth_corpus, Label, SynthSpec, TrafficSample};
use freeup_core::model::layers::Nonlinearity;
use freeup_core::model::AEConfig;
use freeup_core::training::{score_dataset, train, Ablation, Checkpoint, TrainConfig};

fn main() {
    let args: BTreeMap<String, f64> = std::env::args()
        .skip(1)
        .filter_map(|a| {
            let (k, v) = a.split_once('=')?;
            Some((k.to_string(), v.parse().ok()?))
        })
        .collect();
    let num = |key: &str, default: f64| args.get(key).copied().unwrap_or(default);

    let seed = num("seed", 42.0) as u64;
    let p = num("p", 8.0) as usize;
    let hw = num("hw", 16.0) as usize;
    let spec = SynthSpec {
        p,
        h: hw,
        w: hw,
        n_classes: num("classes", 2.0) as usize,
        textures_per_class: num("tpc", 2.0) as usize,
        texture_amp: num("amp", 0.18),
        noise_amp: num("noise", 0.02),
        cutoff: num("cutoff", 5.0),
        anomaly_texture_mix: num("mix", 1.0),
        anomaly_low_shift: num("shift", 0.0),
    };
    let n_train = num("train", 2000.0) as usize;
    let n_test = num("test", 200.0) as usize;
    let n_anoms = num("anoms", 200.0) as usize;

    let cfg = TrainConfig {
        seed,
        max_epochs: num("epochs", 40.0) as usize,
        p,
        d: num("d", 5.0),
        ae: AEConfig {
            in_planes: p,
            h: hw,
            w: hw,
            widths: vec![num("width", 16.0) as usize],
            latent: num("latent", 32.0) as usize,
            attention: num("attention", 1.0) != 0.0,
            nonlinearity: Nonlinearity::LeakyRelu,
            init_seed: 0,
        },
        ..TrainConfig::default()
    };

    let dir = tempfile::tempdir().expect("tempdir");
    println!(
        "synthesizing {} normals + {} anomalies ({p}x{hw}x{hw}), training on {n_train}",
        n_train + n_test,
        n_anoms
    );
    let manifest =
        synth_corpus(dir.path(), n_train + n_test, n_anoms, seed, &spec).expect("corpus");
    let (train_recs, test_recs) = build_split(&manifest, n_train, seed).expect("split");
    let load = |recs: &[freeup_core::ingest::ManifestRecord]| -> Vec<TrafficSample> {
        recs.iter()
            .map(|r| manifest.load_record(r).expect("sample load"))
            .collect()
    };
    let train_set = load(&train_recs);
    let test_set = load(&test_recs);

    println!(
        "{:<24} {:>8} {:>8} {:>8} {:>8}",
        "variant", "auc", "acc", "f1", "secs"
    );
    let mut full_ckpt = None;
    for ab in [
        Ablation::None,
        Ablation::NoDecouple,
        Ablation::NoLowBranch,
        Ablation::NoHighBranch,
        Ablation::NoFreqLoss,
    ] {
        let started = Instant::now();
        let outcome = train(&train_set, &cfg, ab).expect("training");
        report(ab, &outcome.checkpoint, &test_set, started.elapsed().as_secs_f64());
        if ab == Ablation::None {
            full_ckpt = Some(outcome.checkpoint);
        }
    }

    // The static rules rescore the jointly trained dual model.
    let full_ckpt = full_ckpt.expect("full model trained");
    for ab in [Ablation::StaticFusionProduct, Ablation::StaticFusionSum] {
        let mut ckpt = full_ckpt.clone();
        ckpt.ablation = ab;
        report(ab, &ckpt, &test_set, 0.0);
    }
}

fn report(ab: Ablation, ckpt: &Checkpoint, test_set: &[TrafficSample], secs: f64) {
    let rows = score_dataset(ckpt, test_set).expect("scoring");
    let scores: Vec<f64> = rows.iter().map(|r| r.score_fused).collect();
    let labels: Vec<Label> = rows.iter().map(|r| r.label).collect();
    let auc = auroc(&scores, &labels).expect("auroc");
    let (acc, f1, _) = acc_f1_at_best_threshold(&scores, &labels).expect("threshold sweep");
    println!(
        "{:<24} {auc:>8.4} {acc:>8.4} {f1:>8.4} {secs:>8.1}",
        ab.tag()
    );
}
