//! Trains the desk-scale profile on synthetic scenes and reports held-out
//! kNN recall of object embeddings.
//!
//! `cargo run --release --example smoke_run -- [iterations] [out_dir]`

use std::sync::Arc;
use std::time::Instant;

use ccop::config::{BoxSource, Config};
use ccop::datapipe::{Dataset, ProposalSource};
use ccop::evalkit::{embed_samples, knn_recall_multi, Which};
use ccop::rng::{derive_seed, stream};
use ccop::trainer::{read_metrics, train_loop, LoopOptions};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn main() -> ccop::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mut cfg = Config::acceptance();
    if let Some(n) = args.get(1) {
        cfg.train.iterations = n.parse().expect("iterations");
    }
    if let Ok(sets) = std::env::var("SMOKE_SET") {
        let sets: Vec<String> = sets.split(';').map(str::to_string).collect();
        cfg = cfg.with_overrides(&sets)?;
    }
    let out = std::path::PathBuf::from(args.get(2).cloned().unwrap_or_else(|| "target/smoke_run".into()));
    let source = match cfg.data.boxes {
        BoxSource::SelectiveSearch => ProposalSource::SelectiveSearch,
        BoxSource::GroundTruth => ProposalSource::GroundTruth,
        BoxSource::Random => ProposalSource::Random(cfg.data.random_count),
    };
    let t0 = Instant::now();
    let ds = Arc::new(Dataset::synthetic(cfg.data.synthetic_count, cfg.seed, &cfg.synth, source, &cfg.proposals)?);
    eprintln!("dataset ready in {:.1}s", t0.elapsed().as_secs_f64());
    let opts = LoopOptions { log_every: 25, ..Default::default() };
    let tr = train_loop(ds, &cfg, &out, &opts)?;
    eprintln!("trained in {:.1}s", t0.elapsed().as_secs_f64());

    let reports = read_metrics(&out.join("metrics.jsonl"))?;
    let n = reports.len().min(100);
    let first = median(reports[..n].iter().map(|r| r.loss_total).collect());
    let last = median(reports[reports.len() - n..].iter().map(|r| r.loss_total).collect());
    println!("median loss first {n}: {first:.4}  last {n}: {last:.4}");

    let held = Dataset::synthetic(
        cfg.data.heldout_count,
        derive_seed(cfg.seed, stream::HELDOUT, 0),
        &cfg.synth,
        ProposalSource::GroundTruth,
        &cfg.proposals,
    )?;
    let aug = ccop::datapipe::AugConfig::identity(cfg.augment.view_w, cfg.augment.view_h);
    for which in [Which::Prediction, Which::Backbone] {
        let items = embed_samples(&tr.encoder, &tr.state.query, &held.samples, which, &aug)?;
        let r = knn_recall_multi(&items, &[1, 5, 10])?;
        println!("{which:?}: top1 {:.3} top5 {:.3} top10 {:.3}", r[0], r[1], r[2]);
    }
    Ok(())
}
