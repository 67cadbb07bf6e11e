//! Command-line front end. [`run`] returns the process exit code: 0 on
//! success, 1 on usage errors, 2 on runtime failures.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{ArgGroup, Args, CommandFactory, Parser, Subcommand};
use rayon::prelude::*;

use crate::config::{BoxSource, Config};
use crate::datapipe::{list_images, load_proposals, make_pair, save_proposals, synth_scene, AugConfig, Dataset, ProposalSource};
use crate::error::{Error, Result};
use crate::evalkit::{
    box_query_heatmap, embed_samples, grad_saturation_report, knn_recall_multi, prepare_view, probe_pairs, read_embeddings,
    write_embeddings, Which,
};
use crate::geometry::BBox;
use crate::image::Image;
use crate::network::{batch_from_chw, Encoder};
use crate::proposals::{propose_boxes, random_boxes, ProposalSet};
use crate::rng::{derive_seed, stream};
use crate::trainer::{load_checkpoint, snapshots_dir, train_loop, Checkpoint, LoopOptions};

#[derive(Parser, Debug)]
#[command(name = "ccop", version, about = "Object-level contrastive pre-training with a spatial noise curriculum")]
struct Cli {
    /// Base seed for every random stream (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.base_lr=0.1` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute region proposals for every image in a directory.
    Propose(ProposeArgs),
    /// Pre-train the encoders.
    Pretrain(PretrainArgs),
    /// kNN recall of object embeddings.
    EvalKnn(EvalKnnArgs),
    /// Write per-box embeddings as JSON lines.
    ExportEmbeddings(ExportArgs),
    /// Positive-pair gradient saturation over training snapshots.
    DiagnoseGrad(DiagnoseArgs),
    /// Correlate a query box with every position of a key image.
    QueryBox(QueryBoxArgs),
    /// Write synthetic scenes with ground truth and proposals.
    SynthDemo(SynthDemoArgs),
}

#[derive(Args, Debug)]
struct ProposeArgs {
    #[arg(long, value_name = "DIR")]
    images: PathBuf,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Emit N random boxes per image instead of selective search.
    #[arg(long, value_name = "N")]
    random: Option<usize>,
    /// Worker threads for per-image fan-out.
    #[arg(long, value_name = "N")]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("source").required(true).args(["synthetic", "proposals"])))]
struct PretrainArgs {
    /// Train on seeded synthetic scenes.
    #[arg(long)]
    synthetic: bool,
    /// Proposals file (requires --images).
    #[arg(long, value_name = "FILE", requires = "images")]
    proposals: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    images: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    /// Stop after this many iterations (the run can be resumed later).
    #[arg(long, value_name = "N")]
    stop_at: Option<u64>,
    /// Progress line interval; 0 is silent.
    #[arg(long, default_value_t = 50)]
    log_every: u64,
}

#[derive(Args, Debug)]
struct EvalKnnArgs {
    #[arg(long, value_name = "DIR")]
    ckpt: PathBuf,
    /// `synthetic` for held-out synthetic scenes, or an embeddings file.
    #[arg(long, default_value = "synthetic")]
    data: String,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    topk: Vec<usize>,
    #[arg(long, default_value = "prediction", value_parser = parse_which)]
    which: Which,
    /// Also write the table to this file.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long, value_name = "DIR")]
    ckpt: PathBuf,
    #[arg(long, value_parser = parse_which)]
    which: Which,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Image directory; with --proposals exports proposal boxes instead of
    /// held-out synthetic ground truth.
    #[arg(long, value_name = "DIR", requires = "proposals")]
    images: Option<PathBuf>,
    #[arg(long, value_name = "FILE", requires = "images")]
    proposals: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    /// A run directory, or a single checkpoint.
    #[arg(long, value_name = "DIR")]
    ckpt: PathBuf,
    /// Image pairs in the probe batch.
    #[arg(long, default_value_t = 16)]
    pairs: usize,
    /// Also write the table to this file.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct QueryBoxArgs {
    #[arg(long, value_name = "DIR")]
    ckpt: PathBuf,
    #[arg(long, value_name = "IMG")]
    query: PathBuf,
    /// Query box in query-image pixels: x,y,w,h.
    #[arg(long = "box", value_parser = parse_box)]
    bbox: BBox,
    #[arg(long, value_name = "IMG")]
    key: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthDemoArgs {
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
}

fn parse_which(s: &str) -> std::result::Result<Which, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_box(s: &str) -> std::result::Result<BBox, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| format!("`{p}` is not a number")))
        .collect::<std::result::Result<_, _>>()?;
    let [x, y, w, h] = v[..] else {
        return Err(format!("expected x,y,w,h, got {} values", v.len()));
    };
    BBox::try_new(x, y, w, h).map_err(|e| e.to_string())
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n");
            let mut cmd = Cli::command();
            let name = subcommand_name(&cli.command);
            if let Some(sub) = cmd.find_subcommand_mut(name) {
                eprintln!("{}", sub.render_usage());
            }
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::Propose(_) => "propose",
        Command::Pretrain(_) => "pretrain",
        Command::EvalKnn(_) => "eval-knn",
        Command::ExportEmbeddings(_) => "export-embeddings",
        Command::DiagnoseGrad(_) => "diagnose-grad",
        Command::QueryBox(_) => "query-box",
        Command::SynthDemo(_) => "synth-demo",
    }
}

/// File config (or defaults), then `--set` overrides, then `--seed`.
fn effective_config(cli: &Cli, base: Option<Config>) -> std::result::Result<Config, Failure> {
    let mut cfg = match (&cli.config, base) {
        (Some(path), _) => Config::load(path)?,
        (None, Some(b)) => b,
        (None, None) => Config::default(),
    };
    cfg = cfg.with_overrides(&cli.overrides).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

/// Records `cfg` beside an output: `config.toml` inside a directory, or
/// `<name>.config.toml` next to a file.
fn echo_config(cfg: &Config, out: &Path, is_dir: bool) -> Result<()> {
    let path = if is_dir {
        out.join("config.toml")
    } else {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".config.toml");
        out.with_file_name(name)
    };
    cfg.save(path)
}

/// Accepts a checkpoint directory or a run directory containing one.
fn resolve_checkpoint(dir: &Path) -> Result<Checkpoint> {
    if dir.join("manifest.json").exists() {
        load_checkpoint(dir)
    } else {
        load_checkpoint(&dir.join("checkpoint"))
    }
}

/// Checkpoint config with the command line's seed and overrides applied to
/// evaluation-only keys. Network shape always comes from the checkpoint.
fn eval_config(cli: &Cli, ckpt: &Checkpoint) -> std::result::Result<Config, Failure> {
    let mut cfg = effective_config(cli, Some(ckpt.config.clone()))?;
    cfg.network = ckpt.config.network.clone();
    Ok(cfg)
}

fn heldout(cfg: &Config) -> Result<Dataset> {
    Dataset::synthetic(
        cfg.data.heldout_count,
        derive_seed(cfg.seed, stream::HELDOUT, 0),
        &cfg.synth,
        ProposalSource::GroundTruth,
        &cfg.proposals,
    )
}

fn dispatch(cli: &Cli) -> std::result::Result<(), Failure> {
    match &cli.command {
        Command::Propose(a) => propose(cli, a),
        Command::Pretrain(a) => pretrain(cli, a),
        Command::EvalKnn(a) => eval_knn(cli, a),
        Command::ExportEmbeddings(a) => export(cli, a),
        Command::DiagnoseGrad(a) => diagnose(cli, a),
        Command::QueryBox(a) => query_box(cli, a),
        Command::SynthDemo(a) => synth_demo(cli, a),
    }
}

fn propose(cli: &Cli, a: &ProposeArgs) -> std::result::Result<(), Failure> {
    let cfg = effective_config(cli, None)?;
    if a.workers == Some(0) {
        return Err(Failure::Usage("--workers must be at least 1".into()));
    }
    let images = list_images(&a.images)?;
    let work = || -> Result<Vec<ProposalSet>> {
        images
            .par_iter()
            .enumerate()
            .map(|(i, (id, path))| {
                let img = Image::load(path)?;
                match a.random {
                    Some(n) => {
                        let seed = derive_seed(cfg.seed, stream::RANDOM_BOXES, i as u64);
                        Ok(random_boxes(id, img.width(), img.height(), n, seed, &cfg.proposals))
                    }
                    None => propose_boxes(id, &img, &cfg.proposals),
                }
            })
            .collect()
    };
    let sets = match a.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::invalid(e.to_string()))?
            .install(work)?,
        None => work()?,
    };
    save_proposals(&sets, &a.out)?;
    echo_config(&cfg, &a.out, false)?;
    let boxes: usize = sets.iter().map(ProposalSet::len).sum();
    println!("{} images, {boxes} boxes -> {}", sets.len(), a.out.display());
    Ok(())
}

fn pretrain(cli: &Cli, a: &PretrainArgs) -> std::result::Result<(), Failure> {
    let cfg = effective_config(cli, None)?;
    let dataset = if a.synthetic {
        let source = match cfg.data.boxes {
            BoxSource::SelectiveSearch => ProposalSource::SelectiveSearch,
            BoxSource::GroundTruth => ProposalSource::GroundTruth,
            BoxSource::Random => ProposalSource::Random(cfg.data.random_count),
        };
        Dataset::synthetic(cfg.data.synthetic_count, cfg.seed, &cfg.synth, source, &cfg.proposals)?
    } else {
        let (Some(p), Some(dir)) = (&a.proposals, &a.images) else {
            return Err(Failure::Usage("--proposals requires --images".into()));
        };
        Dataset::from_image_dir(dir, &load_proposals(p)?)?
    };
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let reference = a.out.join("config.reference");
    std::fs::write(&reference, crate::config::reference()).map_err(|e| Error::io(&reference, e))?;
    let opts = LoopOptions {
        resume: a.resume,
        stop_at: a.stop_at,
        log_every: a.log_every,
    };
    let tr = train_loop(Arc::new(dataset), &cfg, &a.out, &opts)?;
    println!(
        "trained {}/{} iterations -> {}",
        tr.state.t,
        tr.state.total,
        a.out.join("checkpoint").display()
    );
    Ok(())
}

fn eval_knn(cli: &Cli, a: &EvalKnnArgs) -> std::result::Result<(), Failure> {
    if a.topk.is_empty() || a.topk.contains(&0) {
        return Err(Failure::Usage("--topk needs positive integers".into()));
    }
    let (cfg, items) = if a.data == "synthetic" {
        let ckpt = resolve_checkpoint(&a.ckpt)?;
        let cfg = eval_config(cli, &ckpt)?;
        let enc = ckpt.encoder()?;
        let aug = AugConfig::identity(cfg.augment.view_w, cfg.augment.view_h);
        let items = embed_samples(&enc, &ckpt.state.query, &heldout(&cfg)?.samples, a.which, &aug)?;
        (cfg, items)
    } else {
        (effective_config(cli, None)?, read_embeddings(Path::new(&a.data))?)
    };
    let recalls = knn_recall_multi(&items, &a.topk)?;
    let mut table = String::from("k\trecall\n");
    for (k, r) in a.topk.iter().zip(recalls) {
        table.push_str(&format!("{k}\t{r:.4}\n"));
    }
    print!("{table}");
    if let Some(out) = &a.out {
        std::fs::write(out, &table).map_err(|e| Error::io(out, e))?;
        echo_config(&cfg, out, false)?;
    }
    Ok(())
}

fn export(cli: &Cli, a: &ExportArgs) -> std::result::Result<(), Failure> {
    let ckpt = resolve_checkpoint(&a.ckpt)?;
    let cfg = eval_config(cli, &ckpt)?;
    let enc = ckpt.encoder()?;
    let data = match (&a.images, &a.proposals) {
        (Some(dir), Some(p)) => Dataset::from_image_dir(dir, &load_proposals(p)?)?,
        _ => heldout(&cfg)?,
    };
    let aug = AugConfig::identity(cfg.augment.view_w, cfg.augment.view_h);
    let items = embed_samples(&enc, &ckpt.state.query, &data.samples, a.which, &aug)?;
    write_embeddings(&a.out, &items)?;
    echo_config(&cfg, &a.out, false)?;
    println!("{} records -> {}", items.len(), a.out.display());
    Ok(())
}

fn diagnose(cli: &Cli, a: &DiagnoseArgs) -> std::result::Result<(), Failure> {
    if a.pairs < 2 {
        return Err(Failure::Usage("--pairs must be at least 2".into()));
    }
    // probe points: every snapshot of the run, or initialisation plus the checkpoint
    let snaps = [snapshots_dir(&a.ckpt), a.ckpt.parent().map(snapshots_dir).unwrap_or_default()]
        .into_iter()
        .find(|d| d.is_dir());
    let mut points: Vec<(String, Checkpoint)> = Vec::new();
    if let Some(dir) = snaps {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("manifest.json").exists())
            .collect();
        entries.sort();
        for p in entries {
            let ck = load_checkpoint(&p)?;
            points.push((format!("step-{}", ck.state.t), ck));
        }
    }
    if points.len() < 2 {
        let ck = resolve_checkpoint(&a.ckpt)?;
        let enc = ck.encoder()?;
        let init = enc.init(ck.config.seed);
        let mut init_ck = resolve_checkpoint(&a.ckpt)?;
        init_ck.state.t = 0;
        init_ck.state.key = init.to_key();
        init_ck.state.query = init;
        points = vec![("init".into(), init_ck), (format!("step-{}", ck.state.t), ck)];
    }
    let cfg = eval_config(cli, &points[points.len() - 1].1)?;
    let held = heldout(&cfg)?;
    let n = a.pairs.min(held.len());
    let pairs: Vec<_> = (0..n)
        .map(|i| {
            let s = &held.samples[i];
            let sq = derive_seed(cfg.seed, stream::VIEW_Q, u64::MAX - i as u64);
            let sk = derive_seed(cfg.seed, stream::VIEW_K, u64::MAX - i as u64);
            make_pair(&s.image, &s.proposals, sq, sk, &cfg.augment)
        })
        .collect();
    let probes = points
        .iter()
        .map(|(name, ck)| {
            let enc = ck.encoder()?;
            probe_pairs(&enc, &ck.state.query, &ck.state.key, &pairs, name)
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = grad_saturation_report(&probes)?;
    let mut table = String::from("probe\tpairs\tmean_pos_sim\tpos_component_norm\tapprox_pos_norm\tapprox_residual\n");
    for r in &rows {
        table.push_str(&format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            r.probe, r.pairs, r.mean_pos_sim, r.pos_component_norm, r.approx_pos_norm, r.approx_residual
        ));
    }
    print!("{table}");
    if let Some(out) = &a.out {
        std::fs::write(out, &table).map_err(|e| Error::io(out, e))?;
        echo_config(&cfg, out, false)?;
    }
    Ok(())
}

fn query_box(cli: &Cli, a: &QueryBoxArgs) -> std::result::Result<(), Failure> {
    let ckpt = resolve_checkpoint(&a.ckpt)?;
    let cfg = eval_config(cli, &ckpt)?;
    let enc: Encoder = ckpt.encoder()?;
    let (vw, vh) = (cfg.augment.view_w, cfg.augment.view_h);
    let aug = AugConfig::identity(vw, vh);
    let qimg = Image::load(&a.query)?;
    if !a.bbox.within(qimg.width() as f64, qimg.height() as f64) {
        return Err(Failure::Usage(format!(
            "--box lies outside the {}x{} query image",
            qimg.width(),
            qimg.height()
        )));
    }
    let kimg = Image::load(&a.key)?;
    let (qpx, qb) = prepare_view(&qimg, &[a.bbox], vw, vh, &aug);
    let (kpx, _) = prepare_view(&kimg, &[], vw, vh, &aug);
    let xq = batch_from_chw([qpx.as_slice()], vh, vw);
    let xk = batch_from_chw([kpx.as_slice()], vh, vw);
    let maps = box_query_heatmap(&enc, &ckpt.state.query, &xq, &qb[0], &xk)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for m in &maps {
        let csv = a.out.join(format!("level{}.csv", m.level));
        std::fs::write(&csv, m.to_csv()).map_err(|e| Error::io(&csv, e))?;
        m.to_image().resize(vw, vh).save(a.out.join(format!("level{}.png", m.level)))?;
    }
    echo_config(&cfg, &a.out, true)?;
    let json = a.out.join("heatmaps.json");
    std::fs::write(&json, serde_json::to_string(&maps).expect("heatmaps serialise")).map_err(|e| Error::io(&json, e))?;
    for m in &maps {
        let (r, c) = m.argmax();
        println!("P{}: {}x{} peak at row {r}, col {c}", m.level, m.height, m.width);
    }
    Ok(())
}

fn synth_demo(cli: &Cli, a: &SynthDemoArgs) -> std::result::Result<(), Failure> {
    let cfg = effective_config(cli, None)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut truth = String::new();
    let mut sets = Vec::new();
    for i in 0..a.count {
        let scene = synth_scene(derive_seed(cfg.seed, stream::SCENE, i as u64), &cfg.synth);
        let id = format!("scene-{i:04}.png");
        let path = a.out.join(&id);
        scene.image.save(&path)?;
        let objects: Vec<serde_json::Value> = scene
            .objects
            .iter()
            .map(|o| serde_json::json!({"label": o.class_label, "box": [o.bbox.x, o.bbox.y, o.bbox.w, o.bbox.h]}))
            .collect();
        let rec = serde_json::json!({"image_id": id, "width": cfg.synth.width, "height": cfg.synth.height, "objects": objects});
        truth.push_str(&format!("{rec}\n"));
        // propose on the stored 8-bit image so the file matches `propose`
        sets.push(propose_boxes(&id, &Image::load(&path)?, &cfg.proposals)?);
    }
    let gt = a.out.join("ground_truth.jsonl");
    std::fs::write(&gt, truth).map_err(|e| Error::io(&gt, e))?;
    save_proposals(&sets, a.out.join("proposals.jsonl"))?;
    echo_config(&cfg, &a.out, true)?;
    println!("{} scenes -> {}", a.count, a.out.display());
    Ok(())
}
