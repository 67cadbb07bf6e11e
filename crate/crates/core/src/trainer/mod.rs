//! Optimisation loop: learning-rate schedule, the composite training step,
//! checkpointing and the metrics log.

pub mod checkpoint;

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::curriculum::{beta_at, sample_candidates, scs_select, zeta_at, CurriculumState};
use crate::datapipe::{Dataset, Prefetcher, ViewPair};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::network::{batch_from_chw, ema_update, Encoder, EncoderParams, Mode};
use crate::objectives::{info_nce_batch, intra_image_loss_with_grad, total_loss, LossWeights, MemoryQueue};
use crate::proposals::ProposalSet;
use crate::rng::{derive_seed, stream};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use crate::config::TrainConfig;

/// `0.5 * base * (1 + cos(pi * t / T))`; `base` when `T = 0`.
pub fn cosine_lr(t: u64, total: u64, base: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let t = t.min(total) as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t / total as f64).cos())
}

/// Per-iteration record written to the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: u64,
    pub lr: f64,
    pub loss_img: f64,
    pub loss_obj: f64,
    pub loss_intra: f64,
    pub loss_total: f64,
    /// Effective jitter magnitude (0 with the curriculum off).
    pub zeta: f64,
    /// Effective IoU floor (1 with the curriculum off).
    pub beta: f64,
    pub shared_objects: usize,
    /// Mean norm of the positive-key gradient component over object pairs.
    pub pos_grad_norm: Option<f64>,
}

/// Everything that changes during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub t: u64,
    pub total: u64,
    pub query: EncoderParams,
    pub key: EncoderParams,
    pub velocity: Vec<Vec<f64>>,
    pub queue_img: MemoryQueue,
    pub queue_obj: MemoryQueue,
}

pub struct Trainer {
    pub cfg: Config,
    pub encoder: Encoder,
    pub state: TrainState,
}

struct ObjRef {
    pair: usize,
    q_box: BBox,
    k_box: BBox,
    orig: BBox,
    id: u32,
}

fn rows_of(v: &[f64], dim: usize) -> impl Iterator<Item = &[f64]> {
    v.chunks_exact(dim)
}

impl Trainer {
    /// Fresh state; the key encoder starts as a copy of the query encoder.
    pub fn new(cfg: &Config, total: u64) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(&cfg.network)?;
        let query = encoder.init(cfg.seed);
        let dim = cfg.network.embed_dim;
        let state = TrainState {
            t: 0,
            total,
            key: query.to_key(),
            velocity: query.zeros_like(),
            query,
            queue_img: MemoryQueue::new(cfg.train.queue_capacity, dim),
            queue_obj: MemoryQueue::new(cfg.train.queue_capacity, dim),
        };
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            state,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let encoder = ckpt.encoder()?;
        encoder.check_params(&ckpt.state.query)?;
        Ok(Self {
            cfg: ckpt.config,
            encoder,
            state: ckpt.state,
        })
    }

    pub fn curriculum(&self) -> Result<CurriculumState> {
        Ok(CurriculumState::new(&self.cfg.curriculum, self.state.total)?.at(self.state.t))
    }

    /// One optimisation step on a batch of view pairs. `originals[i]` holds
    /// the image-space proposals of pair `i`.
    pub fn train_step(&mut self, pairs: &[ViewPair], originals: &[&ProposalSet]) -> Result<StepReport> {
        if pairs.is_empty() || pairs.len() != originals.len() {
            return Err(Error::invalid("train_step needs one proposal set per non-empty pair"));
        }
        let cfg = &self.cfg;
        let enc = &self.encoder;
        let dim = enc.embed_dim();
        let b = pairs.len();
        let (vw, vh) = (pairs[0].query.width, pairs[0].query.height);
        let tau = cfg.loss.tau;
        let sncl = cfg.curriculum.enabled;
        let cur = self.curriculum()?;
        let lr = cosine_lr(self.state.t, self.state.total, cfg.train.base_lr);
        let use_obj = cfg.loss.object_loss;
        let use_intra = cfg.loss.intra_loss;

        let mut objs = Vec::new();
        for (i, (p, orig)) in pairs.iter().zip(originals).enumerate() {
            for &id in &p.shared_ids {
                let (Some(q_box), Some(k_box), Some(orig)) = (p.query.box_of(id), p.key.box_of(id), orig.get(id)) else {
                    return Err(Error::invalid(format!("object {id} of pair {i} is missing a box")));
                };
                objs.push(ObjRef {
                    pair: i,
                    q_box,
                    k_box,
                    orig: *orig,
                    id,
                });
            }
        }
        let n_obj = objs.len();
        let need_obj = (use_obj || use_intra) && n_obj > 0;

        // query branch
        let xq = batch_from_chw(pairs.iter().map(|p| p.query.pixels.as_slice()), vh, vw);
        let (fq, tape) = enc.encode(&self.state.query, &xq, Mode::Train)?;
        let tape = tape.expect("training mode records a tape");
        let (zq_img, img_tape) = enc.embed_image(&self.state.query, &fq);
        let q_boxes: Vec<(usize, BBox)> = objs.iter().map(|o| (o.pair, o.q_box)).collect();
        let obj_fwd = need_obj.then(|| enc.embed_objects(&self.state.query, &fq, &q_boxes));

        // key branch, no gradient
        let xk = batch_from_chw(pairs.iter().map(|p| p.key.pixels.as_slice()), vh, vw);
        let (fk, _) = enc.encode(&self.state.key, &xk, Mode::Batch)?;
        let (zk_img, _) = enc.embed_image(&self.state.key, &fk);
        let zk_obj = match (&obj_fwd, use_obj) {
            (Some((zq_obj, _)), true) => {
                let k = if sncl { cur.candidates } else { 1 };
                let mut cand_boxes = Vec::with_capacity(n_obj * k);
                for o in &objs {
                    if sncl {
                        let seed = derive_seed(pairs[o.pair].seed_k, stream::JITTER, o.id as u64);
                        let c = sample_candidates(&o.k_box, &cur, vw as f64, vh as f64, seed);
                        cand_boxes.extend(c.into_iter().map(|bb| (o.pair, bb)));
                    } else {
                        cand_boxes.push((o.pair, o.k_box));
                    }
                }
                let (zc, _) = enc.embed_objects(&self.state.key, &fk, &cand_boxes);
                let mut chosen = Vec::with_capacity(n_obj * dim);
                for (j, zq) in rows_of(zq_obj, dim).enumerate() {
                    let cands: Vec<Vec<f64>> = (0..k).map(|c| zc[(j * k + c) * dim..(j * k + c + 1) * dim].to_vec()).collect();
                    let pick = scs_select(zq, &cands)?;
                    chosen.extend_from_slice(&cands[pick]);
                }
                Some(chosen)
            }
            _ => None,
        };

        // losses
        let (img_losses, img_grad) = info_nce_batch(&zq_img, &zk_img, &self.state.queue_img, tau)?;
        let loss_img = img_losses.iter().sum::<f64>() / b as f64;
        let mut dz_img: Vec<f64> = img_grad.iter().map(|g| g * cfg.loss.weight_img / b as f64).collect();
        if cfg.loss.weight_img == 0.0 {
            dz_img.iter_mut().for_each(|g| *g = 0.0);
        }

        let mut dz_obj = vec![0.0; n_obj * dim];
        let mut loss_obj = 0.0;
        let mut pos_grad_norm = None;
        if let (Some((zq_obj, _)), Some(zk)) = (&obj_fwd, &zk_obj) {
            let (losses, grad) = info_nce_batch(zq_obj, zk, &self.state.queue_obj, tau)?;
            loss_obj = losses.iter().sum::<f64>() / n_obj as f64;
            let s = cfg.loss.weight_obj / n_obj as f64;
            dz_obj.iter_mut().zip(&grad).for_each(|(d, g)| *d += s * g);
            let pg = losses.iter().map(|l| (1.0 - (-l).exp()) / tau).sum::<f64>() / n_obj as f64;
            pos_grad_norm = Some(pg);
        }
        let mut loss_intra = 0.0;
        if let (Some((zq_obj, _)), true) = (&obj_fwd, use_intra) {
            let s = cfg.loss.weight_intra / b as f64;
            for pair in 0..b {
                let idx: Vec<usize> = (0..n_obj).filter(|&j| objs[j].pair == pair).collect();
                if idx.len() < 2 {
                    continue;
                }
                let boxes: Vec<BBox> = idx.iter().map(|&j| objs[j].orig).collect();
                let embs: Vec<&[f64]> = idx.iter().map(|&j| &zq_obj[j * dim..(j + 1) * dim]).collect();
                let out = intra_image_loss_with_grad(&boxes, &embs, cfg.loss.alpha, cfg.loss.iou_disjoint)?;
                loss_intra += out.loss / b as f64;
                for (&j, g) in idx.iter().zip(&out.grads) {
                    dz_obj[j * dim..(j + 1) * dim].iter_mut().zip(g).for_each(|(d, v)| *d += s * v);
                }
            }
        }
        let weights = LossWeights {
            img: cfg.loss.weight_img,
            obj: if use_obj { cfg.loss.weight_obj } else { 0.0 },
            intra: if use_intra { cfg.loss.weight_intra } else { 0.0 },
        };
        let loss_total = total_loss(loss_img, loss_obj, loss_intra, &weights);
        if ![loss_img, loss_obj, loss_intra, loss_total].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                iteration: self.state.t,
                seeds: pairs.iter().flat_map(|p| [p.seed_q, p.seed_k]).collect(),
            });
        }

        // backward
        let mut grads = self.state.query.zeros_like();
        let dc5 = enc.embed_image_backward(&self.state.query, &fq, &img_tape, &dz_img, &mut grads);
        let mut dlevels = enc.zero_level_grads(&fq);
        if let Some((_, obj_tape)) = &obj_fwd {
            enc.embed_objects_backward(&self.state.query, obj_tape, &dz_obj, &mut dlevels, &mut grads);
        }
        enc.encode_backward(&self.state.query, &tape, &dlevels, Some(&dc5), &mut grads);
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                iteration: self.state.t,
                seeds: pairs.iter().flat_map(|p| [p.seed_q, p.seed_k]).collect(),
            });
        }

        // update
        sgd(&cfg.train, enc.param_info(), &mut self.state, &mut grads, lr);
        tape.update_running_stats(&mut self.state.query, cfg.network.bn_momentum);
        ema_update(&mut self.state.key, &self.state.query, cfg.train.ema_m)?;
        self.state.queue_img.push(rows_of(&zk_img, dim))?;
        if let Some(zk) = &zk_obj {
            self.state.queue_obj.push(rows_of(zk, dim))?;
        }
        let report = StepReport {
            iteration: self.state.t,
            lr,
            loss_img,
            loss_obj,
            loss_intra,
            loss_total,
            zeta: if sncl { zeta_at(&cur) } else { 0.0 },
            beta: if sncl { beta_at(&cur) } else { 1.0 },
            shared_objects: n_obj,
            pos_grad_norm,
        };
        self.state.t += 1;
        Ok(report)
    }
}

fn sgd(tc: &TrainConfig, info: &[crate::network::ParamInfo], state: &mut TrainState, grads: &mut [Vec<f64>], lr: f64) {
    if tc.grad_clip > 0.0 {
        let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if norm > tc.grad_clip {
            let s = tc.grad_clip / norm;
            grads.iter_mut().flatten().for_each(|g| *g *= s);
        }
    }
    for (i, g) in grads.iter().enumerate() {
        let wd = if info[i].decay { tc.weight_decay } else { 0.0 };
        let p = &mut state.query.tensors[i];
        let v = &mut state.velocity[i];
        for ((pv, vv), gv) in p.iter_mut().zip(v.iter_mut()).zip(g) {
            let d = gv + wd * *pv;
            *vv = tc.momentum * *vv + d;
            *pv -= lr * *vv;
        }
    }
}

/// Controls for [`train_loop`] that are not part of the run configuration.
#[derive(Debug, Clone, Default)]
pub struct LoopOptions {
    /// Continue from `out_dir/checkpoint` when present.
    pub resume: bool,
    /// Stop (with a checkpoint) once this iteration count is reached.
    pub stop_at: Option<u64>,
    /// Print a progress line every this many steps; 0 is silent.
    pub log_every: u64,
}

pub fn metrics_path(out_dir: &Path) -> PathBuf {
    out_dir.join("metrics.jsonl")
}

pub fn checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoint")
}

pub fn snapshots_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("snapshots")
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepReport>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn truncate_metrics(path: &Path, keep: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let kept: String = text.lines().take(keep as usize).map(|l| format!("{l}\n")).collect();
    std::fs::write(path, kept).map_err(|e| Error::io(path, e))
}

fn write_checkpoints(out_dir: &Path, trainer: &Trainer) -> Result<()> {
    save_checkpoint(&checkpoint_path(out_dir), &trainer.cfg, &trainer.state, true)?;
    let snap = snapshots_dir(out_dir);
    std::fs::create_dir_all(&snap).map_err(|e| Error::io(&snap, e))?;
    save_checkpoint(&snap.join(format!("step-{:08}", trainer.state.t)), &trainer.cfg, &trainer.state, false)
}

/// Runs (or resumes) training, appending one [`StepReport`] per iteration
/// to `out_dir/metrics.jsonl` and checkpointing into `out_dir/checkpoint`.
pub fn train_loop(dataset: Arc<Dataset>, cfg: &Config, out_dir: &Path, opts: &LoopOptions) -> Result<Trainer> {
    if dataset.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt_dir = checkpoint_path(out_dir);
    let mpath = metrics_path(out_dir);
    let mut trainer = if opts.resume && ckpt_dir.exists() {
        let ckpt = load_checkpoint(&ckpt_dir)?;
        if ckpt.config.hash() != cfg.hash() {
            return Err(Error::Checkpoint {
                path: ckpt_dir,
                message: "checkpoint was written with a different configuration".into(),
            });
        }
        truncate_metrics(&mpath, ckpt.state.t)?;
        Trainer::from_checkpoint(ckpt)?
    } else {
        if mpath.exists() {
            std::fs::remove_file(&mpath).map_err(|e| Error::io(&mpath, e))?;
        }
        let snap = snapshots_dir(out_dir);
        if snap.exists() {
            std::fs::remove_dir_all(&snap).map_err(|e| Error::io(&snap, e))?;
        }
        let total = cfg.train.total_iterations(dataset.len());
        let t = Trainer::new(cfg, total)?;
        write_checkpoints(out_dir, &t)?;
        t
    };
    cfg.save(out_dir.join("config.toml"))?;

    let total = trainer.state.total;
    let end = opts.stop_at.map_or(total, |s| s.min(total));
    let start = trainer.state.t;
    if start >= end {
        return Ok(trainer);
    }
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&mpath)
        .map_err(|e| Error::io(&mpath, e))?;
    let mut prefetch = Prefetcher::spawn(
        dataset.clone(),
        cfg.augment.clone(),
        cfg.seed,
        cfg.train.batch_size,
        start,
        end,
        cfg.train.prefetch,
    );
    let every = cfg.train.checkpoint_every;
    while trainer.state.t < end {
        let batch = prefetch
            .next_batch()
            .ok_or_else(|| Error::invalid("data pipeline stopped early"))?;
        debug_assert_eq!(batch.plan.iteration, trainer.state.t);
        let originals: Vec<&ProposalSet> = batch.plan.indices.iter().map(|&i| &dataset.samples[i].proposals).collect();
        let report = trainer.train_step(&batch.pairs, &originals)?;
        let line = serde_json::to_string(&report).expect("report serialises");
        writeln!(log, "{line}").map_err(|e| Error::io(&mpath, e))?;
        if opts.log_every > 0 && (report.iteration + 1) % opts.log_every == 0 {
            eprintln!(
                "iter {:>6}/{total}  lr {:.4}  loss {:.4} (img {:.4} obj {:.4} intra {:.4})  zeta {:.3} beta {:.3}",
                report.iteration + 1,
                report.lr,
                report.loss_total,
                report.loss_img,
                report.loss_obj,
                report.loss_intra,
                report.zeta,
                report.beta
            );
        }
        let t = trainer.state.t;
        if t == end || (every > 0 && t % every == 0) {
            log.flush().map_err(|e| Error::io(&mpath, e))?;
            write_checkpoints(out_dir, &trainer)?;
        }
    }
    Ok(trainer)
}
