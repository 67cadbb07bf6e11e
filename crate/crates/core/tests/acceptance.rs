//! End-to-end acceptance checks, one line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Set `CCOP_ACCEPTANCE=1,3,5`
//! to run a subset.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use ccop::config::Config;
use ccop::curriculum::{beta_at, sample_candidates, scs_select, zeta_at, CurriculumConfig, CurriculumState};
use ccop::datapipe::{build_batch, plan_batch, synth_scene, AugConfig, Dataset, ProposalSource, SynthConfig};
use ccop::evalkit::{embed_samples, knn_recall_multi, Which};
use ccop::geometry::{iou, merge_boxes, BBox};
use ccop::image::Image;
use ccop::network::{ema_update, roi_align, roi_align_backward, Act, Encoder, Mode};
use ccop::objectives::{
    approx_grad, contrastive_grad, info_nce, intra_image_loss, positive_pair_grad_norm, MemoryQueue,
};
use ccop::proposals::{propose_boxes, segment_graph, ProposalConfig, ProposalSet};
use ccop::rng::{derive_seed, stream};
use ccop::trainer::{read_metrics, train_loop, LoopOptions, StepReport, Trainer};

type Outcome = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn unit(r: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(r)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let took = start.elapsed();
    if took <= limit {
        Ok(())
    } else {
        Err(format!("took {:.1}s, limit {:.0}s", took.as_secs_f64(), limit.as_secs_f64()))
    }
}

/// Central differences of unit-temperature InfoNCE against the closed-form
/// gradient, on unconstrained query vectors.
fn c1_gradient_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let q = unit(&mut r, 16);
        let k = unit(&mut r, 16);
        let negs: Vec<Vec<f64>> = (0..64).map(|_| unit(&mut r, 16)).collect();
        let nref: Vec<&[f64]> = negs.iter().map(Vec::as_slice).collect();
        let g = contrastive_grad(&q, &k, &nref);
        for d in 0..16 {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[d] += h;
            qm[d] -= h;
            let fp = info_nce(&qp, &k, nref.iter().copied(), 1.0).map_err(|e| e.to_string())?;
            let fm = info_nce(&qm, &k, nref.iter().copied(), 1.0).map_err(|e| e.to_string())?;
            let fd = (fp - fm) / (2.0 * h);
            let rel = (g[d] - fd).abs() / g[d].abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    within(Duration::from_secs(10), start)?;
    check(worst < 1e-5, format!("max relative error {worst:.2e} over 100 instances"))
}

fn c2_approximation() -> Outcome {
    let mut r = rng(2);
    let dim = 128;
    let q = unit(&mut r, dim);
    // negatives: orthogonal to q up to a component below 1e-3
    let negs: Vec<Vec<f64>> = (0..4096)
        .map(|_| {
            let mut n = unit(&mut r, dim);
            let c = dot(&n, &q);
            n.iter_mut().zip(&q).for_each(|(a, b)| *a -= c * b);
            let eps: f64 = r.random_range(-4e-4..4e-4);
            n.iter_mut().zip(&q).for_each(|(a, b)| *a += eps * b);
            let s = l2(&n);
            n.into_iter().map(|v| v / s).collect()
        })
        .collect();
    let max_dot = negs.iter().map(|n| dot(n, &q).abs()).fold(0.0, f64::max);
    if max_dot >= 1e-3 {
        return Err(format!("negative construction failed: |q.n| = {max_dot}"));
    }
    let nref: Vec<&[f64]> = negs.iter().map(Vec::as_slice).collect();
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let k = unit(&mut r, dim);
        let exact = contrastive_grad(&q, &k, &nref);
        let approx = approx_grad(&q, &k, &nref).map_err(|e| e.to_string())?;
        let diff: Vec<f64> = exact.iter().zip(&approx).map(|(a, b)| a - b).collect();
        worst = worst.max(l2(&diff) / l2(&exact));
    }

    // sweep q.k from 0 to 0.99 with the negatives fixed
    let mut u = unit(&mut r, dim);
    let c = dot(&u, &q);
    u.iter_mut().zip(&q).for_each(|(a, b)| *a -= c * b);
    let un = l2(&u);
    u.iter_mut().for_each(|a| *a /= un);
    let norms: Vec<f64> = (0..10)
        .map(|i| {
            let s = 0.99 * i as f64 / 9.0;
            let k: Vec<f64> = q.iter().zip(&u).map(|(a, b)| s * a + (1.0 - s * s).sqrt() * b).collect();
            positive_pair_grad_norm(&q, &k, &nref)
        })
        .collect();
    let decreasing = norms.windows(2).all(|w| w[1] < w[0]);
    check(
        worst < 0.01 && decreasing,
        format!(
            "relative L2 distance {worst:.2e}; positive component {:.4} -> {:.4} ({})",
            norms[0],
            norms[9],
            if decreasing { "strictly decreasing" } else { "NOT strictly decreasing" }
        ),
    )
}

fn c3_closed_forms() -> Outcome {
    let e = |i: usize| {
        let mut v = vec![0.0; 4];
        v[i] = 1.0;
        v
    };
    let q = e(0);
    let negs = [e(1), e(2), e(3)];
    let nref: Vec<&[f64]> = negs.iter().map(Vec::as_slice).collect();
    let a = info_nce(&q, &q, nref.iter().copied(), 1.0).map_err(|e| e.to_string())?;
    let b = info_nce(&q, &q, nref.iter().copied(), 0.2).map_err(|e| e.to_string())?;
    let boxes = [BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(20.0, 20.0, 10.0, 10.0)];
    let z = e(0);
    let c = intra_image_loss(&boxes, &[&z, &z], 0.4).map_err(|e| e.to_string())?;
    let ok = (a - 0.743665).abs() <= 1e-5 && (b - 0.020012).abs() <= 1e-5 && (c - 0.6).abs() <= 1e-7;
    check(ok, format!("tau=1: {a:.6}, tau=0.2: {b:.6}, intra: {c:.9}"))
}

fn c4_curriculum() -> Outcome {
    let start = Instant::now();
    let total = 1000;
    let base = CurriculumState::new(&CurriculumConfig::default(), total).map_err(|e| e.to_string())?;
    let ts: Vec<u64> = (0..10).map(|i| i * total / 9).collect();
    let (vw, vh) = (64.0, 64.0);
    let mut r = rng(4);
    let mut draws = 0;
    let mut min_margin = f64::INFINITY;
    for &t in &ts {
        let s = base.at(t);
        let beta = beta_at(&s);
        for _ in 0..10_000 {
            let w = r.random_range(4.0..60.0);
            let h = r.random_range(4.0..60.0);
            let b = BBox::new(r.random_range(0.0..vw - w), r.random_range(0.0..vh - h), w, h);
            let cands = sample_candidates(&b, &s, vw, vh, r.random());
            for c in &cands {
                let v = iou(c, &b);
                min_margin = min_margin.min(v - beta);
                if v < beta {
                    return Err(format!("t={t}: candidate IoU {v} below floor {beta}"));
                }
            }
            // hardest-candidate selection against a brute-force scan
            let query = unit(&mut r, 8);
            let embs: Vec<Vec<f64>> = cands.iter().map(|_| unit(&mut r, 8)).collect();
            let got = scs_select(&query, &embs).map_err(|e| e.to_string())?;
            let sims: Vec<f64> = embs.iter().map(|e| dot(&query, e)).collect();
            let mut want = 0;
            for i in 1..sims.len() {
                if sims[i] < sims[want] {
                    want = i;
                }
            }
            if got != want {
                return Err(format!("selection picked {got}, brute force {want}"));
            }
            draws += 1;
        }
    }
    let mut prev = (f64::NEG_INFINITY, f64::INFINITY);
    for t in 0..=total {
        let s = base.at(t);
        let (z, b) = (zeta_at(&s), beta_at(&s));
        if z < prev.0 || b > prev.1 {
            return Err(format!("schedule not monotone at t={t}"));
        }
        prev = (z, b);
    }
    within(Duration::from_secs(30), start)?;
    Ok(format!("{draws} draws, smallest IoU margin {min_margin:.4}; schedules monotone"))
}

fn c5_network() -> Outcome {
    let mut r = rng(5);
    // constant-map invariance
    let (h, w, c) = (16, 16, 3);
    let value = 2.5;
    let feat = Act::from_data(1, h, w, c, vec![value; h * w * c]);
    let mut worst_const: f64 = 0.0;
    for _ in 0..100 {
        let bw = r.random_range(1.0..60.0);
        let bh = r.random_range(1.0..60.0);
        let b = BBox::new(r.random_range(0.0..64.0 - bw), r.random_range(0.0..64.0 - bh), bw, bh);
        let out = roi_align(&feat, 0, &b, 4.0, 7);
        worst_const = out.iter().map(|v| (v - value).abs()).fold(worst_const, f64::max);
    }

    // gradient against finite differences
    let (h, w, c) = (12, 12, 2);
    let data: Vec<f64> = (0..h * w * c).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut feat = Act::from_data(1, h, w, c, data);
    let mut worst_grad: f64 = 0.0;
    for _ in 0..5 {
        let bw = r.random_range(6.0..40.0);
        let bh = r.random_range(6.0..40.0);
        let b = BBox::new(r.random_range(0.0..48.0 - bw), r.random_range(0.0..48.0 - bh), bw, bh);
        let out_len = 7 * 7 * c;
        let wts: Vec<f64> = (0..out_len).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut grad = Act::zeros(1, h, w, c);
        roi_align_backward(&mut grad, 0, &b, 4.0, 7, &wts);
        let step = 1e-5;
        for i in 0..feat.data.len() {
            let orig = feat.data[i];
            feat.data[i] = orig + step;
            let fp = dot(&roi_align(&feat, 0, &b, 4.0, 7), &wts);
            feat.data[i] = orig - step;
            let fm = dot(&roi_align(&feat, 0, &b, 4.0, 7), &wts);
            feat.data[i] = orig;
            let fd = (fp - fm) / (2.0 * step);
            let a = grad.data[i];
            worst_grad = worst_grad.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-8));
        }
    }

    // embeddings are unit vectors
    let cfg = Config::acceptance();
    let enc = Encoder::new(&cfg.network).map_err(|e| e.to_string())?;
    let p = enc.init(55);
    let x = Act::from_data(3, 64, 64, 3, (0..3 * 64 * 64 * 3).map(|_| r.random_range(-2.0..2.0)).collect());
    let mut worst_norm: f64 = 0.0;
    let mut count = 0;
    for mode in [Mode::Train, Mode::Eval, Mode::Batch] {
        let (f, _) = enc.encode(&p, &x, mode).map_err(|e| e.to_string())?;
        let (zi, _) = enc.embed_image(&p, &f);
        let boxes: Vec<(usize, BBox)> = (0..12)
            .map(|i| {
                let bw = r.random_range(4.0..60.0);
                let bh = r.random_range(4.0..60.0);
                (i % 3, BBox::new(r.random_range(0.0..64.0 - bw), r.random_range(0.0..64.0 - bh), bw, bh))
            })
            .collect();
        let (zo, _) = enc.embed_objects(&p, &f, &boxes);
        for z in zi.chunks(enc.embed_dim()).chain(zo.chunks(enc.embed_dim())) {
            worst_norm = worst_norm.max((l2(z) - 1.0).abs());
            count += 1;
        }
    }

    // momentum update against the closed form
    let query = enc.init(1);
    let key0 = enc.init(2).to_key();
    let mut ema_ok = true;
    for m in [0.0, 0.5, 0.999, 1.0] {
        let mut key = key0.clone();
        ema_update(&mut key, &query, m).map_err(|e| e.to_string())?;
        for ((kt, k0), qt) in key.tensors.iter().zip(&key0.tensors).zip(&query.tensors) {
            for ((a, b), c) in kt.iter().zip(k0).zip(qt) {
                let want = if m == 0.0 {
                    *c
                } else if m == 1.0 {
                    *b
                } else {
                    m * b + (1.0 - m) * c
                };
                ema_ok &= a.to_bits() == want.to_bits();
            }
        }
    }
    check(
        worst_const <= 1e-6 && worst_grad < 1e-4 && worst_norm <= 1e-6 && ema_ok,
        format!(
            "constant map err {worst_const:.1e}; RoIAlign grad rel err {worst_grad:.1e}; {count} embeddings, max |norm-1| {worst_norm:.1e}; momentum update {}",
            if ema_ok { "exact" } else { "INEXACT" }
        ),
    )
}

fn c6_queue_model() -> Outcome {
    let mut r = rng(6);
    let mut pushes = 0usize;
    for seq in 0..100_000 {
        let capacity = r.random_range(0..=8);
        let dim = r.random_range(1..=3);
        let mut q = MemoryQueue::new(capacity, dim);
        let mut model: VecDeque<Vec<f64>> = VecDeque::new();
        for _ in 0..r.random_range(1..=6) {
            let n = r.random_range(0..=5);
            let batch: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut r, dim)).collect();
            q.push(batch.iter().map(Vec::as_slice)).map_err(|e| e.to_string())?;
            for row in batch {
                model.push_back(row);
                if model.len() > capacity {
                    model.pop_front();
                }
            }
            pushes += 1;
            let got: Vec<u64> = q.negatives().flatten().map(|v| v.to_bits()).collect();
            let want: Vec<u64> = model.iter().flatten().map(|v| v.to_bits()).collect();
            if got != want || q.len() != model.len() {
                return Err(format!("sequence {seq}: queue diverged from the reference model"));
            }
        }
    }
    Ok(format!("100000 sequences, {pushes} pushes, all byte-identical"))
}

fn c7_proposals() -> Outcome {
    let uniform = Image::filled(64, 64, [0.4, 0.6, 0.2]);
    let pc = ProposalConfig::synthetic();
    let seg = segment_graph(&uniform, pc.k, pc.sigma, pc.min_size).map_err(|e| e.to_string())?;
    let synth = SynthConfig::default();
    let mut covered = 0;
    for i in 0..100u64 {
        let scene = synth_scene(derive_seed(77, stream::SCENE, i), &synth);
        let props = propose_boxes("s", &scene.image, &pc).map_err(|e| e.to_string())?;
        let boxes = props.boxes();
        if scene.objects.iter().all(|o| boxes.iter().any(|b| iou(b, &o.bbox) >= 0.5)) {
            covered += 1;
        }
    }
    let mut r = rng(7);
    let mut worst: f64 = 0.0;
    for _ in 0..2000 {
        let n = r.random_range(0..30);
        let boxes: Vec<BBox> = (0..n)
            .map(|_| {
                let x = r.random_range(0.0..50.0);
                let y = r.random_range(0.0..50.0);
                BBox::new(x, y, r.random_range(1.0..30.0), r.random_range(1.0..30.0))
            })
            .collect();
        let merged = merge_boxes(&boxes, 0.5);
        for i in 0..merged.len() {
            for j in i + 1..merged.len() {
                worst = worst.max(iou(&merged[i], &merged[j]));
            }
        }
    }
    check(
        seg.num_segments == 1 && covered >= 90 && worst <= 0.5,
        format!(
            "uniform image -> {} segment(s); {covered}/100 scenes fully covered; max merged IoU {worst:.3}",
            seg.num_segments
        ),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn c8_smoke_training() -> Outcome {
    let start = Instant::now();
    let cfg = Config::acceptance();
    if !(cfg.loss.object_loss && cfg.loss.intra_loss && cfg.curriculum.enabled) {
        return Err("acceptance profile must enable every loss and the curriculum".into());
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = Dataset::synthetic(
        cfg.data.synthetic_count,
        cfg.seed,
        &cfg.synth,
        ProposalSource::SelectiveSearch,
        &cfg.proposals,
    )
    .map_err(|e| e.to_string())?;
    let tr = train_loop(Arc::new(data), &cfg, dir.path(), &LoopOptions::default()).map_err(|e| e.to_string())?;
    let reports = read_metrics(&dir.path().join("metrics.jsonl")).map_err(|e| e.to_string())?;
    if reports.len() != 1000 {
        return Err(format!("expected 1000 steps, logged {}", reports.len()));
    }
    let finite = reports.iter().all(|r| {
        [r.loss_img, r.loss_obj, r.loss_intra, r.loss_total, r.lr].iter().all(|v| v.is_finite())
    }) && tr.state.query.tensors.iter().flatten().all(|v| v.is_finite());
    let first = median(reports[..100].iter().map(|r| r.loss_total).collect());
    let last = median(reports[900..].iter().map(|r| r.loss_total).collect());

    let held = Dataset::synthetic(
        cfg.data.heldout_count,
        derive_seed(cfg.seed, stream::HELDOUT, 0),
        &cfg.synth,
        ProposalSource::GroundTruth,
        &cfg.proposals,
    )
    .map_err(|e| e.to_string())?;
    let aug = AugConfig::identity(cfg.augment.view_w, cfg.augment.view_h);
    let items = embed_samples(&tr.encoder, &tr.state.query, &held.samples, Which::Prediction, &aug).map_err(|e| e.to_string())?;
    let top1 = knn_recall_multi(&items, &[1]).map_err(|e| e.to_string())?[0];
    let took = start.elapsed().as_secs_f64();
    check(
        last < first && finite && top1 >= 0.55 && took < 1800.0,
        format!(
            "median loss first 100 {first:.4}, last 100 {last:.4}; finite {finite}; kNN top-1 {top1:.3} over {} objects; {took:.0}s",
            items.len()
        ),
    )
}

fn c9_ablations() -> Outcome {
    let mut base = Config::acceptance();
    base.train.batch_size = 8;
    base.train.queue_capacity = 256;
    let data = Dataset::synthetic(16, 9, &base.synth, ProposalSource::SelectiveSearch, &base.proposals)
        .map_err(|e| e.to_string())?;
    let plan = plan_batch(base.seed, 0, base.train.batch_size, data.len());
    let pairs = build_batch(&data, &plan, &base.augment);
    let originals: Vec<&ProposalSet> = plan.indices.iter().map(|&i| &data.samples[i].proposals).collect();
    // one step fills the queues; the encoders are then rewound so every
    // configuration scores the same parameters against non-empty queues
    let run = |cfg: &Config| -> Result<StepReport, String> {
        let mut t = Trainer::new(cfg, 100).map_err(|e| e.to_string())?;
        t.train_step(&pairs, &originals).map_err(|e| e.to_string())?;
        t.state.query = Trainer::new(cfg, 100).map_err(|e| e.to_string())?.state.query;
        t.state.key = t.state.query.to_key();
        t.train_step(&pairs, &originals).map_err(|e| e.to_string())
    };
    let full = run(&base)?;
    let mut no_obj = base.clone();
    no_obj.loss.object_loss = false;
    let mut no_intra = base.clone();
    no_intra.loss.intra_loss = false;
    let mut no_sncl = base.clone();
    no_sncl.curriculum.enabled = false;
    let mut still = base.clone();
    still.curriculum.zeta_start = 0.0;
    still.curriculum.zeta_end = 0.0;
    let (a, b, c, d) = (run(&no_obj)?, run(&no_intra)?, run(&no_sncl)?, run(&still)?);

    let same = |x: f64, y: f64| x.to_bits() == y.to_bits();
    let mut problems = Vec::new();
    if full.shared_objects == 0 || full.loss_obj <= 0.0 || full.loss_intra <= 0.0 {
        problems.push("full configuration has no object or intra term".to_string());
    }
    // object loss off: only the object term vanishes
    if !(a.loss_obj == 0.0 && same(a.loss_img, full.loss_img) && same(a.loss_intra, full.loss_intra)) {
        problems.push(format!("object loss off: {a:?}"));
    }
    // intra loss off: only the intra term vanishes
    if !(b.loss_intra == 0.0 && same(b.loss_img, full.loss_img) && same(b.loss_obj, full.loss_obj)) {
        problems.push(format!("intra loss off: {b:?}"));
    }
    // curriculum off: unjittered key boxes, which a zero-noise curriculum reproduces
    if !(c.zeta == 0.0
        && c.beta == 1.0
        && same(c.loss_img, full.loss_img)
        && same(c.loss_intra, full.loss_intra)
        && c.loss_obj != full.loss_obj
        && (c.loss_obj - d.loss_obj).abs() <= 1e-12)
    {
        problems.push(format!("curriculum off: {c:?} vs zero-noise {d:?}"));
    }
    if problems.is_empty() {
        Ok(format!(
            "full obj {:.4} intra {:.4}; obj-off obj {}; intra-off intra {}; sncl-off obj {:.4} (zero-noise {:.4})",
            full.loss_obj, full.loss_intra, a.loss_obj, b.loss_intra, c.loss_obj, d.loss_obj
        ))
    } else {
        Err(problems.join("; "))
    }
}

fn c10_determinism() -> Outcome {
    let mut cfg = Config::acceptance();
    cfg.data.synthetic_count = 48;
    cfg.train.batch_size = 8;
    cfg.train.iterations = 16;
    cfg.train.queue_capacity = 64;
    cfg.train.checkpoint_every = 5;
    let data = Arc::new(
        Dataset::synthetic(cfg.data.synthetic_count, cfg.seed, &cfg.synth, ProposalSource::SelectiveSearch, &cfg.proposals)
            .map_err(|e| e.to_string())?,
    );
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    let opts = LoopOptions::default();
    let ta = train_loop(data.clone(), &cfg, &a, &opts).map_err(|e| e.to_string())?;
    train_loop(data.clone(), &cfg, &b, &opts).map_err(|e| e.to_string())?;
    let la = std::fs::read(a.join("metrics.jsonl")).map_err(|e| e.to_string())?;
    let lb = std::fs::read(b.join("metrics.jsonl")).map_err(|e| e.to_string())?;

    let half = LoopOptions {
        stop_at: Some(8),
        ..Default::default()
    };
    let stopped = train_loop(data.clone(), &cfg, &c, &half).map_err(|e| e.to_string())?;
    if stopped.state.t != 8 {
        return Err(format!("interrupted run stopped at {}", stopped.state.t));
    }
    drop(stopped);
    let resume = LoopOptions {
        resume: true,
        ..Default::default()
    };
    let tc = train_loop(data, &cfg, &c, &resume).map_err(|e| e.to_string())?;
    let lc = std::fs::read(c.join("metrics.jsonl")).map_err(|e| e.to_string())?;
    let bits = |s: &ccop::trainer::TrainState| -> Vec<u64> {
        s.query
            .tensors
            .iter()
            .chain(&s.key.tensors)
            .chain(&s.query.buffers)
            .chain(&s.velocity)
            .flatten()
            .map(|v| v.to_bits())
            .collect()
    };
    let logs_equal = la == lb;
    let resumed_equal = bits(&ta.state) == bits(&tc.state) && ta.state == tc.state && la == lc;
    check(
        logs_equal && resumed_equal,
        format!(
            "repeat run logs {}; resumed-at-8 final state {}",
            if logs_equal { "bit-identical" } else { "DIFFER" },
            if resumed_equal { "bit-identical" } else { "DIFFERS" }
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient oracle", c1_gradient_oracle),
        ("approximation validity", c2_approximation),
        ("closed-form losses", c3_closed_forms),
        ("curriculum invariants", c4_curriculum),
        ("network invariants", c5_network),
        ("queue model check", c6_queue_model),
        ("proposal pipeline", c7_proposals),
        ("smoke training", c8_smoke_training),
        ("ablation switches", c9_ablations),
        ("determinism and resume", c10_determinism),
    ];
    let only: Option<Vec<usize>> = std::env::var("CCOP_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|p| p.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}
