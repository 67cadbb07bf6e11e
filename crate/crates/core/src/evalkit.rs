//! Evaluation and diagnostics over frozen encoders: kNN recall, embedding
//! export, gradient-saturation probes and box-query heatmaps.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datapipe::augment::to_normalized_chw;
use crate::datapipe::{AugConfig, Sample, ViewPair};
use crate::error::{Error, Result};
use crate::geometry::{transform_box, BBox};
use crate::image::Image;
use crate::network::roi::pooled_taps;
use crate::network::{batch_from_chw, level_stride, Act, Encoder, EncoderParams, Mode};
use crate::objectives::{approx_grad, contrastive_grad, dot, norm, positive_pair_grad_norm};

/// Which features to export per box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    /// Object-head embeddings.
    Prediction,
    /// Pooled pyramid features before the object head.
    Backbone,
}

impl std::str::FromStr for Which {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prediction" => Ok(Self::Prediction),
            "backbone" => Ok(Self::Backbone),
            _ => Err(Error::invalid(format!("expected prediction or backbone, got `{s}`"))),
        }
    }
}

mod box_array {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::geometry::BBox;

    pub fn serialize<S: Serializer>(b: &BBox, s: S) -> Result<S::Ok, S::Error> {
        [b.x, b.y, b.w, b.h].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BBox, D::Error> {
        let [x, y, w, h] = <[f64; 4]>::deserialize(d)?;
        Ok(BBox::new(x, y, w, h))
    }
}

/// One exported record. `bbox` is in source-image pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledEmbedding {
    pub image_id: String,
    #[serde(rename = "box", with = "box_array")]
    pub bbox: BBox,
    pub label: Option<u32>,
    pub vector: Vec<f64>,
}

/// Mean fraction of same-class items among each item's `k` most
/// cosine-similar others. Ties go to the earlier item.
pub fn knn_recall(items: &[LabeledEmbedding], k: usize) -> Result<f64> {
    Ok(knn_recall_multi(items, &[k])?[0])
}

/// [`knn_recall`] for several `k` at once.
pub fn knn_recall_multi(items: &[LabeledEmbedding], ks: &[usize]) -> Result<Vec<f64>> {
    let kmax = ks.iter().copied().max().unwrap_or(0);
    if ks.contains(&0) {
        return Err(Error::invalid("k must be at least 1"));
    }
    if items.len() < kmax + 1 {
        return Err(Error::invalid(format!("need at least {} items for k = {kmax}, got {}", kmax + 1, items.len())));
    }
    let labels: Vec<u32> = items
        .iter()
        .enumerate()
        .map(|(i, it)| it.label.ok_or_else(|| Error::invalid(format!("item {i} ({}) has no label", it.image_id))))
        .collect::<Result<_>>()?;
    let unit: Vec<Vec<f64>> = items
        .iter()
        .map(|it| {
            let n = norm(&it.vector).max(1e-12);
            it.vector.iter().map(|v| v / n).collect()
        })
        .collect();
    let mut sums = vec![0.0; ks.len()];
    for i in 0..items.len() {
        let mut order: Vec<(f64, usize)> = (0..items.len()).filter(|&j| j != i).map(|j| (dot(&unit[i], &unit[j]), j)).collect();
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for (s, &k) in sums.iter_mut().zip(ks) {
            let hits = order[..k].iter().filter(|(_, j)| labels[*j] == labels[i]).count();
            *s += hits as f64 / k as f64;
        }
    }
    Ok(sums.into_iter().map(|s| s / items.len() as f64).collect())
}

/// Resizes `image` to the view size and normalises it, returning the CHW
/// pixels and `boxes` mapped into view coordinates.
pub fn prepare_view(image: &Image, boxes: &[BBox], view_w: usize, view_h: usize, aug: &AugConfig) -> (Vec<f32>, Vec<BBox>) {
    let full = BBox::new(0.0, 0.0, image.width() as f64, image.height() as f64);
    let resized = image.resize(view_w, view_h);
    let mapped = boxes
        .iter()
        .map(|b| transform_box(b, &full, view_w as f64, view_h as f64, false))
        .collect();
    (to_normalized_chw(&resized, aug), mapped)
}

/// Embeds the labelled objects of each sample (or its proposals when it has
/// none) with the encoder in evaluation mode.
pub fn embed_samples(encoder: &Encoder, params: &EncoderParams, samples: &[Sample], which: Which, aug: &AugConfig) -> Result<Vec<LabeledEmbedding>> {
    let (vw, vh) = (aug.view_w, aug.view_h);
    let mut out = Vec::new();
    for chunk in samples.chunks(32) {
        let mut pixels = Vec::new();
        let mut boxes = Vec::new();
        let mut meta = Vec::new();
        for (n, s) in chunk.iter().enumerate() {
            let (src, labels): (Vec<BBox>, Vec<Option<u32>>) = if s.objects.is_empty() {
                (s.proposals.boxes(), vec![None; s.proposals.len()])
            } else {
                s.objects.iter().map(|o| (o.bbox, Some(o.class_label))).unzip()
            };
            let (px, mapped) = prepare_view(&s.image, &src, vw, vh, aug);
            pixels.push(px);
            for ((orig, view_box), label) in src.iter().zip(mapped).zip(labels) {
                boxes.push((n, view_box));
                meta.push((s.image_id.clone(), *orig, label));
            }
        }
        let x = batch_from_chw(pixels.iter().map(Vec::as_slice), vh, vw);
        let (feats, _) = encoder.encode(params, &x, Mode::Eval)?;
        let (vecs, dim) = match which {
            Which::Prediction => (encoder.embed_objects(params, &feats, &boxes).0, encoder.embed_dim()),
            Which::Backbone => (encoder.pool_regions(&feats, &boxes).0, encoder.config().fpn_width),
        };
        for ((image_id, bbox, label), v) in meta.into_iter().zip(vecs.chunks_exact(dim)) {
            out.push(LabeledEmbedding {
                image_id,
                bbox,
                label,
                vector: v.to_vec(),
            });
        }
    }
    Ok(out)
}

pub fn write_embeddings(path: &Path, items: &[LabeledEmbedding]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for it in items {
        let line = serde_json::to_string(it).expect("record serialises");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<Vec<LabeledEmbedding>> {
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

/// Matched query/key object embeddings from one encoder snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub name: String,
    pub z_q: Vec<Vec<f64>>,
    pub z_k: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaturationRow {
    pub probe: String,
    pub pairs: usize,
    /// Mean positive similarity `z_q . z_k`.
    pub mean_pos_sim: f64,
    /// Mean norm of the `z_k` term of the exact unit-temperature gradient.
    pub pos_component_norm: f64,
    /// Mean `|z_q - z_k|`, the positive term of the approximation.
    pub approx_pos_norm: f64,
    /// Mean `|approx - exact| / |exact|`.
    pub approx_residual: f64,
}

/// One row per probe. Negatives for pair `i` are the keys of all other
/// pairs in the same probe.
pub fn grad_saturation_report(probes: &[Probe]) -> Result<Vec<SaturationRow>> {
    probes
        .iter()
        .map(|p| {
            if p.z_q.len() != p.z_k.len() {
                return Err(Error::Shape(format!("probe {}: query/key counts differ", p.name)));
            }
            let n = p.z_q.len();
            if n < 2 {
                return Err(Error::invalid(format!("probe {} needs at least two pairs", p.name)));
            }
            let (mut sim, mut pos, mut apos, mut res) = (0.0, 0.0, 0.0, 0.0);
            for i in 0..n {
                let negs: Vec<&[f64]> = (0..n).filter(|&j| j != i).map(|j| p.z_k[j].as_slice()).collect();
                let (q, k) = (&p.z_q[i], &p.z_k[i]);
                sim += dot(q, k);
                pos += positive_pair_grad_norm(q, k, &negs);
                apos += norm(&q.iter().zip(k).map(|(a, b)| a - b).collect::<Vec<_>>());
                let exact = contrastive_grad(q, k, &negs);
                let approx = approx_grad(q, k, &negs)?;
                let diff: Vec<f64> = approx.iter().zip(&exact).map(|(a, b)| a - b).collect();
                res += norm(&diff) / norm(&exact).max(1e-12);
            }
            let nf = n as f64;
            Ok(SaturationRow {
                probe: p.name.clone(),
                pairs: n,
                mean_pos_sim: sim / nf,
                pos_component_norm: pos / nf,
                approx_pos_norm: apos / nf,
                approx_residual: res / nf,
            })
        })
        .collect()
}

/// Object embeddings of shared boxes: queries from the query encoder on the
/// query view, keys from the key encoder on the key view (both in
/// evaluation mode, no jitter).
pub fn probe_pairs(encoder: &Encoder, query: &EncoderParams, key: &EncoderParams, pairs: &[ViewPair], name: &str) -> Result<Probe> {
    let Some(first) = pairs.first() else {
        return Err(Error::invalid("empty probe batch"));
    };
    let (vw, vh) = (first.query.width, first.query.height);
    let mut qb = Vec::new();
    let mut kb = Vec::new();
    for (n, p) in pairs.iter().enumerate() {
        for &id in &p.shared_ids {
            if let (Some(a), Some(b)) = (p.query.box_of(id), p.key.box_of(id)) {
                qb.push((n, a));
                kb.push((n, b));
            }
        }
    }
    let xq = batch_from_chw(pairs.iter().map(|p| p.query.pixels.as_slice()), vh, vw);
    let xk = batch_from_chw(pairs.iter().map(|p| p.key.pixels.as_slice()), vh, vw);
    let (fq, _) = encoder.encode(query, &xq, Mode::Eval)?;
    let (fk, _) = encoder.encode(key, &xk, Mode::Eval)?;
    let dim = encoder.embed_dim();
    let rows = |v: Vec<f64>| v.chunks_exact(dim).map(<[f64]>::to_vec).collect::<Vec<_>>();
    Ok(Probe {
        name: name.to_string(),
        z_q: rows(encoder.embed_objects(query, &fq, &qb).0),
        z_k: rows(encoder.embed_objects(key, &fk, &kb).0),
    })
}

/// Similarity map of a pooled query vector against every position of a map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub level: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn argmax(&self) -> (usize, usize) {
        let i = self
            .values
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0;
        (i / self.width, i % self.width)
    }

    pub fn to_csv(&self) -> String {
        self.values
            .chunks(self.width)
            .map(|r| r.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(","))
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    }

    /// Grayscale rendering scaled to the value range.
    pub fn to_image(&self) -> Image {
        let (lo, hi) = self.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let mut img = Image::new(self.width, self.height);
        for (i, v) in self.values.iter().enumerate() {
            let g = ((v - lo) / span) as f32;
            img.set_pixel(i % self.width, i / self.width, [g, g, g]);
        }
        img
    }
}

/// Cosine similarity of `kernel` with every position of sample `n`.
pub fn correlate(kernel: &[f64], map: &Act, n: usize, level: usize) -> Heatmap {
    let kn = norm(kernel).max(1e-12);
    let values = map
        .sample(n)
        .chunks_exact(map.c)
        .map(|px| dot(kernel, px) / (kn * norm(px).max(1e-12)))
        .collect();
    Heatmap {
        level,
        height: map.h,
        width: map.w,
        values,
    }
}

/// Pools the query box from each pyramid level of the query view and
/// correlates it with the same level of the key view; one map per level.
pub fn box_query_heatmap(encoder: &Encoder, params: &EncoderParams, query: &Act, qbox: &BBox, key: &Act) -> Result<Vec<Heatmap>> {
    let (fq, _) = encoder.encode(params, query, Mode::Eval)?;
    let (fk, _) = encoder.encode(params, key, Mode::Eval)?;
    let roi = encoder.config().roi_size;
    Ok((2..=5)
        .map(|k| {
            let f = fq.level(k);
            let mut kernel = vec![0.0; f.c];
            for (pix, wt) in pooled_taps(qbox, level_stride(k), f.h, f.w, roi) {
                kernel.iter_mut().zip(&f.sample(0)[pix * f.c..(pix + 1) * f.c]).for_each(|(a, b)| *a += wt * b);
            }
            correlate(&kernel, fk.level(k), 0, k)
        })
        .collect())
}
