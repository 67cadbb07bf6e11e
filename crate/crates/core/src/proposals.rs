//! Unsupervised region proposals: graph-based segmentation, single-strategy
//! selective search, then overlap merging and area/aspect filtering.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, BBox};
use crate::image::{rgb_to_hsv, Image};
use crate::rng::{derive_seed, rng_from, stream};

/// Per-pixel segment labels. Labels are contiguous in `[0, num_segments)`
/// and assigned in row-major order of first appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub num_segments: usize,
}

impl SegmentMap {
    pub fn label(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn segment_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_segments];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }
}

struct DisjointSet {
    parent: Vec<usize>,
    size: Vec<usize>,
    internal: Vec<f64>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
            internal: vec![0.0; n],
        }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize, weight: f64) {
        let (big, small) = if self.size[a] >= self.size[b] { (a, b) } else { (b, a) };
        self.parent[small] = big;
        self.size[big] += self.size[small];
        self.internal[big] = weight.max(self.internal[big]).max(self.internal[small]);
    }
}

struct Edge {
    a: usize,
    b: usize,
    w: f64,
}

/// Felzenszwalb-Huttenlocher segmentation over the 8-connected pixel grid
/// with Euclidean RGB distance (0-255 scale) after Gaussian smoothing.
pub fn segment_graph(image: &Image, k: f64, sigma: f64, min_size: usize) -> Result<SegmentMap> {
    if image.is_empty() {
        return Err(Error::invalid("cannot segment an empty image"));
    }
    if k <= 0.0 {
        return Err(Error::invalid(format!("segmentation k must be positive, got {k}")));
    }
    let min_size = min_size.max(1);
    let smooth = image.gaussian_blur(sigma);
    let (w, h) = (image.width(), image.height());
    let px = |x: usize, y: usize| smooth.pixel(x, y).map(|v| v as f64 * 255.0);
    let dist = |p: [f64; 3], q: [f64; 3]| {
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
    };

    let mut edges = Vec::with_capacity(w * h * 4);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let p = px(x, y);
            let mut push = |nx: usize, ny: usize| {
                edges.push(Edge {
                    a: i,
                    b: ny * w + nx,
                    w: dist(p, px(nx, ny)),
                })
            };
            if x + 1 < w {
                push(x + 1, y);
            }
            if y + 1 < h {
                push(x, y + 1);
            }
            if x + 1 < w && y + 1 < h {
                push(x + 1, y + 1);
            }
            if x > 0 && y + 1 < h {
                push(x - 1, y + 1);
            }
        }
    }
    // stable sort keeps generation order among equal weights
    edges.sort_by(|e, f| e.w.total_cmp(&f.w));

    let mut ds = DisjointSet::new(w * h);
    let mut threshold = vec![k; w * h];
    for e in &edges {
        let a = ds.find(e.a);
        let b = ds.find(e.b);
        if a != b && e.w <= threshold[a] && e.w <= threshold[b] {
            ds.union(a, b, e.w);
            let r = ds.find(a);
            threshold[r] = ds.internal[r] + k / ds.size[r] as f64;
        }
    }
    for e in &edges {
        let a = ds.find(e.a);
        let b = ds.find(e.b);
        if a != b && (ds.size[a] < min_size || ds.size[b] < min_size) {
            ds.union(a, b, e.w);
        }
    }

    let mut remap = vec![u32::MAX; w * h];
    let mut next = 0u32;
    let mut labels = Vec::with_capacity(w * h);
    for i in 0..w * h {
        let r = ds.find(i);
        if remap[r] == u32::MAX {
            remap[r] = next;
            next += 1;
        }
        labels.push(remap[r]);
    }
    Ok(SegmentMap {
        width: w,
        height: h,
        labels,
        num_segments: next as usize,
    })
}

const HIST_BINS: usize = 25;
const HIST_LEN: usize = 3 * HIST_BINS;

#[derive(Clone)]
struct Region {
    size: f64,
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    hist: Vec<f64>,
}

impl Region {
    fn bbox(&self) -> BBox {
        BBox::from_corners(self.x0, self.y0, self.x1, self.y1)
    }

    fn merged(&self, other: &Region) -> Region {
        let size = self.size + other.size;
        let hist = self
            .hist
            .iter()
            .zip(&other.hist)
            .map(|(a, b)| (a * self.size + b * other.size) / size)
            .collect();
        Region {
            size,
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
            hist,
        }
    }
}

/// Colour + size + fill similarity; each term lies in `[0, 1]`.
fn similarity(a: &Region, b: &Region, image_size: f64) -> f64 {
    let color: f64 = a.hist.iter().zip(&b.hist).map(|(p, q)| p.min(*q)).sum();
    let size = 1.0 - (a.size + b.size) / image_size;
    let hull = (a.x1.max(b.x1) - a.x0.min(b.x0)) * (a.y1.max(b.y1) - a.y0.min(b.y0));
    let fill = 1.0 - (hull - a.size - b.size) / image_size;
    color.clamp(0.0, 1.0) + size.clamp(0.0, 1.0) + fill.clamp(0.0, 1.0)
}

/// Greedy hierarchical grouping of adjacent segments. Returns the box of
/// every region ever formed: the initial segments first, then one box per
/// merge in merge order.
pub fn hierarchical_merge(seg: &SegmentMap, image: &Image) -> Vec<BBox> {
    let n = seg.num_segments;
    if n == 0 {
        return Vec::new();
    }
    let (w, h) = (seg.width, seg.height);
    let mut regions: Vec<Region> = (0..n)
        .map(|_| Region {
            size: 0.0,
            x0: f64::INFINITY,
            y0: f64::INFINITY,
            x1: f64::NEG_INFINITY,
            y1: f64::NEG_INFINITY,
            hist: vec![0.0; HIST_LEN],
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let r = &mut regions[seg.label(x, y) as usize];
            r.size += 1.0;
            r.x0 = r.x0.min(x as f64);
            r.y0 = r.y0.min(y as f64);
            r.x1 = r.x1.max(x as f64 + 1.0);
            r.y1 = r.y1.max(y as f64 + 1.0);
            let hsv = rgb_to_hsv(image.pixel(x, y));
            for (c, v) in hsv.iter().enumerate() {
                let bin = ((*v as f64 * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
                r.hist[c * HIST_BINS + bin] += 1.0;
            }
        }
    }
    for r in &mut regions {
        // each channel histogram sums to size; normalise the concatenation to 1
        let norm = 3.0 * r.size;
        r.hist.iter_mut().for_each(|v| *v /= norm);
    }

    let mut neighbours: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for y in 0..h {
        for x in 0..w {
            let a = seg.label(x, y) as usize;
            if x + 1 < w {
                let b = seg.label(x + 1, y) as usize;
                if a != b {
                    neighbours[a].insert(b);
                    neighbours[b].insert(a);
                }
            }
            if y + 1 < h {
                let b = seg.label(x, y + 1) as usize;
                if a != b {
                    neighbours[a].insert(b);
                    neighbours[b].insert(a);
                }
            }
        }
    }

    let image_size = (w * h) as f64;
    let mut sims: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (a, ns) in neighbours.iter().enumerate() {
        for &b in ns.range(a + 1..) {
            sims.insert((a, b), similarity(&regions[a], &regions[b], image_size));
        }
    }

    let mut boxes: Vec<BBox> = regions.iter().map(Region::bbox).collect();
    while !sims.is_empty() {
        let mut best: Option<((usize, usize), f64)> = None;
        for (&key, &s) in &sims {
            if best.is_none_or(|(_, bs)| s > bs) {
                best = Some((key, s));
            }
        }
        let ((a, b), _) = best.expect("non-empty similarity set");
        let merged = regions[a].merged(&regions[b]);
        let id = regions.len();
        boxes.push(merged.bbox());
        regions.push(merged);

        sims.retain(|&(p, q), _| p != a && p != b && q != a && q != b);
        let mut joined: BTreeSet<usize> = neighbours[a].union(&neighbours[b]).copied().collect();
        joined.remove(&a);
        joined.remove(&b);
        for &m in &joined {
            neighbours[m].remove(&a);
            neighbours[m].remove(&b);
            neighbours[m].insert(id);
            sims.insert((m, id), similarity(&regions[m], &regions[id], image_size));
        }
        neighbours[a].clear();
        neighbours[b].clear();
        neighbours.push(joined);
    }
    boxes
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalConfig {
    /// Segmentation scale; larger values favour larger segments.
    pub k: f64,
    /// Pre-segmentation Gaussian smoothing.
    pub sigma: f64,
    /// Minimum segment size in pixels.
    pub min_size: usize,
    pub merge_iou: f64,
    pub min_area: f64,
    pub ratio_lo: f64,
    pub ratio_hi: f64,
    /// Keep at most this many boxes (largest first); 0 keeps all.
    pub max_boxes: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            k: 200.0,
            sigma: 0.8,
            min_size: 50,
            merge_iou: geometry::DEFAULT_MERGE_IOU,
            min_area: geometry::DEFAULT_MIN_AREA,
            ratio_lo: geometry::DEFAULT_RATIO_LO,
            ratio_hi: geometry::DEFAULT_RATIO_HI,
            max_boxes: 32,
        }
    }
}

impl ProposalConfig {
    /// Coarser segmentation tuned for the small synthetic scenes, where the
    /// default scale splits textured backgrounds into many fragments that
    /// merge across neighbouring shapes.
    pub fn synthetic() -> Self {
        Self {
            k: 400.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub object_id: u32,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    pub image_id: String,
    pub image_w: usize,
    pub image_h: usize,
    pub proposals: Vec<Proposal>,
}

impl ProposalSet {
    /// Assigns object ids by position.
    pub fn from_boxes(image_id: impl Into<String>, image_w: usize, image_h: usize, boxes: Vec<BBox>) -> Self {
        let proposals = boxes
            .into_iter()
            .enumerate()
            .map(|(i, bbox)| Proposal {
                object_id: i as u32,
                bbox,
            })
            .collect();
        Self {
            image_id: image_id.into(),
            image_w,
            image_h,
            proposals,
        }
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.proposals.iter().map(|p| p.bbox).collect()
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn get(&self, object_id: u32) -> Option<&BBox> {
        self.proposals
            .iter()
            .find(|p| p.object_id == object_id)
            .map(|p| &p.bbox)
    }
}

/// Full offline proposal pipeline for one image.
pub fn propose_boxes(image_id: &str, image: &Image, cfg: &ProposalConfig) -> Result<ProposalSet> {
    let seg = segment_graph(image, cfg.k, cfg.sigma, cfg.min_size)?;
    let raw = hierarchical_merge(&seg, image);
    let merged = geometry::merge_boxes(&raw, cfg.merge_iou);
    let mut kept = geometry::filter_boxes(&merged, cfg.min_area, cfg.ratio_lo, cfg.ratio_hi);
    if cfg.max_boxes > 0 && kept.len() > cfg.max_boxes {
        // stable: equal areas keep their canonical merge order
        kept.sort_by(|a, b| b.area().total_cmp(&a.area()));
        kept.truncate(cfg.max_boxes);
    }
    Ok(ProposalSet::from_boxes(
        image_id,
        image.width(),
        image.height(),
        kept,
    ))
}

/// Uniformly random boxes that pass the area/aspect filter. Gives up after
/// `100 * count + 100` draws.
pub fn random_boxes(
    image_id: &str,
    image_w: usize,
    image_h: usize,
    count: usize,
    rng_seed: u64,
    cfg: &ProposalConfig,
) -> ProposalSet {
    let mut rng = rng_from(derive_seed(rng_seed, stream::RANDOM_BOXES, 0));
    let (fw, fh) = (image_w as f64, image_h as f64);
    let mut boxes = Vec::with_capacity(count);
    let mut attempts = 0;
    while boxes.len() < count && attempts < 100 * count + 100 && fw > 0.0 && fh > 0.0 {
        attempts += 1;
        let (xa, xb) = (rng.random_range(0.0..fw), rng.random_range(0.0..fw));
        let (ya, yb) = (rng.random_range(0.0..fh), rng.random_range(0.0..fh));
        let b = BBox::from_corners(xa.min(xb), ya.min(yb), xa.max(xb), ya.max(yb));
        if b.is_valid() && geometry::passes_filter(&b, cfg.min_area, cfg.ratio_lo, cfg.ratio_hi) {
            boxes.push(b);
        }
    }
    ProposalSet::from_boxes(image_id, image_w, image_h, boxes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn halves(w: usize, h: usize) -> Image {
        let mut img = Image::filled(w, h, [0.1, 0.1, 0.1]);
        for y in 0..h {
            for x in w / 2..w {
                img.set_pixel(x, y, [0.9, 0.9, 0.9]);
            }
        }
        img
    }

    #[test]
    fn uniform_image_is_one_segment() {
        let img = Image::filled(20, 15, [0.3, 0.6, 0.2]);
        let seg = segment_graph(&img, 200.0, 0.8, 10).unwrap();
        assert_eq!(seg.num_segments, 1);
        assert!(seg.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn two_halves_give_two_segments() {
        // boundary weight is ~200 after smoothing, far above k / |C| = 1
        let seg = segment_graph(&halves(20, 10), 1.0, 0.0, 5).unwrap();
        assert_eq!(seg.num_segments, 2);
        assert_eq!(seg.label(0, 0), 0);
        assert_eq!(seg.label(19, 9), 1);
        assert_eq!(seg.segment_sizes(), vec![100, 100]);
    }

    #[test]
    fn rejects_empty_and_bad_k() {
        assert!(segment_graph(&Image::new(0, 0), 1.0, 0.8, 1).is_err());
        assert!(segment_graph(&Image::new(3, 3), 0.0, 0.8, 1).is_err());
    }

    #[test]
    fn min_size_is_enforced() {
        let mut img = Image::filled(24, 24, [0.0; 3]);
        for y in 0..24 {
            for x in 0..24 {
                let v = ((x * 7 + y * 13) % 11) as f32 / 10.0;
                img.set_pixel(x, y, [v, 1.0 - v, v * 0.5]);
            }
        }
        let seg = segment_graph(&img, 50.0, 0.0, 30).unwrap();
        assert!(seg.num_segments >= 1);
        assert!(seg.segment_sizes().iter().all(|&s| s >= 30));
    }

    #[test]
    fn merge_tree_sizes() {
        let img = Image::filled(8, 8, [0.5; 3]);
        let one = segment_graph(&img, 10.0, 0.0, 1).unwrap();
        assert_eq!(hierarchical_merge(&one, &img), vec![BBox::new(0.0, 0.0, 8.0, 8.0)]);

        let img = halves(20, 10);
        let seg = segment_graph(&img, 1.0, 0.0, 5).unwrap();
        let boxes = hierarchical_merge(&seg, &img);
        assert_eq!(
            boxes,
            vec![
                BBox::new(0.0, 0.0, 10.0, 10.0),
                BBox::new(10.0, 0.0, 10.0, 10.0),
                BBox::new(0.0, 0.0, 20.0, 10.0),
            ]
        );
    }

    #[test]
    fn merge_tree_has_2n_minus_1_boxes() {
        let mut img = Image::filled(32, 32, [0.0; 3]);
        for y in 0..32 {
            for x in 0..32 {
                let c = [(x / 8) as f32 / 4.0, (y / 8) as f32 / 4.0, ((x / 8 + y / 8) % 2) as f32];
                img.set_pixel(x, y, c);
            }
        }
        let seg = segment_graph(&img, 5.0, 0.0, 4).unwrap();
        assert!(seg.num_segments > 4);
        assert_eq!(hierarchical_merge(&seg, &img).len(), 2 * seg.num_segments - 1);
    }

    #[test]
    fn uniform_image_proposals_depend_on_size() {
        let cfg = ProposalConfig::default();
        let small = propose_boxes("s", &Image::filled(10, 10, [0.5; 3]), &cfg).unwrap();
        assert!(small.is_empty());
        let big = propose_boxes("b", &Image::filled(40, 30, [0.5; 3]), &cfg).unwrap();
        assert_eq!(big.boxes(), vec![BBox::new(0.0, 0.0, 40.0, 30.0)]);
    }

    #[test]
    fn random_boxes_contract() {
        let cfg = ProposalConfig::default();
        assert!(random_boxes("a", 64, 64, 0, 1, &cfg).is_empty());
        let a = random_boxes("a", 224, 224, 12, 5, &cfg);
        let b = random_boxes("a", 224, 224, 12, 5, &cfg);
        assert_eq!(a, b);
        assert_eq!(a.len(), 12);
        for p in &a.proposals {
            assert!(geometry::passes_filter(&p.bbox, 144.0, 0.33, 3.0));
            assert!(p.bbox.within(224.0, 224.0));
        }
        assert_ne!(a, random_boxes("a", 224, 224, 12, 6, &cfg));
    }
}
