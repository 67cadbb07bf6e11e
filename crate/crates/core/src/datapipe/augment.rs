//! Two-view augmentation with proposal bookkeeping.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::geometry::{clipped_fraction, transform_box, BBox};
use crate::image::{hsv_to_rgb, luma, rgb_to_hsv, Image};
use crate::proposals::ProposalSet;
use crate::rng::{derive_seed, rng_from, stream, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugConfig {
    pub view_w: usize,
    pub view_h: usize,
    /// When false the whole image is used as the crop.
    pub random_crop: bool,
    pub crop_scale: (f64, f64),
    pub crop_ratio: (f64, f64),
    pub color_jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_p: f64,
    pub blur_p: f64,
    pub blur_sigma: (f64, f64),
    pub hflip_p: f64,
    /// Boxes losing more than this fraction of their area are dropped.
    pub max_clip_fraction: f64,
    /// Upper bound on positive pairs per image.
    pub max_shared: usize,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            view_w: 224,
            view_h: 224,
            random_crop: true,
            crop_scale: (0.2, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            color_jitter_p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            grayscale_p: 0.2,
            blur_p: 0.5,
            blur_sigma: (0.1, 2.0),
            hflip_p: 0.5,
            max_clip_fraction: 0.4,
            max_shared: 16,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl AugConfig {
    /// Resize only: no crop, colour, blur or flip.
    pub fn identity(view_w: usize, view_h: usize) -> Self {
        Self {
            view_w,
            view_h,
            random_crop: false,
            color_jitter_p: 0.0,
            grayscale_p: 0.0,
            blur_p: 0.0,
            hflip_p: 0.0,
            ..Self::default()
        }
    }
}

/// One augmented view: normalised CHW pixels plus the surviving proposals in
/// view coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
    pub boxes: Vec<(u32, BBox)>,
    pub crop: BBox,
    pub hflip: bool,
}

impl View {
    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.boxes.iter().map(|(id, _)| *id)
    }

    pub fn box_of(&self, id: u32) -> Option<BBox> {
        self.boxes.iter().find(|(i, _)| *i == id).map(|(_, b)| *b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub query: View,
    pub key: View,
    /// Object ids present in both views, ascending.
    pub shared_ids: Vec<u32>,
    pub seed_q: u64,
    pub seed_k: u64,
}

/// Random-resized-crop window: up to ten scale/ratio draws, then the largest
/// centred crop within the ratio bounds.
fn sample_crop(rng: &mut Rng, w: usize, h: usize, cfg: &AugConfig) -> BBox {
    let (fw, fh) = (w as f64, h as f64);
    let area = fw * fh;
    let (lr_lo, lr_hi) = (cfg.crop_ratio.0.ln(), cfg.crop_ratio.1.ln());
    for _ in 0..10 {
        let target = area * uniform(rng, cfg.crop_scale.0, cfg.crop_scale.1);
        let ratio = uniform(rng, lr_lo, lr_hi).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let x = rng.random_range(0..=w - cw);
            let y = rng.random_range(0..=h - ch);
            return BBox::new(x as f64, y as f64, cw as f64, ch as f64);
        }
    }
    let in_ratio = fw / fh;
    let (cw, ch) = if in_ratio < cfg.crop_ratio.0 {
        (w, ((fw / cfg.crop_ratio.0).round() as usize).clamp(1, h))
    } else if in_ratio > cfg.crop_ratio.1 {
        (((fh * cfg.crop_ratio.1).round() as usize).clamp(1, w), h)
    } else {
        (w, h)
    };
    BBox::new(((w - cw) / 2) as f64, ((h - ch) / 2) as f64, cw as f64, ch as f64)
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn jitter_factor(rng: &mut Rng, strength: f64) -> f32 {
    uniform(rng, (1.0 - strength).max(0.0), 1.0 + strength) as f32
}

fn color_jitter(img: &mut Image, rng: &mut Rng, cfg: &AugConfig) {
    let b = jitter_factor(rng, cfg.brightness);
    let c = jitter_factor(rng, cfg.contrast);
    let s = jitter_factor(rng, cfg.saturation);
    let h = uniform(rng, -cfg.hue, cfg.hue) as f32;
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    for op in order {
        match op {
            0 => img.pixels_mut().for_each(|p| p.iter_mut().for_each(|v| *v = (*v * b).clamp(0.0, 1.0))),
            1 => {
                let n = (img.width() * img.height()) as f32;
                let mean = img.pixels().map(luma).sum::<f32>() / n;
                img.pixels_mut()
                    .for_each(|p| p.iter_mut().for_each(|v| *v = ((*v - mean) * c + mean).clamp(0.0, 1.0)));
            }
            2 => img.pixels_mut().for_each(|p| {
                let g = luma([p[0], p[1], p[2]]);
                p.iter_mut().for_each(|v| *v = ((*v - g) * s + g).clamp(0.0, 1.0));
            }),
            _ => img.pixels_mut().for_each(|p| {
                let mut hsv = rgb_to_hsv([p[0], p[1], p[2]]);
                hsv[0] = (hsv[0] + h).rem_euclid(1.0);
                p.copy_from_slice(&hsv_to_rgb(hsv));
            }),
        }
    }
}

/// Produces one view. Every random decision comes from `rng_seed`, so the
/// view is bit-reproducible.
pub fn augment_view(image: &Image, proposals: &ProposalSet, rng_seed: u64, cfg: &AugConfig) -> View {
    let mut rng = rng_from(rng_seed);
    let crop = if cfg.random_crop {
        sample_crop(&mut rng, image.width(), image.height(), cfg)
    } else {
        BBox::new(0.0, 0.0, image.width() as f64, image.height() as f64)
    };
    render_view(image, proposals, crop, &mut rng, cfg)
}

/// Like [`augment_view`] but with a caller-chosen crop window; the seed then
/// drives only the photometric and flip decisions.
pub fn augment_view_at(image: &Image, proposals: &ProposalSet, crop: BBox, rng_seed: u64, cfg: &AugConfig) -> View {
    let mut rng = rng_from(rng_seed);
    render_view(image, proposals, crop, &mut rng, cfg)
}

fn render_view(image: &Image, proposals: &ProposalSet, crop: BBox, rng: &mut Rng, cfg: &AugConfig) -> View {
    let mut img = image.crop_resize(&crop, cfg.view_w, cfg.view_h);
    if rng.random_bool(cfg.color_jitter_p.clamp(0.0, 1.0)) {
        color_jitter(&mut img, rng, cfg);
    }
    if rng.random_bool(cfg.grayscale_p.clamp(0.0, 1.0)) {
        img.pixels_mut().for_each(|p| {
            let g = luma([p[0], p[1], p[2]]);
            p.fill(g);
        });
    }
    if rng.random_bool(cfg.blur_p.clamp(0.0, 1.0)) {
        let sigma = uniform(rng, cfg.blur_sigma.0, cfg.blur_sigma.1);
        img = img.gaussian_blur(sigma);
    }
    let hflip = rng.random_bool(cfg.hflip_p.clamp(0.0, 1.0));
    if hflip {
        img = img.hflip();
    }

    let (vw, vh) = (cfg.view_w as f64, cfg.view_h as f64);
    let boxes = proposals
        .proposals
        .iter()
        .filter_map(|p| {
            let b = transform_box(&p.bbox, &crop, vw, vh, hflip);
            if clipped_fraction(&b, vw, vh) > cfg.max_clip_fraction {
                return None;
            }
            b.clip_to(vw, vh).map(|c| (p.object_id, c))
        })
        .collect();

    View {
        width: cfg.view_w,
        height: cfg.view_h,
        pixels: to_normalized_chw(&img, cfg),
        boxes,
        crop,
        hflip,
    }
}

pub fn to_normalized_chw(img: &Image, cfg: &AugConfig) -> Vec<f32> {
    let plane = img.width() * img.height();
    let mut out = vec![0.0; 3 * plane];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = (p[c] - cfg.mean[c]) / cfg.std[c];
        }
    }
    out
}

/// Two independently seeded views of one image, paired by object id.
pub fn make_pair(image: &Image, proposals: &ProposalSet, seed_q: u64, seed_k: u64, cfg: &AugConfig) -> ViewPair {
    let query = augment_view(image, proposals, seed_q, cfg);
    let key = augment_view(image, proposals, seed_k, cfg);
    let mut shared_ids: Vec<u32> = query.ids().filter(|id| key.box_of(*id).is_some()).collect();
    shared_ids.sort_unstable();
    if cfg.max_shared > 0 && shared_ids.len() > cfg.max_shared {
        let mut rng = rng_from(derive_seed(seed_q, stream::SUBSAMPLE, seed_k));
        shared_ids.shuffle(&mut rng);
        shared_ids.truncate(cfg.max_shared);
        shared_ids.sort_unstable();
    }
    ViewPair {
        query,
        key,
        shared_ids,
        seed_q,
        seed_k,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::synth::{synth_scene, SynthConfig};
    use crate::geometry::BBox;

    fn props(boxes: Vec<BBox>, w: usize, h: usize) -> ProposalSet {
        ProposalSet::from_boxes("img", w, h, boxes)
    }

    #[test]
    fn identity_keeps_boxes_up_to_scale() {
        let img = Image::filled(32, 32, [0.5; 3]);
        let p = props(vec![BBox::new(2.0, 4.0, 10.0, 12.0)], 32, 32);
        let v = augment_view(&img, &p, 9, &AugConfig::identity(64, 64));
        assert_eq!(v.boxes, vec![(0, BBox::new(4.0, 8.0, 20.0, 24.0))]);
        assert!(!v.hflip);
        assert_eq!(v.pixels.len(), 3 * 64 * 64);
    }

    #[test]
    fn hflip_only_mirrors_boxes() {
        let img = Image::filled(64, 64, [0.5; 3]);
        let p = props(vec![BBox::new(10.0, 20.0, 30.0, 40.0)], 64, 64);
        let cfg = AugConfig {
            hflip_p: 1.0,
            ..AugConfig::identity(64, 64)
        };
        let v = augment_view(&img, &p, 3, &cfg);
        assert!(v.hflip);
        assert_eq!(v.boxes, vec![(0, BBox::new(24.0, 20.0, 30.0, 40.0))]);
    }

    #[test]
    fn clip_rule_drops_boxes_losing_more_than_forty_percent() {
        let img = Image::filled(64, 64, [0.5; 3]);
        let p = props(vec![BBox::new(-10.0, 0.0, 20.0, 20.0), BBox::new(-6.0, 30.0, 20.0, 20.0)], 64, 64);
        let v = augment_view(&img, &p, 0, &AugConfig::identity(64, 64));
        // first loses 50%, second 30% and is clipped to the view
        assert_eq!(v.boxes, vec![(1, BBox::new(0.0, 30.0, 14.0, 20.0))]);
    }

    #[test]
    fn pair_sharing_rules() {
        let img = Image::filled(64, 64, [0.5; 3]);
        let p = props(vec![BBox::new(5.0, 5.0, 20.0, 20.0), BBox::new(40.0, 40.0, 20.0, 20.0)], 64, 64);
        let pair = make_pair(&img, &p, 1, 2, &AugConfig::identity(64, 64));
        assert_eq!(pair.shared_ids, vec![0, 1]);

        // crop windows chosen so object 1 is clipped by 75% in the key view only
        let cfg = AugConfig::identity(64, 64);
        let query = augment_view_at(&img, &p, BBox::new(0.0, 0.0, 64.0, 64.0), 1, &cfg);
        let key = augment_view_at(&img, &p, BBox::new(0.0, 0.0, 50.0, 50.0), 2, &cfg);
        assert_eq!(query.ids().collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(key.ids().collect::<Vec<_>>(), vec![0]);
        let shared: Vec<u32> = query.ids().filter(|i| key.box_of(*i).is_some()).collect();
        assert_eq!(shared, vec![0]);
    }

    #[test]
    fn views_respect_clip_rule_and_bounds() {
        let cfg = AugConfig {
            view_w: 64,
            view_h: 64,
            ..AugConfig::default()
        };
        for seed in 0..40 {
            let scene = synth_scene(seed, &SynthConfig::default());
            let p = props(scene.boxes(), 64, 64);
            let pair = make_pair(&scene.image, &p, seed * 2, seed * 2 + 1, &cfg);
            for v in [&pair.query, &pair.key] {
                for (id, b) in &v.boxes {
                    assert!(b.within(64.0, 64.0));
                    let raw = transform_box(p.get(*id).unwrap(), &v.crop, 64.0, 64.0, v.hflip);
                    assert!(clipped_fraction(&raw, 64.0, 64.0) <= 0.4);
                }
            }
            for id in &pair.shared_ids {
                assert!(pair.query.box_of(*id).is_some() && pair.key.box_of(*id).is_some());
            }
            let again = make_pair(&scene.image, &p, seed * 2, seed * 2 + 1, &cfg);
            assert_eq!(pair, again);
            let same = make_pair(&scene.image, &p, 5, 5, &cfg);
            assert_eq!(same.query, same.key);
        }
    }

    #[test]
    fn shared_cap_subsamples() {
        let img = Image::filled(64, 64, [0.5; 3]);
        let boxes = (0..20).map(|i| BBox::new(i as f64, 0.0, 30.0, 30.0)).collect();
        let p = props(boxes, 64, 64);
        let cfg = AugConfig {
            max_shared: 16,
            ..AugConfig::identity(64, 64)
        };
        let pair = make_pair(&img, &p, 4, 8, &cfg);
        assert_eq!(pair.shared_ids.len(), 16);
        assert!(pair.shared_ids.windows(2).all(|w| w[0] < w[1]));
    }
}
