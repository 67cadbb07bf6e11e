//! Run configuration: sectioned TOML, dotted-key overrides and the
//! annotated `config.reference` listing.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curriculum::CurriculumConfig;
use crate::datapipe::{AugConfig, SynthConfig};
use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::objectives::LossConfig;
use crate::proposals::ProposalConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxSource {
    SelectiveSearch,
    GroundTruth,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Number of synthetic training scenes.
    pub synthetic_count: usize,
    /// Box source for synthetic scenes.
    pub boxes: BoxSource,
    /// Boxes per image when `boxes = "random"`.
    pub random_count: usize,
    /// Held-out synthetic scenes used for evaluation.
    pub heldout_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic_count: 2000,
            boxes: BoxSource::SelectiveSearch,
            random_count: 8,
            heldout_count: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub ema_m: f64,
    pub batch_size: usize,
    pub epochs: u64,
    /// Total iterations; 0 derives it from `epochs` and the dataset size.
    pub iterations: u64,
    pub queue_capacity: usize,
    /// Checkpoint interval in iterations; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Prepared batches buffered ahead of the optimiser.
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.3,
            momentum: 0.9,
            weight_decay: 1e-4,
            ema_m: 0.999,
            batch_size: 256,
            epochs: 800,
            iterations: 0,
            queue_capacity: 65335,
            checkpoint_every: 1000,
            grad_clip: 0.0,
            prefetch: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || self.momentum < 0.0 || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::Config("train rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_m) {
            return Err(Error::Config(format!("train.ema_m must lie in [0, 1], got {}", self.ema_m)));
        }
        if self.batch_size == 0 || self.queue_capacity == 0 {
            return Err(Error::Config("train.batch_size and train.queue_capacity must be positive".into()));
        }
        Ok(())
    }

    /// `T = epochs * ceil(len / batch)` unless `iterations` is set.
    pub fn total_iterations(&self, dataset_len: usize) -> u64 {
        if self.iterations > 0 {
            self.iterations
        } else {
            self.epochs * dataset_len.div_ceil(self.batch_size) as u64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub augment: AugConfig,
    pub proposals: ProposalConfig,
    pub synth: SynthConfig,
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub curriculum: CurriculumConfig,
}

impl Config {
    /// Desk-scale profile: tiny backbone, 64x64 synthetic scenes, batch 32,
    /// 4096-entry queues, 1000 iterations.
    pub fn acceptance() -> Self {
        let mut c = Self::default();
        c.train.base_lr = 0.05;
        c.train.batch_size = 32;
        c.train.iterations = 1000;
        c.train.queue_capacity = 4096;
        c.train.checkpoint_every = 250;
        c.augment.view_w = 64;
        c.augment.view_h = 64;
        // the full-strength recipe leaves too little shared signal in 64 px
        // views to learn from in 1000 steps
        c.augment.crop_scale = (0.35, 1.0);
        c.augment.brightness = 0.2;
        c.augment.contrast = 0.2;
        c.augment.saturation = 0.2;
        c.augment.hue = 0.05;
        c.augment.grayscale_p = 0.1;
        c.augment.blur_sigma = (0.1, 0.6);
        c.synth.hue_spread = 0.25;
        c.proposals = ProposalConfig::synthetic();
        c.network.fpn_width = 64;
        c.network.mlp_hidden = 512;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.network.validate()?;
        self.loss.validate().map_err(|e| Error::Config(e.to_string()))?;
        crate::curriculum::CurriculumState::new(&self.curriculum, 0).map_err(|e| Error::Config(e.to_string()))?;
        if self.augment.view_w % 32 != 0 || self.augment.view_h % 32 != 0 || self.augment.view_w == 0 || self.augment.view_h == 0 {
            return Err(Error::Config("augment view size must be a positive multiple of 32".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// Applies `section.key=value` overrides; values are parsed as TOML and
    /// fall back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut table: toml::Table = toml::from_str(&self.to_toml()).expect("round trip");
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let value = parse_value(raw.trim());
            let parts: Vec<&str> = key.trim().split('.').collect();
            let (last, path) = parts.split_last().expect("split yields one part");
            let mut cur = &mut table;
            for p in path {
                cur = cur
                    .get_mut(*p)
                    .and_then(toml::Value::as_table_mut)
                    .ok_or_else(|| Error::Config(format!("unknown config section `{p}` in `{key}`")))?;
            }
            if !cur.contains_key(*last) {
                return Err(Error::Config(format!("unknown config key `{key}`")));
            }
            cur.insert((*last).to_string(), value);
        }
        let c: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(c)
    }

    /// SHA-256 of the serialised configuration.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

const DOCS: &[(&str, &str)] = &[
    ("seed", "Base seed; every random stream derives from it."),
    ("train.base_lr", "Initial SGD learning rate, cosine-annealed to zero."),
    ("train.momentum", "SGD momentum."),
    ("train.weight_decay", "Weight decay on conv and linear weights (not biases or norm parameters)."),
    ("train.ema_m", "Key-encoder momentum; unstated in the method description, 0.999 follows common practice."),
    ("train.batch_size", "Image pairs per iteration."),
    ("train.epochs", "Passes over the dataset when train.iterations = 0."),
    ("train.iterations", "Total iterations; 0 derives epochs * ceil(dataset / batch)."),
    ("train.queue_capacity", "Entries in each negative queue (image and object). 65335 is the literal published value."),
    ("train.checkpoint_every", "Checkpoint interval in iterations; 0 writes only the final checkpoint."),
    ("train.grad_clip", "Global gradient-norm clip; 0 disables it."),
    ("train.prefetch", "Prepared batches buffered ahead of the optimiser."),
    ("data.synthetic_count", "Synthetic training scenes when training with --synthetic."),
    ("data.boxes", "Box source for synthetic scenes: selective_search, ground_truth or random."),
    ("data.random_count", "Boxes per image for data.boxes = \"random\"."),
    ("data.heldout_count", "Held-out synthetic scenes for kNN evaluation."),
    ("augment.view_w", "View width in pixels (multiple of 32)."),
    ("augment.view_h", "View height in pixels (multiple of 32)."),
    ("augment.random_crop", "Random resized crop; false uses the whole image."),
    ("augment.crop_scale", "Crop area range as a fraction of the image."),
    ("augment.crop_ratio", "Crop aspect-ratio range."),
    ("augment.color_jitter_p", "Probability of colour jitter."),
    ("augment.brightness", "Brightness jitter strength."),
    ("augment.contrast", "Contrast jitter strength."),
    ("augment.saturation", "Saturation jitter strength."),
    ("augment.hue", "Hue jitter strength."),
    ("augment.grayscale_p", "Probability of grayscale conversion."),
    ("augment.blur_p", "Probability of Gaussian blur."),
    ("augment.blur_sigma", "Blur sigma range."),
    ("augment.hflip_p", "Probability of horizontal flip."),
    ("augment.max_clip_fraction", "Boxes losing more than this fraction of area to the crop are dropped."),
    ("augment.max_shared", "Maximum object pairs per image pair; extra shared objects are subsampled."),
    ("augment.mean", "Per-channel normalisation mean."),
    ("augment.std", "Per-channel normalisation std."),
    ("proposals.k", "Segmentation scale; larger values give larger segments."),
    ("proposals.sigma", "Gaussian smoothing before segmentation."),
    ("proposals.min_size", "Minimum segment size in pixels."),
    ("proposals.merge_iou", "Boxes overlapping above this IoU are merged into their hull."),
    ("proposals.min_area", "Minimum box area in pixels."),
    ("proposals.ratio_lo", "Exclusive lower bound on box aspect ratio."),
    ("proposals.ratio_hi", "Exclusive upper bound on box aspect ratio."),
    ("proposals.max_boxes", "Largest boxes kept per image; 0 keeps all."),
    ("synth.width", "Synthetic scene width."),
    ("synth.height", "Synthetic scene height."),
    ("synth.min_shapes", "Minimum shapes per scene."),
    ("synth.max_shapes", "Maximum shapes per scene."),
    ("synth.min_extent", "Smallest shape extent in pixels."),
    ("synth.max_extent", "Largest shape extent in pixels."),
    ("synth.class_hues", "Hue centre for disk, square and triangle."),
    ("synth.hue_spread", "Hue half-range around each class centre."),
    ("synth.texture", "Background texture amplitude."),
    ("network.backbone", "tiny (four strided conv stages) or resnet50."),
    ("network.tiny_widths", "Stem and stage widths of the tiny backbone."),
    ("network.fpn_width", "Channel width of every pyramid level."),
    ("network.mlp_hidden", "Hidden width of both projection heads."),
    ("network.embed_dim", "Embedding dimension."),
    ("network.roi_size", "RoIAlign output resolution per side."),
    ("network.bn_eps", "Batch-norm epsilon."),
    ("network.bn_momentum", "Running-statistics momentum."),
    ("loss.tau", "Contrastive temperature; unstated in the method description, 0.2 follows common practice."),
    ("loss.alpha", "Intra-image hinge margin."),
    ("loss.iou_disjoint", "Box pairs below this IoU count as distinct objects in the intra-image term."),
    ("loss.weight_img", "Weight of the image-level contrastive term."),
    ("loss.weight_obj", "Weight of the object-level contrastive term."),
    ("loss.weight_intra", "Weight of the intra-image term."),
    ("loss.object_loss", "Enable the object-level contrastive term."),
    ("loss.intra_loss", "Enable the intra-image term."),
    ("curriculum.enabled", "Enable the spatial noise curriculum; false uses key boxes unjittered."),
    ("curriculum.zeta_start", "Jitter magnitude at the first iteration."),
    ("curriculum.zeta_end", "Jitter magnitude at the last iteration."),
    ("curriculum.beta_start", "IoU floor at the first iteration."),
    ("curriculum.beta_end", "IoU floor at the last iteration."),
    ("curriculum.candidates", "Jittered candidates per key box; the hardest is selected."),
    ("curriculum.max_attempts", "Draws per candidate before falling back to the unjittered box."),
];

pub fn doc_for(key: &str) -> Option<&'static str> {
    DOCS.iter().find(|(k, _)| *k == key).map(|(_, d)| *d)
}

/// Default configuration with every key documented inline.
pub fn reference() -> String {
    let table: toml::Table = toml::from_str(&Config::default().to_toml()).expect("round trip");
    let mut out = String::from("# Configuration reference. Every key is optional; values shown are defaults.\n\n");
    let mut sections = Vec::new();
    for (k, v) in &table {
        match v {
            toml::Value::Table(t) => sections.push((k.clone(), t.clone())),
            _ => push_entry(&mut out, k, k, v),
        }
    }
    for (name, t) in sections {
        out.push_str(&format!("\n[{name}]\n"));
        for (k, v) in &t {
            push_entry(&mut out, &format!("{name}.{k}"), k, v);
        }
    }
    out
}

fn push_entry(out: &mut String, full: &str, key: &str, v: &toml::Value) {
    if let Some(d) = doc_for(full) {
        out.push_str(&format!("# {d}\n"));
    }
    out.push_str(&format!("{key} = {v}\n"));
}
