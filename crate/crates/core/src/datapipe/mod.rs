//! Data pipeline: datasets with proposals, two-view augmentation, synthetic
//! scenes, and a bounded prefetch channel for the trainer.

pub mod augment;
pub mod io;
pub mod synth;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::Rng as _;
use rayon::prelude::*;

pub use augment::{augment_view, augment_view_at, make_pair, AugConfig, View, ViewPair};
pub use io::{list_images, load_proposals, save_proposals};
pub use synth::{synth_scene, SceneObject, SynthConfig, SynthScene};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::proposals::{propose_boxes, random_boxes, ProposalConfig, ProposalSet};
use crate::rng::{derive_seed, rng_from, stream};

/// Where training boxes come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProposalSource {
    SelectiveSearch,
    Random(usize),
    GroundTruth,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub image_id: String,
    pub image: Image,
    pub proposals: ProposalSet,
    /// Labelled ground truth when known (synthetic scenes).
    pub objects: Vec<SceneObject>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `count` seeded synthetic scenes; scene `i` uses seed
    /// `derive_seed(seed, SCENE, i)`.
    pub fn synthetic(
        count: usize,
        seed: u64,
        synth: &SynthConfig,
        source: ProposalSource,
        props: &ProposalConfig,
    ) -> Result<Self> {
        let samples = (0..count)
            .into_par_iter()
            .map(|i| {
                let scene_seed = derive_seed(seed, stream::SCENE, i as u64);
                let scene = synth_scene(scene_seed, synth);
                let id = format!("synth-{i:06}");
                let (w, h) = (scene.image.width(), scene.image.height());
                let proposals = match source {
                    ProposalSource::SelectiveSearch => propose_boxes(&id, &scene.image, props)?,
                    ProposalSource::Random(n) => random_boxes(&id, w, h, n, scene_seed, props),
                    ProposalSource::GroundTruth => ProposalSet::from_boxes(&id, w, h, scene.boxes()),
                };
                Ok(Sample {
                    image_id: id,
                    image: scene.image,
                    proposals,
                    objects: scene.objects,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples })
    }

    /// Images in `dir` joined with their proposal records by file name.
    pub fn from_image_dir(dir: impl AsRef<Path>, proposals: &BTreeMap<String, ProposalSet>) -> Result<Self> {
        let mut samples = Vec::new();
        for (id, path) in list_images(dir)? {
            let Some(set) = proposals.get(&id) else {
                continue;
            };
            let image = Image::load(&path)?;
            if (image.width(), image.height()) != (set.image_w, set.image_h) {
                return Err(Error::invalid(format!(
                    "{id}: proposals recorded for {}x{}, image is {}x{}",
                    set.image_w,
                    set.image_h,
                    image.width(),
                    image.height()
                )));
            }
            samples.push(Sample {
                image_id: id,
                image,
                proposals: set.clone(),
                objects: Vec::new(),
            });
        }
        if samples.is_empty() {
            return Err(Error::invalid("no images matched the proposals file"));
        }
        Ok(Self { samples })
    }
}

/// Seeds and sample indices for one training iteration; a pure function of
/// `(seed, iteration)` so any step can be replayed.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub iteration: u64,
    pub indices: Vec<usize>,
    pub seeds: Vec<(u64, u64)>,
}

pub fn plan_batch(seed: u64, iteration: u64, batch_size: usize, dataset_len: usize) -> BatchPlan {
    let mut rng = rng_from(derive_seed(seed, stream::BATCH, iteration));
    let indices = (0..batch_size).map(|_| rng.random_range(0..dataset_len)).collect();
    let seeds = (0..batch_size as u64)
        .map(|j| {
            let slot = iteration.wrapping_mul(1 << 20) ^ j;
            (derive_seed(seed, stream::VIEW_Q, slot), derive_seed(seed, stream::VIEW_K, slot))
        })
        .collect();
    BatchPlan {
        iteration,
        indices,
        seeds,
    }
}

pub fn build_batch(dataset: &Dataset, plan: &BatchPlan, cfg: &AugConfig) -> Vec<ViewPair> {
    plan.indices
        .par_iter()
        .zip(plan.seeds.par_iter())
        .map(|(&i, &(sq, sk))| {
            let s = &dataset.samples[i];
            make_pair(&s.image, &s.proposals, sq, sk, cfg)
        })
        .collect()
}

pub struct PreparedBatch {
    pub plan: BatchPlan,
    pub pairs: Vec<ViewPair>,
}

/// Background producer feeding batches for iterations `start..end` through a
/// bounded channel. Batches arrive in iteration order.
pub struct Prefetcher {
    rx: Receiver<PreparedBatch>,
    handle: Option<JoinHandle<()>>,
}

impl Prefetcher {
    pub fn spawn(
        dataset: Arc<Dataset>,
        cfg: AugConfig,
        seed: u64,
        batch_size: usize,
        start: u64,
        end: u64,
        bound: usize,
    ) -> Self {
        let (tx, rx) = sync_channel(bound.max(1));
        let handle = std::thread::spawn(move || {
            for t in start..end {
                let plan = plan_batch(seed, t, batch_size, dataset.len());
                let pairs = build_batch(&dataset, &plan, &cfg);
                if tx.send(PreparedBatch { plan, pairs }).is_err() {
                    break;
                }
            }
        });
        Self {
            rx,
            handle: Some(handle),
        }
    }

    pub fn next_batch(&mut self) -> Option<PreparedBatch> {
        self.rx.recv().ok()
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        // unblock the producer before joining
        let (_tx, rx) = sync_channel(1);
        drop(std::mem::replace(&mut self.rx, rx));
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_is_pure_and_prefetch_matches_direct_build() {
        let ds = Arc::new(
            Dataset::synthetic(6, 3, &SynthConfig::default(), ProposalSource::GroundTruth, &ProposalConfig::default())
                .unwrap(),
        );
        assert_eq!(plan_batch(1, 5, 4, 6), plan_batch(1, 5, 4, 6));
        assert_ne!(plan_batch(1, 5, 4, 6).seeds, plan_batch(1, 6, 4, 6).seeds);
        let cfg = AugConfig {
            view_w: 32,
            view_h: 32,
            ..AugConfig::default()
        };
        let mut pf = Prefetcher::spawn(ds.clone(), cfg.clone(), 1, 4, 2, 5, 1);
        for t in 2..5 {
            let b = pf.next_batch().unwrap();
            assert_eq!(b.plan.iteration, t);
            assert_eq!(b.pairs, build_batch(&ds, &plan_batch(1, t, 4, 6), &cfg));
        }
        assert!(pf.next_batch().is_none());
        // dropping mid-stream must not hang
        let _early = Prefetcher::spawn(ds, cfg, 1, 4, 0, 100, 1);
    }
}
