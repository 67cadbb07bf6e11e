//! Spatial noise curriculum: linear schedules for the jitter magnitude and
//! the IoU floor, jittered key-box candidates, and hardest-candidate
//! selection.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, jitter_box, BBox, JitterNoise};
use crate::rng::{rng_from, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    /// When false key boxes are used unjittered.
    pub enabled: bool,
    pub zeta_start: f64,
    pub zeta_end: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Jittered candidates per key box.
    pub candidates: usize,
    /// Rejection attempts per candidate before falling back to the original box.
    pub max_attempts: usize,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            zeta_start: 0.3,
            zeta_end: 1.0,
            beta_start: 0.8,
            beta_end: 0.3,
            candidates: 4,
            max_attempts: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub t: u64,
    pub total: u64,
    pub zeta_start: f64,
    pub zeta_end: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub candidates: usize,
    pub max_attempts: usize,
}

impl CurriculumState {
    pub fn new(cfg: &CurriculumConfig, total: u64) -> Result<Self> {
        let s = Self {
            t: 0,
            total,
            zeta_start: cfg.zeta_start,
            zeta_end: cfg.zeta_end,
            beta_start: cfg.beta_start,
            beta_end: cfg.beta_end,
            candidates: cfg.candidates,
            max_attempts: cfg.max_attempts,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t > self.total {
            return Err(Error::invalid(format!("iteration {} beyond total {}", self.t, self.total)));
        }
        if !(self.zeta_start >= 0.0 && self.zeta_start <= self.zeta_end) {
            return Err(Error::invalid("need 0 <= zeta_start <= zeta_end"));
        }
        if !(self.beta_start >= self.beta_end && (0.0..=1.0).contains(&self.beta_start) && self.beta_end >= 0.0) {
            return Err(Error::invalid("need 1 >= beta_start >= beta_end >= 0"));
        }
        if self.candidates == 0 || self.max_attempts == 0 {
            return Err(Error::invalid("candidates and max_attempts must be at least 1"));
        }
        Ok(())
    }

    pub fn at(&self, t: u64) -> Self {
        Self {
            t: t.min(self.total),
            ..self.clone()
        }
    }

    /// Fraction of training completed, in `[0, 1]`.
    pub fn progress(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.t as f64 / self.total as f64
        }
    }

    pub fn advance(&mut self) {
        self.t = (self.t + 1).min(self.total);
    }
}

pub fn zeta_at(s: &CurriculumState) -> f64 {
    s.zeta_start + s.progress() * (s.zeta_end - s.zeta_start)
}

pub fn beta_at(s: &CurriculumState) -> f64 {
    s.beta_start + s.progress() * (s.beta_end - s.beta_start)
}

fn draw_noise(rng: &mut Rng, zeta: f64) -> JitterNoise {
    if zeta <= 0.0 {
        return JitterNoise::default();
    }
    let mut c = || {
        // open interval (-zeta, zeta)
        loop {
            let v = rng.random_range(-zeta..zeta);
            if v > -zeta {
                return v;
            }
        }
    };
    JitterNoise::new(c(), c(), c(), c())
}

/// `K` jittered copies of `b`, each clipped to the view and accepted only if
/// its IoU with `b` is at least the current floor. A slot that exhausts its
/// attempts gets `b` itself.
pub fn sample_candidates(b: &BBox, s: &CurriculumState, view_w: f64, view_h: f64, rng_seed: u64) -> Vec<BBox> {
    let mut rng = rng_from(rng_seed);
    let zeta = zeta_at(s);
    let beta = beta_at(s);
    (0..s.candidates)
        .map(|_| {
            for _ in 0..s.max_attempts {
                let noise = draw_noise(&mut rng, zeta);
                let Some(cand) = jitter_box(b, &noise).clip_to(view_w, view_h) else {
                    continue;
                };
                if iou(&cand, b) >= beta {
                    return cand;
                }
            }
            *b
        })
        .collect()
}

/// Index of the candidate least similar to the query embedding; lowest index
/// wins ties.
pub fn scs_select(query: &[f64], candidates: &[Vec<f64>]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::invalid("hardest-candidate selection needs at least one candidate"));
    }
    let mut best = 0;
    let mut best_sim = f64::INFINITY;
    for (i, c) in candidates.iter().enumerate() {
        let sim: f64 = query.iter().zip(c).map(|(a, b)| a * b).sum();
        if sim < best_sim {
            best = i;
            best_sim = sim;
        }
    }
    Ok(best)
}
