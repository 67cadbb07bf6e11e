//! Contrastive and intra-image objectives, the negative-sample queues, and
//! the closed-form gradients used to study positive-pair saturation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Softmax temperature of the contrastive terms.
    pub tau: f64,
    /// Hinge margin of the intra-image term.
    pub alpha: f64,
    /// Box pairs with IoU below this are treated as distinct objects.
    pub iou_disjoint: f64,
    pub weight_img: f64,
    pub weight_obj: f64,
    pub weight_intra: f64,
    /// Object-level contrastive term on/off.
    pub object_loss: bool,
    /// Intra-image discrimination term on/off.
    pub intra_loss: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.2,
            alpha: 0.4,
            iou_disjoint: 0.05,
            weight_img: 1.0,
            weight_obj: 1.0,
            weight_intra: 1.0,
            object_loss: true,
            intra_loss: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if [self.weight_img, self.weight_obj, self.weight_intra].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        Ok(())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn is_unit(a: &[f64]) -> bool {
    (norm(a) - 1.0).abs() <= UNIT_NORM_TOL
}

/// Fixed-capacity FIFO of unit-norm embeddings used as negatives.
///
/// Rows live in a ring buffer; [`MemoryQueue::negatives`] yields them oldest
/// first.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryQueue {
    capacity: usize,
    dim: usize,
    data: Vec<f64>,
    len: usize,
    head: usize,
}

impl MemoryQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            data: vec![0.0; capacity * dim],
            len: 0,
            head: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends a batch, evicting the oldest entries beyond capacity. The
    /// whole batch is rejected if any row is not unit-norm.
    pub fn push<'a>(&mut self, batch: impl IntoIterator<Item = &'a [f64]>) -> Result<()> {
        let rows: Vec<&[f64]> = batch.into_iter().collect();
        for (i, r) in rows.iter().enumerate() {
            if r.len() != self.dim {
                return Err(Error::Shape(format!("queue dim {}, row {i} has {}", self.dim, r.len())));
            }
            if !is_unit(r) {
                return Err(Error::invalid(format!("queue row {i} has norm {}", norm(r))));
            }
        }
        if self.capacity == 0 {
            return Ok(());
        }
        for r in rows {
            let slot = (self.head + self.len) % self.capacity;
            self.data[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(r);
            if self.len < self.capacity {
                self.len += 1;
            } else {
                self.head = (self.head + 1) % self.capacity;
            }
        }
        Ok(())
    }

    /// Current entries, oldest first.
    pub fn negatives(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.len).map(move |i| {
            let slot = (self.head + i) % self.capacity;
            &self.data[slot * self.dim..(slot + 1) * self.dim]
        })
    }

    /// Occupied rows as one contiguous block in storage order (which differs
    /// from age order once the ring has wrapped).
    pub fn storage(&self) -> &[f64] {
        &self.data[..self.len * self.dim]
    }

    pub(crate) fn raw_parts(&self) -> (&[f64], usize, usize) {
        (&self.data, self.len, self.head)
    }

    pub(crate) fn from_raw_parts(capacity: usize, dim: usize, data: Vec<f64>, len: usize, head: usize) -> Result<Self> {
        if data.len() != capacity * dim || len > capacity || (capacity > 0 && head >= capacity) {
            return Err(Error::Shape("inconsistent queue state".into()));
        }
        Ok(Self {
            capacity,
            dim,
            data,
            len,
            head,
        })
    }
}

/// Value and gradients of the InfoNCE loss for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct NceOutput {
    pub loss: f64,
    pub grad_q: Vec<f64>,
    pub grad_k: Vec<f64>,
}

/// `-log(exp(q.k/tau) / (exp(q.k/tau) + sum_n exp(q.n/tau)))`, computed with
/// a shifted log-sum-exp. Negatives receive no gradient.
pub fn info_nce_with_grad<'a>(
    z_q: &[f64],
    z_k: &[f64],
    negatives: impl IntoIterator<Item = &'a [f64]>,
    tau: f64,
) -> Result<NceOutput> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("tau must be positive, got {tau}")));
    }
    if z_q.len() != z_k.len() {
        return Err(Error::Shape(format!("query dim {} vs key dim {}", z_q.len(), z_k.len())));
    }
    let negs: Vec<&[f64]> = negatives.into_iter().collect();
    let pos = dot(z_q, z_k) / tau;
    let logits: Vec<f64> = negs.iter().map(|n| dot(z_q, n) / tau).collect();
    let max = logits.iter().copied().fold(pos, f64::max);
    let e_pos = (pos - max).exp();
    let e_neg: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let denom = e_pos + e_neg.iter().sum::<f64>();
    let loss = -(pos - max) + denom.ln();

    let p_pos = e_pos / denom;
    let mut grad_q: Vec<f64> = z_k.iter().map(|k| (p_pos - 1.0) * k / tau).collect();
    for (n, e) in negs.iter().zip(&e_neg) {
        let p = e / denom;
        for (g, v) in grad_q.iter_mut().zip(n.iter()) {
            *g += p * v / tau;
        }
    }
    let grad_k = z_q.iter().map(|q| (p_pos - 1.0) * q / tau).collect();
    Ok(NceOutput { loss, grad_q, grad_k })
}

pub fn info_nce<'a>(z_q: &[f64], z_k: &[f64], negatives: impl IntoIterator<Item = &'a [f64]>, tau: f64) -> Result<f64> {
    info_nce_with_grad(z_q, z_k, negatives, tau).map(|o| o.loss)
}

/// Batched InfoNCE against a queue: `queries` and `keys` are row-major
/// `n x dim`. Returns per-row losses and the gradient w.r.t. `queries`.
pub fn info_nce_batch(queries: &[f64], keys: &[f64], queue: &MemoryQueue, tau: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("tau must be positive, got {tau}")));
    }
    let dim = queue.dim();
    if queries.len() != keys.len() || queries.len() % dim.max(1) != 0 {
        return Err(Error::Shape("query/key blocks must both be n x dim".into()));
    }
    let n = if dim == 0 { 0 } else { queries.len() / dim };
    let m = queue.len();
    let negs = queue.storage();
    let mut logits = vec![0.0; n * m];
    if n > 0 && m > 0 {
        crate::network::ops::gemm(n, dim, m, queries, false, negs, true, &mut logits, 0.0);
    }
    let mut losses = Vec::with_capacity(n);
    let mut grad = vec![0.0; n * dim];
    let mut probs = vec![0.0; n * m];
    for i in 0..n {
        let q = &queries[i * dim..(i + 1) * dim];
        let k = &keys[i * dim..(i + 1) * dim];
        let pos = dot(q, k) / tau;
        let row = &logits[i * m..(i + 1) * m];
        let max = row.iter().map(|l| l / tau).fold(pos, f64::max);
        let e_pos = (pos - max).exp();
        let mut denom = e_pos;
        let prow = &mut probs[i * m..(i + 1) * m];
        for (p, l) in prow.iter_mut().zip(row) {
            *p = (l / tau - max).exp();
            denom += *p;
        }
        losses.push(-(pos - max) + denom.ln());
        prow.iter_mut().for_each(|p| *p /= denom * tau);
        let p_pos = e_pos / denom;
        for (g, kv) in grad[i * dim..(i + 1) * dim].iter_mut().zip(k) {
            *g = (p_pos - 1.0) * kv / tau;
        }
    }
    if n > 0 && m > 0 {
        crate::network::ops::gemm(n, m, dim, &probs, false, negs, false, &mut grad, 1.0);
    }
    Ok((losses, grad))
}

/// Value and per-embedding gradients of the intra-image hinge loss.
#[derive(Debug, Clone, PartialEq)]
pub struct IntraOutput {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
    /// Number of active ordered pairs (the L1 norm of the indicator).
    pub pairs: usize,
}

/// Mean hinge `max(z_i.z_j - alpha, 0)` over ordered pairs of boxes whose IoU
/// is below `iou_disjoint`; zero when no such pair exists.
pub fn intra_image_loss_with_grad(
    boxes: &[BBox],
    embeddings: &[&[f64]],
    alpha: f64,
    iou_disjoint: f64,
) -> Result<IntraOutput> {
    if boxes.len() != embeddings.len() {
        return Err(Error::Shape(format!(
            "{} boxes but {} embeddings",
            boxes.len(),
            embeddings.len()
        )));
    }
    let n = boxes.len();
    let dim = embeddings.first().map_or(0, |e| e.len());
    let mut grads = vec![vec![0.0; dim]; n];
    let mut active: Vec<(usize, usize)> = Vec::new();
    let mut pairs = 0usize;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j || iou(&boxes[i], &boxes[j]) >= iou_disjoint {
                continue;
            }
            pairs += 1;
            let m = dot(embeddings[i], embeddings[j]) - alpha;
            if m > 0.0 {
                total += m;
                active.push((i, j));
            }
        }
    }
    if pairs == 0 {
        return Ok(IntraOutput {
            loss: 0.0,
            grads,
            pairs,
        });
    }
    let scale = 1.0 / pairs as f64;
    for (i, j) in active {
        for d in 0..dim {
            grads[i][d] += scale * embeddings[j][d];
            grads[j][d] += scale * embeddings[i][d];
        }
    }
    Ok(IntraOutput {
        loss: total * scale,
        grads,
        pairs,
    })
}

pub fn intra_image_loss(boxes: &[BBox], embeddings: &[&[f64]], alpha: f64) -> Result<f64> {
    intra_image_loss_with_grad(boxes, embeddings, alpha, LossConfig::default().iou_disjoint).map(|o| o.loss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub img: f64,
    pub obj: f64,
    pub intra: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            img: 1.0,
            obj: 1.0,
            intra: 1.0,
        }
    }
}

pub fn total_loss(l_img: f64, l_obj: f64, l_intra: f64, w: &LossWeights) -> f64 {
    let term = |weight: f64, value: f64| if weight == 0.0 { 0.0 } else { weight * value };
    term(w.img, l_img) + term(w.obj, l_obj) + term(w.intra, l_intra)
}

/// Closed-form gradient of the unit-temperature InfoNCE loss w.r.t. the
/// query, treating embeddings as free vectors:
/// `sum_i (n_i - k) e^{q.n_i} / (e^{q.k} + sum_i e^{q.n_i})`.
pub fn contrastive_grad(z_q: &[f64], z_k: &[f64], negatives: &[&[f64]]) -> Vec<f64> {
    let e_pos = dot(z_q, z_k).exp();
    let e_neg: Vec<f64> = negatives.iter().map(|n| dot(z_q, n).exp()).collect();
    let denom = e_pos + e_neg.iter().sum::<f64>();
    let mut g = vec![0.0; z_q.len()];
    for (n, e) in negatives.iter().zip(&e_neg) {
        for d in 0..g.len() {
            g[d] += (n[d] - z_k[d]) * e;
        }
    }
    g.iter_mut().for_each(|v| *v /= denom);
    g
}

/// Late-training approximation of [`contrastive_grad`] for negatives
/// orthogonal to the query: `(q - k) + mean_i(n_i - q)`.
pub fn approx_grad(z_q: &[f64], z_k: &[f64], negatives: &[&[f64]]) -> Result<Vec<f64>> {
    if negatives.is_empty() {
        return Err(Error::invalid("approximate gradient needs at least one negative"));
    }
    let m = negatives.len() as f64;
    let mut g: Vec<f64> = z_q.iter().zip(z_k).map(|(q, k)| q - k).collect();
    for n in negatives {
        for d in 0..g.len() {
            g[d] += (n[d] - z_q[d]) / m;
        }
    }
    Ok(g)
}

/// Norm of the key-dependent part of [`contrastive_grad`],
/// `|k| * S / (e^{q.k} + S)` with `S = sum_i e^{q.n_i}`.
pub fn positive_pair_grad_norm(z_q: &[f64], z_k: &[f64], negatives: &[&[f64]]) -> f64 {
    let s: f64 = negatives.iter().map(|n| dot(z_q, n).exp()).sum();
    norm(z_k) * s / (dot(z_q, z_k).exp() + s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis(dim: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    #[test]
    fn info_nce_examples() {
        let q = basis(4, 0);
        assert_eq!(info_nce(&q, &q, std::iter::empty(), 0.2).unwrap(), 0.0);
        let negs = [basis(4, 1), basis(4, 2), basis(4, 3)];
        let refs: Vec<&[f64]> = negs.iter().map(|v| v.as_slice()).collect();
        let l1 = info_nce(&q, &q, refs.iter().copied(), 1.0).unwrap();
        assert!((l1 - (1.0 + 3.0 * (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((l1 - 0.743665).abs() < 1e-5);
        let l2 = info_nce(&q, &q, refs.iter().copied(), 0.2).unwrap();
        assert!((l2 - 0.020012).abs() < 1e-5);
        assert!(info_nce(&q, &q, refs.iter().copied(), 0.0).is_err());
    }

    #[test]
    fn intra_examples() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let far = BBox::new(50.0, 50.0, 10.0, 10.0);
        let z = basis(3, 0);
        assert_eq!(intra_image_loss(&[a, far], &[&z, &z], 0.4).unwrap(), 0.6);
        let overlap = BBox::new(5.0, 0.0, 10.0, 10.0);
        assert_eq!(intra_image_loss(&[a, overlap], &[&z, &z], 0.4).unwrap(), 0.0);
        let w = [0.3, (1.0f64 - 0.09).sqrt(), 0.0];
        assert_eq!(intra_image_loss(&[a, far], &[&z, &w], 0.4).unwrap(), 0.0);
        assert_eq!(intra_image_loss(&[a], &[&z], 0.4).unwrap(), 0.0);
        assert_eq!(intra_image_loss(&[], &[], 0.4).unwrap(), 0.0);
        assert!(intra_image_loss(&[a, far], &[&z], 0.4).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(1.0, 2.0, 0.5, &w), 3.5);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w), 0.0);
        let no_obj = LossWeights { obj: 0.0, ..w };
        assert_eq!(total_loss(1.0, f64::NAN, 0.5, &no_obj), 1.5);
    }

    #[test]
    fn queue_fifo_examples() {
        let mut q = MemoryQueue::new(2, 2);
        let rows = [basis(2, 0), basis(2, 1), vec![-1.0, 0.0]];
        q.push(rows.iter().map(|r| r.as_slice())).unwrap();
        assert_eq!(q.len(), 2);
        let got: Vec<Vec<f64>> = q.negatives().map(|r| r.to_vec()).collect();
        assert_eq!(got, vec![basis(2, 1), vec![-1.0, 0.0]]);
        assert!(q.push([[2.0, 0.0].as_slice()]).is_err());
        assert!(q.push([[1.0, 0.0, 0.0].as_slice()]).is_err());
        assert_eq!(q.len(), 2);
    }

    #[test]
    fn contrastive_grad_examples() {
        let q = basis(3, 0);
        let k = basis(3, 1);
        assert_eq!(contrastive_grad(&q, &k, &[&k]), vec![0.0; 3]);
        let n = basis(3, 2);
        let g = contrastive_grad(&q, &k, &[&n]);
        assert_eq!(g, vec![0.0, -0.5, 0.5]);
    }

    #[test]
    fn approx_grad_examples() {
        let q = basis(3, 0);
        let n1 = basis(3, 1);
        let n2 = basis(3, 2);
        let g = approx_grad(&q, &q, &[&n1, &n2]).unwrap();
        assert_eq!(g, vec![-1.0, 0.5, 0.5]);
        let k = basis(3, 1);
        assert_eq!(approx_grad(&q, &k, &[&k, &k]).unwrap(), vec![0.0; 3]);
        assert!(approx_grad(&q, &k, &[]).is_err());
    }

    #[test]
    fn batch_matches_single() {
        let dim = 4;
        let mut queue = MemoryQueue::new(3, dim);
        let negs = [basis(4, 1), basis(4, 2), vec![0.5, 0.5, 0.5, 0.5], basis(4, 3)];
        queue.push(negs.iter().map(|v| v.as_slice())).unwrap();
        let q = [0.6, 0.8, 0.0, 0.0, 0.0, 0.0, 0.6, 0.8];
        let k = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let (losses, grad) = info_nce_batch(&q, &k, &queue, 0.2).unwrap();
        for i in 0..2 {
            let single = info_nce_with_grad(&q[i * 4..i * 4 + 4], &k[i * 4..i * 4 + 4], queue.negatives(), 0.2).unwrap();
            assert!((single.loss - losses[i]).abs() < 1e-12);
            for d in 0..4 {
                assert!((single.grad_q[d] - grad[i * 4 + d]).abs() < 1e-12);
            }
        }
    }
}
