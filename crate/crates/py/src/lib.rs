//! Python bindings: configuration, geometry, losses, the memory queue,
//! proposals, training and checkpoint inference.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ccop::config::{BoxSource, Config};
use ccop::datapipe::{synth_scene, AugConfig, Dataset, ProposalSource};
use ccop::evalkit::{self, LabeledEmbedding, Which};
use ccop::geometry::{self, BBox, JitterNoise};
use ccop::image::Image;
use ccop::objectives;
use ccop::proposals;
use ccop::trainer::{self, LoopOptions};

type Box4 = (f64, f64, f64, f64);

fn err(e: ccop::Error) -> PyErr {
    match e {
        ccop::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        ccop::Error::InvalidArgument(_) | ccop::Error::Config(_) | ccop::Error::Shape(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn bbox(b: Box4) -> PyResult<BBox> {
    BBox::try_new(b.0, b.1, b.2, b.3).map_err(err)
}

fn tuple(b: &BBox) -> Box4 {
    (b.x, b.y, b.w, b.h)
}

fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(Vec::as_slice).collect()
}

/// Run configuration. Keys use dotted section names, e.g. `train.base_lr`.
#[pyclass(name = "Config", module = "ccop_py", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: Config,
}

#[pymethods]
impl PyConfig {
    #[new]
    fn new() -> Self {
        Self { inner: Config::default() }
    }

    /// The desk-scale profile: tiny backbone, 64x64 views, batch 32.
    #[staticmethod]
    fn acceptance() -> Self {
        Self { inner: Config::acceptance() }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let inner = Config::from_toml(text).map_err(err)?;
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Config::load(path).map_err(err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    /// Returns a copy with `KEY=VALUE` overrides applied.
    fn with_overrides(&self, overrides: Vec<String>) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.with_overrides(&overrides).map_err(err)?,
        })
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    fn __repr__(&self) -> String {
        format!("Config(seed={}, hash={})", self.inner.seed, &self.inner.hash()[..12])
    }
}

/// Fixed-capacity FIFO of unit-norm embeddings.
#[pyclass(name = "MemoryQueue", module = "ccop_py")]
struct PyQueue {
    inner: objectives::MemoryQueue,
}

#[pymethods]
impl PyQueue {
    #[new]
    fn new(capacity: usize, dim: usize) -> Self {
        Self {
            inner: objectives::MemoryQueue::new(capacity, dim),
        }
    }

    fn push(&mut self, batch: Vec<Vec<f64>>) -> PyResult<()> {
        self.inner.push(batch.iter().map(Vec::as_slice)).map_err(err)
    }

    /// Entries, oldest first.
    fn negatives(&self) -> Vec<Vec<f64>> {
        self.inner.negatives().map(<[f64]>::to_vec).collect()
    }

    #[getter]
    fn capacity(&self) -> usize {
        self.inner.capacity()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyfunction]
fn iou(a: Box4, b: Box4) -> PyResult<f64> {
    Ok(geometry::iou(&bbox(a)?, &bbox(b)?))
}

/// Shifts by `(sx * w, sy * h)` and scales by `(exp(sw), exp(sh))`.
#[pyfunction]
fn jitter_box(b: Box4, noise: Box4) -> PyResult<Box4> {
    let n = JitterNoise::new(noise.0, noise.1, noise.2, noise.3);
    Ok(tuple(&geometry::jitter_box(&bbox(b)?, &n)))
}

#[pyfunction]
#[pyo3(signature = (boxes, iou_thresh=0.5))]
fn merge_boxes(boxes: Vec<Box4>, iou_thresh: f64) -> PyResult<Vec<Box4>> {
    let bs = boxes.into_iter().map(bbox).collect::<PyResult<Vec<_>>>()?;
    Ok(geometry::merge_boxes(&bs, iou_thresh).iter().map(tuple).collect())
}

#[pyfunction]
#[pyo3(signature = (z_q, z_k, negatives, tau=0.2))]
fn info_nce(z_q: Vec<f64>, z_k: Vec<f64>, negatives: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    objectives::info_nce(&z_q, &z_k, refs(&negatives), tau).map_err(err)
}

#[pyfunction]
fn contrastive_grad(z_q: Vec<f64>, z_k: Vec<f64>, negatives: Vec<Vec<f64>>) -> Vec<f64> {
    objectives::contrastive_grad(&z_q, &z_k, &refs(&negatives))
}

#[pyfunction]
fn approx_grad(z_q: Vec<f64>, z_k: Vec<f64>, negatives: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    objectives::approx_grad(&z_q, &z_k, &refs(&negatives)).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (boxes, embeddings, alpha=0.4))]
fn intra_image_loss(boxes: Vec<Box4>, embeddings: Vec<Vec<f64>>, alpha: f64) -> PyResult<f64> {
    let bs = boxes.into_iter().map(bbox).collect::<PyResult<Vec<_>>>()?;
    objectives::intra_image_loss(&bs, &refs(&embeddings), alpha).map_err(err)
}

/// Region proposals for an image file.
#[pyfunction]
#[pyo3(signature = (path, config=None))]
fn propose(path: PathBuf, config: Option<PyConfig>) -> PyResult<Vec<Box4>> {
    let cfg = config.map(|c| c.inner).unwrap_or_default();
    let img = Image::load(&path).map_err(err)?;
    let id = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let set = proposals::propose_boxes(&id, &img, &cfg.proposals).map_err(err)?;
    Ok(set.boxes().iter().map(tuple).collect())
}

/// Writes a seeded synthetic scene to `path` and returns its
/// `(label, box)` ground truth.
#[pyfunction]
#[pyo3(signature = (seed, path, config=None))]
fn synth_scene_to(seed: u64, path: PathBuf, config: Option<PyConfig>) -> PyResult<Vec<(u32, Box4)>> {
    let cfg = config.map(|c| c.inner).unwrap_or_default();
    let scene = synth_scene(seed, &cfg.synth);
    scene.image.save(&path).map_err(err)?;
    Ok(scene.objects.iter().map(|o| (o.class_label, tuple(&o.bbox))).collect())
}

/// Trains on synthetic scenes (or `images` + `proposals` files) into
/// `out_dir`. Returns the number of completed iterations.
#[pyfunction]
#[pyo3(signature = (config, out_dir, images=None, proposals=None, resume=false, stop_at=None))]
fn pretrain(
    config: PyConfig,
    out_dir: PathBuf,
    images: Option<PathBuf>,
    proposals: Option<PathBuf>,
    resume: bool,
    stop_at: Option<u64>,
) -> PyResult<u64> {
    let cfg = config.inner;
    cfg.validate().map_err(err)?;
    let data = match (images, proposals) {
        (Some(dir), Some(p)) => Dataset::from_image_dir(dir, &ccop::datapipe::load_proposals(p).map_err(err)?),
        (None, None) => {
            let source = match cfg.data.boxes {
                BoxSource::SelectiveSearch => ProposalSource::SelectiveSearch,
                BoxSource::GroundTruth => ProposalSource::GroundTruth,
                BoxSource::Random => ProposalSource::Random(cfg.data.random_count),
            };
            Dataset::synthetic(cfg.data.synthetic_count, cfg.seed, &cfg.synth, source, &cfg.proposals)
        }
        _ => return Err(PyValueError::new_err("images and proposals must be given together")),
    }
    .map_err(err)?;
    let opts = LoopOptions {
        resume,
        stop_at,
        log_every: 0,
    };
    let tr = trainer::train_loop(Arc::new(data), &cfg, &out_dir, &opts).map_err(err)?;
    Ok(tr.state.t)
}

/// A trained checkpoint, loaded for inference.
#[pyclass(name = "Model", module = "ccop_py")]
struct PyModel {
    ckpt: trainer::Checkpoint,
    encoder: ccop::network::Encoder,
}

#[pymethods]
impl PyModel {
    /// Accepts a checkpoint directory or a run directory containing one.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let dir = if path.join("manifest.json").exists() {
            path
        } else {
            trainer::checkpoint_path(&path)
        };
        let ckpt = trainer::load_checkpoint(&dir).map_err(err)?;
        let encoder = ckpt.encoder().map_err(err)?;
        Ok(Self { ckpt, encoder })
    }

    #[getter]
    fn iteration(&self) -> u64 {
        self.ckpt.state.t
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.ckpt.config.clone(),
        }
    }

    /// One embedding per box of the image file; `which` is `prediction`
    /// or `backbone`.
    #[pyo3(signature = (path, boxes, which="prediction"))]
    fn embed(&self, path: PathBuf, boxes: Vec<Box4>, which: &str) -> PyResult<Vec<Vec<f64>>> {
        let which: Which = which.parse().map_err(err)?;
        let bs = boxes.into_iter().map(bbox).collect::<PyResult<Vec<_>>>()?;
        let img = Image::load(&path).map_err(err)?;
        let aug = AugConfig::identity(self.ckpt.config.augment.view_w, self.ckpt.config.augment.view_h);
        let sample = ccop::datapipe::Sample {
            image_id: String::new(),
            proposals: proposals::ProposalSet::from_boxes("", img.width(), img.height(), bs),
            image: img,
            objects: Vec::new(),
        };
        let out = evalkit::embed_samples(&self.encoder, &self.ckpt.state.query, &[sample], which, &aug).map_err(err)?;
        Ok(out.into_iter().map(|e| e.vector).collect())
    }
}

/// Leave-one-out kNN recall by cosine similarity for each `k`.
#[pyfunction]
fn knn_recall(embeddings: Vec<Vec<f64>>, labels: Vec<u32>, ks: Vec<usize>) -> PyResult<Vec<f64>> {
    if embeddings.len() != labels.len() {
        return Err(PyValueError::new_err("embeddings and labels differ in length"));
    }
    let items: Vec<LabeledEmbedding> = embeddings
        .into_iter()
        .zip(labels)
        .map(|(vector, label)| LabeledEmbedding {
            image_id: String::new(),
            bbox: BBox::new(0.0, 0.0, 1.0, 1.0),
            label: Some(label),
            vector,
        })
        .collect();
    evalkit::knn_recall_multi(&items, &ks).map_err(err)
}

/// Runs the command-line front end and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    ccop::cli::run(std::iter::once("ccop".to_string()).chain(args))
}

#[pymodule]
fn ccop_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyQueue>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(jitter_box, m)?)?;
    m.add_function(wrap_pyfunction!(merge_boxes, m)?)?;
    m.add_function(wrap_pyfunction!(info_nce, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_grad, m)?)?;
    m.add_function(wrap_pyfunction!(approx_grad, m)?)?;
    m.add_function(wrap_pyfunction!(intra_image_loss, m)?)?;
    m.add_function(wrap_pyfunction!(propose, m)?)?;
    m.add_function(wrap_pyfunction!(synth_scene_to, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(knn_recall, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
