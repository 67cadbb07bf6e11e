//! Checkpoint directories: a JSON manifest plus little-endian `f64` blobs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::network::params::{read_tensors, write_tensors};
use crate::network::{Encoder, EncoderParams, ParamInfo, Role};
use crate::objectives::MemoryQueue;

use super::TrainState;

const FORMAT: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct QueueMeta {
    capacity: usize,
    dim: usize,
    len: usize,
    head: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    t: u64,
    total: u64,
    config_hash: String,
    params: Vec<ParamInfo>,
    buffers: Vec<ParamInfo>,
    /// Absent in lightweight snapshots.
    queues: Option<[QueueMeta; 2]>,
}

fn ckpt_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn queue_meta(q: &MemoryQueue) -> QueueMeta {
    let (_, len, head) = q.raw_parts();
    QueueMeta {
        capacity: q.capacity(),
        dim: q.dim(),
        len,
        head,
    }
}

/// Writes the full training state, or only the encoders when `full` is
/// false. The directory is replaced atomically.
pub fn save_checkpoint(dir: &Path, cfg: &Config, state: &TrainState, full: bool) -> Result<()> {
    let tmp = dir.with_extension("partial");
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let encoder = Encoder::new(&cfg.network)?;
    let manifest = Manifest {
        format: FORMAT,
        t: state.t,
        total: state.total,
        config_hash: cfg.hash(),
        params: encoder.param_info().to_vec(),
        buffers: encoder.buffer_info().to_vec(),
        queues: full.then(|| [queue_meta(&state.queue_img), queue_meta(&state.queue_obj)]),
    };
    let mpath = tmp.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    cfg.save(tmp.join("config.toml"))?;
    write_tensors(&tmp.join("query.bin"), &state.query.tensors)?;
    write_tensors(&tmp.join("query_buffers.bin"), &state.query.buffers)?;
    write_tensors(&tmp.join("key.bin"), &state.key.tensors)?;
    write_tensors(&tmp.join("key_buffers.bin"), &state.key.buffers)?;
    if full {
        write_tensors(&tmp.join("momentum.bin"), &state.velocity)?;
        write_tensors(&tmp.join("queue_img.bin"), &[state.queue_img.raw_parts().0.to_vec()])?;
        write_tensors(&tmp.join("queue_obj.bin"), &[state.queue_obj.raw_parts().0.to_vec()])?;
    }
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

/// A loaded checkpoint. Snapshots come back with empty queues and zero
/// optimiser state.
pub struct Checkpoint {
    pub path: PathBuf,
    pub config: Config,
    pub state: TrainState,
    pub full: bool,
}

impl Checkpoint {
    pub fn encoder(&self) -> Result<Encoder> {
        Encoder::new(&self.config.network)
    }
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join("manifest.json");
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| ckpt_err(&mpath, e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(ckpt_err(&mpath, format!("unsupported format {}", manifest.format)));
    }
    let config = Config::load(dir.join("config.toml"))?;
    if config.hash() != manifest.config_hash {
        return Err(ckpt_err(dir, "config.toml does not match the recorded config hash"));
    }
    let encoder = Encoder::new(&config.network)?;
    if encoder.param_info() != manifest.params.as_slice() || encoder.buffer_info() != manifest.buffers.as_slice() {
        return Err(ckpt_err(&mpath, "parameter layout does not match the configured network"));
    }
    let psizes: Vec<usize> = manifest.params.iter().map(ParamInfo::numel).collect();
    let bsizes: Vec<usize> = manifest.buffers.iter().map(ParamInfo::numel).collect();
    let load_enc = |name: &str, role: Role| -> Result<EncoderParams> {
        Ok(EncoderParams {
            role,
            tensors: read_tensors(&dir.join(format!("{name}.bin")), &psizes)?,
            buffers: read_tensors(&dir.join(format!("{name}_buffers.bin")), &bsizes)?,
        })
    };
    let query = load_enc("query", Role::Query)?;
    let key = load_enc("key", Role::Key)?;
    let dim = config.network.embed_dim;
    let cap = config.train.queue_capacity;
    let (velocity, queue_img, queue_obj, full) = match &manifest.queues {
        Some([qi, qo]) => {
            let velocity = read_tensors(&dir.join("momentum.bin"), &psizes)?;
            let load_q = |name: &str, m: &QueueMeta| -> Result<MemoryQueue> {
                let data = read_tensors(&dir.join(name), &[m.capacity * m.dim])?.remove(0);
                MemoryQueue::from_raw_parts(m.capacity, m.dim, data, m.len, m.head)
                    .map_err(|e| ckpt_err(&dir.join(name), e.to_string()))
            };
            (velocity, load_q("queue_img.bin", qi)?, load_q("queue_obj.bin", qo)?, true)
        }
        None => (
            query.zeros_like(),
            MemoryQueue::new(cap, dim),
            MemoryQueue::new(cap, dim),
            false,
        ),
    };
    Ok(Checkpoint {
        path: dir.to_path_buf(),
        config,
        state: TrainState {
            t: manifest.t,
            total: manifest.total,
            query,
            key,
            velocity,
            queue_img,
            queue_obj,
        },
        full,
    })
}
