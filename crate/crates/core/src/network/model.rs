//! Encoder architecture: backbone, feature pyramid, image and object heads.
//! Forward passes in training mode return a tape consumed by the matching
//! backward pass.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::rng::{derive_seed, rng_from, stream};

use super::ops::{self, Act, BnCache, ConvGeom};
use super::params::{EncoderParams, ParamInfo, Role};
use super::roi::{assign_level, pooled_taps};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Tiny,
    Resnet50,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub backbone: Backbone,
    /// Stem then four stage widths of the tiny backbone.
    pub tiny_widths: [usize; 5],
    pub fpn_width: usize,
    pub mlp_hidden: usize,
    pub embed_dim: usize,
    pub roi_size: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Tiny,
            tiny_widths: [16, 32, 64, 128, 256],
            fpn_width: 256,
            mlp_hidden: 2048,
            embed_dim: 128,
            roi_size: 7,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fpn_width == 0 || self.mlp_hidden == 0 || self.embed_dim == 0 || self.roi_size == 0 {
            return Err(Error::Config("network widths must be positive".into()));
        }
        if self.tiny_widths.contains(&0) {
            return Err(Error::Config("network.tiny_widths entries must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return Err(Error::Config("network.bn_momentum must lie in [0, 1] and bn_eps be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; records a tape for the backward pass.
    Train,
    /// Running statistics; no tape.
    Eval,
    /// Batch statistics without a tape or running-stat updates (key branch).
    Batch,
}

/// Levels P2..P5 (strides 4..32) and the deepest backbone map.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidFeatures {
    pub levels: [Act; 4],
    pub c5: Act,
}

impl PyramidFeatures {
    pub fn level(&self, k: usize) -> &Act {
        &self.levels[k - 2]
    }

    pub fn batch(&self) -> usize {
        self.c5.n
    }
}

pub fn level_stride(k: usize) -> f64 {
    (1usize << k) as f64
}

#[derive(Debug, Clone, Copy)]
enum Init {
    KaimingOut,
    FanInUniform,
    TorchLinear(usize),
    Ones,
    Zeros,
}

#[derive(Debug, Clone, Copy)]
struct ConvBn {
    geom: ConvGeom,
    w: usize,
    gamma: usize,
    beta: usize,
    /// Running mean at `buf`, running variance at `buf + 1`.
    buf: usize,
    relu: bool,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    geom: ConvGeom,
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    din: usize,
    dout: usize,
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
enum Block {
    Plain(ConvBn),
    Bottleneck {
        a: ConvBn,
        b: ConvBn,
        c: ConvBn,
        down: Option<ConvBn>,
    },
}

#[derive(Default)]
struct Builder {
    info: Vec<ParamInfo>,
    inits: Vec<Init>,
    buffers: Vec<ParamInfo>,
}

impl Builder {
    fn param(&mut self, name: String, shape: Vec<usize>, decay: bool, init: Init) -> usize {
        self.info.push(ParamInfo { name, shape, decay });
        self.inits.push(init);
        self.info.len() - 1
    }

    fn conv_bn(&mut self, name: &str, geom: ConvGeom, relu: bool) -> ConvBn {
        let w = self.param(format!("{name}.weight"), vec![geom.cout, geom.k, geom.k, geom.cin], true, Init::KaimingOut);
        let gamma = self.param(format!("{name}.bn.gamma"), vec![geom.cout], false, Init::Ones);
        let beta = self.param(format!("{name}.bn.beta"), vec![geom.cout], false, Init::Zeros);
        let buf = self.buffers.len();
        for stat in ["running_mean", "running_var"] {
            self.buffers.push(ParamInfo {
                name: format!("{name}.bn.{stat}"),
                shape: vec![geom.cout],
                decay: false,
            });
        }
        ConvBn {
            geom,
            w,
            gamma,
            beta,
            buf,
            relu,
        }
    }

    fn conv(&mut self, name: &str, geom: ConvGeom) -> Conv {
        let w = self.param(format!("{name}.weight"), vec![geom.cout, geom.k, geom.k, geom.cin], true, Init::FanInUniform);
        let b = self.param(format!("{name}.bias"), vec![geom.cout], false, Init::Zeros);
        Conv { geom, w, b }
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Linear {
        let w = self.param(format!("{name}.weight"), vec![dout, din], true, Init::TorchLinear(din));
        let b = self.param(format!("{name}.bias"), vec![dout], false, Init::TorchLinear(din));
        Linear { din, dout, w, b }
    }
}

fn geom(cin: usize, cout: usize, k: usize, stride: usize) -> ConvGeom {
    ConvGeom {
        cin,
        cout,
        k,
        stride,
        pad: k / 2,
    }
}

/// Static description of an encoder; parameters live in [`EncoderParams`].
#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: NetworkConfig,
    info: Vec<ParamInfo>,
    inits: Vec<Init>,
    buffer_info: Vec<ParamInfo>,
    stem: ConvBn,
    maxpool: bool,
    stages: Vec<Vec<Block>>,
    laterals: [Conv; 4],
    smooth: [Conv; 4],
    img_mlp: [Linear; 2],
    obj_mlp: [Linear; 2],
}

struct ConvBnTape {
    x: Act,
    bn: BnCache,
    y: Act,
}

enum BlockTape {
    Plain(ConvBnTape),
    Bottleneck {
        a: ConvBnTape,
        b: ConvBnTape,
        c: ConvBnTape,
        down: Option<ConvBnTape>,
        out: Act,
    },
}

/// Saved activations of a training-mode [`Encoder::encode`].
pub struct EncodeTape {
    stem: ConvBnTape,
    pool: Option<((usize, usize, usize, usize), Vec<usize>)>,
    stages: Vec<Vec<BlockTape>>,
    c: [Act; 4],
    merged: [Act; 4],
    /// `(mean, unbiased var)` per normalisation layer, by buffer index.
    stats: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

impl EncodeTape {
    /// Folds the batch statistics into running statistics.
    pub fn update_running_stats(&self, params: &mut EncoderParams, momentum: f64) {
        for (buf, mean, var) in &self.stats {
            let rm = &mut params.buffers[*buf];
            rm.iter_mut().zip(mean).for_each(|(r, m)| *r = (1.0 - momentum) * *r + momentum * m);
            let rv = &mut params.buffers[*buf + 1];
            rv.iter_mut().zip(var).for_each(|(r, v)| *r = (1.0 - momentum) * *r + momentum * v);
        }
    }
}

/// Saved activations of an MLP head.
pub struct HeadTape {
    x: Vec<f64>,
    h: Vec<f64>,
    z: Vec<f64>,
    norms: Vec<f64>,
    rows: usize,
}

/// Saved routing of an object head forward.
pub struct ObjectTape {
    head: HeadTape,
    rois: Vec<(usize, usize, Vec<(usize, f64)>)>,
}

pub type Grads = Vec<Vec<f64>>;

fn acc(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl Encoder {
    pub fn new(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder::default();
        let (stem, maxpool, stages, c_widths) = match cfg.backbone {
            Backbone::Tiny => {
                let w = cfg.tiny_widths;
                let stem = b.conv_bn("stem", geom(3, w[0], 3, 2), true);
                let stages = (0..4)
                    .map(|i| vec![Block::Plain(b.conv_bn(&format!("stage{}", i + 1), geom(w[i], w[i + 1], 3, 2), true))])
                    .collect();
                (stem, false, stages, [w[1], w[2], w[3], w[4]])
            }
            Backbone::Resnet50 => {
                let stem = b.conv_bn("stem", geom(3, 64, 7, 2), true);
                let depth = [3, 4, 6, 3];
                let mut cin = 64;
                let mut stages = Vec::new();
                let mut widths = [0; 4];
                for (s, &n) in depth.iter().enumerate() {
                    let mid = 64 << s;
                    let out = mid * 4;
                    let mut blocks = Vec::new();
                    for i in 0..n {
                        let stride = if i == 0 && s > 0 { 2 } else { 1 };
                        let name = format!("layer{}.{i}", s + 1);
                        let a = b.conv_bn(&format!("{name}.conv1"), geom(cin, mid, 1, 1), true);
                        let bb = b.conv_bn(&format!("{name}.conv2"), geom(mid, mid, 3, stride), true);
                        let c = b.conv_bn(&format!("{name}.conv3"), geom(mid, out, 1, 1), false);
                        let down = (i == 0).then(|| b.conv_bn(&format!("{name}.downsample"), geom(cin, out, 1, stride), false));
                        blocks.push(Block::Bottleneck { a, b: bb, c, down });
                        cin = out;
                    }
                    widths[s] = out;
                    stages.push(blocks);
                }
                (stem, true, stages, widths)
            }
        };
        let f = cfg.fpn_width;
        let laterals = std::array::from_fn(|i| b.conv(&format!("fpn.lateral{}", i + 2), geom(c_widths[i], f, 1, 1)));
        let smooth = std::array::from_fn(|i| b.conv(&format!("fpn.output{}", i + 2), geom(f, f, 3, 1)));
        let img_mlp = [
            b.linear("image_head.fc1", c_widths[3], cfg.mlp_hidden),
            b.linear("image_head.fc2", cfg.mlp_hidden, cfg.embed_dim),
        ];
        let obj_mlp = [
            b.linear("object_head.fc1", f, cfg.mlp_hidden),
            b.linear("object_head.fc2", cfg.mlp_hidden, cfg.embed_dim),
        ];
        Ok(Self {
            cfg: cfg.clone(),
            info: b.info,
            inits: b.inits,
            buffer_info: b.buffers,
            stem,
            maxpool,
            stages,
            laterals,
            smooth,
            img_mlp,
            obj_mlp,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn param_info(&self) -> &[ParamInfo] {
        &self.info
    }

    pub fn buffer_info(&self) -> &[ParamInfo] {
        &self.buffer_info
    }

    pub fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    pub fn c5_width(&self) -> usize {
        self.img_mlp[0].din
    }

    /// Seeded initialisation; tensor `i` draws from its own stream.
    pub fn init(&self, seed: u64) -> EncoderParams {
        let tensors = self
            .info
            .iter()
            .zip(&self.inits)
            .enumerate()
            .map(|(i, (info, init))| {
                let n = info.numel();
                let mut rng = rng_from(derive_seed(seed, stream::INIT, i as u64));
                match *init {
                    Init::Ones => vec![1.0; n],
                    Init::Zeros => vec![0.0; n],
                    Init::KaimingOut => {
                        let fan_out = info.shape[0] * info.shape[1] * info.shape[2];
                        let normal = Normal::new(0.0, (2.0 / fan_out as f64).sqrt()).expect("positive std");
                        (0..n).map(|_| normal.sample(&mut rng)).collect()
                    }
                    Init::FanInUniform => {
                        let fan_in = info.shape[1] * info.shape[2] * info.shape[3];
                        let bound = (3.0 / fan_in as f64).sqrt();
                        (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
                    }
                    Init::TorchLinear(fan_in) => {
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
                    }
                }
            })
            .collect();
        let buffers = self
            .buffer_info
            .iter()
            .map(|b| {
                let v = if b.name.ends_with("running_var") { 1.0 } else { 0.0 };
                vec![v; b.numel()]
            })
            .collect();
        EncoderParams {
            role: Role::Query,
            tensors,
            buffers,
        }
    }

    pub fn check_params(&self, p: &EncoderParams) -> Result<()> {
        let ok = p.tensors.len() == self.info.len()
            && p.buffers.len() == self.buffer_info.len()
            && p.tensors.iter().zip(&self.info).all(|(t, i)| t.len() == i.numel())
            && p.buffers.iter().zip(&self.buffer_info).all(|(t, i)| t.len() == i.numel());
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("parameters do not match the encoder architecture".into()))
        }
    }

    fn conv_bn_fwd(&self, l: &ConvBn, p: &EncoderParams, x: &Act, mode: Mode, stats: &mut Vec<(usize, Vec<f64>, Vec<f64>)>) -> (Act, Option<ConvBnTape>) {
        let z = ops::conv2d(x, &p.tensors[l.w], None, &l.geom);
        let (gamma, beta) = (&p.tensors[l.gamma], &p.tensors[l.beta]);
        let eps = self.cfg.bn_eps;
        let (mut y, cache) = match mode {
            Mode::Train => {
                let (y, cache) = ops::batchnorm_train(&z, gamma, beta, eps);
                stats.push((l.buf, cache.mean.clone(), cache.var_unbiased.clone()));
                (y, Some(cache))
            }
            Mode::Eval => (ops::batchnorm_eval(&z, gamma, beta, &p.buffers[l.buf], &p.buffers[l.buf + 1], eps), None),
            Mode::Batch => (ops::batchnorm_train(&z, gamma, beta, eps).0, None),
        };
        if l.relu {
            ops::relu(&mut y);
        }
        let tape = cache.map(|bn| ConvBnTape {
            x: x.clone(),
            bn,
            y: y.clone(),
        });
        (y, tape)
    }

    fn conv_bn_bwd(&self, l: &ConvBn, p: &EncoderParams, t: &ConvBnTape, mut dy: Act, g: &mut Grads, need_dx: bool) -> Option<Act> {
        if l.relu {
            ops::relu_backward(&t.y, &mut dy);
        }
        let (dz, dgamma, dbeta) = ops::batchnorm_backward(&t.bn, &p.tensors[l.gamma], &dy);
        acc(&mut g[l.gamma], &dgamma);
        acc(&mut g[l.beta], &dbeta);
        let (dx, dw, _) = ops::conv2d_backward(&t.x, &p.tensors[l.w], false, &l.geom, &dz, need_dx);
        acc(&mut g[l.w], &dw);
        dx
    }

    fn block_fwd(&self, blk: &Block, p: &EncoderParams, x: &Act, mode: Mode, stats: &mut Vec<(usize, Vec<f64>, Vec<f64>)>) -> (Act, Option<BlockTape>) {
        match blk {
            Block::Plain(l) => {
                let (y, t) = self.conv_bn_fwd(l, p, x, mode, stats);
                (y, t.map(BlockTape::Plain))
            }
            Block::Bottleneck { a, b, c, down } => {
                let (ya, ta) = self.conv_bn_fwd(a, p, x, mode, stats);
                let (yb, tb) = self.conv_bn_fwd(b, p, &ya, mode, stats);
                let (mut out, tc) = self.conv_bn_fwd(c, p, &yb, mode, stats);
                let td = match down {
                    Some(d) => {
                        let (yd, td) = self.conv_bn_fwd(d, p, x, mode, stats);
                        out.add_assign(&yd);
                        td
                    }
                    None => {
                        out.add_assign(x);
                        None
                    }
                };
                ops::relu(&mut out);
                let tape = match (ta, tb, tc) {
                    (Some(a), Some(b), Some(c)) => Some(BlockTape::Bottleneck {
                        a,
                        b,
                        c,
                        down: td,
                        out: out.clone(),
                    }),
                    _ => None,
                };
                (out, tape)
            }
        }
    }

    fn block_bwd(&self, blk: &Block, p: &EncoderParams, t: &BlockTape, dy: Act, g: &mut Grads, need_dx: bool) -> Option<Act> {
        match (blk, t) {
            (Block::Plain(l), BlockTape::Plain(t)) => self.conv_bn_bwd(l, p, t, dy, g, need_dx),
            (Block::Bottleneck { a, b, c, down }, BlockTape::Bottleneck { a: ta, b: tb, c: tc, down: td, out }) => {
                let mut dy = dy;
                ops::relu_backward(out, &mut dy);
                let db = self.conv_bn_bwd(c, p, tc, dy.clone(), g, true).expect("dx requested");
                let da = self.conv_bn_bwd(b, p, tb, db, g, true).expect("dx requested");
                let dx_main = self.conv_bn_bwd(a, p, ta, da, g, need_dx);
                let dx_skip = match (down, td) {
                    (Some(d), Some(td)) => self.conv_bn_bwd(d, p, td, dy, g, need_dx),
                    _ => Some(dy),
                };
                match (dx_main, dx_skip) {
                    (Some(mut m), Some(s)) if need_dx => {
                        m.add_assign(&s);
                        Some(m)
                    }
                    _ => None,
                }
            }
            _ => unreachable!("tape does not match block"),
        }
    }

    /// Backbone and pyramid. Input is NHWC; sides must be multiples of 32.
    pub fn encode(&self, p: &EncoderParams, x: &Act, mode: Mode) -> Result<(PyramidFeatures, Option<EncodeTape>)> {
        if x.h % 32 != 0 || x.w % 32 != 0 || x.h == 0 || x.w == 0 {
            return Err(Error::Shape(format!("input {}x{} is not a positive multiple of 32", x.w, x.h)));
        }
        if x.c != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {}", x.c)));
        }
        let train = mode == Mode::Train;
        let mut stats = Vec::new();
        let (mut h, stem_t) = self.conv_bn_fwd(&self.stem, p, x, mode, &mut stats);
        let mut pool = None;
        if self.maxpool {
            let shape = (h.n, h.h, h.w, h.c);
            let (y, arg) = ops::maxpool3s2(&h);
            h = y;
            if train {
                pool = Some((shape, arg));
            }
        }
        let mut stage_tapes = Vec::new();
        let mut cs = Vec::with_capacity(4);
        for stage in &self.stages {
            let mut tapes = Vec::new();
            for blk in stage {
                let (y, t) = self.block_fwd(blk, p, &h, mode, &mut stats);
                h = y;
                tapes.extend(t);
            }
            stage_tapes.push(tapes);
            cs.push(h.clone());
        }
        let c: [Act; 4] = cs.try_into().expect("four stages");

        let lat: Vec<Act> = (0..4)
            .map(|i| {
                let l = &self.laterals[i];
                ops::conv2d(&c[i], &p.tensors[l.w], Some(&p.tensors[l.b]), &l.geom)
            })
            .collect();
        let mut merged: Vec<Act> = vec![lat[3].clone()];
        for i in (0..3).rev() {
            let mut m = lat[i].clone();
            m.add_assign(&ops::upsample2(&merged[0]));
            merged.insert(0, m);
        }
        let levels: [Act; 4] = std::array::from_fn(|i| {
            let s = &self.smooth[i];
            ops::conv2d(&merged[i], &p.tensors[s.w], Some(&p.tensors[s.b]), &s.geom)
        });
        let c5 = c[3].clone();
        let tape = match (train, stem_t) {
            (true, Some(stem)) => Some(EncodeTape {
                stem,
                pool,
                stages: stage_tapes,
                c,
                merged: merged.try_into().expect("four levels"),
                stats,
            }),
            _ => None,
        };
        Ok((PyramidFeatures { levels, c5 }, tape))
    }

    /// Gradients of the pyramid (`dlevels`, zero-filled where unused) and of
    /// C5 flow back into `g`.
    pub fn encode_backward(&self, p: &EncoderParams, tape: &EncodeTape, dlevels: &[Act; 4], dc5: Option<&Act>, g: &mut Grads) {
        let mut dmerged: Vec<Act> = (0..4)
            .map(|i| {
                let s = &self.smooth[i];
                let (dx, dw, db) = ops::conv2d_backward(&tape.merged[i], &p.tensors[s.w], true, &s.geom, &dlevels[i], true);
                acc(&mut g[s.w], &dw);
                acc(&mut g[s.b], &db.expect("bias"));
                dx.expect("dx requested")
            })
            .collect();
        for i in 0..3 {
            let up = ops::upsample2_backward(&dmerged[i]);
            dmerged[i + 1].add_assign(&up);
        }
        let mut dc: Vec<Act> = (0..4)
            .map(|i| {
                let l = &self.laterals[i];
                let (dx, dw, db) = ops::conv2d_backward(&tape.c[i], &p.tensors[l.w], true, &l.geom, &dmerged[i], true);
                acc(&mut g[l.w], &dw);
                acc(&mut g[l.b], &db.expect("bias"));
                dx.expect("dx requested")
            })
            .collect();
        if let Some(d) = dc5 {
            dc[3].add_assign(d);
        }

        let mut dh: Option<Act> = None;
        for s in (0..4).rev() {
            let mut d = dc[s].clone();
            if let Some(up) = dh.take() {
                d.add_assign(&up);
            }
            for (blk, t) in self.stages[s].iter().zip(&tape.stages[s]).rev() {
                d = self.block_bwd(blk, p, t, d, g, true).expect("dx requested");
            }
            dh = Some(d);
        }
        let mut d = dh.expect("at least one stage");
        if let Some((shape, arg)) = &tape.pool {
            d = ops::maxpool_backward(*shape, arg, &d);
        }
        self.conv_bn_bwd(&self.stem, p, &tape.stem, d, g, false);
    }

    fn mlp_fwd(&self, head: &[Linear; 2], p: &EncoderParams, x: Vec<f64>, rows: usize) -> HeadTape {
        let [l1, l2] = head;
        let mut h = ops::linear(&x, rows, &p.tensors[l1.w], &p.tensors[l1.b], l1.din, l1.dout);
        h.iter_mut().for_each(|v| *v = v.max(0.0));
        let o = ops::linear(&h, rows, &p.tensors[l2.w], &p.tensors[l2.b], l2.din, l2.dout);
        let (z, norms) = ops::l2_normalize(&o, l2.dout);
        HeadTape { x, h, z, norms, rows }
    }

    fn mlp_bwd(&self, head: &[Linear; 2], p: &EncoderParams, t: &HeadTape, dz: &[f64], g: &mut Grads) -> Vec<f64> {
        let [l1, l2] = head;
        let dout = ops::l2_normalize_backward(&t.z, &t.norms, dz, l2.dout);
        let (mut dh, dw2, db2) = ops::linear_backward(&t.h, t.rows, &p.tensors[l2.w], l2.din, l2.dout, &dout);
        acc(&mut g[l2.w], &dw2);
        acc(&mut g[l2.b], &db2);
        dh.iter_mut().zip(&t.h).for_each(|(d, h)| {
            if *h <= 0.0 {
                *d = 0.0
            }
        });
        let (dx, dw1, db1) = ops::linear_backward(&t.x, t.rows, &p.tensors[l1.w], l1.din, l1.dout, &dh);
        acc(&mut g[l1.w], &dw1);
        acc(&mut g[l1.b], &db1);
        dx
    }

    /// Image embeddings (`n x D`, unit rows) from pooled C5.
    pub fn embed_image(&self, p: &EncoderParams, feats: &PyramidFeatures) -> (Vec<f64>, HeadTape) {
        let pooled = ops::global_avg_pool(&feats.c5);
        let t = self.mlp_fwd(&self.img_mlp, p, pooled, feats.batch());
        (t.z.clone(), t)
    }

    /// Gradient w.r.t. C5 given the gradient w.r.t. the image embeddings.
    pub fn embed_image_backward(&self, p: &EncoderParams, feats: &PyramidFeatures, t: &HeadTape, dz: &[f64], g: &mut Grads) -> Act {
        let dpooled = self.mlp_bwd(&self.img_mlp, p, t, dz, g);
        let c5 = &feats.c5;
        ops::global_avg_pool_backward(&dpooled, c5.n, c5.h, c5.w, c5.c)
    }

    /// Spatially averaged RoIAlign features (`len x fpn_width`) for
    /// `(batch index, box)` pairs, plus the routing used.
    #[allow(clippy::type_complexity)]
    pub fn pool_regions(&self, feats: &PyramidFeatures, boxes: &[(usize, BBox)]) -> (Vec<f64>, Vec<(usize, usize, Vec<(usize, f64)>)>) {
        let c = self.cfg.fpn_width;
        let mut pooled = vec![0.0; boxes.len() * c];
        let mut rois = Vec::with_capacity(boxes.len());
        for (i, &(n, b)) in boxes.iter().enumerate() {
            let k = assign_level(&b);
            let f = feats.level(k);
            let taps = pooled_taps(&b, level_stride(k), f.h, f.w, self.cfg.roi_size);
            let fs = f.sample(n);
            let dst = &mut pooled[i * c..(i + 1) * c];
            for &(pix, wt) in &taps {
                dst.iter_mut().zip(&fs[pix * c..(pix + 1) * c]).for_each(|(d, v)| *d += wt * v);
            }
            rois.push((n, k, taps));
        }
        (pooled, rois)
    }

    /// Object embeddings (`len x D`, unit rows), in input order.
    pub fn embed_objects(&self, p: &EncoderParams, feats: &PyramidFeatures, boxes: &[(usize, BBox)]) -> (Vec<f64>, ObjectTape) {
        let (pooled, rois) = self.pool_regions(feats, boxes);
        let head = self.mlp_fwd(&self.obj_mlp, p, pooled, boxes.len());
        (head.z.clone(), ObjectTape { head, rois })
    }

    /// Scatters the object-head gradient into per-level pyramid gradients.
    pub fn embed_objects_backward(&self, p: &EncoderParams, t: &ObjectTape, dz: &[f64], dlevels: &mut [Act; 4], g: &mut Grads) {
        if t.rois.is_empty() {
            return;
        }
        let dpooled = self.mlp_bwd(&self.obj_mlp, p, &t.head, dz, g);
        let c = self.cfg.fpn_width;
        for (i, (n, k, taps)) in t.rois.iter().enumerate() {
            let d = &mut dlevels[k - 2];
            let hw = d.h * d.w;
            let ds = &mut d.data[n * hw * c..(n + 1) * hw * c];
            let gv = &dpooled[i * c..(i + 1) * c];
            for &(pix, wt) in taps {
                ds[pix * c..(pix + 1) * c].iter_mut().zip(gv).for_each(|(a, b)| *a += wt * b);
            }
        }
    }

    pub fn zero_level_grads(&self, feats: &PyramidFeatures) -> [Act; 4] {
        std::array::from_fn(|i| feats.levels[i].zeros_like())
    }
}

/// Stacks normalised CHW views into an NHWC batch.
pub fn batch_from_chw<'a>(views: impl IntoIterator<Item = &'a [f32]>, h: usize, w: usize) -> Act {
    let views: Vec<&[f32]> = views.into_iter().collect();
    let mut out = Act::zeros(views.len(), h, w, 3);
    let plane = h * w;
    for (n, v) in views.iter().enumerate() {
        assert_eq!(v.len(), 3 * plane, "view size");
        let dst = &mut out.data[n * plane * 3..(n + 1) * plane * 3];
        for i in 0..plane {
            for c in 0..3 {
                dst[i * 3 + c] = v[c * plane + i] as f64;
            }
        }
    }
    out
}
