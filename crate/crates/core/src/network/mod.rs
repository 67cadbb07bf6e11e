//! Query/key encoders: backbone, feature pyramid, RoIAlign pooling,
//! projection heads and the momentum update.

pub mod model;
pub mod ops;
pub mod params;
pub mod roi;

pub use model::{batch_from_chw, level_stride, Backbone, EncodeTape, Encoder, Grads, HeadTape, Mode, NetworkConfig, ObjectTape, PyramidFeatures};
pub use ops::Act;
pub use params::{ema_update, EncoderParams, ParamInfo, Role};
pub use roi::{assign_level, roi_align, roi_align_backward};
