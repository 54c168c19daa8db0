//! Layers, architecture presets, initialization and the forward/backward
//! passes.

pub mod arch;
pub mod head;
pub mod init;
pub(crate) mod layers;
pub mod network;
pub mod params;

pub use arch::{preset, Architecture, LayerKind, LayerSpec, ParamRole, ParamSpec, Section, PRESET_NAMES};
pub use head::{replace_head, HeadSpec, DEFAULT_FC2_HIDDEN};
pub use init::{init_params, InitDist};
pub use layers::softmax_cross_entropy;
pub use network::{argmax_rows, backward, forward, recalibrate_batchnorm, Forward, Mode, PassOptions};
pub use params::{Param, ParameterSet};
