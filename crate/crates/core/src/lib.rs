//! Band-by-band hyperspectral pansharpening with a small residual CNN whose
//! weights are tuned on each band in turn and handed on to the next.
//!
//! The usual flow: [`synth::generate_scene`] or [`data::read_cube`] for
//! inputs, [`data::normalize_pair`], [`rolling::pretrain`] for starting
//! weights, [`rolling::sharpen_cube`], then [`metrics`] for assessment.

pub mod adam;
pub mod config;
pub mod conv;
pub mod data;
pub mod error;
pub mod imaging;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod rolling;
pub mod synth;
pub mod tensor;

pub use adam::AdamState;
pub use config::RunConfig;
pub use data::{DataCube, PanImage};
pub use error::{Error, Result};
pub use imaging::{DecimationSpec, MtfFilterSpec};
pub use loss::{LossConfig, LossReport, RhoMaxMode};
pub use metrics::{FullMetrics, MetricsReport, ReducedMetrics};
pub use network::NetParams;
pub use rolling::{
    BandTrace, Direction, PretrainConfig, PretrainResult, SharpenResult, TuningConfig,
};
pub use synth::{SceneSpec, WaldTriple};
pub use tensor::{Shape, Tensor};
