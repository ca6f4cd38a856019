//! Shift-based convolutional networks.
//!
//! The shift operation moves each channel group by a fixed displacement and
//! costs no parameters or FLOPs. Paired with 1x1 convolutions it forms the
//! CSC (conv-shift-conv) module, from which ResNet-style and ImageNet-scale
//! networks are assembled. The crate also covers parameter/FLOP accounting,
//! a CPU training pipeline, activation analyses and kernel microbenchmarks.

pub mod accounting;
pub mod analysis;
pub mod blocks;
pub mod error;
pub mod layers;
pub mod microbench;
pub mod nets;
pub mod ops;
pub mod pipeline;
pub mod shift;
pub mod tensor;

pub use accounting::{
    arithmetic_intensity, cost_report, count_flops, count_params, count_params_config, CostReport,
    FlopConvention, Intensity, LayerKind,
};
pub use blocks::{CscBlock, CscConfig, CscVariant};
pub use error::{Error, Result};
pub use layers::Layer;
pub use microbench::{run_bench, BenchReport, SuiteConfig};
pub use nets::{
    build_resnet, build_shiftnet, build_shiftresnet, reduce_resnet, ArchConfig, BlockKind,
    Network, ReduceMode, ShiftNetVariant,
};
pub use ops::{DepthwiseKernel, Mode, PointwiseKernel, SpatialKernel};
pub use pipeline::{
    evaluate, load_checkpoint, save_checkpoint, synth_dataset, train, Dataset, TrainLog,
    TrainOptions, TrainSchedule,
};
pub use shift::{make_shift_spec, shift_backward, shift_forward, ShiftSpec};
pub use tensor::{Real, Shape, Tensor};
