//! Dictionary-compressed convolutions conditioned on the photonic feature.

mod accounting;
mod layer;

pub use accounting::{
    compression_ratios, count_params, dense_conv_params, dict_conv_params, layer_cr_conv,
    teacher_params, CompressionConfig, LayerCount, ParamReport, Scope, Widths, IN_CHANNELS,
    NUM_CLASSES,
};
pub use layer::{
    dictconv_forward, generate_mixing, make_projection, project_mixing, reconstruct_kernel,
    DictConvLayer, Projection,
};
