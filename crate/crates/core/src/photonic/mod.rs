//! Linear-optical circuit simulation: mesh construction and click sampling.

mod interferometer;
mod permanent;
mod sampler;

pub use interferometer::{
    build_unitary, fit_theta, fit_theta_to_tiles, tiles_for, unitarity_defect, wrap_angle,
    InterferometerSpec, Unitary, THETA_MAX,
};
pub use permanent::permanent;
pub use sampler::{
    default_input_pattern, exact_block_marginal, exact_distribution, pattern_bits, pattern_index,
    sample, tv_distance, SampleBatch, SamplerConfig, SamplingModel, MAX_BOSON_PHOTONS,
    MAX_EXACT_MODES, MAX_EXACT_PHOTONS,
};
