//! Noise-residual statistics and evaluation metrics.

mod correlation;
mod metrics;

pub use correlation::{
    channel_mean_plane, correlation_plane, local_correlation_map, rowcol_average, CorrelationMap,
    CorrelationMode, ZERO_VARIANCE,
};
pub use metrics::{
    akld, histogram, kld, kld_histograms, kld_values, psnr, ssim, NoiseHistogram, KLD_BINS,
    KLD_EPS,
};
