use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters.
///
/// `Default` is the toy scale used for tests and desk runs; see
/// [`NetworkConfig::paper_vimeo`] and [`NetworkConfig::paper_vid4`] for the
/// full-size settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub resdb_count: usize,
    pub resdb_growth: usize,
    pub conv3d_count: usize,
    pub enable_qe: bool,
    pub enable_cfqe: bool,
    pub cbam_reduction: usize,
    pub cbam_spatial_kernel: usize,
    pub spatial_factor: usize,
    pub leaky_slope: f64,
    /// Adds bicubic skips around each reconstruction block and the fusion,
    /// so a network with zeroed residual heads reproduces the bicubic
    /// baseline. Off gives the plain two-layer fusion.
    pub skip_grounded: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl NetworkConfig {
    pub fn toy() -> Self {
        Self {
            base_channels: 16,
            resdb_count: 2,
            resdb_growth: 8,
            conv3d_count: 2,
            enable_qe: true,
            enable_cfqe: true,
            cbam_reduction: 4,
            cbam_spatial_kernel: 7,
            spatial_factor: 4,
            leaky_slope: 0.1,
            skip_grounded: true,
        }
    }

    pub fn paper_vimeo() -> Self {
        Self {
            base_channels: 64,
            resdb_count: 9,
            resdb_growth: 32,
            conv3d_count: 5,
            cbam_reduction: 16,
            ..Self::toy()
        }
    }

    pub fn paper_vid4() -> Self {
        Self {
            resdb_count: 7,
            ..Self::paper_vimeo()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.base_channels == 0 || self.resdb_growth == 0 {
            return fail("base_channels and resdb_growth must be positive".into());
        }
        if self.resdb_count < 1 {
            return fail(format!("resdb_count must be >= 1, got {}", self.resdb_count));
        }
        if self.conv3d_count < 1 {
            return fail(format!("conv3d_count must be >= 1, got {}", self.conv3d_count));
        }
        if self.cbam_reduction == 0 || !self.base_channels.is_multiple_of(self.cbam_reduction) {
            return fail(format!(
                "cbam_reduction {} must divide base_channels {}",
                self.cbam_reduction, self.base_channels
            ));
        }
        if self.cbam_spatial_kernel.is_multiple_of(2) {
            return fail(format!(
                "cbam_spatial_kernel must be odd, got {}",
                self.cbam_spatial_kernel
            ));
        }
        if self.spatial_factor < 2 || !self.spatial_factor.is_multiple_of(2) {
            return fail(format!(
                "spatial_factor must be even and >= 2, got {}",
                self.spatial_factor
            ));
        }
        if !self.leaky_slope.is_finite() {
            return fail("leaky_slope must be finite".into());
        }
        Ok(())
    }
}
