//! The super-resolution network: three slice branches (MBFE), 3-D
//! reconstruction and fusion (MBR), per-frame QE and cross-frame CFQE.

pub mod blocks;
mod config;
mod model;
mod params;

pub use blocks::{
    cbam_channel_map, cbam_forward, cbam_spatial_map, cfqe_forward, mfb_forward, mfb_target,
    qe_forward, rb_forward, rb_upsample_geometry, resdb_forward,
};
pub use config::NetworkConfig;
pub use model::{
    branch_prefix, build_params, cuboidnet_forward, mbfe_forward, mbr_forward, rb_prefix,
    residual_head_names, CuboidNet,
};
pub use params::{round_to_f32, BoundParams, ParameterStore};
