use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::net::blocks::*;
use crate::net::params::{BoundParams, Initializer, ParameterStore};
use crate::net::NetworkConfig;
use crate::tensor::{Tape, Tensor, Var};
use crate::video::{slice, upsampled_frames, SliceAxis, VideoCuboid};

pub fn branch_prefix(axis: SliceAxis) -> String {
    format!("mbfe.b{}", axis.index())
}

pub fn rb_prefix(axis: SliceAxis) -> String {
    format!("mbr.rb{}", axis.index())
}

/// Freshly initialised parameters for `cfg`.
pub fn build_params(cfg: &NetworkConfig, seed: u64) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut init = Initializer::new(seed);
    for axis in SliceAxis::ALL {
        declare_mfb(&mut init, &branch_prefix(axis), cfg)?;
    }
    for axis in SliceAxis::ALL {
        declare_rb(&mut init, &rb_prefix(axis), axis, cfg)?;
    }
    init.conv3d("mbr.fuse0", cfg.base_channels, 3, 3, false)?;
    init.conv3d("mbr.fuse1", 1, cfg.base_channels, 3, true)?;
    if cfg.enable_qe {
        declare_qe(&mut init, "qe", cfg.base_channels)?;
    }
    if cfg.enable_cfqe {
        declare_cfqe(&mut init, "cfqe", cfg)?;
    }
    Ok(init.store)
}

/// Names of the convolutions whose weights are zero at initialisation.
pub fn residual_head_names(cfg: &NetworkConfig) -> Vec<String> {
    let mut out: Vec<String> = SliceAxis::ALL
        .iter()
        .map(|&a| format!("{}.recon1", branch_prefix(a)))
        .collect();
    if cfg.skip_grounded {
        out.extend(SliceAxis::ALL.iter().map(|&a| format!("{}.out", rb_prefix(a))));
    }
    out.push("mbr.fuse1".into());
    if cfg.enable_qe {
        out.push("qe.out".into());
    }
    if cfg.enable_cfqe {
        out.push("cfqe.out".into());
    }
    out
}

fn check_input(v: &VideoCuboid) -> Result<()> {
    let (n, h, w) = v.dims();
    if n < 2 {
        return Err(Error::contract(format!("network input needs N >= 2 frames, got {n}")));
    }
    if h < 2 || w < 2 {
        return Err(Error::contract(format!("network input frames must be at least 2x2, got {h}x{w}")));
    }
    Ok(())
}

/// Branch features: for each axis, the enhanced slices stacked as
/// `[1, count, rows', cols']`.
pub fn mbfe_forward(tape: &Tape, p: &BoundParams, cfg: &NetworkConfig, v: &VideoCuboid) -> Result<[Var; 3]> {
    check_input(v)?;
    let mut out = Vec::with_capacity(3);
    for axis in SliceAxis::ALL {
        let set = slice(v, axis);
        let prefix = branch_prefix(axis);
        let mut enhanced = Vec::with_capacity(set.slices.len());
        for plane in &set.slices {
            let (target, align) = mfb_target(axis, plane.rows, plane.cols, cfg.spatial_factor);
            let img = Tensor::new(&[1, plane.rows, plane.cols], plane.data.clone())?;
            enhanced.push(mfb_forward(tape, p, &prefix, cfg, &img, target, align)?);
        }
        let refs: Vec<&Var> = enhanced.iter().collect();
        let stacked = tape.concat(&refs, 0)?;
        let mut shape = vec![1];
        shape.extend_from_slice(stacked.shape());
        out.push(tape.reshape(&stacked, &shape)?);
    }
    Ok(out.try_into().expect("three branches"))
}

/// Reconstruction blocks plus 3-D fusion; returns `[1, 2N - 1, fH, fW]`.
pub fn mbr_forward(tape: &Tape, p: &BoundParams, cfg: &NetworkConfig, branches: &[Var; 3]) -> Result<Var> {
    let mut vols = Vec::with_capacity(3);
    for (axis, vol) in SliceAxis::ALL.into_iter().zip(branches) {
        vols.push(rb_forward(tape, p, &rb_prefix(axis), axis, cfg, vol)?);
    }
    if vols.iter().any(|v| v.shape() != vols[0].shape()) {
        return Err(Error::contract(format!(
            "branch volumes disagree: {:?}, {:?}, {:?}",
            vols[0].shape(),
            vols[1].shape(),
            vols[2].shape()
        )));
    }
    let cat = tape.concat(&[&vols[0], &vols[1], &vols[2]], 0)?;
    let w0 = p.get("mbr.fuse0.weight")?;
    let h = tape.conv3d(&cat, w0, Some(p.get("mbr.fuse0.bias")?), [1; 3], [1; 3])?;
    let h = tape.relu(&h)?;
    let w1 = p.get("mbr.fuse1.weight")?;
    let mut out = tape.conv3d(&h, w1, Some(p.get("mbr.fuse1.bias")?), [1; 3], [1; 3])?;
    if cfg.skip_grounded {
        let sum = tape.add(&tape.add(&vols[0], &vols[1])?, &vols[2])?;
        out = tape.add(&out, &tape.scale(&sum, 1.0 / 3.0)?)?;
    }
    Ok(out)
}

/// Full network on a cuboid, computed on values divided by `value_max`.
/// Returns the unclamped `[2N - 1, fH, fW]` output on that unit scale.
pub fn cuboidnet_forward(tape: &Tape, p: &BoundParams, cfg: &NetworkConfig, v: &VideoCuboid) -> Result<Var> {
    check_input(v)?;
    let unit = v.clone().map(|x| x / v.value_max());
    let branches = mbfe_forward(tape, p, cfg, &unit)?;
    let fused = mbr_forward(tape, p, cfg, &branches)?;
    let s = fused.shape().to_vec();
    let (t, h, w) = (s[1], s[2], s[3]);
    debug_assert_eq!(t, upsampled_frames(v.n_frames()));
    let volume = tape.reshape(&fused, &[t, h, w])?;
    if !cfg.enable_qe && !cfg.enable_cfqe {
        return Ok(volume);
    }
    let mut frames = Vec::with_capacity(t);
    for i in 0..t {
        let f = tape.narrow(&volume, 0, i, 1)?;
        frames.push(if cfg.enable_qe { qe_forward(tape, p, "qe", &f)? } else { f });
    }
    if cfg.enable_cfqe {
        let mut refined = frames.clone();
        for i in (1..t).step_by(2) {
            refined[i] = cfqe_forward(tape, p, "cfqe", &frames[i - 1], &frames[i], &frames[i + 1])?;
        }
        frames = refined;
    }
    let refs: Vec<&Var> = frames.iter().collect();
    tape.concat(&refs, 0)
}

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CuboidNet {
    pub config: NetworkConfig,
    pub params: ParameterStore,
}

impl CuboidNet {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        let params = build_params(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Wraps loaded parameters after checking they match `config`'s layout.
    pub fn from_parts(config: NetworkConfig, params: ParameterStore) -> Result<Self> {
        let reference = build_params(&config, 0)?;
        if !reference.same_layout(&params) {
            let want: Vec<&str> = reference.names().collect();
            let missing: Vec<&&str> = want.iter().filter(|n| params.get(n).is_err()).take(3).collect();
            return Err(Error::Config(format!(
                "parameters do not match the network configuration (first missing: {missing:?}; {} expected, {} given)",
                reference.len(),
                params.len()
            )));
        }
        Ok(Self { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Scalar counts per module (`mbfe.b1`, `mbr.rb2`, `qe`, ...).
    pub fn param_breakdown(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (name, t) in self.params.iter() {
            let parts: Vec<&str> = name.split('.').collect();
            let key = match parts[0] {
                "mbfe" | "mbr" if parts[1].starts_with('b') || parts[1].starts_with("rb") => {
                    format!("{}.{}", parts[0], parts[1])
                }
                "mbr" => "mbr.fusion".to_string(),
                other => other.to_string(),
            };
            *out.entry(key).or_insert(0) += t.numel();
        }
        out
    }

    /// Same configuration with the QE/CFQE toggles changed; parameters of a
    /// disabled module are dropped.
    pub fn with_modules(&self, enable_qe: bool, enable_cfqe: bool) -> Result<Self> {
        if (enable_qe && !self.config.enable_qe) || (enable_cfqe && !self.config.enable_cfqe) {
            return Err(Error::Config("cannot enable a module the checkpoint was built without".into()));
        }
        let config = NetworkConfig {
            enable_qe,
            enable_cfqe,
            ..self.config.clone()
        };
        let mut params = ParameterStore::new();
        for (name, t) in self.params.iter() {
            let keep = match name.split('.').next() {
                Some("qe") => enable_qe,
                Some("cfqe") => enable_cfqe,
                _ => true,
            };
            if keep {
                params.insert(name.clone(), t.clone())?;
            }
        }
        Self::from_parts(config, params)
    }

    pub fn forward(&self, tape: &Tape, v: &VideoCuboid) -> Result<(BoundParams, Var)> {
        let p = self.params.bind(tape);
        let out = cuboidnet_forward(tape, &p, &self.config, v)?;
        Ok((p, out))
    }

    /// Inference: output scaled back to `v`'s range and clamped.
    pub fn super_resolve(&self, v: &VideoCuboid) -> Result<VideoCuboid> {
        let tape = Tape::inference();
        let (_, out) = self.forward(&tape, v)?;
        let max = v.value_max();
        VideoCuboid::from_tensor(out.value(), max).map(|c| c.map(|x| x * max).clamped())
    }
}
