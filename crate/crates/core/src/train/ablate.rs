use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::net::NetworkConfig;
use crate::quality::{evaluate, Aggregate};
use crate::train::{TrainConfig, Trainer};
use crate::video::{degrade, VideoCuboid};

/// Which of the QE / CFQE stages follow MBFE+MBR.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModuleSet {
    MbfeMbr,
    MbfeMbrQe,
    Full,
}

impl ModuleSet {
    pub const ALL: [ModuleSet; 3] = [ModuleSet::MbfeMbr, ModuleSet::MbfeMbrQe, ModuleSet::Full];

    pub fn label(self) -> &'static str {
        match self {
            ModuleSet::MbfeMbr => "MBFE+MBR",
            ModuleSet::MbfeMbrQe => "MBFE+MBR+QE",
            ModuleSet::Full => "MBFE+MBR+QE+CFQE",
        }
    }

    pub fn from_label(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown module set {s:?}")))
    }

    fn apply(self, cfg: &mut NetworkConfig) {
        (cfg.enable_qe, cfg.enable_cfqe) = match self {
            ModuleSet::MbfeMbr => (false, false),
            ModuleSet::MbfeMbrQe => (true, false),
            ModuleSet::Full => (true, true),
        };
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AblationAxis {
    ResdbCount(Vec<usize>),
    Conv3dCount(Vec<usize>),
    Modules(Vec<ModuleSet>),
}

impl AblationAxis {
    /// Parses `resdb_count`, `conv3d_count` or `modules` with comma-separated values.
    pub fn parse(axis: &str, values: &str) -> Result<Self> {
        let items = values.split(',').map(str::trim).filter(|s| !s.is_empty());
        let ints = |items: std::iter::Filter<_, _>| -> Result<Vec<usize>> {
            items
                .map(|s: &str| s.parse().map_err(|_| Error::Config(format!("bad value {s:?} for {axis}"))))
                .collect()
        };
        match axis {
            "resdb_count" => Ok(Self::ResdbCount(ints(items)?)),
            "conv3d_count" => Ok(Self::Conv3dCount(ints(items)?)),
            "modules" => Ok(Self::Modules(items.map(ModuleSet::from_label).collect::<Result<_>>()?)),
            _ => Err(Error::Config(format!(
                "unknown ablation axis {axis:?} (expected resdb_count, conv3d_count or modules)"
            ))),
        }
    }

    fn variants(&self, base: &NetworkConfig) -> Vec<(String, NetworkConfig)> {
        match self {
            Self::ResdbCount(v) => v
                .iter()
                .map(|&n| (n.to_string(), NetworkConfig { resdb_count: n, ..base.clone() }))
                .collect(),
            Self::Conv3dCount(v) => v
                .iter()
                .map(|&n| (n.to_string(), NetworkConfig { conv3d_count: n, ..base.clone() }))
                .collect(),
            Self::Modules(v) => v
                .iter()
                .map(|m| {
                    let mut c = base.clone();
                    m.apply(&mut c);
                    (m.label().to_string(), c)
                })
                .collect(),
        }
    }

    /// Full-scale Vimeo-90K figures for the variants of this axis:
    /// `(variant, [ST-SR psnr, ssim, SSR psnr, ssim, TSR psnr, ssim])`.
    fn references(&self) -> &'static [(&'static str, [f64; 6])] {
        match self {
            Self::ResdbCount(_) => &[
                ("3", [29.31, 0.876, 30.02, 0.900, 28.59, 0.824]),
                ("5", [30.01, 0.899, 30.96, 0.922, 29.03, 0.867]),
                ("7", [30.65, 0.918, 31.70, 0.934, 29.61, 0.875]),
                ("9", [31.08, 0.931, 32.14, 0.941, 30.02, 0.903]),
            ],
            Self::Conv3dCount(_) => &[
                ("1", [30.75, 0.920, 31.79, 0.934, 29.72, 0.881]),
                ("3", [30.94, 0.922, 31.96, 0.937, 29.84, 0.887]),
                ("5", [31.08, 0.931, 32.14, 0.941, 30.02, 0.903]),
            ],
            Self::Modules(_) => &[
                ("MBFE+MBR", [30.80, 0.8975, 32.25, 0.9215, 28.85, 0.8657]),
                ("MBFE+MBR+QE", [30.91, 0.8986, 32.40, 0.9222, 28.92, 0.8670]),
                ("MBFE+MBR+QE+CFQE", [31.08, 0.931, 32.14, 0.941, 30.02, 0.903]),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub network: NetworkConfig,
    pub params: usize,
    pub final_loss: Option<f64>,
    pub stsr: Aggregate,
    pub ssr: Aggregate,
    pub tsr: Aggregate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub footnotes: Vec<String>,
}

impl AblationTable {
    pub const CSV_HEADER: &'static str =
        "variant,params,stsr_psnr,stsr_ssim,ssr_psnr,ssr_ssim,tsr_psnr,tsr_ssim";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
                r.variant,
                r.params,
                r.stsr.psnr_db,
                r.stsr.ssim,
                r.ssr.psnr_db,
                r.ssr.ssim,
                r.tsr.psnr_db,
                r.tsr.ssim
            )
            .unwrap();
        }
        for f in &self.footnotes {
            writeln!(s, "# {f}").unwrap();
        }
        s
    }
}

/// Trains every variant of `axis` from the same seed for `train.max_epochs`
/// epochs on `train_clips`, then scores it on `eval_clips` (high-resolution
/// clips, degraded here). Aggregates are frame-weighted over all clips.
pub fn ablate(
    base: &NetworkConfig,
    train: &TrainConfig,
    axis: &AblationAxis,
    train_clips: &[VideoCuboid],
    eval_clips: &[VideoCuboid],
) -> Result<AblationTable> {
    if eval_clips.is_empty() {
        return Err(Error::contract("ablation needs at least one evaluation clip"));
    }
    let mut rows = Vec::new();
    for (variant, network) in axis.variants(base) {
        let mut trainer = Trainer::new(network.clone(), train.clone(), train_clips.to_vec())?;
        let trace = trainer.run(|_, _| Ok(()))?;
        let (mut ssr, mut tsr, mut all) = (Vec::new(), Vec::new(), Vec::new());
        for clip in eval_clips {
            let low = degrade(clip, network.spatial_factor)?;
            let report = evaluate(clip, &trainer.net.super_resolve(&low)?)?;
            ssr.push(report.ssr);
            tsr.push(report.tsr);
            all.push(report.stsr);
        }
        rows.push(AblationRow {
            variant,
            params: trainer.net.param_count(),
            final_loss: trace.last().map(|r| r.loss),
            network,
            stsr: Aggregate::pooled(&all),
            ssr: Aggregate::pooled(&ssr),
            tsr: Aggregate::pooled(&tsr),
        });
    }
    let footnotes = axis
        .references()
        .iter()
        .map(|(v, r)| {
            format!(
                "reference (full-scale Vimeo-90K) {v}: ST-SR {:.2}/{} SSR {:.2}/{} TSR {:.2}/{}",
                r[0], r[1], r[2], r[3], r[4], r[5]
            )
        })
        .collect();
    Ok(AblationTable { rows, footnotes })
}
