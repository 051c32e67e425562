use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::cli::config::RunConfigFile;
use crate::error::{Error, Result};
use crate::net::CuboidNet;
use crate::quality::evaluate;
use crate::train::{ablate, loss_trace_csv, read_checkpoint, write_checkpoint, AblationAxis, Trainer};
use crate::video::{
    bicubic_baseline, degrade, read_cubv, slice, write_cubv, SampleType, SliceAxis, VideoCuboid,
};

pub const MANIFEST: &str = "manifest.csv";
pub const MANIFEST_HEADER: &str = "clip,label,input,frames,height,width";

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `.cubv` files directly inside `dir`, sorted by name.
pub fn list_cubv(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "cubv"))
        .collect();
    out.sort();
    Ok(out)
}

/// Outcome of `prepare`: rows written and per-file failures.
#[derive(Debug, Default)]
pub struct PrepareSummary {
    pub written: Vec<PathBuf>,
    pub failures: Vec<(PathBuf, Error)>,
}

/// Degrades every clip in `input` into `output` and writes the manifest.
pub fn prepare(input: &Path, output: &Path, spatial_factor: usize) -> Result<PrepareSummary> {
    mkdir(output)?;
    let mut summary = PrepareSummary::default();
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    for path in list_cubv(input)? {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("clip").to_string();
        let result = read_cubv(&path).and_then(|v| {
            let low = degrade(&v, spatial_factor)?;
            let name = format!("{stem}.lr.cubv");
            write_cubv(&low, output.join(&name), SampleType::F32)?;
            Ok((v.dims(), name))
        });
        match result {
            Ok(((n, h, w), name)) => {
                let label = fs::canonicalize(&path).map_err(|e| Error::io(&path, e))?;
                writeln!(manifest, "{stem},{},{name},{n},{h},{w}", label.display()).unwrap();
                summary.written.push(output.join(name));
            }
            Err(e) => summary.failures.push((path, e)),
        }
    }
    write_text(&output.join(MANIFEST), &manifest)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub clip: String,
    pub label: PathBuf,
    pub input: PathBuf,
}

/// Reads `dir/manifest.csv`; relative paths resolve against `dir`.
pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::contract(format!(
            "{}: expected header {MANIFEST_HEADER:?}",
            path.display()
        )));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(Error::contract(format!(
                    "{} line {}: expected 6 fields, found {}",
                    path.display(),
                    i + 2,
                    f.len()
                )));
            }
            Ok(ManifestRow {
                clip: f[0].to_string(),
                label: dir.join(f[1]),
                input: dir.join(f[2]),
            })
        })
        .collect()
}

pub fn load_labels(dir: &Path) -> Result<Vec<VideoCuboid>> {
    let rows = read_manifest(dir)?;
    if rows.is_empty() {
        return Err(Error::contract(format!("{}: manifest lists no clips", dir.display())));
    }
    rows.iter().map(|r| read_cubv(&r.label)).collect()
}

/// Trains from `cfg`, optionally resuming, and writes the checkpoint plus
/// `loss_trace.csv` beside it. The checkpoint is rewritten after every epoch.
pub fn train(cfg: &RunConfigFile, data: &Path, out: &Path, resume: Option<&Path>, verbose: bool) -> Result<()> {
    let clips = load_labels(data)?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(read_checkpoint(p)?, clips)?,
        None => Trainer::new(cfg.network.clone(), cfg.effective_train(), clips)?,
    };
    let trace_path = out.with_file_name("loss_trace.csv");
    let records = trainer.run(|r, t| {
        if verbose {
            eprintln!("step {} epoch {} batch {} lr {:e} loss {:e}", r.step, r.epoch, r.batch, r.lr, r.loss);
        }
        if t.progress.batch_in_epoch == 0 {
            write_checkpoint(&t.checkpoint(), out)?;
        }
        Ok(())
    })?;
    write_checkpoint(&trainer.checkpoint(), out)?;
    write_text(&trace_path, &loss_trace_csv(&records))
}

/// Super-resolves `input` with a checkpoint.
pub fn super_resolve(checkpoint: &Path, input: &Path, output: &Path, no_cfqe: bool, dtype: SampleType) -> Result<VideoCuboid> {
    let ck = read_checkpoint(checkpoint)?;
    let mut net = CuboidNet::from_parts(ck.network, ck.params)?;
    if no_cfqe {
        net = net.with_modules(net.config.enable_qe, false)?;
    }
    let v = read_cubv(input)?;
    let (n, h, w) = v.dims();
    if n < 2 || h < 2 || w < 2 {
        return Err(Error::contract(format!(
            "input {} is {n}x{h}x{w}; the network needs at least 2 frames of 2x2",
            input.display()
        )));
    }
    let out = net.super_resolve(&v)?;
    write_cubv(&out, output, dtype)?;
    Ok(out)
}

pub enum EvalTarget<'a> {
    File(&'a Path),
    /// Bicubic upscale of this low-resolution file, or of the degraded
    /// reference when `None`.
    Bicubic(Option<&'a Path>),
}

pub fn eval(reference: &Path, target: EvalTarget<'_>, report: &Path, spatial_factor: usize) -> Result<String> {
    let r = read_cubv(reference)?;
    let t = match target {
        EvalTarget::File(p) => read_cubv(p)?,
        EvalTarget::Bicubic(Some(p)) => bicubic_baseline(&read_cubv(p)?, spatial_factor)?,
        EvalTarget::Bicubic(None) => bicubic_baseline(&degrade(&r, spatial_factor)?, spatial_factor)?,
    };
    if r.dims() != t.dims() {
        return Err(Error::contract(format!(
            "reference is {:?} but test is {:?}",
            r.dims(),
            t.dims()
        )));
    }
    let csv = evaluate(&r, &t)?.to_csv();
    write_text(report, &csv)?;
    Ok(csv)
}

/// Binary PGM (P5) of `data` (`rows x cols`), values scaled from
/// `[0, value_max]` to `[0, 255]` and rounded.
pub fn encode_pgm(rows: usize, cols: usize, data: &[f64], value_max: f64) -> Vec<u8> {
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(
        data.iter()
            .map(|&v| (v * 255.0 / value_max).round().clamp(0.0, 255.0) as u8),
    );
    out
}

pub fn slices(input: &Path, axis: SliceAxis, out: &Path) -> Result<usize> {
    let v = read_cubv(input)?;
    mkdir(out)?;
    let set = slice(&v, axis);
    for (i, p) in set.slices.iter().enumerate() {
        let path = out.join(format!("slice_{i:04}.pgm"));
        fs::write(&path, encode_pgm(p.rows, p.cols, &p.data, v.value_max())).map_err(|e| Error::io(&path, e))?;
    }
    Ok(set.slices.len())
}

pub fn run_ablation(cfg: &RunConfigFile, data: &Path, eval_dir: Option<&Path>, axis: &AblationAxis, out: &Path) -> Result<String> {
    let train_clips = load_labels(data)?;
    let eval_clips = match eval_dir {
        Some(d) => load_labels(d)?,
        None => train_clips.clone(),
    };
    let table = ablate(&cfg.network, &cfg.effective_train(), axis, &train_clips, &eval_clips)?;
    let csv = table.to_csv();
    write_text(out, &csv)?;
    Ok(csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_layout() {
        let bytes = encode_pgm(2, 3, &[0.0, 1.0, 2.4, 254.6, 255.0, 300.0], 255.0);
        assert_eq!(&bytes[..11], b"P5\n3 2\n255\n");
        assert_eq!(&bytes[11..], &[0, 1, 2, 255, 255, 255]);
    }
}
