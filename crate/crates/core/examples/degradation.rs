//! Degrades a Vimeo-sized clip to the network's input size and measures how
//! well plain bicubic space-time upscaling recovers it.

use cuboidnet::quality::evaluate;
use cuboidnet::video::{bicubic_baseline, degrade, PatchSampler, VideoCuboid};

fn main() -> cuboidnet::Result<()> {
    let clip = VideoCuboid::from_fn(7, 256, 448, |t, y, x| {
        let u = x as f64 - 2.0 * t as f64;
        127.5 + 80.0 * (0.05 * u).sin() * (0.04 * y as f64).cos() + 30.0 * (0.3 * (u + y as f64)).sin()
    })?;
    let low = degrade(&clip, 4)?;
    println!("label {:?} -> input {:?}", clip.dims(), low.dims());

    let report = evaluate(&clip, &bicubic_baseline(&low, 4)?)?;
    println!(
        "bicubic baseline: ST-SR {:.2} dB / {:.4}, SSR {:.2} dB, TSR {:.2} dB",
        report.stsr.psnr_db, report.stsr.ssim, report.ssr.psnr_db, report.tsr.psnr_db
    );

    let mut sampler = PatchSampler::new(7, 4);
    for _ in 0..3 {
        let pair = sampler.sample(&clip, 7, 128)?;
        println!(
            "patch at {:?}: input {:?}, label {:?}",
            pair.source_offset,
            pair.input_patch.dims(),
            pair.label_patch.dims()
        );
    }
    Ok(())
}
