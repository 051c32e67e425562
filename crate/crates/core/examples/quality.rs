//! Per-frame PSNR/SSIM report for a lightly corrupted clip.

use cuboidnet::quality::{evaluate, psnr_from_mse};
use cuboidnet::video::VideoCuboid;

fn main() -> cuboidnet::Result<()> {
    let reference = VideoCuboid::from_fn(7, 48, 48, |t, y, x| ((7 * t + 3 * y + 2 * x) % 256) as f64)?;
    // Odd (interpolated) frames get more error than even ones.
    let test = VideoCuboid::from_fn(7, 48, 48, |t, y, x| {
        let noise = if (x + y) % 2 == 0 { 1.0 } else { -1.0 } * if t % 2 == 1 { 6.0 } else { 2.0 };
        (reference.get(t, y, x) + noise).clamp(0.0, 255.0)
    })?;
    print!("{}", evaluate(&reference, &test)?.to_csv());
    println!("PSNR at MSE 65.025: {:.4} dB", psnr_from_mse(65.025, 255.0));
    Ok(())
}
