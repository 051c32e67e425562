//! Builds the toy and paper-scale networks, prints their parameter budgets,
//! and checks that the untrained toy network reproduces bicubic upscaling.

use cuboidnet::net::{CuboidNet, NetworkConfig};
use cuboidnet::quality::evaluate;
use cuboidnet::video::{bicubic_baseline, VideoCuboid};

fn main() -> cuboidnet::Result<()> {
    for (name, cfg) in [
        ("toy", NetworkConfig::toy()),
        ("vimeo", NetworkConfig::paper_vimeo()),
        ("vid4", NetworkConfig::paper_vid4()),
    ] {
        let net = CuboidNet::new(cfg, 0)?;
        println!("{name}: {} parameters", net.param_count());
        for (module, n) in net.param_breakdown() {
            println!("  {module:<10} {n}");
        }
    }

    let net = CuboidNet::new(NetworkConfig::toy(), 0)?;
    let v = VideoCuboid::from_fn(4, 16, 16, |t, y, x| {
        127.0 + 100.0 * (0.4 * x as f64 + 0.3 * y as f64 - 0.5 * t as f64).sin()
    })?;
    let start = std::time::Instant::now();
    let out = net.super_resolve(&v)?;
    println!("{:?} -> {:?} in {:.2?}", v.dims(), out.dims(), start.elapsed());
    let base = bicubic_baseline(&v, 4)?;
    let worst = out.values().iter().zip(base.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("untrained vs bicubic: max |diff| {worst:.2e}");
    println!("ST-SR PSNR vs bicubic: {:.1} dB", evaluate(&base, &out)?.stsr.psnr_db);
    Ok(())
}
