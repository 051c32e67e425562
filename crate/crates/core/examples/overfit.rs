//! Overfits the toy network to one synthetic moving-pattern clip and
//! compares the result with plain bicubic upscaling.
//!
//! `cargo run --release --example overfit -- [steps]`

use cuboidnet::net::NetworkConfig;
use cuboidnet::quality::evaluate;
use cuboidnet::train::{TrainConfig, Trainer};
use cuboidnet::video::{bicubic_baseline, degrade, VideoCuboid};

fn moving_pattern(n: usize, size: usize) -> VideoCuboid {
    VideoCuboid::from_fn(n, size, size, |t, y, x| {
        let (u, v) = (x as f64 - 1.5 * t as f64, y as f64 - 0.75 * t as f64);
        127.5 + 60.0 * (0.21 * u).sin() * (0.17 * v).cos() + 40.0 * (0.11 * (u + v)).sin()
    })
    .unwrap()
}

fn main() -> cuboidnet::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let clip = moving_pattern(7, 64);
    let train = TrainConfig {
        batch_size: 1,
        max_epochs: steps,
        lr_decay_epochs: usize::MAX,
        label_extent: 64,
        ..Default::default()
    };
    let mut trainer = Trainer::new(NetworkConfig::toy(), train, vec![clip.clone()])?;
    let start = std::time::Instant::now();
    let trace = trainer.run(|r, _| {
        if r.step % 25 == 0 || r.step <= 10 {
            println!("step {:4}  loss {:.6e}  ({:.1?})", r.step, r.loss, start.elapsed());
        }
        Ok(())
    })?;
    let (first, last) = (trace[0].loss, trace.last().unwrap().loss);
    println!("loss {first:.4e} -> {last:.4e} ({:.1}% of initial)", 100.0 * last / first);

    let low = degrade(&clip, 4)?;
    let net = evaluate(&clip, &trainer.net.super_resolve(&low)?)?;
    let base = evaluate(&clip, &bicubic_baseline(&low, 4)?)?;
    println!("ST-SR PSNR: network {:.3} dB, bicubic {:.3} dB", net.stsr.psnr_db, base.stsr.psnr_db);
    Ok(())
}
