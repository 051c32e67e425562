//! Small ablation over the number of residual dense blocks, printed as the
//! same CSV the `ablate` command writes.
//!
//! `cargo run --release --example ablation`

use cuboidnet::net::NetworkConfig;
use cuboidnet::train::{ablate, AblationAxis, TrainConfig};
use cuboidnet::video::VideoCuboid;

fn clip(n: usize, size: usize, phase: f64) -> VideoCuboid {
    VideoCuboid::from_fn(n, size, size, |t, y, x| {
        let u = x as f64 - 1.5 * t as f64 + phase;
        127.5 + 70.0 * (0.3 * u).sin() * (0.2 * y as f64).cos()
    })
    .unwrap()
}

fn main() -> cuboidnet::Result<()> {
    let train = TrainConfig {
        batch_size: 1,
        max_epochs: 3,
        label_extent: 32,
        ..Default::default()
    };
    let axis = AblationAxis::parse("resdb_count", "1,2,3")?;
    let table = ablate(&NetworkConfig::toy(), &train, &axis, &[clip(7, 32, 0.0)], &[clip(7, 32, 5.0)])?;
    print!("{}", table.to_csv());
    Ok(())
}
