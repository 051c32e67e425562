//! Trains a few steps, checkpoints, resumes, and confirms the resumed run
//! continues exactly where the uninterrupted one would.

use cuboidnet::net::NetworkConfig;
use cuboidnet::train::{read_checkpoint, write_checkpoint, TrainConfig, Trainer};
use cuboidnet::video::VideoCuboid;

fn main() -> cuboidnet::Result<()> {
    let clips: Vec<VideoCuboid> = (0..2)
        .map(|k| VideoCuboid::from_fn(7, 32, 32, |t, y, x| ((9 * t + 5 * y + 3 * x + 40 * k) % 256) as f64))
        .collect::<Result<_, _>>()?;
    let cfg = TrainConfig {
        batch_size: 2,
        max_epochs: 2,
        label_extent: 16,
        patches_per_clip: 2,
        ..Default::default()
    };

    let mut straight = Trainer::new(NetworkConfig::toy(), cfg.clone(), clips.clone())?;
    let losses: Vec<f64> = (0..3).map(|_| straight.step().map(|r| r.loss)).collect::<Result<_, _>>()?;

    let mut first = Trainer::new(NetworkConfig::toy(), cfg, clips.clone())?;
    first.step()?;
    first.step()?;
    let path = std::env::temp_dir().join("example.cbck");
    write_checkpoint(&first.checkpoint(), &path)?;
    let size = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);

    let mut resumed = Trainer::resume(read_checkpoint(&path)?, clips)?;
    let next = resumed.step()?;
    println!("checkpoint {} bytes at step {}", size, resumed.progress.step - 1);
    println!("uninterrupted step 3 loss {:.12e}", losses[2]);
    println!("resumed       step 3 loss {:.12e}", next.loss);
    Ok(())
}
