//! Writes a cuboid as `.cubv` in both sample types and reads it back.

use cuboidnet::video::{encode_cubv, read_cubv, write_cubv, SampleType, VideoCuboid};

fn main() -> cuboidnet::Result<()> {
    let v = VideoCuboid::from_fn(4, 64, 112, |t, y, x| ((31 * t + 7 * y + 3 * x) % 256) as f64)?;
    let dir = std::env::temp_dir();
    for (dtype, name) in [(SampleType::U8, "example_u8.cubv"), (SampleType::F32, "example_f32.cubv")] {
        let bytes = encode_cubv(&v, dtype)?;
        let path = dir.join(name);
        write_cubv(&v, &path, dtype)?;
        let back = read_cubv(&path)?;
        println!(
            "{dtype:?}: {} bytes ({} header), round trip exact: {}",
            bytes.len(),
            bytes.len() - v.values().len() * if dtype == SampleType::U8 { 1 } else { 4 },
            back == v
        );
    }
    Ok(())
}
