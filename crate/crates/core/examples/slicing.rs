//! Cuts a small cuboid along all three axes and puts it back together.

use cuboidnet::video::{reassemble, slice, SliceAxis, VideoCuboid};

fn main() -> cuboidnet::Result<()> {
    // V(t, y, x) = 100t + 10y + x makes every voxel's origin readable.
    let v = VideoCuboid::from_fn(2, 2, 3, |t, y, x| (100 * t + 10 * y + x) as f64)?;
    for axis in SliceAxis::ALL {
        let set = slice(&v, axis);
        println!("axis {} ({axis:?}): {} slices", axis.index(), set.slices.len());
        for (i, p) in set.slices.iter().enumerate() {
            let rows: Vec<Vec<f64>> = p.data.chunks(p.cols).map(<[f64]>::to_vec).collect();
            println!("  slice {i}: {rows:?}");
        }
        assert_eq!(reassemble(&set)?, v);
    }
    println!("all three slice sets reassemble to the original cuboid");
    Ok(())
}
