//! Fixtures shared by the criterion benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdnn::{GrayImage, NetworkConfig};

/// The MNIST desk profile bundled with the repository.
pub fn desk_config() -> NetworkConfig {
    NetworkConfig::from_toml(include_str!("../../../configs/mnist_desk.toml"))
        .expect("bundled config parses")
}

/// 28x28 image with a few thick random strokes, roughly digit-like in
/// spike count.
pub fn stroke_image(seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = 28;
    let mut px = vec![0.0; side * side];
    for _ in 0..3 {
        let (mut x, mut y) = (rng.gen_range(6.0..22.0), rng.gen_range(6.0..22.0));
        let (dx, dy): (f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        for _ in 0..14 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let (cx, cy) = (x as usize + ox, y as usize + oy);
                    if cx < side && cy < side {
                        px[cy * side + cx] = 1.0;
                    }
                }
            }
            x = (x + dx).clamp(2.0, 25.0);
            y = (y + dy).clamp(2.0, 25.0);
        }
    }
    GrayImage::new(side, side, px).expect("valid image")
}
