//! Random crop with zero padding plus horizontal flip.

use rand::Rng;

/// One sampled augmentation: crop offset into the padded image and flip flag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

impl AugmentDraw {
    pub fn identity(pad: usize) -> Self {
        AugmentDraw { dy: pad, dx: pad, flip: false }
    }

    pub fn sample<R: Rng + ?Sized>(pad: usize, allow_flip: bool, rng: &mut R) -> Self {
        let dy = rng.random_range(0..=2 * pad);
        let dx = rng.random_range(0..=2 * pad);
        let flip = allow_flip && rng.random_bool(0.5);
        AugmentDraw { dy, dx, flip }
    }
}

/// Applies `draw` to a `(C, H, W)` image: zero-pad by `pad`, crop an `H×W`
/// window at `(dy, dx)`, then optionally mirror columns.
pub fn apply(image: &[f32], channels: usize, height: usize, width: usize, pad: usize, draw: AugmentDraw) -> Vec<f32> {
    debug_assert_eq!(image.len(), channels * height * width);
    let mut out = vec![0.0f32; image.len()];
    for c in 0..channels {
        let plane = &image[c * height * width..(c + 1) * height * width];
        let dst = &mut out[c * height * width..(c + 1) * height * width];
        for y in 0..height {
            let sy = (y + draw.dy) as isize - pad as isize;
            if sy < 0 || sy >= height as isize {
                continue;
            }
            let row = &plane[sy as usize * width..(sy as usize + 1) * width];
            for x in 0..width {
                let sx = (x + draw.dx) as isize - pad as isize;
                if sx < 0 || sx >= width as isize {
                    continue;
                }
                let ox = if draw.flip { width - 1 - x } else { x };
                dst[y * width + ox] = row[sx as usize];
            }
        }
    }
    out
}

pub fn augment<R: Rng + ?Sized>(
    image: &[f32],
    channels: usize,
    height: usize,
    width: usize,
    pad: usize,
    allow_flip: bool,
    rng: &mut R,
) -> Vec<f32> {
    let draw = AugmentDraw::sample(pad, allow_flip, rng);
    apply(image, channels, height, width, pad, draw)
}
