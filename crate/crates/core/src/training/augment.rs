use rand::Rng;

/// Random `height x width` crop of the zero-padded image followed by a
/// horizontal flip with probability 1/2. Channel-last layout.
pub fn crop_flip<R: Rng + ?Sized>(
    image: &[f32],
    height: usize,
    width: usize,
    channels: usize,
    pad: usize,
    rng: &mut R,
) -> Vec<f32> {
    let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let flip = rng.random_bool(0.5);
    let mut out = vec![0.0; image.len()];
    for y in 0..height {
        let sy = y as isize + dy;
        if sy < 0 || sy >= height as isize {
            continue;
        }
        for x in 0..width {
            let tx = if flip { width - 1 - x } else { x };
            let sx = x as isize + dx;
            if sx < 0 || sx >= width as isize {
                continue;
            }
            let src = (sy as usize * width + sx as usize) * channels;
            let dst = (y * width + tx) * channels;
            out[dst..dst + channels].copy_from_slice(&image[src..src + channels]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_pad_is_a_flip_or_identity() {
        let img: Vec<f32> = (0..6).map(|v| v as f32).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let out = crop_flip(&img, 1, 3, 2, 0, &mut rng);
            assert!(out == img || out == vec![4.0, 5.0, 2.0, 3.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn preserves_mass_bound() {
        let img = vec![1.0f32; 16];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = crop_flip(&img, 4, 4, 1, 2, &mut rng);
        assert!(out.iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
