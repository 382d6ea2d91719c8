use crate::error::{Error, Result};
use crate::image::Image;

/// Dynamic range of the 8-bit scale on which MSE and SSIM are reported.
pub const PIXEL_RANGE: f64 = 255.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn check_pair(gen: &[Image], gt: &[Image]) -> Result<()> {
    if gen.len() != gt.len() {
        return Err(Error::shape(format!("{} generated frames vs {} reference frames", gen.len(), gt.len())));
    }
    for (a, b) in gen.iter().zip(gt) {
        if a.width != b.width || a.height != b.height {
            return Err(Error::shape("frame sizes differ"));
        }
    }
    Ok(())
}

/// Mean squared pixel error of each frame on the 0-255 scale.
pub fn mse_per_frame(gen: &[Image], gt: &[Image]) -> Result<Vec<f64>> {
    check_pair(gen, gt)?;
    Ok(gen
        .iter()
        .zip(gt)
        .map(|(a, b)| {
            let s: f64 = a
                .data
                .iter()
                .zip(&b.data)
                .map(|(x, y)| {
                    let d = (x - y) * PIXEL_RANGE;
                    d * d
                })
                .sum();
            s / a.data.len().max(1) as f64
        })
        .collect())
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|x| x / s).collect()
}

/// Separable Gaussian filter over the valid region of a `w x h` plane.
fn filter(plane: &[f64], w: usize, h: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (ow, oh) = (w + 1 - k, h + 1 - k);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..k).map(|i| g[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM of one channel plane pair.
fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize, g: &[f64]) -> f64 {
    let c1 = (0.01 * PIXEL_RANGE).powi(2);
    let c2 = (0.03 * PIXEL_RANGE).powi(2);
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
    let mu_a = filter(a, w, h, g);
    let mu_b = filter(b, w, h, g);
    let aa = filter(&prod(a, a), w, h, g);
    let bb = filter(&prod(b, b), w, h, g);
    let ab = filter(&prod(a, b), w, h, g);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / n as f64
}

/// SSIM of each frame (11x11 Gaussian window, sigma 1.5, valid region,
/// averaged over RGB channels) on the 0-255 scale.
pub fn ssim_per_frame(gen: &[Image], gt: &[Image]) -> Result<Vec<f64>> {
    check_pair(gen, gt)?;
    let g = gaussian_window();
    gen.iter()
        .zip(gt)
        .map(|(a, b)| {
            let (w, h) = (a.width, a.height);
            if w < SSIM_WINDOW || h < SSIM_WINDOW {
                return Err(Error::config(format!("{w}x{h} frame is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")));
            }
            let plane = |img: &Image, c: usize| -> Vec<f64> {
                img.data.iter().skip(c).step_by(3).map(|v| v * PIXEL_RANGE).collect()
            };
            let s: f64 = (0..3).map(|c| ssim_plane(&plane(a, c), &plane(b, c), w, h, &g)).sum();
            Ok(s / 3.0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Image {
        Image::new(w, h, (0..w * h * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn mse_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = random_image(12, 12, &mut rng);
        assert_eq!(mse_per_frame(&[a.clone()], &[a.clone()]).unwrap(), vec![0.0]);
        let base = Image::filled(12, 12, [100.0 / 255.0; 3]);
        let shifted = Image::filled(12, 12, [110.0 / 255.0; 3]);
        let m = mse_per_frame(&[shifted.clone(), shifted], &[base.clone(), base]).unwrap();
        assert!(m.iter().all(|v| (v - 100.0).abs() < 1e-9));
        let b = random_image(12, 12, &mut rng);
        let mut acc = 0.0;
        for i in 0..a.data.len() {
            acc += (255.0 * a.data[i] - 255.0 * b.data[i]).powi(2);
        }
        let oracle = acc / a.data.len() as f64;
        assert!((mse_per_frame(&[a], &[b]).unwrap()[0] - oracle).abs() < 1e-9);
    }

    #[test]
    fn quantization_error_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(16, 16, &mut rng);
        let q = Image::from_u8(16, 16, &a.to_u8()).unwrap();
        assert!(mse_per_frame(&[q], &[a]).unwrap()[0] <= 0.25);
    }

    #[test]
    fn ssim_identity_and_anticorrelation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(16, 16, &mut rng);
        assert_eq!(ssim_per_frame(&[a.clone()], &[a]).unwrap(), vec![1.0]);

        let mut board = Image::filled(16, 16, [0.0; 3]);
        for y in 0..16 {
            for x in 0..16 {
                if (x + y) % 2 == 0 {
                    board.set_pixel(x, y, [1.0; 3]);
                }
            }
        }
        let inv = Image::new(16, 16, board.data.iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim_per_frame(&[inv], &[board]).unwrap()[0] < 0.0);
    }

    #[test]
    fn ssim_of_constants_is_the_luminance_term() {
        let (a, b) = (0.2, 0.7);
        let s = ssim_per_frame(&[Image::filled(12, 12, [a; 3])], &[Image::filled(12, 12, [b; 3])]).unwrap()[0];
        let (a, b) = (a * 255.0, b * 255.0);
        let c1 = (0.01f64 * 255.0).powi(2);
        assert!((s - (2.0 * a * b + c1) / (a * a + b * b + c1)).abs() < 1e-9);
    }

    #[test]
    fn small_frames_and_shape_mismatch_are_errors() {
        let a = Image::filled(10, 20, [0.5; 3]);
        assert!(matches!(ssim_per_frame(&[a.clone()], &[a.clone()]), Err(Error::Config(_))));
        assert!(mse_per_frame(&[a.clone()], &[]).is_err());
        assert!(mse_per_frame(&[a], &[Image::filled(20, 10, [0.5; 3])]).is_err());
    }

    proptest! {
        #[test]
        fn ssim_is_symmetric_and_bounded(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_image(13, 11, &mut rng);
            let b = random_image(13, 11, &mut rng);
            let ab = ssim_per_frame(&[a.clone()], &[b.clone()]).unwrap()[0];
            let ba = ssim_per_frame(&[b], &[a]).unwrap()[0];
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }
    }
}
