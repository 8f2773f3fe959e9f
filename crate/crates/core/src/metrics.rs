//! Image quality metrics: PSNR (capped, optionally restricted to a pixel
//! box) and SSIM with the standard 11x11 Gaussian window.

use crate::img::{PixelBox, Rgb64};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("images are smaller than the {0}x{0} SSIM window")]
    TooSmallForWindow(usize),
}

/// Maximum reported PSNR; identical images report exactly this.
pub const PSNR_CAP_DB: f64 = 99.0;

/// `10 log10(1 / MSE)` over all channels of the pixels inside `bbox`
/// (the whole image when `None`), for values in [0,1].
pub fn psnr(a: &Rgb64, b: &Rgb64, bbox: Option<&PixelBox>) -> Result<f64, MetricsError> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(MetricsError::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    let full = PixelBox::full(a.width, a.height);
    let bbox = bbox.unwrap_or(&full);
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in bbox.y0..bbox.y1 {
        for x in bbox.x0..bbox.x1 {
            let pa = a.at(x, y);
            let pb = b.at(x, y);
            for k in 0..3 {
                let d = pa[k] - pb[k];
                sum += d * d;
            }
            count += 3;
        }
    }
    let mse = sum / count as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

fn to_gray(img: &Rgb64) -> Vec<f64> {
    img.pixels
        .iter()
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect()
}

/// Separable Gaussian filter, valid region only: output is
/// `(w - 10) x (h - 10)`.
fn gauss_valid(src: &[f64], w: usize, h: usize, kernel: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    // Horizontal pass over full rows.
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                acc += kv * src[y * w + x + i];
            }
            tmp[y * ow + x] = acc;
        }
    }
    // Vertical pass.
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                acc += kv * tmp[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Mean SSIM over all fully-interior window positions, on the luma channel
/// (0.299 R + 0.587 G + 0.114 B), dynamic range 1.
pub fn ssim(a: &Rgb64, b: &Rgb64) -> Result<f64, MetricsError> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(MetricsError::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    let (w, h) = (a.width as usize, a.height as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricsError::TooSmallForWindow(SSIM_WINDOW));
    }
    let x = to_gray(a);
    let y = to_gray(b);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();

    let kernel = gaussian_kernel();
    let mu_x = gauss_valid(&x, w, h, &kernel);
    let mu_y = gauss_valid(&y, w, h, &kernel);
    let e_xx = gauss_valid(&xx, w, h, &kernel);
    let e_yy = gauss_valid(&yy, w, h, &kernel);
    let e_xy = gauss_valid(&xy, w, h, &kernel);

    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let var_x = e_xx[i] - mx * mx;
        let var_y = e_yy[i] - my * my;
        let cov = e_xy[i] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
            / ((mx * mx + my * my + c1) * (var_x + var_y + c2));
    }
    Ok(total / mu_x.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: u32, h: u32, rng: &mut ChaCha8Rng, max: f64) -> Rgb64 {
        let pixels = (0..(w * h) as usize)
            .map(|_| std::array::from_fn(|_| rng.random::<f64>() * max))
            .collect();
        Rgb64::from_pixels(w, h, pixels)
    }

    #[test]
    fn identical_images_hit_the_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(16, 16, &mut rng, 1.0);
        assert_eq!(psnr(&img, &img, None).unwrap(), PSNR_CAP_DB);
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_error_has_closed_form_psnr() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(24, 24, &mut rng, 0.8);
        // 0.1 everywhere -> MSE 0.01 -> 20 dB; 0.01 -> 40 dB.
        for (err, expected) in [(0.1, 20.0), (0.01, 40.0)] {
            let b = Rgb64::from_pixels(
                a.width,
                a.height,
                a.pixels.iter().map(|p| std::array::from_fn(|k| p[k] + err)).collect(),
            );
            let got = psnr(&a, &b, None).unwrap();
            assert!((got - expected).abs() < 1e-9, "{err}: {got}");
        }
    }

    #[test]
    fn psnr_respects_evaluation_box() {
        let mut a = Rgb64::new(8, 8);
        let b = Rgb64::new(8, 8);
        // Error only outside the box.
        a.set(7, 7, [1.0, 1.0, 1.0]);
        let bbox = PixelBox {
            x0: 0,
            y0: 0,
            x1: 4,
            y1: 4,
        };
        assert_eq!(psnr(&a, &b, Some(&bbox)).unwrap(), PSNR_CAP_DB);
        assert!(psnr(&a, &b, None).unwrap() < PSNR_CAP_DB);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = Rgb64::new(8, 8);
        let b = Rgb64::new(9, 8);
        assert!(psnr(&a, &b, None).is_err());
        assert!(ssim(&a, &b).is_err());
    }

    #[test]
    fn anticorrelated_images_have_negative_ssim() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Binary random image vs its inverse.
        let pixels: Vec<[f64; 3]> = (0..32 * 32)
            .map(|_| {
                let v = if rng.random::<bool>() { 1.0 } else { 0.0 };
                [v, v, v]
            })
            .collect();
        let a = Rgb64::from_pixels(32, 32, pixels.clone());
        let inv = Rgb64::from_pixels(
            32,
            32,
            pixels.iter().map(|p| std::array::from_fn(|k| 1.0 - p[k])).collect(),
        );
        assert!(ssim(&a, &inv).unwrap() < 0.0);
    }

    /// Direct double-loop SSIM used as the independent reference.
    pub(crate) fn naive_ssim(a: &Rgb64, b: &Rgb64) -> f64 {
        let w = a.width as usize;
        let h = a.height as usize;
        let gray = |img: &Rgb64| -> Vec<f64> {
            img.pixels
                .iter()
                .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
                .collect()
        };
        let x = gray(a);
        let y = gray(b);
        // 2D gaussian weights.
        let mut kw = [[0.0; 11]; 11];
        let mut ksum = 0.0;
        for (i, row) in kw.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let di = i as f64 - 5.0;
                let dj = j as f64 - 5.0;
                *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
                ksum += *v;
            }
        }
        for row in kw.iter_mut() {
            for v in row.iter_mut() {
                *v /= ksum;
            }
        }
        let c1 = 0.01_f64 * 0.01;
        let c2 = 0.03_f64 * 0.03;
        let mut total = 0.0;
        let mut count = 0;
        for wy in 0..h - 10 {
            for wx in 0..w - 10 {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let idx = (wy + i) * w + wx + j;
                        mx += kw[i][j] * x[idx];
                        my += kw[i][j] * y[idx];
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let idx = (wy + i) * w + wx + j;
                        vx += kw[i][j] * (x[idx] - mx) * (x[idx] - mx);
                        vy += kw[i][j] * (y[idx] - my) * (y[idx] - my);
                        cov += kw[i][j] * (x[idx] - mx) * (y[idx] - my);
                    }
                }
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let a = random_image(32, 32, &mut rng, 1.0);
            let b = random_image(32, 32, &mut rng, 1.0);
            let fast = ssim(&a, &b).unwrap();
            let slow = naive_ssim(&a, &b);
            assert!((fast - slow).abs() < 1e-10, "{fast} vs {slow}");
        }
    }
}
