use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Normalised 1-D Gaussian taps for offsets `-r..=r`, `r = ceil(3 * sigma)`.
pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let r = (3.0 * sigma as f64).ceil() as i64;
    let raw: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * (sigma as f64).powi(2))).exp()).collect();
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|v| (v / sum) as f32).collect()
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}

/// Separable Gaussian blur of `[C, H, W]` with reflect padding. `sigma = 0`
/// returns the input unchanged.
pub fn blur_image(image: &Tensor, sigma: f32) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::dim("blur", format!("expected [C, H, W], got {:?}", image.shape())));
    };
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::param("sigma", format!("{sigma} must be finite and non-negative")));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let src = image.data();
    let mut tmp = vec![0.0f32; src.len()];
    let mut out = vec![0.0f32; src.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                tmp[base + y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, &kv)| kv * src[base + y * w + reflect(x as i64 + j as i64 - r, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                out[base + y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, &kv)| kv * tmp[base + reflect(y as i64 + j as i64 - r, h) * w + x])
                    .sum();
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_is_identity() {
        let t = Tensor::from_fn(&[3, 9, 11], |i| (i % 7) as f32 / 7.0);
        assert_eq!(blur_image(&t, 0.0).unwrap(), t);
    }

    #[test]
    fn constant_image_is_unchanged() {
        let t = Tensor::full(&[3, 20, 17], 0.4);
        let b = blur_image(&t, 2.0).unwrap();
        assert!(b.data().iter().all(|&v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn impulse_response_sums_to_one() {
        for sigma in [0.5, 1.0, 2.0, 3.3] {
            let mut t = Tensor::zeros(&[1, 41, 41]);
            t.data_mut()[20 * 41 + 20] = 1.0;
            let b = blur_image(&t, sigma).unwrap();
            let total: f64 = b.data().iter().map(|&v| v as f64).sum();
            assert!((total - 1.0).abs() < 1e-5, "sigma {sigma}: {total}");
            // separable response equals the outer product of the 1-D kernel
            let k = gaussian_kernel(sigma);
            let r = k.len() / 2;
            assert!((b.data()[20 * 41 + 20] - k[r] * k[r]).abs() < 1e-7);
        }
    }

    #[test]
    fn reflect_padding_mirrors_without_edge_repeat() {
        assert_eq!([-2, -1, 0, 4, 5, 6].map(|i| reflect(i, 5)), [2, 1, 0, 4, 3, 2]);
        assert_eq!(reflect(-7, 3), 1);
        assert_eq!(reflect(5, 1), 0);
    }

    #[test]
    fn rejects_negative_sigma() {
        assert!(blur_image(&Tensor::zeros(&[1, 2, 2]), -1.0).is_err());
    }
}
