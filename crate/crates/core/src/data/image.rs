use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decodes a binary PPM (`P6`, maxval up to 255) into `[3, H, W]` in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let token = |pos: &mut usize| -> Option<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
            *pos += 1;
        }
        (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    if token(&mut pos).as_deref() != Some("P6") {
        return Err(Error::Format("not a binary PPM (P6)".into()));
    }
    let mut field = |what: &str| -> Result<usize> {
        token(&mut pos)
            .and_then(|t| t.parse().ok())
            .filter(|&v: &usize| v > 0)
            .ok_or_else(|| Error::Format(format!("PPM header has no valid {what}")))
    };
    let (w, h, maxval) = (field("width")?, field("height")?, field("maxval")?);
    if maxval > 255 {
        return Err(Error::Format(format!("16-bit PPM (maxval {maxval}) is not supported")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(Error::Format(format!("PPM raster truncated: need {need} bytes")));
    }
    let raster = &bytes[pos..pos + need];
    let maxval = maxval as f32;
    Tensor::new(vec![3, h, w], (0..need).map(|i| {
        let (c, p) = (i / (w * h), i % (w * h));
        raster[p * 3 + c] as f32 / maxval
    }).collect())
}

/// Encodes `[3, H, W]` values in `[0, 1]` as an 8-bit binary PPM.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::dim("encode_ppm", format!("expected [3, H, W], got {:?}", image.shape())));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for p in 0..w * h {
        for c in 0..3 {
            out.push(to_byte(d[c * w * h + p]));
        }
    }
    Ok(out)
}

pub(crate) fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads a PPM or PNG file into `[3, H, W]` in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P6") {
        return decode_ppm(&bytes);
    }
    if bytes.starts_with(b"\x89PNG") {
        let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let raw = img.into_raw();
        return Tensor::new(vec![3, h, w], (0..3 * w * h).map(|i| {
            let (c, p) = (i / (w * h), i % (w * h));
            raw[p * 3 + c] as f32 / 255.0
        }).collect());
    }
    Err(Error::Format(format!("{}: neither PPM (P6) nor PNG", path.display())))
}

pub fn save_ppm(path: &Path, image: &Tensor) -> Result<()> {
    std::fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

/// Bilinear resampling of `[C, H, W]` with half-pixel centres and edge clamping.
pub fn resize_bilinear(image: &Tensor, out_w: usize, out_h: usize) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::dim("resize", format!("expected [C, H, W], got {:?}", image.shape())));
    };
    if out_w == 0 || out_h == 0 {
        return Err(Error::param("resize", "target size must be positive"));
    }
    if (w, h) == (out_w, out_h) {
        return Ok(image.clone());
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let (xs, ys) = (taps(w, out_w), taps(h, out_h));
    let d = image.data();
    let mut out = Vec::with_capacity(c * out_w * out_h);
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let lerp = |a: f32, b: f32, f: f32| a + (b - a) * f;
                let top = lerp(plane[y0 * w + x0], plane[y0 * w + x1], fx);
                let bottom = lerp(plane[y1 * w + x0], plane[y1 * w + x1], fx);
                out.push(lerp(top, bottom, fy));
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Loads an image and resizes it to `target x target`. Returns the image and
/// the factors `(sx, sy)` that map original pixel coordinates onto it.
pub fn load_and_resize(path: &Path, target: usize) -> Result<(Tensor, f32, f32)> {
    let img = load_image(path)?;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let resized = resize_bilinear(&img, target, target)?;
    Ok((resized, target as f32 / w as f32, target as f32 / h as f32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxgeom::BBox;

    fn temp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("leafdet-img-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn ppm_round_trip_is_exact_on_byte_values() {
        let t = Tensor::from_fn(&[3, 5, 7], |i| ((i * 37) % 256) as f32 / 255.0);
        let back = decode_ppm(&encode_ppm(&t).unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn ppm_header_comments_and_errors() {
        let mut bytes = b"P6 # made by hand\n2 1\n# max\n255\n".to_vec();
        bytes.extend([255, 0, 0, 0, 0, 255]);
        let t = decode_ppm(&bytes).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(matches!(decode_ppm(b"P3\n1 1\n255\n1 2 3"), Err(Error::Format(_))));
        assert!(matches!(decode_ppm(b"P6\n4 4\n255\nabc"), Err(Error::Format(_))));
    }

    #[test]
    fn unit_scale_is_identity() {
        let t = Tensor::from_fn(&[3, 256, 256], |i| (i % 256) as f32 / 255.0);
        let path = temp("same.ppm");
        save_ppm(&path, &t).unwrap();
        let (img, sx, sy) = load_and_resize(&path, 256).unwrap();
        assert_eq!((sx, sy), (1.0, 1.0));
        assert_eq!(img, t);
    }

    #[test]
    fn constant_image_stays_constant() {
        let v = 77.0 / 255.0;
        let path = temp("const.ppm");
        save_ppm(&path, &Tensor::full(&[3, 512, 512], v)).unwrap();
        let (img, sx, sy) = load_and_resize(&path, 256).unwrap();
        assert_eq!((sx, sy), (0.5, 0.5));
        assert!(img.data().iter().all(|&p| p == v));
    }

    #[test]
    fn anisotropic_scale_maps_boxes() {
        let path = temp("wide.ppm");
        save_ppm(&path, &Tensor::full(&[3, 256, 512], 0.2)).unwrap();
        let (_, sx, sy) = load_and_resize(&path, 256).unwrap();
        assert_eq!((sx, sy), (0.5, 1.0));
        let b = BBox::new(100.0, 40.0, 300.0, 200.0).unwrap().scaled(sx, sy).unwrap();
        assert_eq!(b, BBox::new(50.0, 40.0, 150.0, 200.0).unwrap());
    }

    #[test]
    fn png_loads_like_ppm() {
        let t = Tensor::from_fn(&[3, 4, 6], |i| ((i * 11) % 256) as f32 / 255.0);
        let mut rgb = image::RgbImage::new(6, 4);
        for (x, y, px) in rgb.enumerate_pixels_mut() {
            let p = (y * 6 + x) as usize;
            *px = image::Rgb([0, 1, 2].map(|c| to_byte(t.data()[c * 24 + p])));
        }
        let path = temp("img.png");
        rgb.save(&path).unwrap();
        assert_eq!(load_image(&path).unwrap(), t);
        let bad = temp("img.gif");
        std::fs::write(&bad, b"GIF89a").unwrap();
        assert!(matches!(load_image(&bad), Err(Error::Format(_))));
        assert!(matches!(load_image(&temp("missing.ppm")), Err(Error::Io { .. })));
    }

    #[test]
    fn downscale_averages_pixel_pairs() {
        let t = Tensor::new(vec![1, 1, 4], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let r = resize_bilinear(&t, 2, 1).unwrap();
        assert_eq!(r.data(), &[0.5, 2.5]);
    }
}
