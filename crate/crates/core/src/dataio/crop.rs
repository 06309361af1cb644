use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ImagePatch;
use crate::density::PointAnnotation;
use crate::error::{Error, Result};

const MIN_CROP: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropMode {
    Center,
    /// Window placed uniformly at random, drawn from this seed.
    Random(u64),
}

/// Crops a `fraction x fraction` window and resizes it back to the full
/// patch size. Annotated points inside the window are carried along.
pub fn extract_sub(img: &ImagePatch, fraction: f64, mode: CropMode) -> Result<ImagePatch> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "sub-image fraction must be in (0, 1], got {fraction}"
        )));
    }
    let cw = (fraction * img.width as f64).round() as usize;
    let ch = (fraction * img.height as f64).round() as usize;
    if cw < MIN_CROP || ch < MIN_CROP {
        return Err(Error::InvalidArgument(format!(
            "sub-image of {cw}x{ch} px is below the {MIN_CROP} px minimum"
        )));
    }
    let (x0, y0) = match mode {
        CropMode::Center => ((img.width - cw) / 2, (img.height - ch) / 2),
        CropMode::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (
                rng.random_range(0..=img.width - cw),
                rng.random_range(0..=img.height - ch),
            )
        }
    };
    let pixels = resize_bilinear(img, x0, y0, cw, ch, img.width, img.height);
    let annotation = img.annotation.as_ref().map(|ann| {
        let (sx, sy) = (img.width as f64 / cw as f64, img.height as f64 / ch as f64);
        PointAnnotation::new(
            ann.points
                .iter()
                .filter(|&&(x, y)| {
                    x >= x0 as f64 && x < (x0 + cw) as f64 && y >= y0 as f64 && y < (y0 + ch) as f64
                })
                .map(|&(x, y)| ((x - x0 as f64) * sx, (y - y0 as f64) * sy))
                .collect(),
        )
    });
    Ok(ImagePatch {
        id: format!("{}@sub", img.id),
        width: img.width,
        height: img.height,
        pixels,
        annotation,
    })
}

/// Bilinear resampling of the window `[x0, x0+cw) x [y0, y0+ch)` onto an
/// `out_w x out_h` grid, pixel centers aligned, samples clamped to the
/// window.
pub fn resize_bilinear(
    img: &ImagePatch,
    x0: usize,
    y0: usize,
    cw: usize,
    ch: usize,
    out_w: usize,
    out_h: usize,
) -> Vec<u8> {
    let taps = |out: usize, src: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|i| {
                let s = ((i as f64 + 0.5) * src as f64 / out as f64 - 0.5).clamp(0.0, (src - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    };
    let xs = taps(out_w, cw);
    let ys = taps(out_h, ch);
    let mut out = Vec::with_capacity(out_w * out_h);
    for &(ylo, yhi, fy) in &ys {
        let r0 = &img.pixels[(y0 + ylo) * img.width + x0..];
        let r1 = &img.pixels[(y0 + yhi) * img.width + x0..];
        for &(xlo, xhi, fx) in &xs {
            let top = r0[xlo] as f64 * (1.0 - fx) + r0[xhi] as f64 * fx;
            let bot = r1[xlo] as f64 * (1.0 - fx) + r1[xhi] as f64 * fx;
            out.push((top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(size: usize) -> ImagePatch {
        let pixels = (0..size * size)
            .map(|i| ((i % size) + (i / size)) as u8)
            .collect();
        ImagePatch::new("ramp", size, size, pixels).unwrap()
    }

    #[test]
    fn full_center_crop_is_identity() {
        let img = ramp(64).with_annotation(PointAnnotation::new(vec![(3.0, 4.0)]));
        let sub = extract_sub(&img, 1.0, CropMode::Center).unwrap();
        assert_eq!(sub.pixels, img.pixels);
        assert_eq!(sub.annotation, img.annotation);
    }

    #[test]
    fn half_center_window_bounds() {
        // window [32, 96): a marker just inside survives, one just outside is cut
        let ann = PointAnnotation::new(vec![(32.0, 32.0), (95.5, 95.5), (31.9, 50.0), (96.0, 40.0)]);
        let img = ImagePatch::new("z", 128, 128, vec![0; 128 * 128])
            .unwrap()
            .with_annotation(ann);
        let sub = extract_sub(&img, 0.5, CropMode::Center).unwrap();
        let pts = &sub.annotation.unwrap().points;
        assert_eq!(pts, &vec![(0.0, 0.0), (127.0, 127.0)]);
    }

    #[test]
    fn resized_ramp_keeps_corner_order() {
        let img = ramp(64);
        for mode in [CropMode::Center, CropMode::Random(3), CropMode::Random(99)] {
            let sub = extract_sub(&img, 0.8, mode).unwrap();
            let tl = sub.pixel(0, 0);
            let tr = sub.pixel(63, 0);
            let bl = sub.pixel(0, 63);
            let br = sub.pixel(63, 63);
            assert!(tl < tr && tl < bl && tr < br && bl < br, "{mode:?}");
        }
    }

    #[test]
    fn rejects_bad_fractions() {
        let img = ramp(32);
        assert!(extract_sub(&img, 0.0, CropMode::Center).is_err());
        assert!(extract_sub(&img, 1.5, CropMode::Center).is_err());
        assert!(extract_sub(&img, 0.2, CropMode::Center).is_err());
        assert!(extract_sub(&img, 0.25, CropMode::Center).is_ok());
    }
}
