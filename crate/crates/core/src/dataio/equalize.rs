use super::ImagePatch;

/// 256-bin histogram equalization,
/// `T(v) = round(255 (cdf(v) - cdf_min) / (N - cdf_min))`.
/// Constant images come back unchanged.
pub fn hist_equalize(img: &ImagePatch) -> ImagePatch {
    let mut hist = [0usize; 256];
    for &p in &img.pixels {
        hist[p as usize] += 1;
    }
    let mut cdf = [0usize; 256];
    let mut run = 0;
    for (c, h) in cdf.iter_mut().zip(hist) {
        run += h;
        *c = run;
    }
    let n = img.pixels.len();
    let cdf_min = cdf.iter().copied().find(|&c| c > 0).unwrap_or(0);
    if n == cdf_min {
        return img.clone();
    }
    let denom = (n - cdf_min) as f64;
    let mut lut = [0u8; 256];
    for (v, out) in lut.iter_mut().enumerate() {
        let c = cdf[v].saturating_sub(cdf_min) as f64;
        *out = (255.0 * c / denom).round() as u8;
    }
    ImagePatch {
        pixels: img.pixels.iter().map(|&p| lut[p as usize]).collect(),
        ..img.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch(pixels: Vec<u8>, w: usize) -> ImagePatch {
        let h = pixels.len() / w;
        ImagePatch::new("t", w, h, pixels).unwrap()
    }

    #[test]
    fn uniform_histogram_barely_moves() {
        // 64x64 with every level exactly 16 times
        let pixels: Vec<u8> = (0..4096).map(|i| (i % 256) as u8).collect();
        let img = patch(pixels.clone(), 64);
        let eq = hist_equalize(&img);
        for (a, b) in pixels.iter().zip(&eq.pixels) {
            assert!((*a as i32 - *b as i32).abs() <= 1);
        }
    }

    #[test]
    fn two_level_image_hits_extremes() {
        let pixels: Vec<u8> = (0..64).map(|i| if i % 2 == 0 { 0 } else { 255 }).collect();
        let eq = hist_equalize(&patch(pixels.clone(), 8));
        assert_eq!(eq.pixels, pixels);

        let pixels: Vec<u8> = (0..64).map(|i| if i < 32 { 40 } else { 90 }).collect();
        let eq = hist_equalize(&patch(pixels, 8));
        assert!(eq.pixels[..32].iter().all(|&p| p == 0));
        assert!(eq.pixels[32..].iter().all(|&p| p == 255));
    }

    #[test]
    fn constant_image_unchanged() {
        let img = patch(vec![77; 100], 10);
        assert_eq!(hist_equalize(&img), img);
    }
}
