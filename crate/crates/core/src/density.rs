//! Ground-truth density maps from point annotations.
//!
//! Every annotated point contributes a truncated Gaussian whose in-bounds
//! mass is renormalized to exactly one, so the sum of a map is the number
//! of points it was built from. The Gaussian spread adapts to how crowded
//! the neighbourhood is.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Building centers in image pixel coordinates, `(x, y)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointAnnotation {
    pub points: Vec<(f64, f64)>,
}

impl PointAnnotation {
    pub fn new(points: Vec<(f64, f64)>) -> Self {
        PointAnnotation { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index of the first point outside `[0, width] x [0, height]`.
    pub fn first_out_of_bounds(&self, width: usize, height: usize) -> Option<usize> {
        self.points.iter().position(|&(x, y)| {
            !(x.is_finite() && y.is_finite())
                || x < 0.0
                || y < 0.0
                || x > width as f64
                || y > height as f64
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityMapConfig {
    pub k_neighbors: usize,
    pub beta: f64,
    /// Lower clamp on the spread, in image pixels.
    pub sigma_min: f64,
    /// Upper clamp on the spread, in image pixels.
    pub sigma_max: f64,
    /// Kernel half-width in multiples of the spread.
    pub truncation_radius: f64,
    pub output_scale: usize,
}

impl Default for DensityMapConfig {
    fn default() -> Self {
        DensityMapConfig {
            k_neighbors: 3,
            beta: 0.3,
            sigma_min: 1.0,
            sigma_max: 8.0,
            truncation_radius: 4.0,
            output_scale: 4,
        }
    }
}

impl DensityMapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min <= self.sigma_max) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < sigma_min <= sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if self.k_neighbors == 0 {
            return Err(Error::InvalidArgument("k_neighbors must be >= 1".into()));
        }
        if !(self.truncation_radius >= 2.0) {
            return Err(Error::InvalidArgument("truncation_radius must be >= 2".into()));
        }
        if self.output_scale == 0 || !(self.beta > 0.0) {
            return Err(Error::InvalidArgument("output_scale and beta must be positive".into()));
        }
        Ok(())
    }
}

/// Nonnegative grid whose sum is a building count.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
    scale: usize,
}

impl DensityMap {
    pub fn zeros(height: usize, width: usize, scale: usize) -> Self {
        DensityMap {
            height,
            width,
            data: vec![0.0; height * width],
            scale,
        }
    }

    pub fn from_data(height: usize, width: usize, scale: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidShape(format!(
                "{height}x{width} density map from {} values",
                data.len()
            )));
        }
        Ok(DensityMap {
            height,
            width,
            data,
            scale,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// `a * self + other`, cellwise.
    pub fn axpy(&self, a: f64, other: &DensityMap) -> Result<DensityMap> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::InvalidShape("density maps differ in size".into()));
        }
        let data = self.data.iter().zip(&other.data).map(|(x, y)| a * x + y).collect();
        DensityMap::from_data(self.height, self.width, self.scale, data)
    }

    pub fn mirrored(&self) -> DensityMap {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks_exact(self.width) {
            data.extend(row.iter().rev());
        }
        DensityMap { data, ..self.clone() }
    }

    /// `[1, H, W]` view for the tensor ops.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.height, self.width], self.data.clone()).expect("consistent extents")
    }
}

pub fn count_of(map: &DensityMap) -> f64 {
    map.data.iter().sum()
}

/// Spread of every point's kernel, in image pixels: `beta` times the mean
/// distance to its `k` nearest other points, clamped; points with fewer
/// than `k` neighbours get `sigma_max`.
pub fn adaptive_sigmas(points: &[(f64, f64)], cfg: &DensityMapConfig) -> Vec<f64> {
    raw_sigmas(points, cfg)
        .into_iter()
        .map(|s| s.map_or(cfg.sigma_max, |s| s.clamp(cfg.sigma_min, cfg.sigma_max)))
        .collect()
}

/// Unclamped `beta * mean kNN distance`, `None` when fewer than `k` others.
pub fn raw_sigmas(points: &[(f64, f64)], cfg: &DensityMapConfig) -> Vec<Option<f64>> {
    let k = cfg.k_neighbors;
    let mut dists = Vec::with_capacity(points.len());
    points
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| {
            if points.len() <= k {
                return None;
            }
            dists.clear();
            for (j, &(u, v)) in points.iter().enumerate() {
                if j != i {
                    dists.push(((x - u).powi(2) + (y - v).powi(2)).sqrt());
                }
            }
            dists.sort_by(f64::total_cmp);
            let mean = dists[..k].iter().sum::<f64>() / k as f64;
            Some(cfg.beta * mean)
        })
        .collect()
}

/// Builds the ground-truth map at `image / output_scale` resolution.
pub fn build_density_map(
    ann: &PointAnnotation,
    (width, height): (usize, usize),
    cfg: &DensityMapConfig,
) -> DensityMap {
    let s = cfg.output_scale;
    let (gw, gh) = (width.div_ceil(s), height.div_ceil(s));
    let mut map = DensityMap::zeros(gh, gw, s);
    let sigmas = adaptive_sigmas(&ann.points, cfg);
    let mut kernel = Vec::new();
    for (&(x, y), &sigma) in ann.points.iter().zip(&sigmas) {
        let (cx, cy) = (x / s as f64, y / s as f64);
        let sg = sigma / s as f64;
        let r = cfg.truncation_radius * sg;
        let j0 = ((cx - r - 0.5).floor().max(0.0)) as usize;
        let j1 = ((cx + r - 0.5).ceil().max(0.0) as usize).min(gw - 1);
        let i0 = ((cy - r - 0.5).floor().max(0.0)) as usize;
        let i1 = ((cy + r - 0.5).ceil().max(0.0) as usize).min(gh - 1);
        kernel.clear();
        let mut total = 0.0;
        for i in i0..=i1 {
            let dy = i as f64 + 0.5 - cy;
            for j in j0..=j1 {
                let dx = j as f64 + 0.5 - cx;
                if dx.abs() <= r && dy.abs() <= r {
                    let w = (-(dx * dx + dy * dy) / (2.0 * sg * sg)).exp();
                    total += w;
                    kernel.push((i, j, w));
                }
            }
        }
        if total > 0.0 {
            for &(i, j, w) in &kernel {
                map.data[i * gw + j] += w / total;
            }
        } else {
            let i = (cy.floor().max(0.0) as usize).min(gh - 1);
            let j = (cx.floor().max(0.0) as usize).min(gw - 1);
            map.data[i * gw + j] += 1.0;
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> DensityMapConfig {
        DensityMapConfig::default()
    }

    #[test]
    fn single_center_point_has_unit_mass() {
        let ann = PointAnnotation::new(vec![(64.0, 64.0)]);
        let m = build_density_map(&ann, (128, 128), &cfg());
        assert_eq!((m.height(), m.width()), (32, 32));
        assert!((count_of(&m) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn corner_points_keep_unit_mass() {
        for p in [(0.0, 0.0), (128.0, 128.0), (0.0, 128.0), (127.9, 0.1)] {
            let m = build_density_map(&PointAnnotation::new(vec![p]), (128, 128), &cfg());
            assert!((count_of(&m) - 1.0).abs() < 1e-9, "{p:?}");
            assert!(m.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn empty_annotation_gives_zero_map() {
        let m = build_density_map(&PointAnnotation::default(), (128, 128), &cfg());
        assert_eq!(count_of(&m), 0.0);
    }

    #[test]
    fn sparse_points_use_sigma_max() {
        let pts = vec![(10.0, 10.0), (50.0, 50.0), (90.0, 20.0)];
        assert_eq!(adaptive_sigmas(&pts, &cfg()), vec![8.0; 3]);
    }

    #[test]
    fn sigma_follows_neighbour_distance() {
        // four points on a 10px square: kNN distances 10, 10, 14.14
        let pts = vec![(0.0, 0.0), (10.0, 0.0), (0.0, 10.0), (10.0, 10.0)];
        let s = adaptive_sigmas(&pts, &cfg());
        let expected = 0.3 * (20.0 + 200f64.sqrt()) / 3.0;
        for v in s {
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn mirror_doubles_count() {
        let ann = PointAnnotation::new(vec![(10.0, 20.0), (70.0, 30.0), (100.0, 120.0)]);
        let m = build_density_map(&ann, (128, 128), &cfg());
        let both = m.axpy(1.0, &m.mirrored()).unwrap();
        assert!((count_of(&both) - 2.0 * count_of(&m)).abs() < 1e-9);
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        let mut c = cfg();
        c.sigma_min = 9.0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.truncation_radius = 1.5;
        assert!(c.validate().is_err());
    }
}
