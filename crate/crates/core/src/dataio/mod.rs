//! Image patches, on-disk datasets, preprocessing and synthetic scenes.

mod crop;
mod dataset;
mod equalize;
pub mod pgm;
mod scene;

use serde::{Deserialize, Serialize};

use crate::density::PointAnnotation;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use crop::{extract_sub, resize_bilinear, CropMode};
pub use dataset::{
    assign_splits, load_dataset, load_dataset_unlabeled, save_patch, split_key, write_manifest, Dataset,
    Manifest, Split, Splits, MANIFEST_FILE, MANIFEST_VERSION,
};
pub use equalize::hist_equalize;
pub use scene::{generate_scene, render_scene, RoofStyle, SceneConfig, SceneRender};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::InvalidArgument(format!("unknown domain {other:?}"))),
        }
    }
}

/// An 8-bit grayscale raster with optional building-center annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePatch {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub annotation: Option<PointAnnotation>,
}

impl ImagePatch {
    pub fn new(id: impl Into<String>, width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::InvalidShape(format!(
                "{width}x{height} patch with {} pixels",
                pixels.len()
            )));
        }
        Ok(ImagePatch {
            id: id.into(),
            width,
            height,
            pixels,
            annotation: None,
        })
    }

    pub fn with_annotation(mut self, ann: PointAnnotation) -> Self {
        self.annotation = Some(ann);
        self
    }

    pub fn pixel(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Ground-truth count, if labeled.
    pub fn count(&self) -> Option<usize> {
        self.annotation.as_ref().map(PointAnnotation::len)
    }

    /// `[1, H, W]` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![1, self.height, self.width],
            self.pixels.iter().map(|&p| p as f64 / 255.0).collect(),
        )
        .expect("validated extents")
    }

    pub fn without_annotation(&self) -> ImagePatch {
        ImagePatch {
            annotation: None,
            ..self.clone()
        }
    }
}
