//! Building counting with unsupervised cross-region adaptation.
//!
//! A density-map regressor is trained on an annotated source region and
//! adapted to an unannotated target region by aligning predicted maps
//! adversarially and by enforcing that a sub-image never holds more
//! buildings than the image it was cut from.

pub mod adam;
pub mod dataio;
pub mod density;
pub mod error;
pub mod eval;
pub mod losses;
pub mod models;
pub mod tensor;
pub mod trainer;

pub use dataio::{Dataset, Domain, ImagePatch, Split};
pub use density::{build_density_map, count_of, DensityMap, DensityMapConfig, PointAnnotation};
pub use error::{Error, Result};
pub use eval::{compute_omega, evaluate_mre, run_sweep, EvalReport, SweepGrid, SweepOptions, SweepReport};
pub use losses::{LossBreakdown, Stage};
pub use models::{Hyperparameters, Model, ParameterStore};
pub use tensor::Tensor;
pub use trainer::{adapt, adapt_cai, adapt_cwi, adapt_dma, train_source, AdaptConfig, TrainLog};
