//! Dense 3D deformable image registration.
//!
//! A displacement field `u` (voxel units, on the fixed grid) maps fixed
//! voxel `p` to moving position `p + u(p)`. Fields are optimized directly
//! with Adam under a local normalized cross-correlation similarity plus a
//! squared-gradient smoothness penalty, coarse to fine, and optionally
//! refined by a fixed-image-guided bilateral filter.
//!
//! ```no_run
//! use deformreg::{load_volume, register, RegConfig};
//!
//! let moving = load_volume("moving.nii.gz")?;
//! let fixed = load_volume("fixed.nii.gz")?;
//! let (field, trace) = register(&moving, &fixed, &RegConfig::default())?;
//! field.save("field.nii.gz")?;
//! # Ok::<(), deformreg::Error>(())
//! ```

pub mod bilateral;
pub mod cli;
pub mod error;
pub mod field;
pub mod landmarks;
pub mod loss;
pub mod metrics;
pub mod nifti;
pub mod optimizer;
pub mod phantom;
pub mod sampler;
pub mod visualize;
pub mod volume;

pub use bilateral::{bilateral_filter, BFParams};
pub use error::{Error, Result};
pub use field::{compose, jacobian_det, ndv, upsample2, DispField};
pub use landmarks::{load_landmarks, save_landmarks};
pub use loss::{global_ncc, grad_l2, local_ncc, loss_gradient, total_loss, LossGrad, LossParams, LossReport, NccMode};
pub use metrics::{dice, evaluate_pair, hd95, tre, MetricReport};
pub use nifti::{load_field, load_labels, load_volume, save_field, save_labels, save_volume};
pub use optimizer::{adam_step, register, register_level, AdamParams, AdamState, LevelParams, LossTrace, RegConfig};
pub use phantom::{make_phantom, smooth_random_field, synthetic_pair, PhantomKind, SyntheticPair};
pub use sampler::{transform_points, warp, warp_labels, InterpMode};
pub use volume::{downsample2, Grid, LabelMap, LandmarkSet, Volume3};
