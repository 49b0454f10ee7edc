//! Ground-truth generation and loss evaluation.

mod fusion;
mod losses;
mod sdf;
mod view_filter;

pub use fusion::{volumetric_fuse_depths, DepthFrame, FusionConfig, DEFAULT_FUSION_VOXEL};
pub use losses::{
    binary_cross_entropy, class_weights_inverse_log, depth_loss_log_l1, loss_geometry, loss_instance, loss_semantic,
    loss_total, ClassWeightTable, LevelLosses, LossParts, LossWeights, BCE_EPSILON, FREESPACE_WEIGHT,
};
pub use sdf::{closest_point_on_triangle, mesh_to_tsdf_gt, TriangleRegion};
pub use view_filter::{keep_real_view, keep_synthetic_view, RealView, SyntheticView, ViewFilter};
