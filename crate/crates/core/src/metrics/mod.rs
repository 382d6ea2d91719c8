//! Evaluation metrics: per-frame MSE and SSIM curves and the trajectory
//! errors RotErr, TransErr and CamMC.

mod image;
mod report;
mod trajectory;

pub use image::{mse_per_frame, ssim_per_frame, PIXEL_RANGE, SSIM_SIGMA, SSIM_WINDOW};
pub use report::MetricReport;
pub use trajectory::{cam_mc, normalize_trajectory, rot_err, trans_err, TrajectoryPair};
