//! Landmark data model, facial-part topology, registration and head pose.

mod io;
mod landmarks;
mod pose;
mod registration;
mod resample;
mod topology;

use thiserror::Error;

pub use io::{format_sequence, load_sequence, load_template, parse_sequence, save_sequence};
pub use landmarks::{
    standard_template, LandmarkFrame, LandmarkSequence, Point3, CANONICAL_FPS, FLAT_DIM, N_LANDMARKS,
    STABLE_INDICES,
};
pub use pose::{
    apply_head_pose, apply_pose_to_frame, decompose_head_pose, decompose_sequence, euler_to_matrix, matrix_to_euler,
    rotation_angle_between, wrap_degrees, HeadPose,
};
pub use registration::{fit_affine, register_to_template, AffineTransform, Registration, RegistrationMode};
pub use resample::resample;
pub use topology::{laplacian_coords, FacialPart, PartTopology};

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid landmark frame: {0}")]
    InvalidFrame(String),
    #[error("invalid landmark sequence: {0}")]
    InvalidSequence(String),
    #[error("topology error: {0}")]
    Topology(String),
    #[error("registration error: {0}")]
    Registration(String),
    #[error("pose error: {0}")]
    Pose(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
