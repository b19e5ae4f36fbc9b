pub mod experiments;
pub mod grid;
pub mod model;
pub mod noise;
pub mod particles;
pub mod regularization;
pub mod solver;
pub mod stats;
