pub mod diff;
pub mod linalg;
pub mod sun;
pub mod sphere;
pub mod potentials;
pub mod flow;
pub mod targets;
pub mod train;
pub mod export;
pub mod checks;
