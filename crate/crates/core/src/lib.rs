//! Co-planning of capacity investments and demand-shaping policy through a
//! differentiable conditional diffusion scenario generator and a
//! KKT-differentiated dispatch problem.

pub mod autodiff;
pub mod diffusion;
pub mod gridopt;
pub mod planner;
pub mod rng;
pub mod simkit;
