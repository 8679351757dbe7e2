pub mod agent;
pub mod analyze;
pub mod auxiliary;
pub mod nn;
pub mod parallel;
pub mod sim;
pub mod trainer;
