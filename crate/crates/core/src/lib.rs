pub mod data;
pub mod evaluation;
pub mod recommenders;
pub mod stats;
pub mod synthetic;
pub mod training;
