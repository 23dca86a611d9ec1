pub mod autodiff;
pub mod data;
pub mod harness;
pub mod losses;
pub mod models;
pub mod optim;
pub mod pipeline;
pub mod risk;
pub mod rng;
pub mod splitter;
