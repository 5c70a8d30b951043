pub mod algorithms;
pub mod data;
pub mod diffnet;
pub mod env;
pub mod evalharness;
pub mod fisher;
pub mod linalg;
pub mod optim;
pub mod policies;
pub mod simnet;
