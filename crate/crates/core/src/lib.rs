pub mod data;
pub mod flow;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod plane;
pub mod scoring;
pub mod training;
