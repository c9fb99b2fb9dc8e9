pub mod checkpoint;
pub mod dataset;
pub mod features;
pub mod png;
pub mod rle;
