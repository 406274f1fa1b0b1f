pub mod tensor;
pub mod model;
pub mod taf;
pub mod data;
pub mod engine;
