pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod dsp;
pub mod losses;
pub mod models;
pub mod tensor;
pub mod training;
