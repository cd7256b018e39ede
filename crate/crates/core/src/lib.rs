pub mod linalg;
pub mod spectra;
pub mod dynamics;
pub mod autodiff;
pub mod models;
pub mod training;
pub mod image;
pub mod cli;
