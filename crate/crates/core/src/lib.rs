pub mod characteristics;
pub mod cli;
pub mod coefficients;
pub mod config;
pub mod error;
pub mod field;
pub mod grid;
pub mod kernels;
pub mod mild;
pub mod mittag_leffler;
pub mod particles;
pub mod sensitivity;
pub mod spde;
pub(crate) mod tridiagonal;
