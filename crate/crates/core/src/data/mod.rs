//! On-disk formats and synthetic scenes.

pub mod blob;
pub mod manifest;
pub mod synthetic;
