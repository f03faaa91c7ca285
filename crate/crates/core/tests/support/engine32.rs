//! Gradient fixtures bound to the 32-bit engine.
pub use ugf_core as ugf;

#[path = "gradcases.rs"]
pub mod cases;
