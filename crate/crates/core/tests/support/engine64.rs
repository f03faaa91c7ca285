//! Gradient fixtures bound to the 64-bit engine.
pub use ugf_core64 as ugf;

#[path = "gradcases.rs"]
pub mod cases;
