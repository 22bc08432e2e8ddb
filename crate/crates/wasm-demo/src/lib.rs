//! wasm-bindgen bindings for `www/index.html`.
//!
//! The exported functions are thin wrappers over [`demo`], which is plain Rust
//! and tested natively.

use wasm_bindgen::prelude::*;

pub mod demo;

fn js(e: protune::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// RGBA pixels of one image, clean on the left and corrupted on the right.
#[wasm_bindgen]
pub fn corruption_preview(kind: &str, severity: u8, class: u32, seed: u64) -> Result<Vec<u8>, JsError> {
    demo::corruption_preview(kind, severity, class as usize, seed).map_err(js)
}

/// Clean-vs-corrupt MSE at severities 1 to 5.
#[wasm_bindgen]
pub fn corruption_curve(kind: &str, seed: u64) -> Result<Vec<f64>, JsError> {
    demo::corruption_curve(kind, seed).map_err(js)
}

#[wasm_bindgen]
pub fn longtail_profile(classes: u32, head: u32, imbalance: f64) -> Result<Vec<u32>, JsError> {
    demo::longtail(classes as usize, head as usize, imbalance).map_err(js)
}

/// Trainable parameters of one prompt block on `channels` channels.
#[wasm_bindgen]
pub fn block_params(channels: u32, reduction: u32, kernel: u32, se_reduction: u32, learnable_beta: bool) -> Result<u32, JsError> {
    demo::block_params(channels as usize, reduction as usize, kernel as usize, se_reduction as usize, learnable_beta)
        .map(|n| n as u32)
        .map_err(js)
}

/// Prompt parameters of an insertion policy on the tiny CNN or ViT.
#[wasm_bindgen]
pub fn policy_params(family: &str, policy: &str, reduction: u32, kernel: u32) -> Result<u32, JsError> {
    demo::policy_params(family, policy, reduction as usize, kernel as usize).map(|n| n as u32).map_err(js)
}

/// RGBA pixels of `x + β·f(x)` for a randomly initialised block on one image.
#[wasm_bindgen]
pub fn blend_preview(beta: f64, kernel: u32, class: u32, seed: u64) -> Result<Vec<u8>, JsError> {
    demo::blend_preview(beta, kernel as usize, class as usize, seed).map_err(js)
}
