//! wasm-bindgen entry points. Parameters arrive as JSON objects (missing
//! fields take their defaults) and results leave as JSON strings.

use serde::de::DeserializeOwned;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn call<P: DeserializeOwned, R: Serialize>(json: &str, f: impl FnOnce(&P) -> corrnet::Result<R>) -> Result<String, JsError> {
    let p: P = serde_json::from_str(json).map_err(|e| JsError::new(&e.to_string()))?;
    let r = f(&p).map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&r).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = phatGcc)]
pub fn phat_gcc(params: &str) -> Result<String, JsError> {
    call(params, super::phat_gcc)
}

#[wasm_bindgen(js_name = rirDecay)]
pub fn rir_decay(params: &str) -> Result<String, JsError> {
    call(params, super::rir_decay)
}

#[wasm_bindgen(js_name = publishedConfig)]
pub fn published_config(mics: usize, n_fft: usize) -> String {
    super::published_config_text(mics, n_fft)
}

#[wasm_bindgen(js_name = costSummary)]
pub fn cost_summary(config: &str, sample_rate: u32, hop: usize) -> Result<String, JsError> {
    let r = super::cost_summary(config, sample_rate, hop).map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&r).map_err(|e| JsError::new(&e.to_string()))
}
