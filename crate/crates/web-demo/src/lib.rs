//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each export is a thin wrapper over a plain function so the logic is
//! testable natively; `JsError` only exists on the wasm side.

use std::f64::consts::PI;

use aver_core::data::{amplitude, frame_brightness, frame_theta_deg, pitch_hz, render_frame};
use aver_core::dsp::{mel_spectrogram, AudioClip, MelConfig};
use aver_core::losses::{ccc, pearson};
use wasm_bindgen::prelude::*;

pub const MAX_SECONDS: f64 = 10.0;
pub const MAX_FACE_SIZE: usize = 128;
/// Grating frequency used for demo frames, in cycles per pixel.
const FACE_FREQ: f64 = 0.1;

/// Log-mel spectrogram of the tone a clip with the given emotion would carry.
#[wasm_bindgen]
pub struct ToneMel {
    frames: Vec<f32>,
    n_frames: usize,
    n_mels: usize,
    pitch_hz: f64,
    amplitude: f64,
}

#[wasm_bindgen]
impl ToneMel {
    /// Row-major `[n_frames × n_mels]`.
    pub fn frames(&self) -> Vec<f32> {
        self.frames.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn n_frames(&self) -> usize {
        self.n_frames
    }
    #[wasm_bindgen(getter)]
    pub fn n_mels(&self) -> usize {
        self.n_mels
    }
    #[wasm_bindgen(getter)]
    pub fn pitch_hz(&self) -> f64 {
        self.pitch_hz
    }
    #[wasm_bindgen(getter)]
    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }
}

fn check_unit(name: &str, v: f64) -> Result<(), String> {
    if (-1.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(format!("{name} must lie in [-1, 1], got {v}"))
    }
}

pub fn tone_mel_impl(valence: f64, arousal: f64, seconds: f64) -> Result<ToneMel, String> {
    check_unit("valence", valence)?;
    check_unit("arousal", arousal)?;
    if !(0.1..=MAX_SECONDS).contains(&seconds) {
        return Err(format!("duration must lie in [0.1, {MAX_SECONDS}] s, got {seconds}"));
    }
    let cfg = MelConfig::default();
    let (f, a) = (pitch_hz(valence), amplitude(arousal));
    let rate = cfg.sample_rate as f64;
    let n = (seconds * rate).round() as usize;
    let samples = (0..n).map(|i| (a * (2.0 * PI * f * i as f64 / rate).sin()) as f32).collect();
    let clip = AudioClip::new(samples, cfg.sample_rate).map_err(|e| e.to_string())?;
    let mel = mel_spectrogram(&clip, &cfg).map_err(|e| e.to_string())?;
    Ok(ToneMel { n_frames: mel.n_frames, n_mels: mel.n_mels(), frames: mel.frames, pitch_hz: f, amplitude: a })
}

/// Render the video frame for an emotion point as RGBA bytes, `size × size`.
pub fn synth_face_impl(valence: f64, arousal: f64, size: usize, seed: u32) -> Result<Vec<u8>, String> {
    check_unit("valence", valence)?;
    check_unit("arousal", arousal)?;
    if !(4..=MAX_FACE_SIZE).contains(&size) {
        return Err(format!("size must lie in [4, {MAX_FACE_SIZE}], got {size}"));
    }
    let px = render_frame(seed as u64, 0, 0, [arousal as f32, valence as f32], FACE_FREQ, 0.0, size);
    // Channels are identical; the first plane is enough.
    let mut rgba = Vec::with_capacity(4 * size * size);
    for &v in &px[..size * size] {
        let g = ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
        rgba.extend_from_slice(&[g, g, g, 255]);
    }
    Ok(rgba)
}

/// `[ccc, pearson, mean_true, mean_pred, std_true, std_pred]`.
pub fn ccc_explore_impl(truth: &[f64], pred: &[f64]) -> Result<Vec<f64>, String> {
    let r = ccc(truth, pred).map_err(|e| e.to_string())?;
    let p = pearson(truth, pred).map_err(|e| e.to_string())?;
    Ok(vec![r.ccc, p, r.mean_true, r.mean_pred, r.std_true, r.std_pred])
}

#[wasm_bindgen]
pub fn tone_mel(valence: f64, arousal: f64, seconds: f64) -> Result<ToneMel, JsError> {
    tone_mel_impl(valence, arousal, seconds).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn synth_face(valence: f64, arousal: f64, size: usize, seed: u32) -> Result<Vec<u8>, JsError> {
    synth_face_impl(valence, arousal, size, seed).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn ccc_explore(truth: Vec<f64>, pred: Vec<f64>) -> Result<Vec<f64>, JsError> {
    ccc_explore_impl(&truth, &pred).map_err(|e| JsError::new(&e))
}

/// Orientation in degrees and brightness the frame encodes, for the page's legend.
#[wasm_bindgen]
pub fn face_encoding(valence: f64, arousal: f64) -> Vec<f64> {
    vec![frame_theta_deg(valence), frame_brightness(arousal)]
}
