//! Shared fixtures for the benchmarks.

use fastfca::dsp::{stft_padded, ComplexSpectrogram, StftParams};
use fastfca::scenesim::{generate_scene, SceneConfig};

/// Desk-profile mixture STFT with `mics` channels and `seconds` of audio.
pub fn desk_mixture(mics: usize, seconds: f64, seed: u64) -> ComplexSpectrogram {
    let cfg = SceneConfig { mics, duration: seconds, ..SceneConfig::desk() };
    let scene = generate_scene(&cfg, seed).expect("desk scene");
    stft_padded(&scene.mixture, StftParams { window: 512, hop: 128 }).expect("stft")
}
