#![allow(dead_code)]

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidattn::attention::ToyConfig;
use vidattn::control::ControllerConfig;
use vidattn::pipeline::{EditJob, ProbeMode};
use vidattn::prompt::{align_edit_words, Tokenizer, WordTokenizer};
use vidattn::{build_schedule, ToyDenoiser};

pub const SOURCE: &str = "a boat on the lake";
pub const EDIT: &str = "a kayak on the lake";

pub fn random_frames(seed: u64, n: usize, size: u32) -> Vec<RgbImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| RgbImage::from_fn(size, size, |_, _| image::Rgb(rng.random())))
        .collect()
}

/// A bright square drifting right over a dark noisy background.
pub fn moving_square(n: usize, size: u32) -> Vec<RgbImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    (0..n)
        .map(|k| {
            RgbImage::from_fn(size, size, |x, y| {
                let x0 = (k as u32) % (size / 2);
                let inside = x >= x0 && x < x0 + size / 2 && y >= size / 4 && y < 3 * size / 4;
                let base = if inside { 220 } else { 30 };
                image::Rgb([base + rng.random_range(0..20), base, base / 2])
            })
        })
        .collect()
}

pub fn job(steps: usize, cross: bool, spatial: bool) -> EditJob {
    let tok = WordTokenizer::default();
    let source_prompt = tok.tokenize(SOURCE).unwrap();
    let edit_prompt = tok.tokenize(EDIT).unwrap();
    let spec = align_edit_words(&source_prompt, &edit_prompt, &[("boat", "kayak")])
        .unwrap()
        .with_flags(cross, spatial)
        .unwrap();
    EditJob {
        source_prompt,
        edit_prompt,
        spec,
        schedule: build_schedule(steps, 8.5e-4, 1.2e-2).unwrap(),
        probe_mode: ProbeMode::Separate,
        controller: ControllerConfig::default(),
    }
}

pub fn toy(seed: u64) -> ToyDenoiser {
    ToyDenoiser::new(ToyConfig { seed, ..Default::default() }).unwrap()
}

/// Toy denoiser whose output barely depends on the latent.
pub fn low_gain_toy(seed: u64) -> ToyDenoiser {
    ToyDenoiser::new(ToyConfig { seed, input_gain: 0.02, output_gain: 0.1, ..Default::default() }).unwrap()
}
