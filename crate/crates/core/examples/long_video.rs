//! A 40-frame clip edited as five independent 8-frame windows.

use std::time::Instant;

use image::RgbImage;
use vidattn::pipeline::{edit_video, edit_window, Backends, EditJob, PixelCodec, ProbeMode, WindowPlan};
use vidattn::{align_edit_words, build_schedule, build_toy_denoiser, Tokenizer, WordTokenizer};

fn main() -> vidattn::Result<()> {
    let frames: Vec<RgbImage> = (0..40u32)
        .map(|k| RgbImage::from_fn(8, 8, |x, y| image::Rgb([(x * 30 + k * 5) as u8, (y * 30) as u8, (k * 6) as u8])))
        .collect();
    let den = build_toy_denoiser(5, &[1, 2], 2)?;
    let codec = PixelCodec::identity();
    let backends = Backends { denoiser: &den, codec: &codec };
    let tok = WordTokenizer::default();
    let source_prompt = tok.tokenize("a car on the road")?;
    let edit_prompt = tok.tokenize("a tractor on the road")?;
    let job = EditJob {
        spec: align_edit_words(&source_prompt, &edit_prompt, &[("car", "tractor")])?,
        source_prompt,
        edit_prompt,
        schedule: build_schedule(30, 8.5e-4, 1.2e-2)?,
        probe_mode: ProbeMode::Separate,
        controller: Default::default(),
    };

    let start = Instant::now();
    let (edited, windows) = edit_video(&frames, &job, backends, WindowPlan::default())?;
    println!("{} frames in {} windows, {:.2?}", edited.len(), windows.len(), start.elapsed());
    for w in &windows {
        println!("  frames {:>2}..{:<2} cross swaps {}", w.frame_offset, w.frame_offset + w.frames, w.cross_substitutions);
    }
    let (third, _) = edit_window(&frames[16..24], 16, &job, backends)?;
    println!("window 3 edited alone matches: {}", third[..] == edited[16..24]);
    Ok(())
}
