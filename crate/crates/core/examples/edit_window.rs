//! Editing one 8-frame window under the three controller settings.

use image::RgbImage;
use vidattn::pipeline::{edit_inverted, invert_window, Backends, CodecBackend, EditJob, Inversion, PixelCodec, ProbeMode};
use vidattn::{align_edit_words, build_schedule, build_toy_denoiser, Tokenizer, WordTokenizer};

fn main() -> vidattn::Result<()> {
    let frames: Vec<RgbImage> = (0..8)
        .map(|k| RgbImage::from_fn(8, 8, |x, y| {
            let on = x >= k / 2 && x < 4 + k / 2 && (2..6).contains(&y);
            image::Rgb(if on { [210, 120, 40] } else { [30, 60, 90] })
        }))
        .collect();
    let den = build_toy_denoiser(3, &[1, 2], 2)?;
    let codec = PixelCodec::identity();
    let backends = Backends { denoiser: &den, codec: &codec };
    let tok = WordTokenizer::default();
    let source_prompt = tok.tokenize("a boat on the lake")?;
    let edit_prompt = tok.tokenize("a kayak on the lake")?;
    let spec = align_edit_words(&source_prompt, &edit_prompt, &[("boat", "kayak")])?;
    let schedule = build_schedule(30, 8.5e-4, 1.2e-2)?;
    let inversion = invert_window(&frames, 0, &source_prompt, &schedule, backends)?;
    let original = codec.encode(&frames, 0)?;

    let mut baseline = None;
    for (label, cross, spatial) in [("no control", false, false), ("cross only", true, false), ("cross + spatial", true, true)] {
        let job = EditJob {
            source_prompt: source_prompt.clone(),
            edit_prompt: edit_prompt.clone(),
            spec: spec.clone().with_flags(cross, spatial)?,
            schedule: schedule.clone(),
            probe_mode: ProbeMode::Separate,
            controller: Default::default(),
        };
        let (latent, diag) = edit_inverted(Inversion { noise: inversion.noise.clone(), store: inversion.store.clone() }, &job, &den)?;
        let from_base = baseline.as_ref().map_or(0.0, |b| latent.distance(b));
        let coverage = if diag.mask_coverage.is_empty() {
            0.0
        } else {
            diag.mask_coverage.iter().map(|m| m.coverage).sum::<f64>() / diag.mask_coverage.len() as f64
        };
        println!(
            "{label:<16} distance to input {:7.3}  to uncontrolled {:7.3}  cross swaps {:4}  spatial blends {:4}  mean mask coverage {:.2}",
            latent.distance(&original), from_base, diag.cross_substitutions, diag.spatial_substitutions, coverage
        );
        if baseline.is_none() {
            baseline = Some(latent);
        }
    }
    Ok(())
}
