//! Blending masks from an inverted clip at several thresholds.

use image::RgbImage;
use vidattn::control::{source_heatmap, threshold_heatmap, DEFAULT_MASK_MAX_POSITIONS};
use vidattn::pipeline::{CodecBackend, PixelCodec};
use vidattn::scheduler::invert;
use vidattn::{build_schedule, build_toy_denoiser, MapKind, Tokenizer, WordTokenizer};

fn main() -> vidattn::Result<()> {
    let frames: Vec<RgbImage> = (0..2)
        .map(|k| RgbImage::from_fn(8, 8, |x, y| {
            let on = x >= 2 + k && x < 6 + k && (2..6).contains(&y);
            image::Rgb(if on { [230, 200, 120] } else { [20, 40, 60] })
        }))
        .collect();
    let den = build_toy_denoiser(3, &[1, 2], 2)?;
    let prompt = WordTokenizer::default().tokenize("a boat on the lake")?;
    let z0 = PixelCodec::identity().encode(&frames, 0)?;
    let record = invert(&z0, &prompt, &den, &build_schedule(10, 8.5e-4, 1.2e-2)?)?;
    let (_, span) = prompt.unique_span("boat")?;

    for t in [1, 10] {
        let heat = source_heatmap(record.store.at(t, MapKind::Cross, 0), std::slice::from_ref(&span), DEFAULT_MASK_MAX_POSITIONS)?
            .expect("non-constant footprint");
        for tau in [0.3, 0.5, 0.7] {
            let mask = threshold_heatmap(&heat, (8, 8), tau);
            println!("t={t} tau={tau} coverage {:.2}", mask.coverage());
            for y in 0..8 {
                let row: String = (0..8).map(|x| if mask.get(y, x) { '#' } else { '.' }).collect();
                println!("  {row}");
            }
        }
    }
    Ok(())
}
