//! Writing an attention store and an inverted-noise cache, then reading them back.

use image::RgbImage;
use vidattn::cli::{frame_hash, CachedLatent};
use vidattn::pipeline::{invert_window, Backends, PixelCodec};
use vidattn::{build_schedule, build_toy_denoiser, AttentionStore, Tokenizer, WordTokenizer};

fn main() -> vidattn::Result<()> {
    let frames: Vec<RgbImage> = (0..3).map(|k| RgbImage::from_fn(4, 4, |x, y| image::Rgb([(x * 60) as u8, (y * 60) as u8, k * 80]))).collect();
    let den = build_toy_denoiser(1, &[1, 2], 2)?;
    let codec = PixelCodec::identity();
    let prompt = WordTokenizer::default().tokenize("a boat on the lake")?;
    let schedule = build_schedule(30, 8.5e-4, 1.2e-2)?;
    let inv = invert_window(&frames, 0, &prompt, &schedule, Backends { denoiser: &den, codec: &codec })?;

    let bytes = inv.store.to_bytes();
    let back = AttentionStore::from_bytes(&bytes)?;
    back.check_complete()?;
    println!("store: {} entries, {} bytes, identical after reading: {}", back.len(), bytes.len(), back == inv.store);
    println!("  schedule hash {:016x}, prompt hash {:016x}", back.meta.schedule_hash, back.meta.prompt_hash);
    for (layer, kind) in back.layers() {
        println!("  layer {layer} {kind}");
    }

    let cached = CachedLatent { frame_hash: frame_hash(&frames), source_prompt: prompt.text.clone(), latent: inv.noise };
    let mut buf = Vec::new();
    cached.write_to(&mut buf)?;
    let again = CachedLatent::read_from(buf.as_slice())?;
    println!("noise cache: {} bytes, identical after reading: {}", buf.len(), again == cached);

    let mut truncated = bytes.clone();
    truncated.truncate(bytes.len() - 3);
    println!("truncated store: {}", AttentionStore::from_bytes(&truncated).unwrap_err());
    Ok(())
}
