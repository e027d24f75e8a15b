//! Capturing and overriding attention maps through a hook.

use vidattn::attention::Capture;
use vidattn::{build_toy_denoiser, AttentionHook, AttentionMap, DenoiserBackend, LatentVideo, MapKind, Tokenizer, WordTokenizer};

fn main() -> vidattn::Result<()> {
    let den = build_toy_denoiser(7, &[1, 2], 2)?;
    for layer in den.layers() {
        println!("layer {} {:<16} downscale {}", layer.id, layer.kind.to_string(), layer.downscale);
    }

    let prompt = WordTokenizer::default().tokenize("a boat on the lake")?;
    let emb = den.encode_prompt(&prompt)?;
    let latent = LatentVideo::new(ndarray::Array4::from_shape_fn((3, 3, 4, 4), |(k, c, y, x)| ((k * 7 + c * 3 + y * 2 + x) as f64).cos()), 0)?;

    let mut passthrough = vidattn::PassThrough;
    let mut capture = Capture::new(&mut passthrough);
    let eps = den.predict_noise(&latent, 12, &emb, &mut capture)?;
    for m in &capture.maps {
        println!(
            "t={} layer={} {:<16} frame={} grid={:?} heads={} keys={} max row drift={:.1e}",
            m.key.t, m.key.layer, m.key.kind.to_string(), m.key.frame, m.grid, m.heads(), m.keys(), m.max_row_drift()
        );
    }

    // Flatten every cross map to uniform attention and see how far the prediction moves.
    let mut flatten = |mut m: AttentionMap| -> vidattn::Result<AttentionMap> {
        if m.key.kind == MapKind::Cross {
            let n = m.keys() as f32;
            m.weights.fill(1.0 / n);
        }
        Ok(m)
    };
    let hook: &mut dyn AttentionHook = &mut flatten;
    let flat = den.predict_noise(&latent, 12, &emb, hook)?;
    println!("noise prediction moved by {:.4} under uniform cross attention", flat.distance(&eps));
    Ok(())
}
