//! Temporal consistency and frame accuracy with the thumbnail embedder.

use image::RgbImage;
use vidattn::metrics::{frame_acc_embeddings, tem_con_embeddings, to_tsv, EmbedderBackend, EvalReport, ToyEmbedder};

fn main() -> vidattn::Result<()> {
    let embedder = ToyEmbedder::default();
    let still: Vec<RgbImage> = vec![RgbImage::from_fn(32, 32, |x, y| image::Rgb([x as u8 * 8, y as u8 * 8, 90])); 6];
    let flicker: Vec<RgbImage> = (0..6)
        .map(|k| RgbImage::from_fn(32, 32, |x, y| image::Rgb([((x * 8 + k * 97) % 256) as u8, (y * 8) as u8, (k * 40) as u8])))
        .collect();
    let reports = [
        EvalReport::evaluate("still", &still, "a boat", "a kayak", &embedder)?,
        EvalReport::evaluate("flicker", &flicker, "a boat", "a kayak", &embedder)?,
        EvalReport::evaluate("single", &still[..1], "a boat", "a kayak", &embedder)?,
    ];
    eprintln!("embedder: {}", embedder.name());
    print!("{}", to_tsv(&reports));

    // Hand-built embeddings: six of eight frames sit closer to the edit prompt.
    let source = vec![1.0, 0.0];
    let edit = vec![0.0, 1.0];
    let mut frames = vec![vec![0.3, 0.7]; 6];
    frames.extend([vec![0.8, 0.2], vec![0.5, 0.5]]);
    println!("frame_acc = {:.4}", frame_acc_embeddings(&frames, &source, &edit)?);
    println!("tem_con   = {:.4}", tem_con_embeddings(&frames)?);
    Ok(())
}
