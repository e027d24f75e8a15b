//! Temporal consistency and frame accuracy over embedded frames.

use image::imageops::{resize, FilterType};
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hash::ContentHasher;

/// Image and text encoder into a shared unit-norm embedding space.
pub trait EmbedderBackend: Send + Sync {
    fn name(&self) -> String;
    fn dim(&self) -> usize;
    fn embed_image(&self, frame: &RgbImage) -> Result<Vec<f64>>;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
}

/// Bilinear 16×16 thumbnail for images, seeded Gaussian vector for text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ToyEmbedder {
    pub seed: u64,
}

const THUMB: u32 = 16;

pub fn normalize(v: &mut [f64]) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n <= 0.0 || !n.is_finite() {
        return Err(Error::Metric("cannot normalize a zero or non-finite vector".into()));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

impl EmbedderBackend for ToyEmbedder {
    fn name(&self) -> String {
        format!("toy-thumbnail(seed={})", self.seed)
    }

    fn dim(&self) -> usize {
        (THUMB * THUMB * 3) as usize
    }

    fn embed_image(&self, frame: &RgbImage) -> Result<Vec<f64>> {
        let small = resize(frame, THUMB, THUMB, FilterType::Triangle);
        let mut v: Vec<f64> = small.as_raw().iter().map(|&p| p as f64 / 127.5 - 1.0).collect();
        normalize(&mut v)?;
        Ok(v)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let mut h = ContentHasher::new("toy-text-embedding");
        h.update(&self.seed.to_le_bytes()).update(text.as_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
        let mut v: Vec<f64> = (0..self.dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
        normalize(&mut v)?;
        Ok(v)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    if a == b && a.iter().any(|x| *x != 0.0) {
        return Ok(1.0);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(na > 0.0 && nb > 0.0) {
        return Err(Error::Metric("cosine of a zero vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean cosine similarity of consecutive embeddings.
pub fn tem_con_embeddings(embeddings: &[Vec<f64>]) -> Result<f64> {
    if embeddings.len() < 2 {
        return Err(Error::Metric(format!(
            "temporal consistency needs at least 2 frames, got {}",
            embeddings.len()
        )));
    }
    let mut sum = 0.0;
    for pair in embeddings.windows(2) {
        sum += cosine(&pair[0], &pair[1])?;
    }
    Ok(sum / (embeddings.len() - 1) as f64)
}

/// Per-frame similarities to both prompts; a frame wins when strictly closer to the edit prompt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrameScore {
    pub source_similarity: f64,
    pub edit_similarity: f64,
    pub wins: bool,
}

pub fn frame_scores(frames: &[Vec<f64>], source_text: &[f64], edit_text: &[f64]) -> Result<Vec<FrameScore>> {
    if frames.is_empty() {
        return Err(Error::EmptyInput("no frames to score".into()));
    }
    if source_text == edit_text {
        return Err(Error::Metric("source and edit prompts embed identically".into()));
    }
    frames
        .iter()
        .map(|f| {
            let source_similarity = cosine(f, source_text)?;
            let edit_similarity = cosine(f, edit_text)?;
            Ok(FrameScore { source_similarity, edit_similarity, wins: edit_similarity > source_similarity })
        })
        .collect()
}

pub fn frame_acc_embeddings(frames: &[Vec<f64>], source_text: &[f64], edit_text: &[f64]) -> Result<f64> {
    let scores = frame_scores(frames, source_text, edit_text)?;
    Ok(scores.iter().filter(|s| s.wins).count() as f64 / scores.len() as f64)
}

pub fn embed_frames(frames: &[RgbImage], embedder: &dyn EmbedderBackend) -> Result<Vec<Vec<f64>>> {
    frames.iter().map(|f| embedder.embed_image(f)).collect()
}

pub fn tem_con(frames: &[RgbImage], embedder: &dyn EmbedderBackend) -> Result<f64> {
    tem_con_embeddings(&embed_frames(frames, embedder)?)
}

pub fn frame_acc(frames: &[RgbImage], source_prompt: &str, edit_prompt: &str, embedder: &dyn EmbedderBackend) -> Result<f64> {
    if source_prompt == edit_prompt {
        return Err(Error::Metric("source and edit prompts are identical".into()));
    }
    frame_acc_embeddings(
        &embed_frames(frames, embedder)?,
        &embedder.embed_text(source_prompt)?,
        &embedder.embed_text(edit_prompt)?,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub name: String,
    pub embedder: String,
    /// `None` for a single frame.
    pub tem_con: Option<f64>,
    pub frame_acc: f64,
    pub frames: Vec<FrameScore>,
}

impl EvalReport {
    pub fn evaluate(
        name: &str,
        frames: &[RgbImage],
        source_prompt: &str,
        edit_prompt: &str,
        embedder: &dyn EmbedderBackend,
    ) -> Result<Self> {
        if source_prompt == edit_prompt {
            return Err(Error::Metric("source and edit prompts are identical".into()));
        }
        let emb = embed_frames(frames, embedder)?;
        let scores = frame_scores(&emb, &embedder.embed_text(source_prompt)?, &embedder.embed_text(edit_prompt)?)?;
        let tem_con = match tem_con_embeddings(&emb) {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("{name}: {e}");
                None
            }
        };
        Ok(Self {
            name: name.to_string(),
            embedder: embedder.name(),
            tem_con,
            frame_acc: scores.iter().filter(|s| s.wins).count() as f64 / scores.len() as f64,
            frames: scores,
        })
    }

    pub const TSV_HEADER: &'static str = "name\ttem_con\tframe_acc";

    pub fn tsv_row(&self) -> String {
        let tc = self.tem_con.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}"));
        format!("{}\t{}\t{:.4}", self.name, tc, self.frame_acc)
    }
}

pub fn to_tsv(reports: &[EvalReport]) -> String {
    let mut out = String::from(EvalReport::TSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.tsv_row());
        out.push('\n');
    }
    out
}
