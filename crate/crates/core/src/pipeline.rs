//! Window-level editing and the long-video driver.

use std::sync::Arc;

use image::RgbImage;
use ndarray::Array4;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::DenoiserBackend;
use crate::control::{AttentionController, ControllerConfig, MaskCoverage};
use crate::error::{Error, Result};
use crate::latent::LatentVideo;
use crate::prompt::{EditSpec, TokenizedPrompt};
use crate::schedule::NoiseSchedule;
use crate::scheduler::{denoise_step, invert, sample};
use crate::store::AttentionStore;

pub const DEFAULT_WINDOW_SIZE: usize = 8;
pub const DEFAULT_MAX_FRAMES: usize = 64;

/// Maps pixel frames to latents and back.
pub trait CodecBackend: Send + Sync {
    fn name(&self) -> String;
    /// Latent grid is the frame size divided by this factor.
    fn downscale(&self) -> usize;
    fn encode(&self, frames: &[RgbImage], frame_offset: usize) -> Result<LatentVideo>;
    fn decode(&self, latent: &LatentVideo) -> Result<Vec<RgbImage>>;
}

/// Pixel codec: values `p / 127.5 − 1`, optionally average-pooled.
///
/// With `downscale == 1` decoding inverts encoding exactly on 8-bit frames.
/// Larger factors decode by nearest upsampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelCodec {
    pub downscale: usize,
}

impl PixelCodec {
    pub fn identity() -> Self {
        Self { downscale: 1 }
    }
}

impl Default for PixelCodec {
    fn default() -> Self {
        Self::identity()
    }
}

impl CodecBackend for PixelCodec {
    fn name(&self) -> String {
        format!("pixel(downscale={})", self.downscale)
    }

    fn downscale(&self) -> usize {
        self.downscale
    }

    fn encode(&self, frames: &[RgbImage], frame_offset: usize) -> Result<LatentVideo> {
        let (w, h) = check_frames(frames)?;
        let f = self.downscale;
        if f == 0 || !(w as usize).is_multiple_of(f) || !(h as usize).is_multiple_of(f) {
            return Err(Error::Resolution(format!("downscale {f} does not divide frame size {w}x{h}")));
        }
        let (lh, lw) = (h as usize / f, w as usize / f);
        let area = (f * f) as f64;
        let mut data = Array4::<f64>::zeros((frames.len(), 3, lh, lw));
        for (k, img) in frames.iter().enumerate() {
            for (x, y, px) in img.enumerate_pixels() {
                for c in 0..3 {
                    data[[k, c, y as usize / f, x as usize / f]] += px[c] as f64 / 127.5 - 1.0;
                }
            }
        }
        if f > 1 {
            data /= area;
        }
        LatentVideo::new(data, frame_offset)
    }

    fn decode(&self, latent: &LatentVideo) -> Result<Vec<RgbImage>> {
        let (k, c, lh, lw) = latent.dim();
        if c != 3 {
            return Err(Error::shape("3 latent channels", c));
        }
        let f = self.downscale;
        let data = latent.data();
        Ok((0..k)
            .map(|k| {
                RgbImage::from_fn((lw * f) as u32, (lh * f) as u32, |x, y| {
                    let (y, x) = (y as usize / f, x as usize / f);
                    image::Rgb(std::array::from_fn(|c| {
                        ((data[[k, c, y, x]] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
                    }))
                })
            })
            .collect())
    }
}

fn check_frames(frames: &[RgbImage]) -> Result<(u32, u32)> {
    let first = frames.first().ok_or_else(|| Error::EmptyInput("no frames".into()))?;
    let dims = first.dimensions();
    if let Some(bad) = frames.iter().position(|f| f.dimensions() != dims) {
        return Err(Error::shape(dims, (bad, frames[bad].dimensions())));
    }
    Ok(dims)
}

#[derive(Clone, Copy)]
pub struct Backends<'a> {
    pub denoiser: &'a dyn DenoiserBackend,
    pub codec: &'a dyn CodecBackend,
}

/// Which latent the probe pass denoises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    /// The probe follows its own trajectory from the inverted noise.
    #[default]
    Separate,
    /// The probe is evaluated on the controlled latent at every step.
    Shared,
}

/// Everything needed to edit one clip except the frames and backends.
#[derive(Debug, Clone)]
pub struct EditJob {
    pub source_prompt: TokenizedPrompt,
    pub edit_prompt: TokenizedPrompt,
    pub spec: EditSpec,
    pub schedule: NoiseSchedule,
    pub probe_mode: ProbeMode,
    pub controller: ControllerConfig,
}

/// Inverted noise and the archived source maps of one window.
#[derive(Debug, Clone)]
pub struct Inversion {
    pub noise: LatentVideo,
    pub store: AttentionStore,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub t: usize,
    pub probe_norm: f64,
    pub edit_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerActivity {
    pub layer: usize,
    pub kind: String,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowDiagnostics {
    pub frame_offset: usize,
    pub frames: usize,
    pub steps: Vec<StepDiagnostics>,
    pub activations: Vec<LayerActivity>,
    pub cross_substitutions: usize,
    pub spatial_substitutions: usize,
    pub renormalized: usize,
    pub mask_coverage: Vec<MaskCoverage>,
}

/// Encodes `frames` and inverts them under the source prompt.
pub fn invert_window(
    frames: &[RgbImage],
    frame_offset: usize,
    prompt: &TokenizedPrompt,
    schedule: &NoiseSchedule,
    backends: Backends<'_>,
) -> Result<Inversion> {
    let z0 = backends.codec.encode(frames, frame_offset)?;
    let record = invert(&z0, prompt, backends.denoiser, schedule)?;
    let noise = record.noised().clone();
    Ok(Inversion { noise, store: record.store })
}

/// Dual-trajectory controlled denoising from an existing inversion; returns the edited latent.
pub fn edit_inverted(
    inversion: Inversion,
    job: &EditJob,
    denoiser: &dyn DenoiserBackend,
) -> Result<(LatentVideo, WindowDiagnostics)> {
    let Inversion { noise, store } = inversion;
    if store.meta.schedule_hash != job.schedule.content_hash() || store.meta.steps != job.schedule.num_steps() {
        return Err(Error::StoreMismatch("store was recorded under a different schedule".into()));
    }
    if store.meta.prompt_hash != job.source_prompt.content_hash() {
        return Err(Error::StoreMismatch("store was recorded under a different source prompt".into()));
    }
    if store.meta.frames != noise.num_frames() {
        return Err(Error::StoreMismatch(format!(
            "store covers {} frames, latent has {}",
            store.meta.frames,
            noise.num_frames()
        )));
    }
    let mut controller =
        AttentionController::new(Arc::new(store), job.spec.clone(), job.controller.clone())?;
    let emb = denoiser.encode_prompt(&job.edit_prompt)?;
    let sched = &job.schedule;
    let mut probe = noise.clone();
    let mut edited = noise;
    let mut steps = Vec::with_capacity(sched.num_steps());
    for t in (1..=sched.num_steps()).rev() {
        let probe_input = match job.probe_mode {
            ProbeMode::Separate => &probe,
            ProbeMode::Shared => &edited,
        };
        let (probe_next, probe_maps) = denoise_step(probe_input, t, &emb, denoiser, sched, None)?;
        controller.begin_step(t, probe_maps)?;
        let (edited_next, _) = denoise_step(&edited, t, &emb, denoiser, sched, Some(&mut controller))?;
        steps.push(StepDiagnostics { t, probe_norm: probe_next.norm(), edit_norm: edited_next.norm() });
        probe = probe_next;
        edited = edited_next;
    }
    let stats = controller.into_stats();
    let diagnostics = WindowDiagnostics {
        frame_offset: edited.frame_offset,
        frames: edited.num_frames(),
        steps,
        activations: stats
            .activations
            .iter()
            .map(|(&(layer, kind), &steps)| LayerActivity { layer, kind: kind.to_string(), steps })
            .collect(),
        cross_substitutions: stats.cross_substitutions,
        spatial_substitutions: stats.spatial_substitutions,
        renormalized: stats.renormalized,
        mask_coverage: stats.mask_coverage,
    };
    Ok((edited, diagnostics))
}

/// Edits one window: encode, invert with the source prompt, controlled
/// denoising with the edit prompt, decode.
pub fn edit_window(
    frames: &[RgbImage],
    frame_offset: usize,
    job: &EditJob,
    backends: Backends<'_>,
) -> Result<(Vec<RgbImage>, WindowDiagnostics)> {
    let inversion = invert_window(frames, frame_offset, &job.source_prompt, &job.schedule, backends)?;
    let (edited, diagnostics) = edit_inverted(inversion, job, backends.denoiser)?;
    Ok((backends.codec.decode(&edited)?, diagnostics))
}

/// How a long clip is split and scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowPlan {
    pub window_size: usize,
    pub max_frames: usize,
    /// Worker threads for windows; 0 uses the global pool.
    pub jobs: usize,
}

impl Default for WindowPlan {
    fn default() -> Self {
        Self { window_size: DEFAULT_WINDOW_SIZE, max_frames: DEFAULT_MAX_FRAMES, jobs: 0 }
    }
}

impl WindowPlan {
    /// Consecutive non-overlapping frame ranges; the last one may be shorter.
    pub fn windows(&self, frames: usize) -> Result<Vec<std::ops::Range<usize>>> {
        if frames == 0 {
            return Err(Error::EmptyInput("no frames".into()));
        }
        if self.window_size == 0 {
            return Err(Error::config("window_size", "must be at least 1"));
        }
        if frames > self.max_frames {
            return Err(Error::config(
                "max_frames",
                format!("{frames} frames exceed the limit of {}", self.max_frames),
            ));
        }
        Ok((0..frames)
            .step_by(self.window_size)
            .map(|s| s..(s + self.window_size).min(frames))
            .collect())
    }

    /// Runs `f` on every window, in parallel, returning results in window order.
    pub fn run<T: Send>(
        &self,
        frames: usize,
        f: impl Fn(std::ops::Range<usize>) -> Result<T> + Sync,
    ) -> Result<Vec<T>> {
        let windows = self.windows(frames)?;
        let go = || windows.into_par_iter().map(&f).collect::<Result<Vec<T>>>();
        if self.jobs == 0 {
            go()
        } else {
            rayon::ThreadPoolBuilder::new()
                .num_threads(self.jobs)
                .build()
                .map_err(|e| Error::BackendFailure(e.to_string()))?
                .install(go)
        }
    }
}

/// Edits a clip window by window with no state shared between windows.
pub fn edit_video(
    frames: &[RgbImage],
    job: &EditJob,
    backends: Backends<'_>,
    plan: WindowPlan,
) -> Result<(Vec<RgbImage>, Vec<WindowDiagnostics>)> {
    let results = plan.run(frames.len(), |r| edit_window(&frames[r.clone()], r.start, job, backends))?;
    let mut out = Vec::with_capacity(frames.len());
    let mut diagnostics = Vec::with_capacity(results.len());
    for (f, d) in results {
        out.extend(f);
        diagnostics.push(d);
    }
    Ok((out, diagnostics))
}

/// Controller-free invert and sample under the source prompt.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub frames: Vec<RgbImage>,
    pub latent: LatentVideo,
    /// Max-abs latent error against the encoded input.
    pub latent_error: f64,
}

pub fn reconstruct(
    frames: &[RgbImage],
    prompt: &TokenizedPrompt,
    schedule: &NoiseSchedule,
    backends: Backends<'_>,
) -> Result<Reconstruction> {
    let z0 = backends.codec.encode(frames, 0)?;
    let inverted = invert(&z0, prompt, backends.denoiser, schedule)?;
    let sampled = sample(inverted.noised(), prompt, backends.denoiser, schedule, None)?;
    let latent = sampled.clean().clone();
    Ok(Reconstruction {
        frames: backends.codec.decode(&latent)?,
        latent_error: latent.max_abs_diff(&z0),
        latent,
    })
}
