//! Deterministic DDIM sampling and inversion.
//!
//! Inversion visits `t = 1..=T`; the noise prediction for step `t` is taken
//! at the current latent `ẑ_{t-1}` with timestep argument `t`, and the maps
//! it produces are archived under index `t`. Denoising visits `t = T..=1`
//! and reads the archive at the same index.

use ndarray::Zip;

use crate::attention::{AttentionHook, Capture, DenoiserBackend, PassThrough};
use crate::error::{Error, Result};
use crate::latent::LatentVideo;
use crate::prompt::TokenizedPrompt;
use crate::schedule::NoiseSchedule;
use crate::store::{AttentionMap, AttentionStore, StoreMeta};

/// `z_{t-1}` from `z_t` given `ᾱ_t` and `ᾱ_{t-1}`.
#[inline]
pub fn sample_step_scalar(z_t: f64, eps: f64, alpha_t: f64, alpha_prev: f64) -> f64 {
    alpha_prev.sqrt() * (z_t - (1.0 - alpha_t).sqrt() * eps) / alpha_t.sqrt()
        + (1.0 - alpha_prev).sqrt() * eps
}

/// `ẑ_t` from `ẑ_{t-1}`; the exact inverse of [`sample_step_scalar`] at fixed `eps`.
#[inline]
pub fn invert_step_scalar(z_prev: f64, eps: f64, alpha_t: f64, alpha_prev: f64) -> f64 {
    alpha_t.sqrt() * (z_prev - (1.0 - alpha_prev).sqrt() * eps) / alpha_prev.sqrt()
        + (1.0 - alpha_t).sqrt() * eps
}

fn apply_step(
    z: &LatentVideo,
    eps: &LatentVideo,
    t: usize,
    sched: &NoiseSchedule,
    f: fn(f64, f64, f64, f64) -> f64,
) -> Result<LatentVideo> {
    sched.check_step(t)?;
    z.ensure_same_shape(eps)?;
    let (a_t, a_prev) = (sched.alpha_bar(t), sched.alpha_bar(t - 1));
    let data = Zip::from(z.data()).and(eps.data()).map_collect(|&z, &e| f(z, e, a_t, a_prev));
    LatentVideo::new(data, z.frame_offset)
}

pub fn ddim_sample_step(z_t: &LatentVideo, eps: &LatentVideo, t: usize, sched: &NoiseSchedule) -> Result<LatentVideo> {
    apply_step(z_t, eps, t, sched, sample_step_scalar)
}

pub fn ddim_invert_step(z_prev: &LatentVideo, eps: &LatentVideo, t: usize, sched: &NoiseSchedule) -> Result<LatentVideo> {
    apply_step(z_prev, eps, t, sched, invert_step_scalar)
}

/// Latents along a trajectory, indexed by timestep, and the maps captured on the way.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    /// `latents[t]` for `t = 0..=T`; `latents[0]` is the clean end.
    pub latents: Vec<LatentVideo>,
    pub store: AttentionStore,
}

impl TrajectoryRecord {
    pub fn clean(&self) -> &LatentVideo {
        &self.latents[0]
    }

    pub fn noised(&self) -> &LatentVideo {
        self.latents.last().expect("trajectory is never empty")
    }
}

fn store_meta(prompt: &TokenizedPrompt, sched: &NoiseSchedule, frames: usize) -> StoreMeta {
    StoreMeta {
        schedule_hash: sched.content_hash(),
        prompt_hash: prompt.content_hash(),
        frames,
        steps: sched.num_steps(),
    }
}

/// Wraps a controller so its failures carry timestep and layer context.
struct Contextual<'a> {
    t: usize,
    inner: &'a mut dyn AttentionHook,
}

impl AttentionHook for Contextual<'_> {
    fn on_map(&mut self, computed: AttentionMap) -> Result<AttentionMap> {
        let (layer, kind) = (computed.key.layer, computed.key.kind);
        self.inner.on_map(computed).map_err(|e| match e {
            e @ Error::Controller { .. } => e,
            e => Error::Controller { t: self.t, layer, kind, source: Box::new(e) },
        })
    }
}

fn backend_error(t: usize) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        e @ (Error::Controller { .. } | Error::Backend { .. }) => e,
        e => Error::Backend { t, source: Box::new(e) },
    }
}

/// One denoising step `z_t → z_{t-1}` under `controller`.
///
/// Returns the new latent and every map the denoiser computed (before substitution).
pub fn denoise_step(
    z_t: &LatentVideo,
    t: usize,
    prompt_embedding: &ndarray::Array2<f64>,
    denoiser: &dyn DenoiserBackend,
    sched: &NoiseSchedule,
    controller: Option<&mut dyn AttentionHook>,
) -> Result<(LatentVideo, Vec<AttentionMap>)> {
    sched.check_step(t)?;
    let mut passthrough = PassThrough;
    let mut ctx;
    let inner: &mut dyn AttentionHook = match controller {
        Some(c) => {
            ctx = Contextual { t, inner: c };
            &mut ctx
        }
        None => &mut passthrough,
    };
    let mut capture = Capture::new(inner);
    let eps = denoiser
        .predict_noise(z_t, t, prompt_embedding, &mut capture)
        .map_err(backend_error(t))?;
    let maps = capture.maps;
    Ok((ddim_sample_step(z_t, &eps, t, sched)?, maps))
}

/// DDIM inversion `ẑ_0 → ẑ_T`, archiving every cross and spatial-temporal map.
pub fn invert(
    z0: &LatentVideo,
    prompt: &TokenizedPrompt,
    denoiser: &dyn DenoiserBackend,
    sched: &NoiseSchedule,
) -> Result<TrajectoryRecord> {
    let emb = denoiser.encode_prompt(prompt)?;
    let mut store = AttentionStore::new(store_meta(prompt, sched, z0.num_frames()));
    let mut latents = Vec::with_capacity(sched.num_steps() + 1);
    latents.push(z0.clone());
    for t in 1..=sched.num_steps() {
        let z_prev = latents.last().expect("seeded with z0");
        let mut inner = PassThrough;
        let mut capture = Capture::new(&mut inner);
        let eps = denoiser
            .predict_noise(z_prev, t, &emb, &mut capture)
            .map_err(backend_error(t))?;
        for map in capture.maps {
            if map.key.t != t {
                return Err(Error::Backend {
                    t,
                    source: Box::new(Error::BackendFailure(format!(
                        "map tagged with timestep {} during step {t}",
                        map.key.t
                    ))),
                });
            }
            store.insert(map)?;
        }
        let next = ddim_invert_step(z_prev, &eps, t, sched)?;
        latents.push(next);
    }
    Ok(TrajectoryRecord { latents, store })
}

/// DDIM sampling `z_T → z_0`, optionally routing every map through `controller`.
///
/// The returned record's `latents[t]` is `z_t` and its store holds the maps
/// the denoiser computed at each step, before any substitution.
pub fn sample(
    z_t: &LatentVideo,
    prompt: &TokenizedPrompt,
    denoiser: &dyn DenoiserBackend,
    sched: &NoiseSchedule,
    mut controller: Option<&mut dyn AttentionHook>,
) -> Result<TrajectoryRecord> {
    let emb = denoiser.encode_prompt(prompt)?;
    let steps = sched.num_steps();
    let mut store = AttentionStore::new(store_meta(prompt, sched, z_t.num_frames()));
    let mut latents = vec![z_t.clone()];
    for t in (1..=steps).rev() {
        let current = latents.last().expect("seeded with z_T");
        let hook = controller.as_mut().map(|c| &mut **c as &mut dyn AttentionHook);
        let (next, maps) = denoise_step(current, t, &emb, denoiser, sched, hook)?;
        for m in maps {
            store.insert(m)?;
        }
        latents.push(next);
    }
    latents.reverse();
    Ok(TrajectoryRecord { latents, store })
}
