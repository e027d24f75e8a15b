//! Desk-scale denoisers used in tests, examples and the default CLI backend.

use ndarray::{s, Array2, Array3, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    cross_attention, gaussian, sparse_causal_attention, AttentionHook, DenoiserBackend, LayerInfo,
    ProjectionSet,
};
use crate::error::{Error, Result};
use crate::hash::ContentHasher;
use crate::latent::LatentVideo;
use crate::prompt::TokenizedPrompt;
use crate::store::{AttentionMap, MapKey, MapKind, RENORM_TOLERANCE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub seed: u64,
    /// Downscale factors; each level hosts one spatial-temporal and one cross layer.
    pub resolutions: Vec<usize>,
    pub heads: usize,
    pub head_dim: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub channels: usize,
    /// Scale of the latent contribution to layer features.
    pub input_gain: f64,
    /// Scale of the predicted noise.
    pub output_gain: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            resolutions: vec![1, 2],
            heads: 2,
            head_dim: 4,
            feature_dim: 8,
            embed_dim: 8,
            channels: 3,
            input_gain: 1.0,
            output_gain: 0.5,
        }
    }
}

struct Level {
    downscale: usize,
    w_in: Array2<f64>,
    spatial: ProjectionSet,
    cross: ProjectionSet,
    w_out: Array2<f64>,
}

/// Seeded two-branch attention network.
///
/// Each level average-pools the latent by its downscale factor, lifts the
/// channels into a feature space, adds a timestep embedding, and runs
/// sparse-causal attention across frames followed by cross attention to the
/// prompt. The attention outputs are projected back to latent channels,
/// upsampled, and summed over levels. There is no hidden state.
pub struct ToyDenoiser {
    config: ToyConfig,
    levels: Vec<Level>,
    layers: Vec<LayerInfo>,
}

pub fn build_toy_denoiser(seed: u64, resolutions: &[usize], heads: usize) -> Result<ToyDenoiser> {
    ToyDenoiser::new(ToyConfig {
        seed,
        resolutions: resolutions.to_vec(),
        heads,
        ..ToyConfig::default()
    })
}

impl ToyDenoiser {
    pub fn new(config: ToyConfig) -> Result<Self> {
        let mut distinct = config.resolutions.clone();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() < 2 || distinct.len() != config.resolutions.len() || distinct[0] == 0 {
            return Err(Error::Resolution(format!(
                "need at least two distinct positive downscale factors, got {:?}",
                config.resolutions
            )));
        }
        if config.heads == 0 || config.head_dim == 0 || config.feature_dim == 0 || config.embed_dim == 0 || config.channels == 0 {
            return Err(Error::InvalidRange("toy denoiser dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut levels = Vec::new();
        let mut layers = Vec::new();
        for (i, &downscale) in config.resolutions.iter().enumerate() {
            let d = config.feature_dim;
            levels.push(Level {
                downscale,
                w_in: gaussian(&mut rng, config.channels, d),
                spatial: ProjectionSet::random(&mut rng, d, d, d, config.heads, config.head_dim),
                cross: ProjectionSet::random(&mut rng, d, config.embed_dim, d, config.heads, config.head_dim),
                w_out: gaussian(&mut rng, d, config.channels),
            });
            layers.push(LayerInfo { id: 2 * i, kind: MapKind::SpatialTemporal, downscale });
            layers.push(LayerInfo { id: 2 * i + 1, kind: MapKind::Cross, downscale });
        }
        Ok(Self { config, levels, layers })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    fn time_embedding(&self, t: usize) -> Vec<f64> {
        let d = self.config.feature_dim;
        (0..d)
            .map(|i| {
                let freq = 1.0 / 10f64.powf(2.0 * (i / 2) as f64 / d as f64);
                let x = t as f64 * freq;
                if i % 2 == 0 { x.sin() } else { x.cos() }
            })
            .collect()
    }

    fn token_embedding(&self, id: u32, position: usize) -> Vec<f64> {
        let mut h = ContentHasher::new("toy-token-embedding");
        h.update(&self.config.seed.to_le_bytes()).update(&id.to_le_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
        let e = self.config.embed_dim;
        let base = gaussian(&mut rng, 1, e);
        (0..e)
            .map(|i| {
                let pos = 0.1 * ((position as f64 + 1.0) * (i as f64 + 1.0) * 0.37).sin();
                base[[0, i]] * (e as f64).sqrt() + pos
            })
            .collect()
    }
}

fn pool(frame: ArrayView3<f64>, f: usize) -> Array2<f64> {
    let (c, h, w) = frame.dim();
    let (gh, gw) = (h / f, w / f);
    let norm = (f * f) as f64;
    let mut out = Array2::zeros((gh * gw, c));
    for ch in 0..c {
        for y in 0..gh {
            for x in 0..gw {
                out[[y * gw + x, ch]] = frame.slice(s![ch, y * f..(y + 1) * f, x * f..(x + 1) * f]).sum() / norm;
            }
        }
    }
    out
}

impl DenoiserBackend for ToyDenoiser {
    fn name(&self) -> String {
        format!("toy(seed={}, resolutions={:?}, heads={})", self.config.seed, self.config.resolutions, self.config.heads)
    }

    fn layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    fn encode_prompt(&self, prompt: &TokenizedPrompt) -> Result<Array2<f64>> {
        let e = self.config.embed_dim;
        let mut out = Array2::zeros((prompt.len(), e));
        for (j, &id) in prompt.token_ids.iter().enumerate() {
            for (i, v) in self.token_embedding(id, j).into_iter().enumerate() {
                out[[j, i]] = v;
            }
        }
        Ok(out)
    }

    fn predict_noise(
        &self,
        latent: &LatentVideo,
        t: usize,
        prompt_embedding: &Array2<f64>,
        hook: &mut dyn AttentionHook,
    ) -> Result<LatentVideo> {
        let (frames, channels, height, width) = latent.dim();
        if channels != self.config.channels {
            return Err(Error::shape(format!("{} latent channels", self.config.channels), channels));
        }
        if prompt_embedding.ncols() != self.config.embed_dim {
            return Err(Error::shape(format!("embedding dim {}", self.config.embed_dim), prompt_embedding.ncols()));
        }
        let temb = ndarray::Array1::from(self.time_embedding(t));
        let mut eps = Array3::<f64>::zeros((frames, channels, height * width));
        for (li, level) in self.levels.iter().enumerate() {
            let f = level.downscale;
            if height % f != 0 || width % f != 0 {
                return Err(Error::Resolution(format!(
                    "downscale factor {f} does not divide latent grid {height}x{width}"
                )));
            }
            let grid = (height / f, width / f);
            let mut feats: Vec<Array2<f64>> = (0..frames)
                .map(|k| pool(latent.frame(k), f).dot(&level.w_in) * self.config.input_gain + &temb)
                .collect();

            let st_key = |frame| MapKey { t, layer: 2 * li, kind: MapKind::SpatialTemporal, frame };
            let mut spatial_out = Vec::with_capacity(frames);
            for k in 0..frames {
                let prev = k.saturating_sub(1);
                let (o, _) = sparse_causal_attention(
                    feats[k].view(),
                    feats[0].view(),
                    feats[prev].view(),
                    grid,
                    &level.spatial,
                    st_key(k),
                    Some(&mut *hook),
                )?;
                spatial_out.push(o);
            }
            for (h, o) in feats.iter_mut().zip(&spatial_out) {
                *h += o;
            }

            for k in 0..frames {
                let key = MapKey { t, layer: 2 * li + 1, kind: MapKind::Cross, frame: k };
                let (c, _) = cross_attention(
                    feats[k].view(),
                    grid,
                    prompt_embedding.view(),
                    &level.cross,
                    key,
                    Some(&mut *hook),
                )?;
                let branch = (&spatial_out[k] + &c).dot(&level.w_out);
                let mut target = eps.index_axis_mut(Axis(0), k);
                for y in 0..height {
                    for x in 0..width {
                        let q = (y / f) * grid.1 + x / f;
                        for ch in 0..channels {
                            target[[ch, y * width + x]] += self.config.output_gain * branch[[q, ch]];
                        }
                    }
                }
            }
        }
        let eps = eps
            .into_shape_with_order((frames, channels, height, width))
            .map_err(|e| Error::BackendFailure(e.to_string()))?;
        LatentVideo::new(eps, latent.frame_offset)
    }
}

/// Predicts the same noise value everywhere.
///
/// It still emits uniform attention maps for each configured layer so that
/// capture and substitution paths can be exercised; substituted maps are
/// validated and otherwise ignored.
pub struct ConstantDenoiser {
    pub value: f64,
    layers: Vec<LayerInfo>,
}

impl ConstantDenoiser {
    pub fn new(value: f64) -> Self {
        Self { value, layers: Vec::new() }
    }

    pub fn with_layers(value: f64, layers: Vec<LayerInfo>) -> Self {
        Self { value, layers }
    }
}

impl DenoiserBackend for ConstantDenoiser {
    fn name(&self) -> String {
        format!("constant({})", self.value)
    }

    fn layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    fn encode_prompt(&self, prompt: &TokenizedPrompt) -> Result<Array2<f64>> {
        Ok(Array2::zeros((prompt.len(), 1)))
    }

    fn predict_noise(
        &self,
        latent: &LatentVideo,
        t: usize,
        prompt_embedding: &Array2<f64>,
        hook: &mut dyn AttentionHook,
    ) -> Result<LatentVideo> {
        let (frames, channels, height, width) = latent.dim();
        for layer in &self.layers {
            let f = layer.downscale.max(1);
            if height % f != 0 || width % f != 0 {
                return Err(Error::Resolution(format!("downscale {f} vs grid {height}x{width}")));
            }
            let grid = (height / f, width / f);
            let queries = grid.0 * grid.1;
            let keys = match layer.kind {
                MapKind::Cross => prompt_embedding.nrows(),
                MapKind::SpatialTemporal => 2 * queries,
            };
            for frame in 0..frames {
                let key = MapKey { t, layer: layer.id, kind: layer.kind, frame };
                let map = AttentionMap::new(key, grid, Array3::from_elem((1, queries, keys), 1.0 / keys as f32))?;
                let used = hook.on_map(map)?;
                if used.grid != grid || used.weights.dim() != (1, queries, keys) {
                    return Err(Error::shape((1, queries, keys), used.weights.dim()));
                }
                used.check_stochastic(RENORM_TOLERANCE)?;
            }
        }
        Ok(LatentVideo::filled(frames, channels, height, width, self.value))
    }
}
