//! Job configuration, frame and cache files, and the `invert`, `edit`,
//! `eval` and `inspect` commands.
//!
//! A job file is TOML:
//!
//! ```toml
//! seed = 0
//!
//! [prompts]
//! source = "a boat on the lake"
//! edit = "a kayak on the lake"
//! edit_words = ["boat->kayak"]
//!
//! [schedule]
//! steps = 30
//!
//! [edit]
//! enable_cross = true
//! enable_spatial = true
//! window_size = 8
//!
//! [backend.denoiser]
//! kind = "toy"
//!
//! [io]
//! input = "frames"
//! output = "edited"
//! cache = "cache"
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use image::{GrayImage, RgbImage};
use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::attention::{ConstantDenoiser, DenoiserBackend, ToyConfig, ToyDenoiser};
use crate::control::{source_heatmap, threshold_heatmap, BlendMask, ControllerConfig, DEFAULT_MASK_MAX_POSITIONS};
use crate::error::{Error, Result};
use crate::hash::ContentHasher;
use crate::latent::LatentVideo;
use crate::metrics::{to_tsv, EmbedderBackend, EvalReport, ToyEmbedder};
use crate::pipeline::{
    edit_inverted, invert_window, Backends, CodecBackend, EditJob, Inversion, PixelCodec, ProbeMode, WindowDiagnostics,
    WindowPlan, DEFAULT_MAX_FRAMES, DEFAULT_WINDOW_SIZE,
};
use crate::prompt::{align_edit_words, parse_word_pair, Tokenizer, WordTokenizer};
use crate::schedule::ScheduleConfig;
use crate::scheduler::sample;
use crate::store::{AttentionStore, MapKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobConfig {
    #[serde(default)]
    pub seed: u64,
    pub prompts: PromptConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub edit: EditConfig,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub io: IoConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    pub source: String,
    pub edit: String,
    /// `"source_word->edit_word"` pairs.
    #[serde(default)]
    pub edit_words: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditConfig {
    pub enable_cross: bool,
    pub enable_spatial: bool,
    pub window_size: usize,
    pub max_frames: usize,
    pub probe_mode: ProbeMode,
    /// Cross maps above this many query positions do not feed the blending mask.
    pub mask_max_positions: usize,
    /// Spatial-temporal layers to blend; all when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spatial_layers: Option<Vec<usize>>,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            enable_cross: true,
            enable_spatial: true,
            window_size: DEFAULT_WINDOW_SIZE,
            max_frames: DEFAULT_MAX_FRAMES,
            probe_mode: ProbeMode::Separate,
            mask_max_positions: DEFAULT_MASK_MAX_POSITIONS,
            spatial_layers: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub denoiser: DenoiserConfig,
    pub codec: CodecConfig,
    pub embedder: EmbedderConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DenoiserConfig {
    Toy(ToyParams),
    Constant { value: f64 },
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self::Toy(ToyParams::default())
    }
}

/// Toy denoiser parameters; the seed is the job seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyParams {
    pub resolutions: Vec<usize>,
    pub heads: usize,
    pub head_dim: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub input_gain: f64,
    pub output_gain: f64,
}

impl Default for ToyParams {
    fn default() -> Self {
        let c = ToyConfig::default();
        Self {
            resolutions: c.resolutions,
            heads: c.heads,
            head_dim: c.head_dim,
            feature_dim: c.feature_dim,
            embed_dim: c.embed_dim,
            input_gain: c.input_gain,
            output_gain: c.output_gain,
        }
    }
}

impl ToyParams {
    pub fn to_config(&self, seed: u64) -> ToyConfig {
        ToyConfig {
            seed,
            resolutions: self.resolutions.clone(),
            heads: self.heads,
            head_dim: self.head_dim,
            feature_dim: self.feature_dim,
            embed_dim: self.embed_dim,
            channels: 3,
            input_gain: self.input_gain,
            output_gain: self.output_gain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub downscale: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self { downscale: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[derive(Default)]
pub enum EmbedderConfig {
    #[default]
    Toy,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache: Option<PathBuf>,
}

/// A validated job with its backends instantiated.
pub struct ResolvedJob {
    pub job: EditJob,
    pub denoiser: Box<dyn DenoiserBackend>,
    pub codec: PixelCodec,
    pub embedder: ToyEmbedder,
    pub plan: WindowPlan,
}

impl ResolvedJob {
    pub fn backends(&self) -> Backends<'_> {
        Backends { denoiser: self.denoiser.as_ref(), codec: &self.codec }
    }
}

impl JobConfig {
    pub fn new(source: &str, edit: &str, edit_words: &[&str]) -> Self {
        Self {
            seed: 0,
            prompts: PromptConfig {
                source: source.into(),
                edit: edit.into(),
                edit_words: edit_words.iter().map(|s| s.to_string()).collect(),
            },
            schedule: ScheduleConfig::default(),
            edit: EditConfig::default(),
            backend: BackendConfig::default(),
            io: IoConfig::default(),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::config("config", e.message().to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn resolve(&self) -> Result<ResolvedJob> {
        if self.schedule.steps == 0 {
            return Err(Error::config("schedule.steps", "must be at least 1"));
        }
        let schedule = self
            .schedule
            .build()
            .map_err(|e| Error::config("schedule", e.to_string()))?;
        if self.edit.window_size == 0 {
            return Err(Error::config("edit.window_size", "must be at least 1"));
        }
        let tok = WordTokenizer::default();
        let source_prompt = tok.tokenize(&self.prompts.source)?;
        let edit_prompt = tok.tokenize(&self.prompts.edit)?;
        let pairs = self
            .prompts
            .edit_words
            .iter()
            .map(|s| parse_word_pair(s))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<(&str, &str)> = pairs.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        let spec = align_edit_words(&source_prompt, &edit_prompt, &refs)?
            .with_flags(self.edit.enable_cross, self.edit.enable_spatial)?;
        let denoiser: Box<dyn DenoiserBackend> = match &self.backend.denoiser {
            DenoiserConfig::Toy(p) => Box::new(ToyDenoiser::new(p.to_config(self.seed))?),
            DenoiserConfig::Constant { value } => Box::new(ConstantDenoiser::new(*value)),
        };
        if self.backend.codec.downscale == 0 {
            return Err(Error::config("backend.codec.downscale", "must be at least 1"));
        }
        Ok(ResolvedJob {
            job: EditJob {
                source_prompt,
                edit_prompt,
                spec,
                schedule,
                probe_mode: self.edit.probe_mode,
                controller: ControllerConfig {
                    mask_max_positions: self.edit.mask_max_positions,
                    spatial_layers: self.edit.spatial_layers.clone(),
                },
            },
            denoiser,
            codec: PixelCodec { downscale: self.backend.codec.downscale },
            embedder: match self.backend.embedder {
                EmbedderConfig::Toy => ToyEmbedder { seed: self.seed },
            },
            plan: WindowPlan { window_size: self.edit.window_size, max_frames: self.edit.max_frames, jobs: 0 },
        })
    }
}

fn is_frame_name(name: &str) -> bool {
    name.strip_prefix("frame_")
        .and_then(|s| s.strip_suffix(".png"))
        .is_some_and(|d| d.len() == 5 && d.bytes().all(|b| b.is_ascii_digit()))
}

/// Reads `frame_%05d.png` files in numeric order as 8-bit RGB.
pub fn read_frames(dir: &Path) -> Result<Vec<RgbImage>> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(is_frame_name))
        .collect();
    if names.is_empty() {
        return Err(Error::EmptyInput(format!("no frame_%05d.png files in {}", dir.display())));
    }
    names.sort();
    names.iter().map(|p| Ok(image::open(p)?.to_rgb8())).collect()
}

/// Writes frames as `frame_00001.png`, `frame_00002.png`, ...
pub fn write_frames(dir: &Path, frames: &[RgbImage]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in frames.iter().enumerate() {
        f.save(dir.join(format!("frame_{:05}.png", i + 1)))?;
    }
    Ok(())
}

pub fn frame_hash(frames: &[RgbImage]) -> u64 {
    let mut h = ContentHasher::new("frames");
    for f in frames {
        h.update(&f.width().to_le_bytes()).update(&f.height().to_le_bytes()).update(f.as_raw());
    }
    h.finish()
}

pub const LATENT_MAGIC: &[u8; 9] = b"ZTLATENT1";

/// Inverted noise of one window with the hash of the frames it came from.
///
/// Layout (little endian): magic, frame hash `u64`, frame offset `u64`,
/// prompt length `u32` and UTF-8 bytes, shape `4 × u32`, `f64` payload.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedLatent {
    pub frame_hash: u64,
    pub source_prompt: String,
    pub latent: LatentVideo,
}

impl CachedLatent {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(LATENT_MAGIC)?;
        w.write_all(&self.frame_hash.to_le_bytes())?;
        w.write_all(&(self.latent.frame_offset as u64).to_le_bytes())?;
        w.write_all(&(self.source_prompt.len() as u32).to_le_bytes())?;
        w.write_all(self.source_prompt.as_bytes())?;
        let (k, c, h, wd) = self.latent.dim();
        for d in [k, c, h, wd] {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&self.latent.to_le_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        fn take<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
            let mut b = [0u8; N];
            r.read_exact(&mut b).map_err(|_| Error::Format("truncated latent file".into()))?;
            Ok(b)
        }
        if &take::<_, 9>(&mut r)? != LATENT_MAGIC {
            return Err(Error::Format("not a latent file".into()));
        }
        let frame_hash = u64::from_le_bytes(take(&mut r)?);
        let frame_offset = u64::from_le_bytes(take(&mut r)?) as usize;
        let len = u32::from_le_bytes(take(&mut r)?) as usize;
        let mut text = vec![0u8; len];
        r.read_exact(&mut text).map_err(|_| Error::Format("truncated latent file".into()))?;
        let source_prompt = String::from_utf8(text).map_err(|_| Error::Format("prompt is not UTF-8".into()))?;
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = u32::from_le_bytes(take(&mut r)?) as usize;
        }
        let n = shape.iter().product::<usize>();
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() != n * 8 {
            return Err(Error::Format(format!("latent payload has {} bytes, expected {}", payload.len(), n * 8)));
        }
        let values: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let data = Array4::from_shape_vec((shape[0], shape[1], shape[2], shape[3]), values)
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(Self { frame_hash, source_prompt, latent: LatentVideo::new(data, frame_offset)? })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(fs::File::open(path)?))
    }
}

pub fn save_store(store: &AttentionStore, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    store.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_store(path: &Path) -> Result<AttentionStore> {
    AttentionStore::read_from(BufReader::new(fs::File::open(path)?))
}

/// Cache file paths of window `index`.
pub fn cache_paths(dir: &Path, index: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("window_{index:03}.latent")),
        dir.join(format!("window_{index:03}.store")),
    )
}

fn require_dir(opt: &Option<PathBuf>, field: &str) -> Result<PathBuf> {
    opt.clone().ok_or_else(|| Error::config(field, "path is not set"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvertSummary {
    pub windows: usize,
    pub store_entries: Vec<usize>,
    /// Max-abs latent reconstruction error per window, when reconstruction was requested.
    pub reconstruction_error: Vec<f64>,
}

/// Inverts every window and writes its noise and attention store to the cache directory.
/// With `reconstruct`, also samples back under the source prompt and writes the frames there.
pub fn cmd_invert(config: &JobConfig, jobs: usize, reconstruct: Option<&Path>) -> Result<InvertSummary> {
    let resolved = config.resolve()?;
    let input = require_dir(&config.io.input, "io.input")?;
    let cache = require_dir(&config.io.cache, "io.cache")?;
    let frames = read_frames(&input)?;
    fs::create_dir_all(&cache)?;
    let plan = WindowPlan { jobs, ..resolved.plan };
    let job = &resolved.job;
    let windows = plan.windows(frames.len())?;
    let results = plan.run(frames.len(), |r| {
        let index = r.start / plan.window_size;
        let window = &frames[r.clone()];
        let inv = invert_window(window, r.start, &job.source_prompt, &job.schedule, resolved.backends())?;
        let (latent_path, store_path) = cache_paths(&cache, index);
        CachedLatent {
            frame_hash: frame_hash(window),
            source_prompt: config.prompts.source.clone(),
            latent: inv.noise.clone(),
        }
        .save(&latent_path)?;
        save_store(&inv.store, &store_path)?;
        let recon = match reconstruct {
            Some(_) => {
                let s = sample(&inv.noise, &job.source_prompt, resolved.denoiser.as_ref(), &job.schedule, None)?;
                let z0 = resolved.codec.encode(window, r.start)?;
                let err = s.clean().max_abs_diff(&z0);
                Some((resolved.codec.decode(s.clean())?, err))
            }
            None => None,
        };
        Ok((inv.store.len(), recon))
    })?;
    let mut summary = InvertSummary { windows: windows.len(), store_entries: vec![], reconstruction_error: vec![] };
    let mut recon_frames = Vec::new();
    for (entries, recon) in results {
        summary.store_entries.push(entries);
        if let Some((f, err)) = recon {
            recon_frames.extend(f);
            summary.reconstruction_error.push(err);
        }
    }
    if let Some(dir) = reconstruct {
        write_frames(dir, &recon_frames)?;
    }
    Ok(summary)
}

/// Loads a cached inversion and checks it against the current frames, prompt and schedule.
pub fn load_cached_inversion(
    dir: &Path,
    index: usize,
    frames: &[RgbImage],
    config: &JobConfig,
    job: &EditJob,
) -> Result<Option<Inversion>> {
    let (latent_path, store_path) = cache_paths(dir, index);
    if !latent_path.exists() && !store_path.exists() {
        return Ok(None);
    }
    let stale = |path: &Path, reason: &str| Error::StaleCache { path: path.to_path_buf(), reason: reason.into() };
    let cached = CachedLatent::load(&latent_path)?;
    if cached.frame_hash != frame_hash(frames) {
        return Err(stale(&latent_path, "frame content changed"));
    }
    if cached.source_prompt != config.prompts.source {
        return Err(stale(&latent_path, "source prompt changed"));
    }
    let store = load_store(&store_path)?;
    if store.meta.prompt_hash != job.source_prompt.content_hash() {
        return Err(stale(&store_path, "source prompt hash differs"));
    }
    if store.meta.schedule_hash != job.schedule.content_hash() {
        return Err(stale(&store_path, "schedule hash differs"));
    }
    if store.meta.frames != frames.len() || cached.latent.num_frames() != frames.len() {
        return Err(stale(&store_path, "frame count differs"));
    }
    Ok(Some(Inversion { noise: cached.latent, store }))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EditReport {
    pub denoiser: String,
    pub codec: String,
    pub frames: usize,
    pub windows: Vec<WindowDiagnostics>,
}

pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";

/// Edits every window, reusing cached inversions when present, and writes
/// the frames and a diagnostics report to the output directory.
pub fn cmd_edit(config: &JobConfig, jobs: usize) -> Result<EditReport> {
    let resolved = config.resolve()?;
    let input = require_dir(&config.io.input, "io.input")?;
    let output = require_dir(&config.io.output, "io.output")?;
    let frames = read_frames(&input)?;
    let plan = WindowPlan { jobs, ..resolved.plan };
    let job = &resolved.job;
    let results = plan.run(frames.len(), |r| {
        let window = &frames[r.clone()];
        let cached = match &config.io.cache {
            Some(dir) => load_cached_inversion(dir, r.start / plan.window_size, window, config, job)?,
            None => None,
        };
        let inversion = match cached {
            Some(inv) => inv,
            None => invert_window(window, r.start, &job.source_prompt, &job.schedule, resolved.backends())?,
        };
        let (latent, diag) = edit_inverted(inversion, job, resolved.denoiser.as_ref())?;
        Ok((resolved.codec.decode(&latent)?, diag))
    })?;
    let mut out = Vec::with_capacity(frames.len());
    let mut windows = Vec::new();
    for (f, d) in results {
        out.extend(f);
        windows.push(d);
    }
    write_frames(&output, &out)?;
    let report = EditReport {
        denoiser: resolved.denoiser.name(),
        codec: resolved.codec.name(),
        frames: out.len(),
        windows,
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(output.join(DIAGNOSTICS_FILE), json + "\n")?;
    Ok(report)
}

/// Scores each frame directory and returns the TSV report.
pub fn cmd_eval(dirs: &[PathBuf], source_prompt: &str, edit_prompt: &str, embedder: &dyn EmbedderBackend) -> Result<String> {
    if dirs.is_empty() {
        return Err(Error::EmptyInput("no frame directories".into()));
    }
    let reports = dirs
        .iter()
        .map(|d| {
            let name = d.file_name().map_or_else(|| d.display().to_string(), |n| n.to_string_lossy().into_owned());
            EvalReport::evaluate(&name, &read_frames(d)?, source_prompt, edit_prompt, embedder)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(to_tsv(&reports))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InspectSummary {
    pub heatmaps: usize,
    pub degenerate: usize,
    /// `(tau, fraction of mask positions set over all written masks)`.
    pub coverage: Vec<(f64, f64)>,
    pub masks_per_tau: usize,
}

fn heat_to_gray(heat: &ndarray::Array2<f64>) -> GrayImage {
    let (h, w) = heat.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(heat[[y as usize, x as usize]] * 255.0).round().clamp(0.0, 255.0) as u8])
    })
}

/// Writes per-step heatmaps of `word` and thresholded masks for every `tau`.
///
/// Masks are produced at the grid of every spatial-temporal layer in the
/// store (cross layers when there are none), one PGM per `(t, layer, frame)`
/// under `tau_<tau>/`.
pub fn cmd_inspect(store_path: &Path, prompt: &str, word: &str, taus: &[f64], out: &Path) -> Result<InspectSummary> {
    let store = load_store(store_path)?;
    let tokenized = WordTokenizer::default().tokenize(prompt)?;
    if tokenized.content_hash() != store.meta.prompt_hash {
        return Err(Error::StoreMismatch(format!("store was not recorded with the prompt `{prompt}`")));
    }
    let (_, span) = tokenized.unique_span(word)?;
    let layers = store.layers();
    let target_kind = if layers.iter().any(|(_, k)| *k == MapKind::SpatialTemporal) {
        MapKind::SpatialTemporal
    } else {
        MapKind::Cross
    };
    fs::create_dir_all(out)?;
    for tau in taus {
        fs::create_dir_all(out.join(format!("tau_{tau:.2}")))?;
    }
    let mut summary = InspectSummary { heatmaps: 0, degenerate: 0, coverage: taus.iter().map(|&t| (t, 0.0)).collect(), masks_per_tau: 0 };
    let mut positions = 0usize;
    for t in 1..=store.meta.steps {
        for frame in 0..store.meta.frames {
            let heat = source_heatmap(store.at(t, MapKind::Cross, frame), std::slice::from_ref(&span), DEFAULT_MASK_MAX_POSITIONS)?;
            if let Some(h) = &heat {
                heat_to_gray(h).save(out.join(format!("heat_t{t}_f{frame}.pgm")))?;
                summary.heatmaps += 1;
            } else {
                log::warn!("degenerate heatmap at t={t}, frame {frame}");
                summary.degenerate += 1;
            }
            for target in store.at(t, target_kind, frame) {
                positions += target.queries();
                summary.masks_per_tau += 1;
                for (i, &tau) in taus.iter().enumerate() {
                    let mask = match &heat {
                        Some(h) => threshold_heatmap(h, target.grid, tau),
                        None => BlendMask::zeros(target.grid),
                    };
                    summary.coverage[i].1 += mask.bits.iter().filter(|b| **b).count() as f64;
                    let name = format!("mask_t{t}_l{}_f{frame}.pgm", target.key.layer);
                    mask.to_gray().save(out.join(format!("tau_{tau:.2}")).join(name))?;
                }
            }
        }
    }
    for c in &mut summary.coverage {
        c.1 /= positions.max(1) as f64;
    }
    Ok(summary)
}

const DEFAULTS_HELP: &str = "\
Defaults: 30 DDIM steps over a linear beta schedule from 0.00085 to 0.012; \
8-frame windows with no overlap, up to 64 frames; cross-attention swapping \
and spatial-temporal blending both on; blending-mask threshold fixed at 0.5; \
only cross maps at or below 32x32 positions feed the mask.";

#[derive(Debug, Parser)]
#[command(name = "vidattn", version, about = "Attention-controlled video editing", after_help = DEFAULTS_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Overrides the job seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for windows (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Invert frames and cache the noise and attention stores.
    Invert(InvertArgs),
    /// Edit frames, reusing cached inversions when they match.
    Edit(EditArgs),
    /// Report temporal consistency and frame accuracy as TSV.
    Eval(EvalArgs),
    /// Dump blending masks for a threshold sweep.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct JobPaths {
    /// TOML job file.
    #[arg(long, short)]
    pub config: PathBuf,
    /// Directory of frame_%05d.png files (overrides io.input).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Directory for cached inversions (overrides io.cache).
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InvertArgs {
    #[command(flatten)]
    pub paths: JobPaths,
    /// Also sample back under the source prompt and write frames here.
    #[arg(long)]
    pub reconstruct: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[command(flatten)]
    pub paths: JobPaths,
    /// Output directory (overrides io.output).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Frame directories, one report row each.
    #[arg(required = true)]
    pub dirs: Vec<PathBuf>,
    #[arg(long)]
    pub source_prompt: String,
    #[arg(long)]
    pub edit_prompt: String,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Attention store written by `invert`.
    #[arg(long)]
    pub store: PathBuf,
    /// Prompt the store was recorded with.
    #[arg(long)]
    pub prompt: String,
    /// Word whose footprint is masked.
    #[arg(long)]
    pub word: String,
    /// Thresholds to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = [0.3, 0.5, 0.7])]
    pub tau: Vec<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

fn load_job(paths: &JobPaths, seed: Option<u64>) -> Result<JobConfig> {
    let mut config = JobConfig::load(&paths.config)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    if paths.input.is_some() {
        config.io.input.clone_from(&paths.input);
    }
    if paths.cache.is_some() {
        config.io.cache.clone_from(&paths.cache);
    }
    Ok(config)
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Invert(a) => {
            let config = load_job(&a.paths, cli.seed)?;
            let s = cmd_invert(&config, cli.jobs, a.reconstruct.as_deref())?;
            eprintln!("inverted {} window(s), store entries {:?}", s.windows, s.store_entries);
            if !s.reconstruction_error.is_empty() {
                eprintln!("reconstruction max-abs latent error {:?}", s.reconstruction_error);
            }
        }
        Command::Edit(a) => {
            let mut config = load_job(&a.paths, cli.seed)?;
            if a.output.is_some() {
                config.io.output = a.output;
            }
            let r = cmd_edit(&config, cli.jobs)?;
            eprintln!("edited {} frame(s) in {} window(s)", r.frames, r.windows.len());
        }
        Command::Eval(a) => {
            let embedder = ToyEmbedder { seed: cli.seed.unwrap_or(0) };
            eprintln!("embedder: {}", embedder.name());
            let tsv = cmd_eval(&a.dirs, &a.source_prompt, &a.edit_prompt, &embedder)?;
            match a.output {
                Some(p) => fs::write(p, tsv)?,
                None => print!("{tsv}"),
            }
        }
        Command::Inspect(a) => {
            let s = cmd_inspect(&a.store, &a.prompt, &a.word, &a.tau, &a.out)?;
            for (tau, cov) in &s.coverage {
                eprintln!("tau {tau:.2}: coverage {cov:.4}");
            }
        }
    }
    Ok(())
}
