//! Attention control: word-level cross-attention swapping, blending masks
//! from archived cross attention, and mask-selected spatial-temporal rows.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;
use std::sync::Arc;

use ndarray::{s, Array2, Axis};
use serde::Serialize;

use crate::attention::AttentionHook;
use crate::error::{Error, Result};
use crate::prompt::EditSpec;
use crate::store::{AttentionMap, AttentionStore, MapKey, MapKind, RENORM_TOLERANCE};

/// Fixed blending threshold of the edit path.
pub const BLEND_THRESHOLD: f64 = 0.5;
/// Cross maps with more query positions than this (32×32) do not feed the mask.
pub const DEFAULT_MASK_MAX_POSITIONS: usize = 32 * 32;

/// Swaps the edited words' columns into the archived source map.
///
/// The output follows the edit prompt's token layout: columns of edited
/// tokens are copied from `probe`, every other column is copied from the
/// aligned column of `source`. No values are mixed, so rows generally stop
/// summing to one.
pub fn cross_blender(source: &AttentionMap, probe: &AttentionMap, spec: &EditSpec) -> Result<AttentionMap> {
    if source.key.kind != MapKind::Cross || probe.key.kind != MapKind::Cross {
        return Err(Error::StoreMismatch("cross blending needs cross-attention maps".into()));
    }
    if (source.key.layer, source.key.frame) != (probe.key.layer, probe.key.frame) {
        return Err(Error::StoreMismatch(format!(
            "source map {:?} does not match probe map {:?}",
            source.key, probe.key
        )));
    }
    if source.grid != probe.grid || source.heads() != probe.heads() {
        return Err(Error::shape(
            (source.grid, source.heads()),
            (probe.grid, probe.heads()),
        ));
    }
    if source.keys() != spec.source_len() || probe.keys() != spec.edit_len() {
        return Err(Error::shape(
            (spec.source_len(), spec.edit_len()),
            (source.keys(), probe.keys()),
        ));
    }
    let mut out = probe.clone();
    for j in 0..spec.edit_len() {
        if let Some(src_j) = spec.source_token_for(j) {
            out.weights
                .slice_mut(s![.., .., j])
                .assign(&source.weights.slice(s![.., .., src_j]));
        }
    }
    Ok(out)
}

/// Bilinear resampling with half-pixel centres and clamped borders.
/// Equal sizes are returned unchanged.
pub fn resample_bilinear(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (in_h, in_w) = src.dim();
    if (in_h, in_w) == (out_h, out_w) {
        return src.clone();
    }
    let coord = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let c = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, c - lo as f64)
    };
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, wy) = coord(y, in_h, out_h);
        let (x0, x1, wx) = coord(x, in_w, out_w);
        let top = src[[y0, x0]] * (1.0 - wx) + src[[y0, x1]] * wx;
        let bottom = src[[y1, x0]] * (1.0 - wx) + src[[y1, x1]] * wx;
        top * (1.0 - wy) + bottom * wy
    })
}

/// Attention footprint of the given token spans over one frame, min-max
/// normalized to `[0, 1]`.
///
/// Each cross map with at most `max_positions` query positions contributes
/// its mean over heads and span tokens; maps of different resolutions are
/// bilinearly resampled to the finest contributing grid and averaged.
/// Returns `Ok(None)` when the aggregate is constant.
pub fn source_heatmap<'a>(
    maps: impl IntoIterator<Item = &'a AttentionMap>,
    spans: &[Range<usize>],
    max_positions: usize,
) -> Result<Option<Array2<f64>>> {
    let tokens: Vec<usize> = spans.iter().flat_map(|r| r.clone()).collect();
    if tokens.is_empty() {
        return Err(Error::MaskUndefined("no edited words".into()));
    }
    let mut per_layer = Vec::new();
    for m in maps {
        if m.key.kind != MapKind::Cross || m.queries() > max_positions {
            continue;
        }
        if let Some(&bad) = tokens.iter().find(|&&j| j >= m.keys()) {
            return Err(Error::shape(format!("token {bad} within {} keys", m.keys()), m.keys()));
        }
        let mut acc = Array2::<f64>::zeros(m.grid);
        for h in 0..m.heads() {
            let head = m.weights.index_axis(Axis(0), h);
            for &j in &tokens {
                let col = head.index_axis(Axis(1), j).mapv(|v| v as f64);
                let col = col.into_shape_with_order(m.grid).expect("queries match grid");
                acc += &col;
            }
        }
        acc /= (m.heads() * tokens.len()) as f64;
        per_layer.push(acc);
    }
    let Some(finest) = per_layer.iter().map(|a| a.dim()).max_by_key(|(h, w)| h * w) else {
        return Err(Error::MaskUndefined(format!(
            "no cross-attention maps at or below {max_positions} positions"
        )));
    };
    let mut heat = Array2::<f64>::zeros(finest);
    for a in &per_layer {
        heat += &resample_bilinear(a, finest.0, finest.1);
    }
    heat /= per_layer.len() as f64;
    let (lo, hi) = heat.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi - lo <= 1e-12 || hi.is_nan() || lo.is_nan() {
        return Ok(None);
    }
    heat.mapv_inplace(|v| (v - lo) / (hi - lo));
    Ok(Some(heat))
}

/// Binary mask over a query grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlendMask {
    pub grid: (usize, usize),
    pub bits: Vec<bool>,
}

impl BlendMask {
    pub fn zeros(grid: (usize, usize)) -> Self {
        Self { grid, bits: vec![false; grid.0 * grid.1] }
    }

    pub fn from_fn(grid: (usize, usize), f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..grid.0 * grid.1).map(|q| f(q / grid.1, q % grid.1)).collect();
        Self { grid, bits }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.grid.1 + x]
    }

    /// Fraction of positions set.
    pub fn coverage(&self) -> f64 {
        self.bits.iter().filter(|b| **b).count() as f64 / self.bits.len() as f64
    }

    pub fn is_subset_of(&self, other: &BlendMask) -> bool {
        self.grid == other.grid && self.bits.iter().zip(&other.bits).all(|(a, b)| !a || *b)
    }

    /// 0 or 255 per position.
    pub fn to_gray(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.grid.1 as u32, self.grid.0 as u32, |x, y| {
            image::Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }
}

/// Resamples a normalized heatmap to `target` and sets positions `>= tau`.
pub fn threshold_heatmap(heat: &Array2<f64>, target: (usize, usize), tau: f64) -> BlendMask {
    let r = resample_bilinear(heat, target.0, target.1);
    BlendMask { grid: target, bits: r.iter().map(|&v| v >= tau).collect() }
}

/// Blending mask for one frame at an arbitrary threshold.
///
/// A constant footprint yields an all-zero mask and a warning.
pub fn blending_mask_with_threshold<'a>(
    source_cross: impl IntoIterator<Item = &'a AttentionMap>,
    spans: &[Range<usize>],
    target: (usize, usize),
    tau: f64,
    max_positions: usize,
) -> Result<BlendMask> {
    match source_heatmap(source_cross, spans, max_positions)? {
        Some(heat) => Ok(threshold_heatmap(&heat, target, tau)),
        None => {
            log::warn!("degenerate source cross-attention footprint; blending mask is empty");
            Ok(BlendMask::zeros(target))
        }
    }
}

/// Blending mask for one frame from the archived source cross maps of the
/// edited words, thresholded at 0.5.
pub fn blending_mask<'a>(
    source_cross: impl IntoIterator<Item = &'a AttentionMap>,
    spec: &EditSpec,
    target: (usize, usize),
) -> Result<BlendMask> {
    if spec.num_edits() == 0 {
        return Err(Error::MaskUndefined("edit spec has no edited words".into()));
    }
    blending_mask_with_threshold(
        source_cross,
        &spec.source_spans(),
        target,
        BLEND_THRESHOLD,
        DEFAULT_MASK_MAX_POSITIONS,
    )
}

/// Takes the probe row for every masked query position and the source row elsewhere.
pub fn blend_rows(mask: &BlendMask, source: &AttentionMap, probe: &AttentionMap) -> Result<AttentionMap> {
    if !source.same_shape(probe) {
        return Err(Error::shape(source.weights.dim(), probe.weights.dim()));
    }
    if mask.grid != source.grid {
        return Err(Error::shape(source.grid, mask.grid));
    }
    let mut out = source.clone();
    out.key = probe.key;
    for (q, &on) in mask.bits.iter().enumerate() {
        if on {
            out.weights
                .slice_mut(s![.., q, ..])
                .assign(&probe.weights.slice(s![.., q, ..]));
        }
    }
    Ok(out)
}

/// Relaxes the spatial-temporal map inside the edited object's footprint.
pub fn spatial_blender<'a>(
    source_cross: impl IntoIterator<Item = &'a AttentionMap>,
    source_spatial: &AttentionMap,
    probe_spatial: &AttentionMap,
    spec: &EditSpec,
) -> Result<AttentionMap> {
    let mask = blending_mask(source_cross, spec, source_spatial.grid)?;
    blend_rows(&mask, source_spatial, probe_spatial)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    pub mask_max_positions: usize,
    /// Spatial-temporal layers that are blended; `None` means all.
    pub spatial_layers: Option<Vec<usize>>,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self { mask_max_positions: DEFAULT_MASK_MAX_POSITIONS, spatial_layers: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MaskCoverage {
    pub t: usize,
    pub layer: usize,
    pub frame: usize,
    pub coverage: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ControllerStats {
    /// Number of distinct steps in which each `(layer, kind)` was routed through the controller.
    pub activations: BTreeMap<(usize, MapKind), usize>,
    pub cross_substitutions: usize,
    pub spatial_substitutions: usize,
    pub renormalized: usize,
    pub mask_coverage: Vec<MaskCoverage>,
}

/// Hook for the controlled pass.
///
/// Before each step `t`, load the probe pass's maps with
/// [`AttentionController::begin_step`]. Cross maps are then replaced by the
/// cross-blended map (when enabled) and spatial-temporal maps by the
/// spatial-blended map (when enabled). With both switches off every map
/// passes through unchanged.
pub struct AttentionController {
    store: Arc<AttentionStore>,
    spec: EditSpec,
    config: ControllerConfig,
    step: Option<usize>,
    probe: HashMap<(usize, MapKind, usize), AttentionMap>,
    masks: HashMap<(usize, (usize, usize)), BlendMask>,
    last_seen: HashMap<(usize, MapKind), usize>,
    stats: ControllerStats,
}

pub fn make_controller(store: Arc<AttentionStore>, spec: EditSpec) -> Result<AttentionController> {
    AttentionController::new(store, spec, ControllerConfig::default())
}

impl AttentionController {
    pub fn new(store: Arc<AttentionStore>, spec: EditSpec, config: ControllerConfig) -> Result<Self> {
        store.check_complete()?;
        if store.meta.steps == 0 {
            return Err(Error::IncompleteStore("store covers no steps".into()));
        }
        Ok(Self {
            store,
            spec,
            config,
            step: None,
            probe: HashMap::new(),
            masks: HashMap::new(),
            last_seen: HashMap::new(),
            stats: ControllerStats::default(),
        })
    }

    pub fn spec(&self) -> &EditSpec {
        &self.spec
    }

    pub fn store(&self) -> &AttentionStore {
        &self.store
    }

    pub fn stats(&self) -> &ControllerStats {
        &self.stats
    }

    pub fn into_stats(self) -> ControllerStats {
        self.stats
    }

    pub fn is_identity(&self) -> bool {
        !self.spec.enable_cross() && !self.spec.enable_spatial()
    }

    /// Loads the probe pass's maps for step `t`.
    pub fn begin_step(&mut self, t: usize, probe_maps: Vec<AttentionMap>) -> Result<()> {
        if t == 0 || t > self.store.meta.steps {
            return Err(Error::TimestepOutOfRange { t, steps: self.store.meta.steps });
        }
        self.probe.clear();
        self.masks.clear();
        for m in probe_maps {
            if m.key.t != t {
                return Err(Error::StoreMismatch(format!("probe map {:?} loaded for step {t}", m.key)));
            }
            self.probe.insert((m.key.layer, m.key.kind, m.key.frame), m);
        }
        self.step = Some(t);
        Ok(())
    }

    fn probe_map(&self, key: &MapKey) -> Result<&AttentionMap> {
        self.probe.get(&(key.layer, key.kind, key.frame)).ok_or_else(|| {
            Error::StoreMismatch(format!("no probe map for {key:?}"))
        })
    }

    fn spatial_enabled_for(&self, layer: usize) -> bool {
        self.spec.enable_spatial()
            && self.config.spatial_layers.as_ref().is_none_or(|ls| ls.contains(&layer))
    }

    fn mask(&mut self, t: usize, frame: usize, grid: (usize, usize)) -> Result<&BlendMask> {
        if !self.masks.contains_key(&(frame, grid)) {
            if self.spec.num_edits() == 0 {
                return Err(Error::MaskUndefined("edit spec has no edited words".into()));
            }
            let mask = blending_mask_with_threshold(
                self.store.at(t, MapKind::Cross, frame),
                &self.spec.source_spans(),
                grid,
                BLEND_THRESHOLD,
                self.config.mask_max_positions,
            )?;
            self.masks.insert((frame, grid), mask);
        }
        Ok(&self.masks[&(frame, grid)])
    }

    fn record_activation(&mut self, key: &MapKey) {
        let slot = (key.layer, key.kind);
        if self.last_seen.get(&slot) != Some(&key.t) {
            self.last_seen.insert(slot, key.t);
            *self.stats.activations.entry(slot).or_default() += 1;
        }
    }
}

impl AttentionHook for AttentionController {
    fn on_map(&mut self, computed: AttentionMap) -> Result<AttentionMap> {
        let key = computed.key;
        self.record_activation(&key);
        if self.is_identity() {
            return Ok(computed);
        }
        if self.step != Some(key.t) {
            return Err(Error::StoreMismatch(format!(
                "probe maps for step {} have not been loaded",
                key.t
            )));
        }
        match key.kind {
            MapKind::Cross if self.spec.enable_cross() => {
                let source = self.store.require(&key)?;
                let mut blended = cross_blender(source, self.probe_map(&key)?, &self.spec)?;
                if blended.max_row_drift() > RENORM_TOLERANCE {
                    blended.renormalize_rows();
                    self.stats.renormalized += 1;
                }
                self.stats.cross_substitutions += 1;
                Ok(blended)
            }
            MapKind::SpatialTemporal if self.spatial_enabled_for(key.layer) => {
                let coverage = self.mask(key.t, key.frame, computed.grid)?.coverage();
                let mask = &self.masks[&(key.frame, computed.grid)];
                let out = blend_rows(mask, self.store.require(&key)?, self.probe_map(&key)?)?;
                self.stats.spatial_substitutions += 1;
                self.stats.mask_coverage.push(MaskCoverage { t: key.t, layer: key.layer, frame: key.frame, coverage });
                Ok(out)
            }
            _ => Ok(computed),
        }
    }
}

/// Replaces every computed map with the archived map at the same key.
pub struct SourceReplay<'a> {
    pub store: &'a AttentionStore,
}

impl AttentionHook for SourceReplay<'_> {
    fn on_map(&mut self, computed: AttentionMap) -> Result<AttentionMap> {
        let stored = self.store.require(&computed.key)?;
        if !stored.same_shape(&computed) {
            return Err(Error::shape(computed.weights.dim(), stored.weights.dim()));
        }
        Ok(stored.clone())
    }
}
