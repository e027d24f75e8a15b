//! Cross-attention and sparse-causal spatial-temporal attention, plus the
//! hook protocol through which maps are captured and substituted.

mod toy;

use ndarray::{concatenate, s, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

pub use toy::{build_toy_denoiser, ConstantDenoiser, ToyConfig, ToyDenoiser};

use crate::error::{Error, Result};
use crate::latent::LatentVideo;
use crate::prompt::TokenizedPrompt;
use crate::store::{AttentionMap, MapKey, MapKind, RENORM_TOLERANCE};

/// Receives every attention map a layer computes and returns the map the
/// layer should actually use. The returned map must have the same shape and
/// be row-stochastic.
pub trait AttentionHook {
    fn on_map(&mut self, computed: AttentionMap) -> Result<AttentionMap>;
}

impl<F> AttentionHook for F
where
    F: FnMut(AttentionMap) -> Result<AttentionMap>,
{
    fn on_map(&mut self, computed: AttentionMap) -> Result<AttentionMap> {
        self(computed)
    }
}

/// Uses every computed map unchanged.
#[derive(Debug, Default, Clone, Copy)]
pub struct PassThrough;

impl AttentionHook for PassThrough {
    fn on_map(&mut self, computed: AttentionMap) -> Result<AttentionMap> {
        Ok(computed)
    }
}

/// Records a copy of every computed map, then defers to `inner`.
pub struct Capture<'a> {
    pub maps: Vec<AttentionMap>,
    inner: &'a mut dyn AttentionHook,
}

impl<'a> Capture<'a> {
    pub fn new(inner: &'a mut dyn AttentionHook) -> Self {
        Self { maps: Vec::new(), inner }
    }
}

impl AttentionHook for Capture<'_> {
    fn on_map(&mut self, computed: AttentionMap) -> Result<AttentionMap> {
        self.maps.push(computed.clone());
        self.inner.on_map(computed)
    }
}

/// Query/key/value/output projections of one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    /// `feature_dim × heads·head_dim`
    pub w_q: Array2<f64>,
    /// `context_dim × heads·head_dim`
    pub w_k: Array2<f64>,
    /// `context_dim × heads·head_dim`
    pub w_v: Array2<f64>,
    /// `heads·head_dim × out_dim`
    pub w_o: Array2<f64>,
    pub heads: usize,
    pub head_dim: usize,
}

impl ProjectionSet {
    pub fn new(
        w_q: Array2<f64>,
        w_k: Array2<f64>,
        w_v: Array2<f64>,
        w_o: Array2<f64>,
        heads: usize,
        head_dim: usize,
    ) -> Result<Self> {
        let inner = heads * head_dim;
        if heads == 0 || head_dim == 0 {
            return Err(Error::InvalidRange("heads and head_dim must be positive".into()));
        }
        if w_q.ncols() != inner || w_k.ncols() != inner || w_v.ncols() != inner || w_o.nrows() != inner {
            return Err(Error::shape(
                format!("projections into {inner} = {heads}x{head_dim}"),
                (w_q.dim(), w_k.dim(), w_v.dim(), w_o.dim()),
            ));
        }
        if w_k.nrows() != w_v.nrows() {
            return Err(Error::shape(w_k.dim(), w_v.dim()));
        }
        Ok(Self { w_q, w_k, w_v, w_o, heads, head_dim })
    }

    /// Gaussian weights scaled by `1/sqrt(fan_in)`.
    pub fn random<R: Rng>(
        rng: &mut R,
        feature_dim: usize,
        context_dim: usize,
        out_dim: usize,
        heads: usize,
        head_dim: usize,
    ) -> Self {
        let inner = heads * head_dim;
        Self {
            w_q: gaussian(rng, feature_dim, inner),
            w_k: gaussian(rng, context_dim, inner),
            w_v: gaussian(rng, context_dim, inner),
            w_o: gaussian(rng, inner, out_dim),
            heads,
            head_dim,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn context_dim(&self) -> usize {
        self.w_k.nrows()
    }
}

pub(crate) fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let scale = 1.0 / (rows as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || {
        let v: f64 = rng.sample(StandardNormal);
        v * scale
    })
}

/// Row-softmax of scaled dot products, rounded to 32-bit.
fn attention_weights(q: &Array2<f64>, k: &Array2<f64>, heads: usize, head_dim: usize) -> Array3<f32> {
    let scale = 1.0 / (head_dim as f64).sqrt();
    let (nq, nk) = (q.nrows(), k.nrows());
    let mut out = Array3::<f32>::zeros((heads, nq, nk));
    for h in 0..heads {
        let cols = s![.., h * head_dim..(h + 1) * head_dim];
        let logits = q.slice(cols).dot(&k.slice(cols).t());
        for (i, row) in logits.outer_iter().enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&l| ((l - max) * scale).exp()).collect();
            let total: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                out[[h, i, j]] = (e / total) as f32;
            }
        }
    }
    out
}

/// `map · V` per head, concatenated and projected by `W_O`.
pub fn apply_attention(map: &AttentionMap, v: &Array2<f64>, proj: &ProjectionSet) -> Array2<f64> {
    let (heads, nq, _) = map.weights.dim();
    let hd = proj.head_dim;
    let mut mixed = Array2::<f64>::zeros((nq, heads * hd));
    for h in 0..heads {
        let w = map.weights.index_axis(Axis(0), h).mapv(|x| x as f64);
        let vh = v.slice(s![.., h * hd..(h + 1) * hd]);
        mixed.slice_mut(s![.., h * hd..(h + 1) * hd]).assign(&w.dot(&vh));
    }
    mixed.dot(&proj.w_o)
}

fn attend(
    queries: ArrayView2<f64>,
    context: ArrayView2<f64>,
    grid: (usize, usize),
    proj: &ProjectionSet,
    key: MapKey,
    hook: Option<&mut dyn AttentionHook>,
) -> Result<(Array2<f64>, AttentionMap)> {
    if queries.ncols() != proj.feature_dim() {
        return Err(Error::shape(format!("feature dim {}", proj.feature_dim()), queries.dim()));
    }
    if context.ncols() != proj.context_dim() {
        return Err(Error::shape(format!("context dim {}", proj.context_dim()), context.dim()));
    }
    if queries.nrows() != grid.0 * grid.1 {
        return Err(Error::shape(format!("{} query positions", grid.0 * grid.1), queries.nrows()));
    }
    let q = queries.dot(&proj.w_q);
    let k = context.dot(&proj.w_k);
    let v = context.dot(&proj.w_v);
    let computed = AttentionMap::new(key, grid, attention_weights(&q, &k, proj.heads, proj.head_dim))?;
    let used = match hook {
        None => computed,
        Some(hook) => {
            let shape = (computed.grid, computed.weights.dim());
            let used = hook.on_map(computed)?;
            if (used.grid, used.weights.dim()) != shape {
                return Err(Error::shape(shape, (used.grid, used.weights.dim())));
            }
            used.check_stochastic(RENORM_TOLERANCE)?;
            used
        }
    };
    let out = apply_attention(&used, &v, proj);
    Ok((out, used))
}

/// Attention from frame features (`positions × feature_dim`) to prompt token
/// embeddings (`tokens × embed_dim`). Returns the layer output and the map it used.
pub fn cross_attention(
    features: ArrayView2<f64>,
    grid: (usize, usize),
    prompt_embedding: ArrayView2<f64>,
    proj: &ProjectionSet,
    key: MapKey,
    hook: Option<&mut dyn AttentionHook>,
) -> Result<(Array2<f64>, AttentionMap)> {
    debug_assert_eq!(key.kind, MapKind::Cross);
    attend(features, prompt_embedding, grid, proj, key, hook)
}

/// Spatial-temporal attention of frame `k` over the positions of the anchor
/// (first) frame followed by the positions of frame `k - 1`.
///
/// For the first frame, pass its own features as both `anchor` and `previous`.
pub fn sparse_causal_attention(
    features: ArrayView2<f64>,
    anchor: ArrayView2<f64>,
    previous: ArrayView2<f64>,
    grid: (usize, usize),
    proj: &ProjectionSet,
    key: MapKey,
    hook: Option<&mut dyn AttentionHook>,
) -> Result<(Array2<f64>, AttentionMap)> {
    debug_assert_eq!(key.kind, MapKind::SpatialTemporal);
    if features.dim() != anchor.dim() || features.dim() != previous.dim() {
        return Err(Error::shape(
            features.dim(),
            format!("anchor {:?}, previous {:?}", anchor.dim(), previous.dim()),
        ));
    }
    let context = concatenate(Axis(0), &[anchor, previous])
        .map_err(|e| Error::BackendFailure(e.to_string()))?;
    attend(features, context.view(), grid, proj, key, hook)
}

/// One attention layer of a denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerInfo {
    pub id: usize,
    pub kind: MapKind,
    /// Query grid is the latent grid divided by this factor.
    pub downscale: usize,
}

/// Noise predictor `ε(z_t, t, p)` that routes every attention map through a hook.
///
/// Hooks are invoked in a fixed order that does not depend on the inputs.
pub trait DenoiserBackend: Send + Sync {
    fn name(&self) -> String;

    fn layers(&self) -> &[LayerInfo];

    fn encode_prompt(&self, prompt: &TokenizedPrompt) -> Result<Array2<f64>>;

    fn predict_noise(
        &self,
        latent: &LatentVideo,
        t: usize,
        prompt_embedding: &Array2<f64>,
        hook: &mut dyn AttentionHook,
    ) -> Result<LatentVideo>;
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn key(kind: MapKind) -> MapKey {
        MapKey { t: 1, layer: 0, kind, frame: 0 }
    }

    #[test]
    fn single_token_gives_unit_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let proj = ProjectionSet::random(&mut rng, 4, 5, 4, 1, 3);
        let feats = gaussian(&mut rng, 1, 4);
        let emb = gaussian(&mut rng, 1, 5);
        let (_, map) = cross_attention(feats.view(), (1, 1), emb.view(), &proj, key(MapKind::Cross), None).unwrap();
        assert_eq!(map.weights.as_slice().unwrap(), &[1.0]);
    }

    #[test]
    fn equal_logits_split_evenly() {
        let proj = ProjectionSet::new(
            Array2::eye(2),
            Array2::eye(2),
            Array2::eye(2),
            Array2::eye(2),
            1,
            2,
        )
        .unwrap();
        let feats = array![[1.0, 0.0]];
        let emb = array![[0.0, 2.0], [0.0, -3.0]];
        let (_, map) = cross_attention(feats.view(), (1, 1), emb.view(), &proj, key(MapKind::Cross), None).unwrap();
        assert_eq!(map.weights.as_slice().unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn hook_shape_and_stochasticity_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let proj = ProjectionSet::random(&mut rng, 4, 4, 4, 2, 2);
        let feats = gaussian(&mut rng, 4, 4);
        let emb = gaussian(&mut rng, 3, 4);
        let mut shrink = |m: AttentionMap| {
            AttentionMap::new(m.key, (1, 1), Array3::from_elem((2, 1, 3), 1.0 / 3.0))
        };
        assert!(matches!(
            cross_attention(feats.view(), (2, 2), emb.view(), &proj, key(MapKind::Cross), Some(&mut shrink)),
            Err(Error::ShapeMismatch { .. })
        ));
        let mut skew = |mut m: AttentionMap| {
            m.weights.fill(0.5);
            Ok(m)
        };
        assert!(matches!(
            cross_attention(feats.view(), (2, 2), emb.view(), &proj, key(MapKind::Cross), Some(&mut skew)),
            Err(Error::NotStochastic { .. })
        ));
    }

    #[test]
    fn hook_substitution_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let proj = ProjectionSet::random(&mut rng, 4, 6, 4, 2, 3);
        let feats = gaussian(&mut rng, 6, 4);
        let emb = gaussian(&mut rng, 5, 6);
        let mut other = AttentionMap::new(key(MapKind::Cross), (2, 3), Array3::from_elem((2, 6, 5), 0.2)).unwrap();
        other.weights[[1, 2, 0]] = 0.6;
        other.weights[[1, 2, 1]] = 0.0;
        other.weights[[1, 2, 2]] = 0.0;
        let sub = other.clone();
        let mut hook = move |_m: AttentionMap| Ok(sub.clone());
        let (out, used) =
            cross_attention(feats.view(), (2, 3), emb.view(), &proj, key(MapKind::Cross), Some(&mut hook)).unwrap();
        assert!(used.bit_eq(&other));
        let direct = apply_attention(&other, &emb.dot(&proj.w_v), &proj);
        assert!(out.iter().zip(direct.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn first_frame_duplicate_equals_self_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let proj = ProjectionSet::random(&mut rng, 5, 5, 5, 2, 4);
        let f = gaussian(&mut rng, 6, 5);
        let (st, st_map) = sparse_causal_attention(
            f.view(), f.view(), f.view(), (2, 3), &proj, key(MapKind::SpatialTemporal), None,
        )
        .unwrap();
        let (plain, _) = attend(f.view(), f.view(), (2, 3), &proj, key(MapKind::SpatialTemporal), None).unwrap();
        for (a, b) in st.iter().zip(plain.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        // each key's weight is split evenly between its two copies
        let w = &st_map.weights;
        for h in 0..2 {
            for i in 0..6 {
                for j in 0..6 {
                    assert_eq!(w[[h, i, j]], w[[h, i, j + 6]]);
                }
            }
        }
    }

    #[test]
    fn identical_frames_share_the_first_frame_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let proj = ProjectionSet::random(&mut rng, 3, 3, 3, 1, 2);
        let f = gaussian(&mut rng, 4, 3);
        let (_, first) = sparse_causal_attention(f.view(), f.view(), f.view(), (2, 2), &proj, key(MapKind::SpatialTemporal), None).unwrap();
        let g = f.clone();
        let (_, later) = sparse_causal_attention(g.view(), f.view(), f.view(), (2, 2), &proj, key(MapKind::SpatialTemporal), None).unwrap();
        assert!(first.bit_eq(&later));
    }

    #[test]
    fn mismatched_frames_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let proj = ProjectionSet::random(&mut rng, 3, 3, 3, 1, 2);
        let a = gaussian(&mut rng, 4, 3);
        let b = gaussian(&mut rng, 2, 3);
        assert!(sparse_causal_attention(a.view(), b.view(), a.view(), (2, 2), &proj, key(MapKind::SpatialTemporal), None).is_err());
    }
}
