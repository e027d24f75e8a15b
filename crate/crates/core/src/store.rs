//! Attention maps and the archive of maps captured during inversion.
//!
//! The archive file layout (all integers little-endian):
//!
//! ```text
//! header   "ATNSTORE1" | schedule_hash u64 | prompt_hash u64 | frames u32 | steps u32 | entries u64
//! entry    byte_len u32 | t u32 | layer u32 | kind u8 | frame u32 | ndim u8 = 4
//!          | heads u32 | grid_h u32 | grid_w u32 | keys u32 | weights f32 * (heads*grid_h*grid_w*keys)
//! ```
//!
//! `byte_len` counts everything after itself. Weights are row-major over
//! `(head, query, key)` with queries laid out row-major over the grid.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};

use ndarray::{Array3, Axis};

use crate::error::{Error, Result};

pub const STORE_MAGIC: &[u8; 9] = b"ATNSTORE1";
/// Row sums may drift this far from one before a map is renormalized.
pub const RENORM_TOLERANCE: f64 = 1e-4;
/// Row sums of emitted maps must be within this of one.
pub const STOCHASTIC_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MapKind {
    Cross,
    SpatialTemporal,
}

impl MapKind {
    fn code(self) -> u8 {
        match self {
            MapKind::Cross => 0,
            MapKind::SpatialTemporal => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(MapKind::Cross),
            1 => Ok(MapKind::SpatialTemporal),
            _ => Err(Error::Format(format!("unknown map kind {c}"))),
        }
    }
}

impl fmt::Display for MapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MapKind::Cross => "cross",
            MapKind::SpatialTemporal => "spatial_temporal",
        })
    }
}

/// Where a map was produced: denoising timestep, layer, and frame (0-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MapKey {
    pub t: usize,
    pub layer: usize,
    pub kind: MapKind,
    pub frame: usize,
}

/// A row-stochastic attention map of shape `heads × queries × keys`.
///
/// Queries are the positions of a `grid.0 × grid.1` feature grid. For cross
/// attention the keys are prompt tokens; for spatial-temporal attention they
/// are the positions of the anchor frame followed by those of the previous frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub key: MapKey,
    pub grid: (usize, usize),
    pub weights: Array3<f32>,
}

impl AttentionMap {
    pub fn new(key: MapKey, grid: (usize, usize), weights: Array3<f32>) -> Result<Self> {
        let (_, q, _) = weights.dim();
        if q != grid.0 * grid.1 {
            return Err(Error::shape(grid.0 * grid.1, q));
        }
        Ok(Self { key, grid, weights })
    }

    pub fn heads(&self) -> usize {
        self.weights.dim().0
    }

    pub fn queries(&self) -> usize {
        self.weights.dim().1
    }

    pub fn keys(&self) -> usize {
        self.weights.dim().2
    }

    /// Largest deviation of any row sum from one.
    pub fn max_row_drift(&self) -> f64 {
        self.weights
            .lanes(Axis(2))
            .into_iter()
            .map(|row| (row.iter().map(|&w| w as f64).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn check_stochastic(&self, tol: f64) -> Result<()> {
        let drift = self.max_row_drift();
        if drift > tol || self.weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::NotStochastic {
                layer: self.key.layer,
                kind: self.key.kind,
                sum: 1.0 + drift,
            });
        }
        Ok(())
    }

    /// Rescales every row to sum to one. Rows summing to zero become uniform.
    pub fn renormalize_rows(&mut self) {
        let n = self.keys();
        for mut row in self.weights.lanes_mut(Axis(2)) {
            let s: f64 = row.iter().map(|&w| w as f64).sum();
            if s > 0.0 {
                row.mapv_inplace(|w| (w as f64 / s) as f32);
            } else {
                row.fill(1.0 / n as f32);
            }
        }
    }

    pub fn same_shape(&self, other: &AttentionMap) -> bool {
        self.grid == other.grid && self.weights.dim() == other.weights.dim()
    }

    pub fn bit_eq(&self, other: &AttentionMap) -> bool {
        self.key == other.key
            && self.same_shape(other)
            && self
                .weights
                .iter()
                .zip(other.weights.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StoreMeta {
    pub schedule_hash: u64,
    pub prompt_hash: u64,
    pub frames: usize,
    pub steps: usize,
}

/// Append-only archive of attention maps keyed by `(t, layer, kind, frame)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionStore {
    pub meta: StoreMeta,
    entries: BTreeMap<MapKey, AttentionMap>,
}

impl AttentionStore {
    pub fn new(meta: StoreMeta) -> Self {
        Self { meta, entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, map: AttentionMap) -> Result<()> {
        if self.entries.contains_key(&map.key) {
            return Err(Error::StoreMismatch(format!("duplicate entry {:?}", map.key)));
        }
        self.entries.insert(map.key, map);
        Ok(())
    }

    pub fn get(&self, key: &MapKey) -> Option<&AttentionMap> {
        self.entries.get(key)
    }

    pub fn require(&self, key: &MapKey) -> Result<&AttentionMap> {
        self.get(key)
            .ok_or_else(|| Error::IncompleteStore(format!("missing entry {key:?}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &AttentionMap> {
        self.entries.values()
    }

    /// Maps captured at timestep `t` for one frame and kind, in layer order.
    pub fn at(&self, t: usize, kind: MapKind, frame: usize) -> impl Iterator<Item = &AttentionMap> {
        self.entries
            .range(
                MapKey { t, layer: 0, kind: MapKind::Cross, frame: 0 }
                    ..MapKey { t: t + 1, layer: 0, kind: MapKind::Cross, frame: 0 },
            )
            .map(|(_, m)| m)
            .filter(move |m| m.key.kind == kind && m.key.frame == frame)
    }

    /// Distinct `(layer, kind)` pairs present.
    pub fn layers(&self) -> BTreeSet<(usize, MapKind)> {
        self.entries.keys().map(|k| (k.layer, k.kind)).collect()
    }

    /// Every `(t, layer, kind, frame)` for `t ∈ 1..=T`, `frame ∈ 0..K` present exactly once.
    pub fn check_complete(&self) -> Result<()> {
        let StoreMeta { frames, steps, .. } = self.meta;
        let layers = self.layers();
        for t in 1..=steps {
            for &(layer, kind) in &layers {
                for frame in 0..frames {
                    let key = MapKey { t, layer, kind, frame };
                    if !self.entries.contains_key(&key) {
                        return Err(Error::IncompleteStore(format!("missing entry {key:?}")));
                    }
                }
            }
        }
        let expected = steps * layers.len() * frames;
        if self.entries.len() != expected {
            return Err(Error::IncompleteStore(format!(
                "expected {expected} entries, found {}",
                self.entries.len()
            )));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(STORE_MAGIC)?;
        w.write_all(&self.meta.schedule_hash.to_le_bytes())?;
        w.write_all(&self.meta.prompt_hash.to_le_bytes())?;
        w.write_all(&u32_of(self.meta.frames)?.to_le_bytes())?;
        w.write_all(&u32_of(self.meta.steps)?.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        let mut buf = Vec::new();
        for m in self.entries.values() {
            buf.clear();
            let (heads, queries, keys) = m.weights.dim();
            debug_assert_eq!(queries, m.grid.0 * m.grid.1);
            for v in [m.key.t, m.key.layer] {
                buf.extend_from_slice(&u32_of(v)?.to_le_bytes());
            }
            buf.push(m.key.kind.code());
            buf.extend_from_slice(&u32_of(m.key.frame)?.to_le_bytes());
            buf.push(4);
            for v in [heads, m.grid.0, m.grid.1, keys] {
                buf.extend_from_slice(&u32_of(v)?.to_le_bytes());
            }
            for x in m.weights.iter() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&u32_of(buf.len())?.to_le_bytes())?;
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 9];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != STORE_MAGIC {
            return Err(Error::Format("not an attention store (bad magic)".into()));
        }
        let meta = StoreMeta {
            schedule_hash: read_u64(&mut r)?,
            prompt_hash: read_u64(&mut r)?,
            frames: read_u32(&mut r)? as usize,
            steps: read_u32(&mut r)? as usize,
        };
        let count = read_u64(&mut r)?;
        let mut store = AttentionStore::new(meta);
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf).map_err(truncated)?;
            let mut cur = buf.as_slice();
            let t = read_u32(&mut cur)? as usize;
            let layer = read_u32(&mut cur)? as usize;
            let kind = MapKind::from_code(read_u8(&mut cur)?)?;
            let frame = read_u32(&mut cur)? as usize;
            let ndim = read_u8(&mut cur)?;
            if ndim != 4 {
                return Err(Error::Format(format!("expected 4 dims, found {ndim}")));
            }
            let heads = read_u32(&mut cur)? as usize;
            let gh = read_u32(&mut cur)? as usize;
            let gw = read_u32(&mut cur)? as usize;
            let keys = read_u32(&mut cur)? as usize;
            let n = heads
                .checked_mul(gh * gw)
                .and_then(|x| x.checked_mul(keys))
                .ok_or_else(|| Error::Format("entry shape overflows".into()))?;
            if cur.len() != n * 4 {
                return Err(Error::Format(format!(
                    "entry payload has {} bytes, shape needs {}",
                    cur.len(),
                    n * 4
                )));
            }
            let data: Vec<f32> = cur
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let weights = Array3::from_shape_vec((heads, gh * gw, keys), data)
                .map_err(|e| Error::Format(e.to_string()))?;
            store.insert(AttentionMap::new(MapKey { t, layer, kind, frame }, (gh, gw), weights)?)?;
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after last entry".into()));
        }
        Ok(store)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }
}

fn u32_of(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in 32 bits")))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated attention store".into())
    } else {
        Error::Io(e)
    }
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(b[0])
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(t: usize, layer: usize, kind: MapKind, frame: usize, vals: Vec<f32>, grid: (usize, usize), keys: usize) -> AttentionMap {
        let heads = vals.len() / (grid.0 * grid.1 * keys);
        AttentionMap::new(
            MapKey { t, layer, kind, frame },
            grid,
            Array3::from_shape_vec((heads, grid.0 * grid.1, keys), vals).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn completeness() {
        let meta = StoreMeta { schedule_hash: 1, prompt_hash: 2, frames: 2, steps: 1 };
        let mut s = AttentionStore::new(meta);
        s.insert(map(1, 0, MapKind::Cross, 0, vec![0.5, 0.5], (1, 1), 2)).unwrap();
        assert!(s.check_complete().is_err());
        s.insert(map(1, 0, MapKind::Cross, 1, vec![1.0, 0.0], (1, 1), 2)).unwrap();
        s.check_complete().unwrap();
        assert!(s.insert(map(1, 0, MapKind::Cross, 1, vec![1.0, 0.0], (1, 1), 2)).is_err());
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(AttentionStore::from_bytes(b"NOTASTORE"), Err(Error::Format(_))));
        let mut s = AttentionStore::new(StoreMeta::default());
        s.insert(map(1, 0, MapKind::Cross, 0, vec![0.25; 4], (1, 1), 4)).unwrap();
        let bytes = s.to_bytes();
        assert!(AttentionStore::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(AttentionStore::from_bytes(&extra).is_err());
    }

    #[test]
    fn renormalize() {
        let mut m = map(1, 0, MapKind::Cross, 0, vec![0.2, 0.2, 0.0, 0.0], (2, 1), 2);
        assert!(m.check_stochastic(1e-5).is_err());
        m.renormalize_rows();
        assert_eq!(m.weights.as_slice().unwrap(), &[0.5, 0.5, 0.5, 0.5]);
        m.check_stochastic(1e-6).unwrap();
    }

    #[test]
    fn at_filters_by_kind_and_frame() {
        let mut s = AttentionStore::new(StoreMeta { frames: 2, steps: 2, ..Default::default() });
        for t in 1..=2 {
            for layer in 0..2 {
                let kind = if layer == 0 { MapKind::SpatialTemporal } else { MapKind::Cross };
                for f in 0..2 {
                    s.insert(map(t, layer, kind, f, vec![1.0], (1, 1), 1)).unwrap();
                }
            }
        }
        let got: Vec<_> = s.at(2, MapKind::Cross, 1).map(|m| m.key).collect();
        assert_eq!(got, vec![MapKey { t: 2, layer: 1, kind: MapKind::Cross, frame: 1 }]);
        s.check_complete().unwrap();
    }

    proptest! {
        #[test]
        fn serialization_is_bit_exact(
            seeds in prop::collection::vec((1usize..5, 0usize..4, any::<bool>(), 0usize..3, prop::collection::vec(any::<f32>(), 6)), 0..12),
            sh in any::<u64>(), ph in any::<u64>(),
        ) {
            let mut s = AttentionStore::new(StoreMeta { schedule_hash: sh, prompt_hash: ph, frames: 3, steps: 4 });
            for (t, layer, cross, frame, vals) in seeds {
                let kind = if cross { MapKind::Cross } else { MapKind::SpatialTemporal };
                let _ = s.insert(map(t, layer, kind, frame, vals, (1, 3), 2));
            }
            let bytes = s.to_bytes();
            let back = AttentionStore::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.meta, s.meta);
            prop_assert_eq!(back.len(), s.len());
            for (a, b) in s.iter().zip(back.iter()) {
                prop_assert!(a.bit_eq(b));
            }
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
