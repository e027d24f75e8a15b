use ndarray::{Array4, ArrayView3, Zip};

use crate::error::{Error, Result};

/// A stack of `K` latent frames, each `C × H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    data: Array4<f64>,
    /// Global index of the first frame within the source clip.
    pub frame_offset: usize,
}

impl LatentVideo {
    pub fn new(data: Array4<f64>, frame_offset: usize) -> Result<Self> {
        let (k, c, h, w) = data.dim();
        if k == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::EmptyInput(format!("latent of shape {:?}", data.dim())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidRange("latent contains non-finite values".into()));
        }
        Ok(Self { data, frame_offset })
    }

    pub fn zeros(frames: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            data: Array4::zeros((frames, channels, height, width)),
            frame_offset: 0,
        }
    }

    pub fn filled(frames: usize, channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            data: Array4::from_elem((frames, channels, height, width), value),
            frame_offset: 0,
        }
    }

    /// `(K, C, H, W)`
    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }

    pub fn num_frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array4<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array4<f64> {
        self.data
    }

    pub fn frame(&self, k: usize) -> ArrayView3<'_, f64> {
        self.data.index_axis(ndarray::Axis(0), k)
    }

    pub fn ensure_same_shape(&self, other: &LatentVideo) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::shape(self.dim(), other.dim()));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &LatentVideo) -> f64 {
        Zip::from(&self.data)
            .and(&other.data)
            .fold(0.0f64, |m, a, b| m.max((a - b).abs()))
    }

    /// Euclidean norm over every entry.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &LatentVideo) -> f64 {
        Zip::from(&self.data)
            .and(&other.data)
            .fold(0.0f64, |s, a, b| s + (a - b) * (a - b))
            .sqrt()
    }

    /// Exact bitwise equality of every entry.
    pub fn bit_eq(&self, other: &LatentVideo) -> bool {
        self.dim() == other.dim()
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}
