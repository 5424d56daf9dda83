use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows of a 16×1 recurrent block.
pub const BLOCK_ROWS: usize = 16;

/// Network dimensions. Field names follow the role of each layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub sample_rate: u32,
    /// Full-band samples per conditioning frame.
    pub frame_shift: usize,
    pub bands: usize,
    pub lp_order: usize,
    pub cond_dim: usize,
    pub segconv_prev: usize,
    pub segconv_next: usize,
    pub cond_proj: usize,
    pub embed_dim: usize,
    pub sparse_units: usize,
    pub dense_units: usize,
    pub head_bins: usize,
    pub logit_latent: usize,
    pub residual_hidden: usize,
}

impl NetworkConfig {
    fn full(sample_rate: u32, bands: usize, lp_order: usize) -> Self {
        Self {
            sample_rate,
            frame_shift: sample_rate as usize / 100,
            bands,
            lp_order,
            cond_dim: 80,
            segconv_prev: 5,
            segconv_next: 1,
            cond_proj: 320,
            embed_dim: 64,
            sparse_units: 1184,
            dense_units: 32,
            head_bins: 32,
            logit_latent: 16,
            residual_hidden: 32,
        }
    }

    /// 24 kHz, 6 bands.
    pub fn full_24k(lp_order: usize) -> Self {
        Self::full(24_000, 6, lp_order)
    }

    /// 16 kHz, 4 bands.
    pub fn full_16k(lp_order: usize) -> Self {
        Self::full(16_000, 4, lp_order)
    }

    /// Small 16 kHz network for desk-scale training and tests.
    pub fn toy_16k() -> Self {
        Self {
            lp_order: 2,
            cond_proj: 32,
            embed_dim: 8,
            sparse_units: 32,
            dense_units: 16,
            residual_hidden: 32,
            ..Self::full_16k(2)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sample_rate", self.sample_rate as usize),
            ("frame_shift", self.frame_shift),
            ("bands", self.bands),
            ("cond_dim", self.cond_dim),
            ("cond_proj", self.cond_proj),
            ("embed_dim", self.embed_dim),
            ("sparse_units", self.sparse_units),
            ("dense_units", self.dense_units),
            ("logit_latent", self.logit_latent),
            ("residual_hidden", self.residual_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.head_bins != crate::codec::HEAD_BINS {
            return Err(Error::Config(format!(
                "head_bins must be {}, got {}",
                crate::codec::HEAD_BINS,
                self.head_bins
            )));
        }
        if self.frame_shift % self.bands != 0 {
            return Err(Error::Config(format!(
                "frame shift {} not divisible by {} bands",
                self.frame_shift, self.bands
            )));
        }
        if self.sparse_units % BLOCK_ROWS != 0 {
            return Err(Error::Config(format!(
                "sparse GRU units {} not a multiple of {BLOCK_ROWS}",
                self.sparse_units
            )));
        }
        Ok(())
    }

    /// Band-rate steps per conditioning frame.
    pub fn steps_per_frame(&self) -> usize {
        self.frame_shift / self.bands
    }

    pub fn band_rate(&self) -> f64 {
        self.sample_rate as f64 / self.bands as f64
    }

    /// Frames seen by the segmental convolution.
    pub fn window(&self) -> usize {
        self.segconv_prev + 1 + self.segconv_next
    }

    pub fn segconv_dim(&self) -> usize {
        self.window() * self.cond_dim
    }

    pub fn sparse_input(&self) -> usize {
        self.cond_proj + 2 * self.bands * self.embed_dim
    }

    pub fn coarse_input(&self) -> usize {
        self.sparse_units + self.cond_proj
    }

    pub fn fine_input(&self) -> usize {
        self.sparse_units + self.cond_proj + self.bands * self.embed_dim
    }

    /// DualFC output: `[signs (M·K) | mags (M·K) | latent (M·L)]`.
    pub fn head_output(&self) -> usize {
        self.bands * (2 * self.lp_order + self.logit_latent)
    }
}
