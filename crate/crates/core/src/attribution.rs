//! Streaming saliency: `χ_n(α) = (1/n) Σ_c μ'_c · X̄^c(α)` with per-coordinate
//! standard errors, the per-chunk retention/goodness decomposition, and
//! percentile masks.
//!
//! Sums are 64-bit and flushed into the running totals in fixed blocks of
//! [`ACC_BLOCK`] samples. Accumulators built over block-aligned index ranges
//! and merged in ascending order are therefore bit-identical to one built
//! sequentially, whatever the number of workers.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunking::{ChunkError, ChunkGrid, SelectionVector};
use crate::models::LossValue;
use crate::sampler::{nearest_rank, AcceptedSample};
use crate::tensor::{InputTensor, TensorError};

pub const ACC_BLOCK: usize = 256;
pub const MPXS_MAGIC: &[u8; 4] = b"MPXS";
pub const MPXS_VERSION: u8 = 1;
pub const DECOMPOSITION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("accumulator holds no samples")]
    EmptyAccumulator,
    #[error(transparent)]
    Chunk(#[from] ChunkError),
    #[error("boundedness violated at flat index {index}: chi={chi}, x={x}")]
    BoundViolation { index: usize, chi: f64, x: f64 },
    #[error("decomposition identity violated at flat index {index} by {error:e}")]
    IdentityViolation { index: usize, error: f64 },
    #[error("accumulators describe different inputs")]
    IncompatibleMerge,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("bad saliency file: {0}")]
    BadFile(String),
}

/// Inverse-error weight `μ' = 1 / (μ + 1)`, in `(0, 1]`.
#[inline]
pub fn weight(mu: LossValue) -> f64 {
    1.0 / (mu.get() + 1.0)
}

#[derive(Debug, Clone, PartialEq)]
struct Sums {
    wx: Vec<f64>,
    wx2: Vec<f64>,
    retained: Vec<u64>,
    w_retained: Vec<f64>,
}

impl Sums {
    fn zeros(volume: usize, m: usize) -> Self {
        Self {
            wx: vec![0.0; volume],
            wx2: vec![0.0; volume],
            retained: vec![0; m],
            w_retained: vec![0.0; m],
        }
    }

    fn add(&mut self, other: &Sums) {
        for (a, b) in self.wx.iter_mut().zip(&other.wx) {
            *a += b;
        }
        for (a, b) in self.wx2.iter_mut().zip(&other.wx2) {
            *a += b;
        }
        for (a, b) in self.retained.iter_mut().zip(&other.retained) {
            *a += b;
        }
        for (a, b) in self.w_retained.iter_mut().zip(&other.w_retained) {
            *a += b;
        }
    }

    fn clear(&mut self) {
        self.wx.fill(0.0);
        self.wx2.fill(0.0);
        self.retained.fill(0);
        self.w_retained.fill(0.0);
    }
}

#[derive(Debug, Clone)]
pub struct Accumulator {
    input: Arc<InputTensor>,
    grid: Arc<ChunkGrid>,
    n: u64,
    totals: Sums,
    block: Sums,
    block_len: usize,
}

impl Accumulator {
    pub fn new(input: Arc<InputTensor>, grid: Arc<ChunkGrid>) -> Result<Self, ChunkError> {
        grid.check_tensor(&input)?;
        let (volume, m) = (grid.volume(), grid.m());
        Ok(Self {
            input,
            grid,
            n: 0,
            totals: Sums::zeros(volume, m),
            block: Sums::zeros(volume, m),
            block_len: 0,
        })
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn input(&self) -> &InputTensor {
        &self.input
    }

    pub fn grid(&self) -> &ChunkGrid {
        &self.grid
    }

    /// Adds one accepted sample given its masked tensor.
    pub fn accumulate(
        &mut self,
        masked: &InputTensor,
        s: &SelectionVector,
        mu: LossValue,
    ) -> Result<(), AttributionError> {
        self.grid.check_tensor(masked)?;
        self.grid.check_selection(s)?;
        let w = weight(mu);
        for (o, &v) in masked.values().iter().enumerate() {
            let c = w * v as f64;
            self.block.wx[o] += c;
            self.block.wx2[o] += c * c;
        }
        self.bump_chunks(s, w);
        Ok(())
    }

    /// Same as [`Accumulator::accumulate`] with `X̄ = X ∘ F^s` implied.
    /// Bit-identical to passing the materialised mask: masked-out
    /// coordinates would only add exact zeros.
    pub fn accumulate_selection(
        &mut self,
        s: &SelectionVector,
        mu: LossValue,
    ) -> Result<(), AttributionError> {
        self.grid.check_selection(s)?;
        let w = weight(mu);
        let xv = self.input.values();
        for j in s.retained() {
            for &o in self.grid.members(j) {
                let c = w * xv[o] as f64;
                self.block.wx[o] += c;
                self.block.wx2[o] += c * c;
            }
        }
        self.bump_chunks(s, w);
        Ok(())
    }

    fn bump_chunks(&mut self, s: &SelectionVector, w: f64) {
        for j in s.retained() {
            self.block.retained[j] += 1;
            self.block.w_retained[j] += w;
        }
        self.n += 1;
        self.block_len += 1;
        if self.block_len == ACC_BLOCK {
            self.flush();
        }
    }

    fn flush(&mut self) {
        if self.block_len > 0 {
            self.totals.add(&self.block);
            self.block.clear();
            self.block_len = 0;
        }
    }

    fn flushed_totals(&self) -> Sums {
        let mut t = self.totals.clone();
        if self.block_len > 0 {
            t.add(&self.block);
        }
        t
    }

    /// Field-wise addition. Equals sequential accumulation bit-for-bit when
    /// `self` covers a whole number of blocks and `other` at most one.
    pub fn merge(&mut self, other: &Accumulator) -> Result<(), AttributionError> {
        if !Arc::ptr_eq(&self.input, &other.input) && self.input != other.input
            || self.grid.chunk_shape() != other.grid.chunk_shape()
        {
            return Err(AttributionError::IncompatibleMerge);
        }
        self.flush();
        self.totals.add(&other.flushed_totals());
        self.n += other.n;
        Ok(())
    }

    pub fn retained_counts(&self) -> Vec<u64> {
        self.flushed_totals().retained
    }

    /// Builds an accumulator from accepted samples, one block per task,
    /// merged in ascending order.
    pub fn from_samples(
        input: Arc<InputTensor>,
        grid: Arc<ChunkGrid>,
        samples: &[AcceptedSample],
        pool: Option<&rayon::ThreadPool>,
    ) -> Result<Self, AttributionError> {
        let build = || -> Result<Vec<Accumulator>, AttributionError> {
            samples
                .par_chunks(ACC_BLOCK)
                .map(|block| {
                    let mut acc = Accumulator::new(input.clone(), grid.clone())?;
                    for s in block {
                        acc.accumulate_selection(&s.selection, s.mu)?;
                    }
                    Ok(acc)
                })
                .collect()
        };
        let parts = match pool {
            Some(p) => p.install(build)?,
            None => build()?,
        };
        let mut acc = Accumulator::new(input, grid)?;
        for part in &parts {
            acc.merge(part)?;
        }
        Ok(acc)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub shape: Vec<usize>,
    pub chi: Vec<f64>,
    pub se: Vec<f64>,
    pub n: u64,
    pub w_used: f64,
    pub p_hat: f64,
}

/// `chi = Σ/n`, `se = sqrt(max(0, Σ²/n − chi²) / n)` (biased variance).
pub fn finalize(acc: &Accumulator, w_used: f64, p_hat: f64) -> Result<SaliencyMap, AttributionError> {
    if acc.n == 0 {
        return Err(AttributionError::EmptyAccumulator);
    }
    let t = acc.flushed_totals();
    let n = acc.n as f64;
    let xv = acc.input.values();
    let mut chi = Vec::with_capacity(t.wx.len());
    let mut se = Vec::with_capacity(t.wx.len());
    for (o, (&s1, &s2)) in t.wx.iter().zip(&t.wx2).enumerate() {
        let c = s1 / n;
        let x = xv[o] as f64;
        if !(0.0..=x).contains(&c) {
            return Err(AttributionError::BoundViolation { index: o, chi: c, x });
        }
        chi.push(c);
        se.push(((s2 / n - c * c).max(0.0) / n).sqrt());
    }
    Ok(SaliencyMap {
        shape: acc.input.shape().to_vec(),
        chi,
        se,
        n: acc.n,
        w_used,
        p_hat,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkDecomposition {
    pub chunk: usize,
    /// Retention probability under the accepted samples.
    pub retention: f64,
    /// Mean weight over samples retaining the chunk; absent if never retained.
    pub goodness: Option<f64>,
    pub retained_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub n: u64,
    pub chunks: Vec<ChunkDecomposition>,
    /// Largest `|chi − X·A·G| / max(1, |chi|)` observed.
    pub max_identity_error: f64,
}

/// Per-chunk `A_j`, `G_j`, with the identity `chi = X·A·G` checked at every
/// coordinate of every retained chunk.
pub fn decompose(acc: &Accumulator) -> Result<Decomposition, AttributionError> {
    if acc.n == 0 {
        return Err(AttributionError::EmptyAccumulator);
    }
    let t = acc.flushed_totals();
    let n = acc.n as f64;
    let xv = acc.input.values();
    let mut chunks = Vec::with_capacity(acc.grid.m());
    let mut max_err = 0.0f64;
    for j in 0..acc.grid.m() {
        let count = t.retained[j];
        let retention = count as f64 / n;
        let goodness = (count > 0).then(|| t.w_retained[j] / count as f64);
        match goodness {
            Some(g) => {
                for &o in acc.grid.members(j) {
                    let chi = t.wx[o] / n;
                    let err = (chi - xv[o] as f64 * retention * g).abs() / chi.abs().max(1.0);
                    if err > DECOMPOSITION_TOLERANCE {
                        return Err(AttributionError::IdentityViolation { index: o, error: err });
                    }
                    max_err = max_err.max(err);
                }
            }
            None => {
                debug_assert!(acc.grid.members(j).iter().all(|&o| t.wx[o] == 0.0));
            }
        }
        chunks.push(ChunkDecomposition {
            chunk: j,
            retention,
            goodness,
            retained_count: count,
        });
    }
    Ok(Decomposition {
        n: acc.n,
        chunks,
        max_identity_error: max_err,
    })
}

/// Mean of `chi` over each chunk's coordinates.
pub fn chunk_scores(map: &SaliencyMap, grid: &ChunkGrid) -> Vec<f64> {
    (0..grid.m())
        .map(|j| {
            let members = grid.members(j);
            members.iter().map(|&o| map.chi[o]).sum::<f64>() / members.len() as f64
        })
        .collect()
}

/// Keeps chunks scoring at or above the nearest-rank `percentile` of the
/// chunk scores (ties kept).
pub fn threshold_mask(map: &SaliencyMap, grid: &ChunkGrid, percentile: f64) -> SelectionVector {
    let scores = chunk_scores(map, grid);
    let cut = nearest_rank(&scores, percentile).unwrap_or(0.0);
    SelectionVector::from_bits(scores.iter().map(|&s| s >= cut).collect())
}

fn f64_tensor(shape: &[usize], values: &[f64]) -> InputTensor {
    InputTensor::from_parts_unchecked(shape.to_vec(), values.iter().map(|&v| v as f32).collect())
}

impl SaliencyMap {
    pub fn chi_tensor(&self) -> InputTensor {
        f64_tensor(&self.shape, &self.chi)
    }

    pub fn se_tensor(&self) -> InputTensor {
        f64_tensor(&self.shape, &self.se)
    }

    /// MPXS: magic · version · chi body · se body · u64 n · f64 W · f64 p̂.
    pub fn write_mpxs<W: Write>(&self, w: &mut W) -> Result<(), AttributionError> {
        w.write_all(MPXS_MAGIC).map_err(TensorError::from)?;
        w.write_u8(MPXS_VERSION).map_err(TensorError::from)?;
        self.chi_tensor().write_body(w)?;
        self.se_tensor().write_body(w)?;
        w.write_u64::<LittleEndian>(self.n).map_err(TensorError::from)?;
        w.write_f64::<LittleEndian>(self.w_used).map_err(TensorError::from)?;
        w.write_f64::<LittleEndian>(self.p_hat).map_err(TensorError::from)?;
        Ok(())
    }

    pub fn to_mpxs_bytes(&self) -> Result<Vec<u8>, AttributionError> {
        let mut out = Vec::new();
        self.write_mpxs(&mut out)?;
        Ok(out)
    }

    /// Decodes an MPXS file. Values come back at the stored 32-bit precision.
    pub fn from_mpxs_bytes(bytes: &[u8]) -> Result<Self, AttributionError> {
        if bytes.len() < 5 || &bytes[..4] != MPXS_MAGIC {
            return Err(AttributionError::BadFile("missing MPXS magic".into()));
        }
        if bytes[4] != MPXS_VERSION {
            return Err(AttributionError::BadFile(format!("version {}", bytes[4])));
        }
        let mut r = &bytes[5..];
        let chi = InputTensor::read_body(&mut r, true)?;
        let se = InputTensor::read_body(&mut r, true)?;
        if chi.shape() != se.shape() {
            return Err(AttributionError::BadFile("chi/se shape mismatch".into()));
        }
        let n = r.read_u64::<LittleEndian>().map_err(TensorError::from)?;
        let w_used = r.read_f64::<LittleEndian>().map_err(TensorError::from)?;
        let p_hat = r.read_f64::<LittleEndian>().map_err(TensorError::from)?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(TensorError::from)?;
        if !rest.is_empty() {
            return Err(AttributionError::BadFile(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self {
            shape: chi.shape().to_vec(),
            chi: chi.values().iter().map(|&v| v as f64).collect(),
            se: se.values().iter().map(|&v| v as f64).collect(),
            n,
            w_used,
            p_hat,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), AttributionError> {
        std::fs::write(path, self.to_mpxs_bytes()?).map_err(TensorError::from)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, AttributionError> {
        let bytes = std::fs::read(path).map_err(TensorError::from)?;
        Self::from_mpxs_bytes(&bytes)
    }
}
