//! Hyper-rectangular chunk grids and selection masks.
//!
//! Chunks are enumerated row-major over chunk indices. Boundary chunks are
//! ragged when an extent is not a multiple of the chunk extent.

use std::fmt;
use std::ops::Range;

use thiserror::Error;

use crate::tensor::InputTensor;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChunkError {
    #[error("rank mismatch: input has rank {input}, chunk shape has rank {chunk}")]
    RankMismatch { input: usize, chunk: usize },
    #[error("chunk extent {chunk} on axis {axis} must lie in 1..={input}")]
    ZeroChunkExtent { axis: usize, chunk: usize, input: usize },
    #[error("selection has {actual} bits but the grid has {expected} chunks")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("coordinate {coord:?} out of bounds for shape {shape:?}")]
    OutOfBounds { coord: Vec<usize>, shape: Vec<usize> },
    #[error("tensor shape {actual:?} does not match grid input shape {expected:?}")]
    ShapeMismatch { expected: Vec<usize>, actual: Vec<usize> },
    #[error("input shape must have rank >= 1 and positive extents")]
    EmptyShape,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkGrid {
    input_shape: Vec<usize>,
    chunk_shape: Vec<usize>,
    counts: Vec<usize>,
    m: usize,
    // flat offset -> owning chunk
    owner: Vec<u32>,
    // CSR layout of each chunk's flat offsets, ascending
    member_start: Vec<usize>,
    members: Vec<usize>,
}

impl ChunkGrid {
    pub fn new(input_shape: &[usize], chunk_shape: &[usize]) -> Result<Self, ChunkError> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(ChunkError::EmptyShape);
        }
        if input_shape.len() != chunk_shape.len() {
            return Err(ChunkError::RankMismatch {
                input: input_shape.len(),
                chunk: chunk_shape.len(),
            });
        }
        for (axis, (&d, &c)) in input_shape.iter().zip(chunk_shape).enumerate() {
            if c == 0 || c > d {
                return Err(ChunkError::ZeroChunkExtent {
                    axis,
                    chunk: c,
                    input: d,
                });
            }
        }
        let counts: Vec<usize> = input_shape
            .iter()
            .zip(chunk_shape)
            .map(|(&d, &c)| d.div_ceil(c))
            .collect();
        let m: usize = counts.iter().product();
        let volume: usize = input_shape.iter().product();

        let mut owner = vec![0u32; volume];
        let mut coord = vec![0usize; input_shape.len()];
        for slot in owner.iter_mut() {
            *slot = coord
                .iter()
                .zip(chunk_shape)
                .zip(&counts)
                .fold(0usize, |acc, ((&a, &c), &k)| acc * k + a / c) as u32;
            increment(&mut coord, input_shape);
        }

        let mut member_start = vec![0usize; m + 1];
        for &o in &owner {
            member_start[o as usize + 1] += 1;
        }
        for j in 0..m {
            member_start[j + 1] += member_start[j];
        }
        let mut fill = member_start.clone();
        let mut members = vec![0usize; volume];
        for (flat, &o) in owner.iter().enumerate() {
            members[fill[o as usize]] = flat;
            fill[o as usize] += 1;
        }

        Ok(Self {
            input_shape: input_shape.to_vec(),
            chunk_shape: chunk_shape.to_vec(),
            counts,
            m,
            owner,
            member_start,
            members,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn chunk_shape(&self) -> &[usize] {
        &self.chunk_shape
    }

    /// Chunks along each axis, `ceil(d_i / c_i)`.
    pub fn chunk_counts(&self) -> &[usize] {
        &self.counts
    }

    /// Total number of chunks.
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn volume(&self) -> usize {
        self.owner.len()
    }

    /// Index of the chunk containing `coord`.
    pub fn chunk_of(&self, coord: &[usize]) -> Result<usize, ChunkError> {
        let in_bounds = coord.len() == self.input_shape.len()
            && coord.iter().zip(&self.input_shape).all(|(&a, &d)| a < d);
        if !in_bounds {
            return Err(ChunkError::OutOfBounds {
                coord: coord.to_vec(),
                shape: self.input_shape.clone(),
            });
        }
        Ok(coord
            .iter()
            .zip(&self.chunk_shape)
            .zip(&self.counts)
            .fold(0, |acc, ((&a, &c), &k)| acc * k + a / c))
    }

    /// Owning chunk of a row-major flat offset.
    #[inline]
    pub fn chunk_of_offset(&self, flat: usize) -> usize {
        self.owner[flat] as usize
    }

    /// Per-axis coordinate ranges covered by chunk `j`.
    pub fn chunk_ranges(&self, j: usize) -> Vec<Range<usize>> {
        assert!(j < self.m, "chunk {j} out of range");
        let mut rest = j;
        let mut idx = vec![0usize; self.counts.len()];
        for axis in (0..self.counts.len()).rev() {
            idx[axis] = rest % self.counts[axis];
            rest /= self.counts[axis];
        }
        idx.iter()
            .zip(&self.chunk_shape)
            .zip(&self.input_shape)
            .map(|((&i, &c), &d)| i * c..((i + 1) * c).min(d))
            .collect()
    }

    /// Flat offsets belonging to chunk `j`, ascending.
    pub fn members(&self, j: usize) -> &[usize] {
        &self.members[self.member_start[j]..self.member_start[j + 1]]
    }

    pub fn chunk_volume(&self, j: usize) -> usize {
        self.member_start[j + 1] - self.member_start[j]
    }

    pub fn check_tensor(&self, x: &InputTensor) -> Result<(), ChunkError> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(ChunkError::ShapeMismatch {
                expected: self.input_shape.clone(),
                actual: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn check_selection(&self, s: &SelectionVector) -> Result<(), ChunkError> {
        if s.len() != self.m {
            return Err(ChunkError::LengthMismatch {
                expected: self.m,
                actual: s.len(),
            });
        }
        Ok(())
    }
}

fn increment(coord: &mut [usize], shape: &[usize]) {
    for axis in (0..coord.len()).rev() {
        coord[axis] += 1;
        if coord[axis] < shape[axis] {
            return;
        }
        coord[axis] = 0;
    }
}

pub fn build_grid(input_shape: &[usize], chunk_shape: &[usize]) -> Result<ChunkGrid, ChunkError> {
    ChunkGrid::new(input_shape, chunk_shape)
}

/// Which chunks are retained (`true`) or zeroed (`false`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SelectionVector {
    bits: Vec<bool>,
}

impl SelectionVector {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn all(m: usize) -> Self {
        Self { bits: vec![true; m] }
    }

    pub fn none(m: usize) -> Self {
        Self { bits: vec![false; m] }
    }

    /// Bit `j` of `mask` selects chunk `j`. Requires `m <= 64`.
    pub fn from_mask(mask: u64, m: usize) -> Self {
        assert!(m <= 64, "mask form supports at most 64 chunks");
        Self {
            bits: (0..m).map(|j| mask >> j & 1 == 1).collect(),
        }
    }

    /// Inverse of [`SelectionVector::from_mask`]; `None` when `m > 64`.
    pub fn to_mask(&self) -> Option<u64> {
        (self.bits.len() <= 64).then(|| {
            self.bits
                .iter()
                .enumerate()
                .fold(0u64, |acc, (j, &b)| acc | (b as u64) << j)
        })
    }

    /// Retains exactly the listed chunks.
    pub fn from_indices(m: usize, retained: impl IntoIterator<Item = usize>) -> Self {
        let mut bits = vec![false; m];
        for j in retained {
            bits[j] = true;
        }
        Self { bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn is_retained(&self, j: usize) -> bool {
        self.bits[j]
    }

    pub fn retained_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn retained(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| j)
    }

    pub fn complement(&self) -> Self {
        Self {
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }
}

impl fmt::Display for SelectionVector {
    /// Chunk 0 first, e.g. `"10"` retains chunk 0 only.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// `X ∘ F^s`: keeps retained chunks, writes exact zeros elsewhere.
pub fn apply_mask(
    x: &InputTensor,
    s: &SelectionVector,
    grid: &ChunkGrid,
) -> Result<InputTensor, ChunkError> {
    grid.check_tensor(x)?;
    grid.check_selection(s)?;
    let values = x
        .values()
        .iter()
        .enumerate()
        .map(|(flat, &v)| if s.is_retained(grid.chunk_of_offset(flat)) { v } else { 0.0 })
        .collect();
    Ok(InputTensor::from_parts_unchecked(x.shape().to_vec(), values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn chunk_counts() {
        assert_eq!(build_grid(&[128, 128], &[8, 8]).unwrap().m(), 256);
        assert_eq!(build_grid(&[32, 32, 32], &[8, 8, 8]).unwrap().m(), 64);
        let g = build_grid(&[5], &[2]).unwrap();
        assert_eq!(g.m(), 3);
        assert_eq!(g.members(2), &[4]);
        assert_eq!(g.chunk_ranges(2), vec![4..5]);
    }

    #[test]
    fn grid_errors() {
        assert_eq!(
            build_grid(&[4, 4], &[2]).unwrap_err(),
            ChunkError::RankMismatch { input: 2, chunk: 1 }
        );
        assert!(matches!(
            build_grid(&[4, 4], &[2, 0]),
            Err(ChunkError::ZeroChunkExtent { axis: 1, .. })
        ));
        assert!(matches!(
            build_grid(&[4], &[5]),
            Err(ChunkError::ZeroChunkExtent { axis: 0, .. })
        ));
    }

    #[test]
    fn chunk_of_examples() {
        let g = build_grid(&[4], &[2]).unwrap();
        assert_eq!(g.chunk_of(&[3]).unwrap(), 1);
        let g = build_grid(&[4, 4], &[2, 2]).unwrap();
        assert_eq!(g.chunk_of(&[3, 0]).unwrap(), 2);
        let g = build_grid(&[5], &[2]).unwrap();
        assert_eq!(g.chunk_of(&[4]).unwrap(), 2);
        assert!(matches!(g.chunk_of(&[5]), Err(ChunkError::OutOfBounds { .. })));
        assert!(matches!(g.chunk_of(&[0, 0]), Err(ChunkError::OutOfBounds { .. })));
    }

    #[test]
    fn mask_examples() {
        let x = InputTensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = build_grid(&[4], &[2]).unwrap();
        assert_eq!(apply_mask(&x, &SelectionVector::all(2), &g).unwrap(), x);
        assert_eq!(
            apply_mask(&x, &SelectionVector::none(2), &g).unwrap().values(),
            &[0.0; 4]
        );
        let s = SelectionVector::from_bits(vec![true, false]);
        assert_eq!(apply_mask(&x, &s, &g).unwrap().values(), &[1.0, 2.0, 0.0, 0.0]);
        assert!(matches!(
            apply_mask(&x, &SelectionVector::all(3), &g),
            Err(ChunkError::LengthMismatch { expected: 2, actual: 3 })
        ));
    }

    #[test]
    fn mask_round_trip_and_display() {
        let s = SelectionVector::from_mask(0b01, 2);
        assert_eq!(s.to_string(), "10");
        assert_eq!(s.to_mask(), Some(1));
    }

    fn grid_strategy() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        prop::collection::vec((1usize..7, 1usize..7), 1..4).prop_map(|axes| {
            axes.into_iter()
                .map(|(d, c)| (d, c.min(d)))
                .unzip()
        })
    }

    proptest! {
        #[test]
        fn grid_is_a_partition((shape, chunk) in grid_strategy()) {
            let g = build_grid(&shape, &chunk).unwrap();
            let expected_m: usize = shape.iter().zip(&chunk).map(|(d, c)| d.div_ceil(*c)).product();
            prop_assert_eq!(g.m(), expected_m);
            let total: usize = (0..g.m()).map(|j| g.chunk_volume(j)).sum();
            prop_assert_eq!(total, shape.iter().product::<usize>());
            for j in 0..g.m() {
                prop_assert!(g.chunk_volume(j) > 0);
                let ranges = g.chunk_ranges(j);
                let vol: usize = ranges.iter().map(|r| r.len()).product();
                prop_assert_eq!(vol, g.chunk_volume(j));
            }
            // chunk_of agrees with the member lists
            let x = InputTensor::zeros(shape.clone()).unwrap();
            let mut coord = vec![0usize; shape.len()];
            for flat in 0..g.volume() {
                prop_assert_eq!(x.offset(&coord), flat);
                prop_assert_eq!(g.chunk_of(&coord).unwrap(), g.chunk_of_offset(flat));
                increment(&mut coord, &shape);
            }
        }

        #[test]
        fn complementary_masks_tile((shape, chunk) in grid_strategy(), seed in any::<u64>()) {
            let g = build_grid(&shape, &chunk).unwrap();
            let n: usize = shape.iter().product();
            let values: Vec<f32> = (0..n).map(|i| ((i as u64).wrapping_mul(seed | 1) % 97) as f32 / 7.0).collect();
            let x = InputTensor::new(shape.clone(), values).unwrap();
            let s = SelectionVector::from_bits((0..g.m()).map(|j| (seed >> (j % 64)) & 1 == 1).collect());
            let a = apply_mask(&x, &s, &g).unwrap();
            let b = apply_mask(&x, &s.complement(), &g).unwrap();
            for i in 0..n {
                prop_assert_eq!(a.values()[i] + b.values()[i], x.values()[i]);
            }
            prop_assert_eq!(apply_mask(&a, &s, &g).unwrap(), a);
        }
    }
}
