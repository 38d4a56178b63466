//! Canonical structured/flat weight conversion, block chunking with [-1, 1]
//! min-max normalization, and the hidden-unit permutation group acting on
//! two-layer head weights.
//!
//! Flatten order is fixed: W1 row-major, then W2 row-major. Every file format
//! and every permutation index map depends on this single convention.

use crate::matrix::DenseMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WeightSpaceError {
    #[error("W1 must be {f}x{r}, got {got_rows}x{got_cols}")]
    BadW1 { f: usize, r: usize, got_rows: usize, got_cols: usize },
    #[error("W2 must be {r}x{f}, got {got_rows}x{got_cols}")]
    BadW2 { f: usize, r: usize, got_rows: usize, got_cols: usize },
    #[error("flat vector has {got} entries, schema requires {need}")]
    BadFlatLength { got: usize, need: usize },
    #[error("permutation has {got} entries, schema hidden dim is {need}")]
    BadPermLength { got: usize, need: usize },
    #[error("permutation is not a bijection on 0..{0}")]
    NotBijection(usize),
    #[error("block count {blocks} cannot hold {d} values at block size {size}")]
    BadBlockCount { blocks: usize, size: usize, d: usize },
    #[error("blocks are empty")]
    EmptyBlocks,
}

/// Geometry of the two-layer head weight vector: W1 is FxR, W2 is RxF,
/// flattened length `d = 2*F*R`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSchema {
    pub feature_dim: usize,
    pub hidden_dim: usize,
}

impl ParamSchema {
    pub fn new(feature_dim: usize, hidden_dim: usize) -> Self {
        Self { feature_dim, hidden_dim }
    }

    pub fn flat_len(&self) -> usize {
        2 * self.feature_dim * self.hidden_dim
    }

    fn w1_len(&self) -> usize {
        self.feature_dim * self.hidden_dim
    }
}

/// A flattened weight vector tied to its schema.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatWeights {
    pub schema: ParamSchema,
    pub values: Vec<f64>,
}

impl FlatWeights {
    pub fn new(schema: ParamSchema, values: Vec<f64>) -> Result<Self, WeightSpaceError> {
        if values.len() != schema.flat_len() {
            return Err(WeightSpaceError::BadFlatLength { got: values.len(), need: schema.flat_len() });
        }
        Ok(Self { schema, values })
    }
}

pub fn flatten(
    w1: &DenseMatrix,
    w2: &DenseMatrix,
    schema: ParamSchema,
) -> Result<FlatWeights, WeightSpaceError> {
    let (f, r) = (schema.feature_dim, schema.hidden_dim);
    if w1.shape() != (f, r) {
        return Err(WeightSpaceError::BadW1 { f, r, got_rows: w1.rows(), got_cols: w1.cols() });
    }
    if w2.shape() != (r, f) {
        return Err(WeightSpaceError::BadW2 { f, r, got_rows: w2.rows(), got_cols: w2.cols() });
    }
    let mut values = Vec::with_capacity(schema.flat_len());
    values.extend_from_slice(w1.values());
    values.extend_from_slice(w2.values());
    Ok(FlatWeights { schema, values })
}

pub fn unflatten(flat: &FlatWeights) -> (DenseMatrix, DenseMatrix) {
    let (f, r) = (flat.schema.feature_dim, flat.schema.hidden_dim);
    let split = flat.schema.w1_len();
    let w1 = DenseMatrix::from_vec_unchecked(f, r, flat.values[..split].to_vec());
    let w2 = DenseMatrix::from_vec_unchecked(r, f, flat.values[split..].to_vec());
    (w1, w2)
}

/// Block layout plus the per-block min/max captured at normalization time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkSpec {
    pub block_size: usize,
    pub block_count: usize,
    pub pad_len: usize,
    pub block_min: Vec<f64>,
    pub block_max: Vec<f64>,
}

impl ChunkSpec {
    pub fn padded_len(&self) -> usize {
        self.block_size * self.block_count
    }
}

/// Splits into blocks of `block_size`, zero-padding the final block. The
/// block count is the smallest that fits; `chunk_with_count` pins it instead.
pub fn chunk(values: &[f64], block_size: usize) -> (Vec<Vec<f64>>, ChunkSpec) {
    assert!(block_size >= 1, "block size must be at least 1");
    let block_count = values.len().div_ceil(block_size).max(1);
    chunk_with_count(values, block_size, block_count).expect("minimal block count always fits")
}

/// Splits into exactly `block_count` blocks of `block_size`, padding the tail
/// with zeros (the uniform-block layout the token projections expect).
pub fn chunk_with_count(
    values: &[f64],
    block_size: usize,
    block_count: usize,
) -> Result<(Vec<Vec<f64>>, ChunkSpec), WeightSpaceError> {
    let padded = block_size * block_count;
    if padded < values.len() {
        return Err(WeightSpaceError::BadBlockCount {
            blocks: block_count,
            size: block_size,
            d: values.len(),
        });
    }
    let pad_len = padded - values.len();
    let mut blocks = Vec::with_capacity(block_count);
    for b in 0..block_count {
        let start = b * block_size;
        let mut block = vec![0.0; block_size];
        for (j, slot) in block.iter_mut().enumerate() {
            if start + j < values.len() {
                *slot = values[start + j];
            }
        }
        blocks.push(block);
    }
    let spec = ChunkSpec {
        block_size,
        block_count,
        pad_len,
        block_min: vec![0.0; block_count],
        block_max: vec![0.0; block_count],
    };
    Ok((blocks, spec))
}

/// Concatenates blocks and strips the recorded padding.
pub fn unchunk(blocks: &[Vec<f64>], spec: &ChunkSpec) -> Vec<f64> {
    let mut out = Vec::with_capacity(spec.padded_len());
    for block in blocks {
        out.extend_from_slice(block);
    }
    out.truncate(spec.padded_len() - spec.pad_len);
    out
}

/// Min-max scales each block into [-1, 1], recording per-block min/max in the
/// returned spec. A constant block maps to zeros and denormalizes exactly via
/// the stored endpoints.
pub fn normalize_blocks(
    blocks: &[Vec<f64>],
    mut spec: ChunkSpec,
) -> Result<(Vec<Vec<f64>>, ChunkSpec), WeightSpaceError> {
    if blocks.is_empty() {
        return Err(WeightSpaceError::EmptyBlocks);
    }
    for (b, block) in blocks.iter().enumerate() {
        spec.block_min[b] = block.iter().copied().fold(f64::INFINITY, f64::min);
        spec.block_max[b] = block.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    }
    let normalized = normalize_blocks_with(blocks, &spec);
    Ok((normalized, spec))
}

/// Normalizes with externally supplied block statistics (the dataset-global
/// statistics stored in a dataset header).
pub fn normalize_blocks_with(blocks: &[Vec<f64>], spec: &ChunkSpec) -> Vec<Vec<f64>> {
    blocks
        .iter()
        .enumerate()
        .map(|(b, block)| {
            let lo = spec.block_min[b];
            let hi = spec.block_max[b];
            let span = hi - lo;
            block
                .iter()
                .map(|&x| if span == 0.0 { 0.0 } else { 2.0 * (x - lo) / span - 1.0 })
                .collect()
        })
        .collect()
}

pub fn denormalize_blocks(blocks: &[Vec<f64>], spec: &ChunkSpec) -> Vec<Vec<f64>> {
    blocks
        .iter()
        .enumerate()
        .map(|(b, block)| {
            let lo = spec.block_min[b];
            let hi = spec.block_max[b];
            let span = hi - lo;
            block
                .iter()
                .map(|&y| if span == 0.0 { lo } else { lo + (y + 1.0) * 0.5 * span })
                .collect()
        })
        .collect()
}

/// A hidden-unit permutation. `perm[j] = s` reads "new unit j takes old unit
/// s": structurally `W1' = W1 P`, `W2' = P^T W2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermSpec {
    perm: Vec<usize>,
}

impl PermSpec {
    pub fn new(perm: Vec<usize>) -> Result<Self, WeightSpaceError> {
        let r = perm.len();
        let mut seen = vec![false; r];
        for &p in &perm {
            if p >= r || seen[p] {
                return Err(WeightSpaceError::NotBijection(r));
            }
            seen[p] = true;
        }
        Ok(Self { perm })
    }

    pub fn identity(r: usize) -> Self {
        Self { perm: (0..r).collect() }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(i, &p)| i == p)
    }

    pub fn indices(&self) -> &[usize] {
        &self.perm
    }

    pub fn inverse(&self) -> PermSpec {
        let mut inv = vec![0; self.perm.len()];
        for (j, &s) in self.perm.iter().enumerate() {
            inv[s] = j;
        }
        PermSpec { perm: inv }
    }

    /// `a.compose(b)` is "apply b, then a".
    pub fn compose(&self, other: &PermSpec) -> PermSpec {
        assert_eq!(self.perm.len(), other.perm.len());
        let perm = self.perm.iter().map(|&j| other.perm[j]).collect();
        PermSpec { perm }
    }
}

/// Uniform draw over all r! permutations (Fisher-Yates).
pub fn sample_permutation<R: Rng>(rng: &mut R, r: usize) -> PermSpec {
    assert!(r >= 1, "hidden dim must be at least 1");
    let mut perm: Vec<usize> = (0..r).collect();
    perm.shuffle(rng);
    PermSpec { perm }
}

/// Index map the permutation induces on the flattened layout: entry i of the
/// output takes entry `map[i]` of the input.
pub fn flat_index_map(g: &PermSpec, schema: ParamSchema) -> Vec<usize> {
    let (f, r) = (schema.feature_dim, schema.hidden_dim);
    debug_assert_eq!(g.len(), r);
    let mut map = Vec::with_capacity(schema.flat_len());
    for i in 0..f {
        for j in 0..r {
            map.push(i * r + g.perm[j]);
        }
    }
    let base = f * r;
    for j in 0..r {
        for k in 0..f {
            map.push(base + g.perm[j] * f + k);
        }
    }
    map
}

/// Applies the hidden-unit permutation to structured weights via the flat
/// layout: `W1' = W1 P`, `W2' = P^T W2`.
pub fn apply_permutation(
    weights: &FlatWeights,
    g: &PermSpec,
) -> Result<FlatWeights, WeightSpaceError> {
    if g.len() != weights.schema.hidden_dim {
        return Err(WeightSpaceError::BadPermLength {
            got: g.len(),
            need: weights.schema.hidden_dim,
        });
    }
    let values = apply_permutation_flatvec(&weights.values, g, weights.schema)?;
    Ok(FlatWeights { schema: weights.schema, values })
}

/// Applies the same index shuffle to any vector laid out like a flattened
/// weight vector. Vectors longer than `schema.flat_len()` are treated as
/// padded: the tail (padding) never moves.
pub fn apply_permutation_flatvec(
    v: &[f64],
    g: &PermSpec,
    schema: ParamSchema,
) -> Result<Vec<f64>, WeightSpaceError> {
    if g.len() != schema.hidden_dim {
        return Err(WeightSpaceError::BadPermLength { got: g.len(), need: schema.hidden_dim });
    }
    let d = schema.flat_len();
    if v.len() < d {
        return Err(WeightSpaceError::BadFlatLength { got: v.len(), need: d });
    }
    let map = flat_index_map(g, schema);
    let mut out = Vec::with_capacity(v.len());
    out.extend(map.iter().map(|&src| v[src]));
    out.extend_from_slice(&v[d..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::rng_for;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_flat(seed: u64, schema: ParamSchema) -> FlatWeights {
        let mut rng = rng_for(seed, "ws-test", 0);
        let values = (0..schema.flat_len()).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        FlatWeights::new(schema, values).unwrap()
    }

    #[test]
    fn flatten_order_is_w1_then_w2() {
        let schema = ParamSchema::new(2, 1);
        let w1 = DenseMatrix::from_vec(2, 1, vec![1.0, 2.0]).unwrap();
        let w2 = DenseMatrix::from_vec(1, 2, vec![3.0, 4.0]).unwrap();
        let flat = flatten(&w1, &w2, schema).unwrap();
        assert_eq!(flat.values, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn flatten_zero_is_zero() {
        let schema = ParamSchema::new(3, 2);
        let flat = flatten(&DenseMatrix::zeros(3, 2), &DenseMatrix::zeros(2, 3), schema).unwrap();
        assert!(flat.values.iter().all(|v| *v == 0.0));
        assert_eq!(flat.values.len(), 12);
    }

    #[test]
    fn flatten_round_trip() {
        let schema = ParamSchema::new(4, 2);
        let flat = random_flat(1, schema);
        let (w1, w2) = unflatten(&flat);
        let back = flatten(&w1, &w2, schema).unwrap();
        assert_eq!(back, flat);
    }

    #[test]
    fn chunk_arithmetic() {
        let values = vec![1.0; 10];
        let (blocks, spec) = chunk(&values, 4);
        assert_eq!(blocks.len(), 3);
        assert_eq!(spec.pad_len, 2);
        assert_eq!(unchunk(&blocks, &spec), values);

        let (blocks, spec) = chunk(&vec![2.0; 8], 8);
        assert_eq!(blocks.len(), 1);
        assert_eq!(spec.pad_len, 0);
    }

    #[test]
    fn chunk_with_pinned_count_reproduces_large_scale_layout() {
        // d = 2*512*16 = 16384 split into 576 blocks of 29 pads 320 zeros
        let d = 16384;
        let values = vec![0.5; d];
        let (blocks, spec) = chunk_with_count(&values, 29, 576).unwrap();
        assert_eq!(blocks.len(), 576);
        assert_eq!(spec.pad_len, 16704 - 16384);
        assert_eq!(unchunk(&blocks, &spec), values);
        // the minimal layout at the same block size is smaller
        let (blocks_min, spec_min) = chunk(&values, 29);
        assert_eq!(blocks_min.len(), 565);
        assert_eq!(spec_min.pad_len, 565 * 29 - d);
    }

    #[test]
    fn normalize_endpoints() {
        let (blocks, spec) = chunk(&[0.0, 5.0, 10.0], 3);
        let (normalized, spec) = normalize_blocks(&blocks, spec).unwrap();
        assert_eq!(normalized[0], vec![-1.0, 0.0, 1.0]);
        let restored = denormalize_blocks(&normalized, &spec);
        assert_eq!(restored[0], vec![0.0, 5.0, 10.0]);
    }

    #[test]
    fn normalize_constant_block() {
        let (blocks, spec) = chunk(&[3.5, 3.5, 3.5], 3);
        let (normalized, spec) = normalize_blocks(&blocks, spec).unwrap();
        assert_eq!(normalized[0], vec![0.0, 0.0, 0.0]);
        assert_eq!(spec.block_min[0], 3.5);
        assert_eq!(spec.block_max[0], 3.5);
        let restored = denormalize_blocks(&normalized, &spec);
        assert_eq!(restored[0], vec![3.5, 3.5, 3.5]);
    }

    #[test]
    fn identity_permutation_is_noop() {
        let schema = ParamSchema::new(3, 2);
        let flat = random_flat(2, schema);
        let out = apply_permutation(&flat, &PermSpec::identity(2)).unwrap();
        assert_eq!(out, flat);
    }

    #[test]
    fn swap_permutation_hand_case() {
        // F=1, r=2: W1=[[1,2]], W2=[[3],[4]]; swap -> W1'=[[2,1]], W2'=[[4],[3]]
        let schema = ParamSchema::new(1, 2);
        let flat = FlatWeights::new(schema, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let swap = PermSpec::new(vec![1, 0]).unwrap();
        let out = apply_permutation(&flat, &swap).unwrap();
        assert_eq!(out.values, vec![2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn flatvec_agrees_with_structured_action() {
        let schema = ParamSchema::new(4, 3);
        let flat = random_flat(3, schema);
        let mut rng = rng_for(3, "perm", 0);
        let g = sample_permutation(&mut rng, 3);
        let structured = apply_permutation(&flat, &g).unwrap();
        let flatvec = apply_permutation_flatvec(&flat.values, &g, schema).unwrap();
        assert_eq!(structured.values, flatvec);
    }

    #[test]
    fn padded_tail_never_moves() {
        let schema = ParamSchema::new(2, 2);
        let mut v: Vec<f64> = (0..schema.flat_len()).map(|i| i as f64).collect();
        v.extend_from_slice(&[100.0, 200.0]);
        let mut rng = rng_for(4, "perm", 1);
        let g = sample_permutation(&mut rng, 2);
        let out = apply_permutation_flatvec(&v, &g, schema).unwrap();
        assert_eq!(&out[schema.flat_len()..], &[100.0, 200.0]);
    }

    #[test]
    fn r1_always_identity() {
        let mut rng = rng_for(5, "perm", 2);
        for _ in 0..10 {
            assert!(sample_permutation(&mut rng, 1).is_identity());
        }
    }

    #[test]
    fn two_element_draws_are_balanced() {
        let mut rng = rng_for(6, "perm", 3);
        let draws = 10_000;
        let mut identity_count = 0usize;
        for _ in 0..draws {
            if sample_permutation(&mut rng, 2).is_identity() {
                identity_count += 1;
            }
        }
        // binomial(10000, 0.5): 3 sigma = 150
        let sigma3 = 150.0;
        assert!((identity_count as f64 - 5000.0).abs() < sigma3, "count {identity_count}");
    }

    #[test]
    fn inverse_undoes_permutation() {
        let schema = ParamSchema::new(3, 4);
        let flat = random_flat(7, schema);
        let mut rng = rng_for(7, "perm", 4);
        let g = sample_permutation(&mut rng, 4);
        let forward = apply_permutation(&flat, &g).unwrap();
        let back = apply_permutation(&forward, &g.inverse()).unwrap();
        assert_eq!(back, flat);
    }

    proptest! {
        #[test]
        fn group_law_composition(seed in 0u64..200) {
            let schema = ParamSchema::new(3, 5);
            let flat = random_flat(seed, schema);
            let mut rng = rng_for(seed, "perm-law", 0);
            let g1 = sample_permutation(&mut rng, 5);
            let g2 = sample_permutation(&mut rng, 5);
            let sequential =
                apply_permutation(&apply_permutation(&flat, &g2).unwrap(), &g1).unwrap();
            let composed = apply_permutation(&flat, &g1.compose(&g2)).unwrap();
            prop_assert_eq!(sequential, composed);
        }

        #[test]
        fn chunk_normalize_round_trip(seed in 0u64..200, block_size in 1usize..9) {
            let schema = ParamSchema::new(3, 2);
            let flat = random_flat(seed, schema);
            let (blocks, spec) = chunk(&flat.values, block_size);
            let (normalized, spec) = normalize_blocks(&blocks, spec).unwrap();
            for block in &normalized {
                for &x in block {
                    prop_assert!((-1.0..=1.0).contains(&x));
                }
            }
            let restored = unchunk(&denormalize_blocks(&normalized, &spec), &spec);
            for (a, b) in restored.iter().zip(&flat.values) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
