//! Dense row-major tensors and the 5D/4D depth-folding rearrangement.
//!
//! The canonical compute layout is channels-first: rank-5 tensors are
//! `(B, C, D, H, W)`, rank-4 tensors `(B, C, H, W)`. Depth folding maps
//! `(B, C, D, H, W)` onto `(B, C*D, H, W)` with folded channel index
//! `c * D + d` (c-major). In row-major channels-first storage that fold is
//! a pure reshape: the flat data sequence is untouched.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape must have 1 to 5 extents, got {0}")]
    BadRank(usize),
    #[error("shape extent at axis {0} must be >= 1")]
    ZeroExtent(usize),
    #[error("data length {data_len} does not match shape {shape} ({expected} elements)")]
    DataLength {
        shape: Shape,
        expected: usize,
        data_len: usize,
    },
    #[error("element count mismatch: {from} has {from_len} elements, {to} has {to_len}")]
    ElementCount {
        from: Shape,
        from_len: usize,
        to: Shape,
        to_len: usize,
    },
    #[error("{perm:?} is not a permutation of 0..{rank}")]
    BadPermutation { perm: Vec<usize>, rank: usize },
    #[error("expected rank {expected}, got {got}")]
    RankMismatch { expected: usize, got: usize },
    #[error("channel extent {channels} does not factor as {c}*{d}")]
    FoldMismatch { channels: usize, c: usize, d: usize },
    #[error("shape mismatch: {a} vs {b}")]
    ShapeMismatch { a: Shape, b: Shape },
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
}

/// Ordered list of positive extents, rank 1 to 5.
///
/// Rank-5 shapes read `(B, C, D, H, W)`, rank-4 `(B, C, H, W)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self, TensorError> {
        let dims = dims.into();
        if dims.is_empty() || dims.len() > 5 {
            return Err(TensorError::BadRank(dims.len()));
        }
        for (axis, &d) in dims.iter().enumerate() {
            if d == 0 {
                return Err(TensorError::ZeroExtent(axis));
            }
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0[axis]
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn num_elements(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major strides, last dimension fastest.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.rank()];
        for axis in (0..self.rank().saturating_sub(1)).rev() {
            strides[axis] = strides[axis + 1] * self.0[axis + 1];
        }
        strides
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.rank());
        let mut flat = 0;
        for (axis, &i) in idx.iter().enumerate() {
            debug_assert!(i < self.0[axis]);
            flat = flat * self.0[axis] + i;
        }
        flat
    }

    /// Inverse of [`Shape::flat_index`].
    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.rank()];
        for axis in (0..self.rank()).rev() {
            idx[axis] = flat % self.0[axis];
            flat /= self.0[axis];
        }
        idx
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, ")")
    }
}

/// Row-major dense tensor; the universal value type for graph I/O.
///
/// Every constructor rejects NaN and infinite elements, so a value of this
/// type is finite by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> DenseTensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self, TensorError> {
        if data.len() != shape.num_elements() {
            return Err(TensorError::DataLength {
                expected: shape.num_elements(),
                data_len: data.len(),
                shape,
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(pos));
        }
        Ok(DenseTensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.num_elements();
        DenseTensor {
            shape,
            data: vec![T::zero(); n],
        }
    }

    /// Build a tensor by evaluating `f` at every multi-index in row-major order.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(&[usize]) -> T) -> Result<Self, TensorError> {
        let n = shape.num_elements();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.rank()];
        for _ in 0..n {
            data.push(f(&idx));
            for axis in (0..shape.rank()).rev() {
                idx[axis] += 1;
                if idx[axis] < shape.dim(axis) {
                    break;
                }
                idx[axis] = 0;
            }
        }
        DenseTensor::new(shape, data)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn get(&self, idx: &[usize]) -> T {
        self.data[self.shape.flat_index(idx)]
    }

    /// Same flat data under a new shape; element counts must match.
    pub fn reshape(&self, new: Shape) -> Result<Self, TensorError> {
        if new.num_elements() != self.shape.num_elements() {
            return Err(TensorError::ElementCount {
                from: self.shape.clone(),
                from_len: self.shape.num_elements(),
                to_len: new.num_elements(),
                to: new,
            });
        }
        Ok(DenseTensor {
            shape: new,
            data: self.data.clone(),
        })
    }

    /// Permute axes: output axis `k` is input axis `perm[k]`, so
    /// `out[idx] == in[j]` where `j[perm[k]] = idx[k]`.
    pub fn transpose(&self, perm: &[usize]) -> Result<Self, TensorError> {
        let rank = self.shape.rank();
        let mut seen = vec![false; rank];
        let valid = perm.len() == rank
            && perm.iter().all(|&p| {
                if p >= rank || seen[p] {
                    false
                } else {
                    seen[p] = true;
                    true
                }
            });
        if !valid {
            return Err(TensorError::BadPermutation {
                perm: perm.to_vec(),
                rank,
            });
        }
        let out_shape = Shape::new(perm.iter().map(|&p| self.shape.dim(p)).collect::<Vec<_>>())?;
        let in_strides = self.shape.strides();
        let mut data = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; rank];
        for _ in 0..out_shape.num_elements() {
            let flat: usize = idx
                .iter()
                .zip(perm)
                .map(|(&i, &p)| i * in_strides[p])
                .sum();
            data.push(self.data[flat]);
            for axis in (0..rank).rev() {
                idx[axis] += 1;
                if idx[axis] < out_shape.dim(axis) {
                    break;
                }
                idx[axis] = 0;
            }
        }
        Ok(DenseTensor {
            shape: out_shape,
            data,
        })
    }

    /// Fold a rank-5 `(B, C, D, H, W)` tensor into rank-4 `(B, C*D, H, W)`.
    ///
    /// Folded channel index is `c * D + d` (c-major), which in row-major
    /// channels-first storage coincides with the flat layout, so the data
    /// sequence is untouched: `out[b, c*D + d, h, w] == in[b, c, d, h, w]`.
    pub fn fold_depth(&self) -> Result<Self, TensorError> {
        if self.shape.rank() != 5 {
            return Err(TensorError::RankMismatch {
                expected: 5,
                got: self.shape.rank(),
            });
        }
        let d = self.shape.dims();
        let folded = Shape::new([d[0], d[1] * d[2], d[3], d[4]])?;
        Ok(DenseTensor {
            shape: folded,
            data: self.data.clone(),
        })
    }

    /// Inverse of [`DenseTensor::fold_depth`]: rank-4 `(B, C*D, H, W)` back to
    /// rank-5 `(B, c, d, H, W)`. The channel extent must equal `c * d`.
    pub fn unfold_depth(&self, c: usize, d: usize) -> Result<Self, TensorError> {
        if self.shape.rank() != 4 {
            return Err(TensorError::RankMismatch {
                expected: 4,
                got: self.shape.rank(),
            });
        }
        let dims = self.shape.dims();
        if c * d != dims[1] || c == 0 || d == 0 {
            return Err(TensorError::FoldMismatch {
                channels: dims[1],
                c,
                d,
            });
        }
        let unfolded = Shape::new([dims[0], c, d, dims[2], dims[3]])?;
        Ok(DenseTensor {
            shape: unfolded,
            data: self.data.clone(),
        })
    }
}

/// Max over elements of `|a - b|`; zero iff the tensors are elementwise equal.
pub fn max_abs_diff<T: Scalar>(a: &DenseTensor<T>, b: &DenseTensor<T>) -> Result<f64, TensorError> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            a: a.shape.clone(),
            b: b.shape.clone(),
        });
    }
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x.widen() - y.widen()).abs())
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shape(dims: &[usize]) -> Shape {
        Shape::new(dims).unwrap()
    }

    fn random_tensor(dims: &[usize], seed: u64) -> DenseTensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = shape(dims);
        let data = (0..s.num_elements())
            .map(|_| rng.gen_range(-1.0f32..1.0))
            .collect();
        DenseTensor::new(s, data).unwrap()
    }

    #[test]
    fn reshape_preserves_flat_data() {
        let t = random_tensor(&[1, 4, 8, 8, 4], 1);
        assert_eq!(t.shape().num_elements(), 1024);
        let r = t.reshape(shape(&[1, 8, 8, 16])).unwrap();
        assert_eq!(r.shape().num_elements(), 1024);
        assert_eq!(r.data(), t.data());
        // round-trip restores the original shape and bits
        let back = r.reshape(t.shape().clone()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn reshape_identity_is_bitwise_equal() {
        let t = random_tensor(&[2, 3], 2);
        let r = t.reshape(shape(&[2, 3])).unwrap();
        assert_eq!(r, t);
    }

    #[test]
    fn reshape_element_count_mismatch_errors() {
        let t = DenseTensor::<f32>::zeros(shape(&[2, 3]));
        assert!(matches!(
            t.reshape(shape(&[4, 2])),
            Err(TensorError::ElementCount { .. })
        ));
    }

    #[test]
    fn transpose_axis_swap() {
        let t = DenseTensor::from_fn(shape(&[1, 2, 3]), |idx| (idx[1] * 3 + idx[2]) as f32).unwrap();
        let out = t.transpose(&[0, 2, 1]).unwrap();
        assert_eq!(out.shape().dims(), &[1, 3, 2]);
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(out.get(&[0, j, i]), t.get(&[0, i, j]));
            }
        }
    }

    #[test]
    fn transpose_identity_perm_is_bitwise_equal() {
        let t = random_tensor(&[2, 3, 4], 3);
        assert_eq!(t.transpose(&[0, 1, 2]).unwrap(), t);
    }

    #[test]
    fn transpose_rejects_invalid_perm() {
        let t = DenseTensor::<f32>::zeros(shape(&[2, 3]));
        assert!(t.transpose(&[0, 0]).is_err());
        assert!(t.transpose(&[0, 2]).is_err());
        assert!(t.transpose(&[0]).is_err());
    }

    #[test]
    fn transpose_matches_index_walk_oracle_and_roundtrips() {
        let t = random_tensor(&[2, 3, 4, 5], 4);
        let perm = [3usize, 1, 0, 2];
        let out = t.transpose(&perm).unwrap();
        // direct index-walk oracle: out[idx] must equal in[j], j[perm[k]] = idx[k]
        for b in 0..5 {
            for c in 0..3 {
                for d in 0..2 {
                    for e in 0..4 {
                        let out_idx = [b, c, d, e];
                        let mut in_idx = [0usize; 4];
                        for (k, &p) in perm.iter().enumerate() {
                            in_idx[p] = out_idx[k];
                        }
                        assert_eq!(out.get(&out_idx), t.get(&in_idx));
                    }
                }
            }
        }
        // inverse permutation restores the input
        let mut inv = [0usize; 4];
        for (k, &p) in perm.iter().enumerate() {
            inv[p] = k;
        }
        assert_eq!(out.transpose(&inv).unwrap(), t);
    }

    #[test]
    fn fold_depth_shape_and_index_formula() {
        let t = random_tensor(&[1, 2, 3, 4, 5], 5);
        let folded = t.fold_depth().unwrap();
        assert_eq!(folded.shape().dims(), &[1, 6, 4, 5]);
        // out[b, c*D+d, h, w] == in[b, c, d, h, w]
        for c in 0..2 {
            for d in 0..3 {
                for h in 0..4 {
                    for w in 0..5 {
                        assert_eq!(folded.get(&[0, c * 3 + d, h, w]), t.get(&[0, c, d, h, w]));
                    }
                }
            }
        }
    }

    #[test]
    fn fold_depth_single_element_placement() {
        let mut data = vec![0.0f32; 2 * 3];
        // in[0, c=1, d=2, 0, 0] with C=2, D=3 lands at folded channel 1*3+2 = 5
        data[5] = 7.0;
        let t = DenseTensor::new(shape(&[1, 2, 3, 1, 1]), data).unwrap();
        assert_eq!(t.get(&[0, 1, 2, 0, 0]), 7.0);
        let folded = t.fold_depth().unwrap();
        assert_eq!(folded.get(&[0, 5, 0, 0]), 7.0);
    }

    #[test]
    fn fold_depth_requires_rank_5() {
        let t = DenseTensor::<f32>::zeros(shape(&[1, 6, 4, 5]));
        assert!(matches!(
            t.fold_depth(),
            Err(TensorError::RankMismatch { expected: 5, .. })
        ));
    }

    #[test]
    fn unfold_depth_examples() {
        let t = random_tensor(&[1, 6, 4, 5], 6);
        let u = t.unfold_depth(2, 3).unwrap();
        assert_eq!(u.shape().dims(), &[1, 2, 3, 4, 5]);
        assert!(matches!(
            t.unfold_depth(4, 2),
            Err(TensorError::FoldMismatch { .. })
        ));
        let z = DenseTensor::<f32>::zeros(shape(&[1, 2, 3, 4, 5]));
        let round = z.fold_depth().unwrap().unfold_depth(2, 3).unwrap();
        assert_eq!(round, z);
    }

    #[test]
    fn fold_unfold_roundtrip_many_random_tensors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let dims = [
                rng.gen_range(1..=2usize),
                rng.gen_range(1..=8usize),
                rng.gen_range(1..=8usize),
                rng.gen_range(1..=4usize),
                rng.gen_range(1..=4usize),
            ];
            let t = {
                let s = shape(&dims);
                let data = (0..s.num_elements())
                    .map(|_| rng.gen_range(-1.0f32..1.0))
                    .collect();
                DenseTensor::new(s, data).unwrap()
            };
            let round = t.fold_depth().unwrap().unfold_depth(dims[1], dims[2]).unwrap();
            assert_eq!(round, t);
        }
    }

    #[test]
    fn max_abs_diff_examples() {
        let a = DenseTensor::<f32>::zeros(shape(&[2, 3]));
        assert_eq!(max_abs_diff(&a, &a).unwrap(), 0.0);

        let mut data = vec![0.0f32; 6];
        data[4] = 0.5;
        let b = DenseTensor::new(shape(&[2, 3]), data).unwrap();
        assert_eq!(max_abs_diff(&a, &b).unwrap(), 0.5);

        let c = DenseTensor::<f32>::zeros(shape(&[3, 2]));
        assert!(max_abs_diff(&a, &c).is_err());
    }

    #[test]
    fn max_abs_diff_matches_scalar_loop_oracle() {
        let a = random_tensor(&[2, 3, 4], 8);
        let b = random_tensor(&[2, 3, 4], 9);
        let mut expected = 0.0f64;
        for i in 0..a.data().len() {
            let d = (a.data()[i] as f64 - b.data()[i] as f64).abs();
            if d > expected {
                expected = d;
            }
        }
        assert_eq!(max_abs_diff(&a, &b).unwrap(), expected);
    }

    #[test]
    fn constructors_reject_non_finite() {
        assert!(matches!(
            DenseTensor::new(shape(&[2]), vec![1.0f32, f32::NAN]),
            Err(TensorError::NonFinite(1))
        ));
        assert!(DenseTensor::new(shape(&[1]), vec![f32::INFINITY]).is_err());
    }

    proptest! {
        // fold then unfold is the identity for any (C, D) up to 8
        #[test]
        fn prop_fold_unfold_inverse(
            b in 1usize..=2, c in 1usize..=8, d in 1usize..=8,
            h in 1usize..=5, w in 1usize..=5, seed in 0u64..1000
        ) {
            let t = random_tensor(&[b, c, d, h, w], seed);
            let round = t.fold_depth().unwrap().unfold_depth(c, d).unwrap();
            prop_assert_eq!(round, t);
        }

        // reshape never changes the flat data sequence
        #[test]
        fn prop_reshape_keeps_data(a in 1usize..=4, bb in 1usize..=4, cc in 1usize..=4, seed in 0u64..1000) {
            let t = random_tensor(&[a, bb, cc], seed);
            let r = t.reshape(shape(&[a * bb * cc])).unwrap();
            prop_assert_eq!(r.data(), t.data());
        }

        // transpose composed with its inverse permutation is the identity
        #[test]
        fn prop_transpose_inverse_identity(
            dims in proptest::collection::vec(1usize..=4, 2..=5),
            seed in 0u64..1000,
            perm_seed in 0u64..1000
        ) {
            let t = random_tensor(&dims, seed);
            let mut perm: Vec<usize> = (0..dims.len()).collect();
            // Fisher-Yates from the seeded generator
            let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
            for i in (1..perm.len()).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            let mut inv = vec![0usize; perm.len()];
            for (k, &p) in perm.iter().enumerate() {
                inv[p] = k;
            }
            let round = t.transpose(&perm).unwrap().transpose(&inv).unwrap();
            prop_assert_eq!(round, t);
        }
    }
}
