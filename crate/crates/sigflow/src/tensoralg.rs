//! Truncated tensor algebra T^(N)(R^d): flat per-level storage, truncated
//! tensor product, tensor exponential of a level-1 element, and the L2 norm
//! over levels 1..N used by the signature-Wasserstein metric.

use crate::error::{Result, SigflowError};

/// Number of coefficients in T^(N)(R^d): sum_{k=0}^{N} d^k.
pub fn dimension(channels: usize, depth: usize) -> usize {
    let mut total = 0usize;
    let mut pow = 1usize;
    for _ in 0..=depth {
        total += pow;
        pow *= channels;
    }
    total
}

/// An element of the truncated tensor algebra, stored as contiguous
/// per-level blocks. Level k holds d^k coefficients in row-major
/// lexicographic index order; level 0 is a single scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncTensor {
    channels: usize,
    depth: usize,
    data: Vec<f64>,
}

impl TruncTensor {
    pub fn zero(channels: usize, depth: usize) -> Self {
        assert!(channels >= 1);
        TruncTensor {
            channels,
            depth,
            data: vec![0.0; dimension(channels, depth)],
        }
    }

    /// The multiplicative identity (1, 0, ..., 0).
    pub fn unit(channels: usize, depth: usize) -> Self {
        let mut t = TruncTensor::zero(channels, depth);
        t.data[0] = 1.0;
        t
    }

    pub fn from_data(channels: usize, depth: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dimension(channels, depth) {
            return Err(SigflowError::Shape(format!(
                "expected {} coefficients for d={} N={}, got {}",
                dimension(channels, depth),
                channels,
                depth,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(SigflowError::Numerical(
                "non-finite tensor coefficient".into(),
            ));
        }
        Ok(TruncTensor {
            channels,
            depth,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Offset of level k's block in the flat coefficient vector.
    pub fn level_offset(&self, k: usize) -> usize {
        dimension(self.channels, k) - self.channels.pow(k as u32)
    }

    pub fn level(&self, k: usize) -> &[f64] {
        let off = self.level_offset(k);
        &self.data[off..off + self.channels.pow(k as u32)]
    }

    pub fn level_mut(&mut self, k: usize) -> &mut [f64] {
        let off = self.level_offset(k);
        let len = self.channels.pow(k as u32);
        &mut self.data[off..off + len]
    }

    fn check_shape(&self, other: &TruncTensor) -> Result<()> {
        if self.channels != other.channels || self.depth != other.depth {
            return Err(SigflowError::Shape(format!(
                "tensor shapes differ: (d={}, N={}) vs (d={}, N={})",
                self.channels, self.depth, other.channels, other.depth
            )));
        }
        Ok(())
    }

    /// Truncated tensor product: level k of the result is
    /// sum_{i+j=k} a_i (x) b_j, with concatenated multi-indices.
    pub fn tensor_product(&self, other: &TruncTensor) -> Result<TruncTensor> {
        self.check_shape(other)?;
        let d = self.channels;
        let mut out = TruncTensor::zero(d, self.depth);
        for k in 0..=self.depth {
            let out_off = out.level_offset(k);
            for i in 0..=k {
                let j = k - i;
                let a = self.level(i);
                let b = other.level(j);
                let nb = b.len();
                for (u, &av) in a.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let base = out_off + u * nb;
                    for (v, &bv) in b.iter().enumerate() {
                        out.data[base + v] += av * bv;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &TruncTensor) -> Result<TruncTensor> {
        self.check_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(TruncTensor {
            channels: self.channels,
            depth: self.depth,
            data,
        })
    }

    pub fn sub(&self, other: &TruncTensor) -> Result<TruncTensor> {
        self.check_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(TruncTensor {
            channels: self.channels,
            depth: self.depth,
            data,
        })
    }

    pub fn scale(&self, c: f64) -> TruncTensor {
        TruncTensor {
            channels: self.channels,
            depth: self.depth,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    /// Euclidean norm over the coefficients of levels 1..N. Level 0 is
    /// excluded: for signatures it is identically 1 and always cancels in
    /// differences of expected signatures.
    pub fn l2_norm(&self) -> f64 {
        self.data[1..].iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Coefficients of levels 1..N as a flat feature vector
    /// (dimension(d,N) - 1 entries).
    pub fn features(&self) -> &[f64] {
        &self.data[1..]
    }

    /// Rebuild a tensor from a level-1..N feature vector, setting level 0 to 1.
    pub fn from_features(channels: usize, depth: usize, features: &[f64]) -> Result<TruncTensor> {
        let want = dimension(channels, depth) - 1;
        if features.len() != want {
            return Err(SigflowError::Shape(format!(
                "expected {} features for d={} N={}, got {}",
                want,
                channels,
                depth,
                features.len()
            )));
        }
        let mut data = Vec::with_capacity(want + 1);
        data.push(1.0);
        data.extend_from_slice(features);
        Ok(TruncTensor {
            channels,
            depth,
            data,
        })
    }
}

/// Tensor exponential of a level-1 element: level k = v^(x)k / k!.
/// Built by the recurrence e_k = (e_{k-1} (x) v) / k.
pub fn tensor_exp(v: &[f64], depth: usize) -> TruncTensor {
    let d = v.len();
    let mut out = TruncTensor::unit(d, depth);
    for k in 1..=depth {
        let prev_off = out.level_offset(k - 1);
        let prev_len = d.pow((k - 1) as u32);
        let cur_off = out.level_offset(k);
        let inv_k = 1.0 / k as f64;
        for u in 0..prev_len {
            let base = cur_off + u * d;
            let pv = out.data[prev_off + u];
            for (r, &vr) in v.iter().enumerate() {
                out.data[base + r] = pv * vr * inv_k;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, proptest};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(d: usize, n: usize, rng: &mut impl Rng) -> TruncTensor {
        let mut t = TruncTensor::zero(d, n);
        for v in t.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        t
    }

    #[test]
    fn dimension_matches_paper_counts() {
        assert_eq!(dimension(3, 5), 364);
        assert_eq!(dimension(3, 5) - 1, 363);
        assert_eq!(dimension(3, 4), 121);
        assert_eq!(dimension(3, 4) - 1, 120);
        assert_eq!(dimension(1, 7), 8);
        assert_eq!(dimension(2, 0), 1);
    }

    #[test]
    fn unit_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random_tensor(2, 3, &mut rng);
        let unit = TruncTensor::unit(2, 3);
        let left = unit.tensor_product(&b).unwrap();
        let right = b.tensor_product(&unit).unwrap();
        assert_eq!(left, b);
        assert_eq!(right, b);
    }

    #[test]
    fn product_single_cross_term() {
        // a = 1 + e1, b = 1 + e2 at d=2, N=2 -> level 2 of a(x)b = e1(x)e2
        let a = TruncTensor::from_data(2, 2, vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let b = TruncTensor::from_data(2, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let p = a.tensor_product(&b).unwrap();
        assert_eq!(p.level(2), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn product_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let a = random_tensor(2, 3, &mut rng);
            let b = random_tensor(2, 3, &mut rng);
            let c = random_tensor(2, 3, &mut rng);
            let ab_c = a.tensor_product(&b).unwrap().tensor_product(&c).unwrap();
            let a_bc = a.tensor_product(&b.tensor_product(&c).unwrap()).unwrap();
            for (x, y) in ab_c.data().iter().zip(a_bc.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exp_of_zero_is_unit() {
        let e = tensor_exp(&[0.0, 0.0], 3);
        assert_eq!(e, TruncTensor::unit(2, 3));
    }

    #[test]
    fn exp_levels_are_scaled_powers() {
        let e = tensor_exp(&[1.0, 2.0], 2);
        assert_eq!(e.level(0), &[1.0]);
        assert_eq!(e.level(1), &[1.0, 2.0]);
        assert_eq!(e.level(2), &[0.5, 1.0, 1.0, 2.0]);
    }

    #[test]
    fn exp_matches_quadrature_of_iterated_integrals() {
        // Iterated integrals of a single linear segment via Riemann-Stieltjes
        // quadrature with 10^4 sub-intervals, depth 3.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let oracle = crate::signature::tests_support::quadrature_signature(
            &[vec![0.0, 0.0], v.clone()],
            3,
            10_000,
        );
        let e = tensor_exp(&v, 3);
        for (a, b) in e.data().iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn norm_excludes_level_zero() {
        let t = TruncTensor::from_data(1, 2, vec![1.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.l2_norm(), 5.0);
        assert_eq!(TruncTensor::zero(2, 2).l2_norm(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_tensor(2, 3, &mut rng);
        assert_eq!(a.scale(-1.0).l2_norm(), a.l2_norm());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = TruncTensor::zero(2, 2);
        let b = TruncTensor::zero(3, 2);
        assert!(a.tensor_product(&b).is_err());
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn constructed_tensors_have_dimension_many_coefficients() {
        for d in 1..=3 {
            for n in 0..=4 {
                assert_eq!(TruncTensor::zero(d, n).data().len(), dimension(d, n));
            }
        }
    }

    proptest! {
        #[test]
        fn product_distributes_over_addition(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_tensor(2, 3, &mut rng);
            let b = random_tensor(2, 3, &mut rng);
            let c = random_tensor(2, 3, &mut rng);
            let lhs = a.tensor_product(&b.add(&c).unwrap()).unwrap();
            let rhs = a.tensor_product(&b).unwrap().add(&a.tensor_product(&c).unwrap()).unwrap();
            for (x, y) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn exp_is_homomorphic_in_one_dimension(v in -2.0f64..2.0, w in -2.0f64..2.0) {
            let lhs = tensor_exp(&[v], 5).tensor_product(&tensor_exp(&[w], 5)).unwrap();
            let rhs = tensor_exp(&[v + w], 5);
            for (x, y) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
