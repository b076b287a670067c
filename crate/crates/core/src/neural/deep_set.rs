use std::cmp::Ordering;

use ndarray::{s, Array1, Array2, ArrayView2};

use super::{Mlp, MlpCache, MlpGrad, Tensors};
use crate::error::{Error, Result};

/// `rho(mean_{e ∈ set} phi(e))`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepSet {
    pub phi: Mlp,
    pub rho: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepSetGrad {
    pub phi: MlpGrad,
    pub rho: MlpGrad,
}

/// Several sets stacked row-wise, each stored in a canonical row order.
///
/// Sorting the members makes every downstream reduction run in the same
/// order whatever order the caller supplied, so outputs and gradients are
/// bit-identical under permutation.
#[derive(Debug, Clone)]
pub struct SetBatch {
    features: Array2<f64>,
    offsets: Vec<usize>,
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

impl SetBatch {
    pub fn new(sets: &[ArrayView2<f64>]) -> Result<Self> {
        let dim = sets.first().map_or(0, |s| s.ncols());
        let total: usize = sets.iter().map(|s| s.nrows()).sum();
        let mut data = Vec::with_capacity(total * dim);
        let mut offsets = Vec::with_capacity(sets.len() + 1);
        offsets.push(0);
        let mut rows: Vec<usize> = Vec::new();
        for set in sets {
            if set.nrows() == 0 {
                return Err(Error::EmptySet);
            }
            if set.ncols() != dim {
                return Err(Error::DimensionMismatch("sets with different feature sizes".into()));
            }
            let set = set.as_standard_layout();
            let flat = set.as_slice().expect("standard layout is contiguous");
            let row = |r: usize| &flat[r * dim..(r + 1) * dim];
            rows.clear();
            rows.extend(0..set.nrows());
            rows.sort_by(|&a, &b| lexicographic(row(a), row(b)));
            for &r in &rows {
                data.extend_from_slice(row(r));
            }
            offsets.push(offsets.last().unwrap() + set.nrows());
        }
        if sets.is_empty() {
            return Err(Error::EmptySet);
        }
        let features = Array2::from_shape_vec((total, dim), data)
            .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
        Ok(SetBatch { features, offsets })
    }

    pub fn n_sets(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn set_size(&self, b: usize) -> usize {
        self.offsets[b + 1] - self.offsets[b]
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    /// Row range of set `b` is `offsets[b]..offsets[b + 1]`.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }
}

#[derive(Debug, Clone)]
pub struct DeepSetCache {
    phi: MlpCache,
    rho: MlpCache,
    offsets: Vec<usize>,
}

impl DeepSetCache {
    pub fn output(&self) -> &Array2<f64> {
        self.rho.output()
    }
}

impl DeepSet {
    pub fn new(phi: Mlp, rho: Mlp) -> Result<Self> {
        if phi.output_dim() != rho.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "phi emits {} values but rho expects {}",
                phi.output_dim(),
                rho.input_dim()
            )));
        }
        Ok(DeepSet { phi, rho })
    }

    pub fn forward_batch(&self, batch: &SetBatch) -> Result<DeepSetCache> {
        let phi = self.phi.forward(batch.features.view())?;
        let embedded = phi.output();
        let n_sets = batch.n_sets();
        let mut pooled = Array2::zeros((n_sets, embedded.ncols()));
        for b in 0..n_sets {
            let (lo, hi) = (batch.offsets[b], batch.offsets[b + 1]);
            let mut acc = pooled.row_mut(b);
            for r in lo..hi {
                acc += &embedded.row(r);
            }
            acc /= (hi - lo) as f64;
        }
        let rho = self.rho.forward(pooled.view())?;
        Ok(DeepSetCache {
            phi,
            rho,
            offsets: batch.offsets.clone(),
        })
    }

    /// Output for a single set; rows of `set` are its members.
    pub fn forward(&self, set: ArrayView2<f64>) -> Result<Array1<f64>> {
        let cache = self.forward_batch(&SetBatch::new(&[set])?)?;
        Ok(cache.output().row(0).to_owned())
    }

    /// Parameter gradients for upstream gradient `d_out` (`n_sets × out`).
    pub fn backward(&self, cache: &DeepSetCache, d_out: ArrayView2<f64>) -> Result<DeepSetGrad> {
        let mut grads = self.zero_grad();
        self.backward_into(cache, d_out, &mut grads)?;
        Ok(grads)
    }

    pub fn backward_into(
        &self,
        cache: &DeepSetCache,
        d_out: ArrayView2<f64>,
        grads: &mut DeepSetGrad,
    ) -> Result<()> {
        let d_pooled = self.rho.backward_into(&cache.rho, d_out, &mut grads.rho)?;
        let n_rows = *cache.offsets.last().unwrap();
        let mut d_embedded = Array2::zeros((n_rows, d_pooled.ncols()));
        for b in 0..cache.offsets.len() - 1 {
            let (lo, hi) = (cache.offsets[b], cache.offsets[b + 1]);
            let share = &d_pooled.row(b) / (hi - lo) as f64;
            d_embedded.slice_mut(s![lo..hi, ..]).assign(&share.broadcast((hi - lo, share.len())).unwrap());
        }
        self.phi.backward_into(&cache.phi, d_embedded.view(), &mut grads.phi)?;
        Ok(())
    }

    pub fn zero_grad(&self) -> DeepSetGrad {
        DeepSetGrad {
            phi: self.phi.zero_grad(),
            rho: self.rho.zero_grad(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.phi.is_finite() && self.rho.is_finite()
    }
}

impl Tensors for DeepSet {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.phi.tensors();
        t.extend(self.rho.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.phi.tensors_mut();
        t.extend(self.rho.tensors_mut());
        t
    }
}

impl Tensors for DeepSetGrad {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.phi.tensors();
        t.extend(self.rho.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.phi.tensors_mut();
        t.extend(self.rho.tensors_mut());
        t
    }
}

impl DeepSetGrad {
    pub fn scale(&mut self, factor: f64) {
        self.phi.scale(factor);
        self.rho.scale(factor);
    }

    pub fn add_assign(&mut self, other: &DeepSetGrad) {
        self.phi.add_assign(&other.phi);
        self.rho.add_assign(&other.rho);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::tests::{random_matrix, rel_err};
    use crate::neural::Activation;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(seed: u64) -> DeepSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DeepSet::new(
            Mlp::new(&[4, 16, 16, 8], Activation::Tanh, Activation::Tanh, &mut rng),
            Mlp::new(&[8, 12, 3], Activation::Tanh, Activation::Identity, &mut rng),
        )
        .unwrap()
    }

    fn permuted(x: &Array2<f64>, order: &[usize]) -> Array2<f64> {
        x.select(ndarray::Axis(0), order)
    }

    #[test]
    fn permutation_invariance_is_exact() {
        let ds = net(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_matrix(14, 4, &mut rng);
        let base = ds.forward(x.view()).unwrap();
        let mut order: Vec<usize> = (0..14).collect();
        for _ in 0..100 {
            order.shuffle(&mut rng);
            let out = ds.forward(permuted(&x, &order).view()).unwrap();
            assert_eq!(out, base);
        }
    }

    #[test]
    fn parameter_gradient_is_permutation_invariant() {
        let ds = net(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_matrix(9, 4, &mut rng);
        let up = random_matrix(1, 3, &mut rng);
        let grad_of = |m: &Array2<f64>| {
            let cache = ds.forward_batch(&SetBatch::new(&[m.view()]).unwrap()).unwrap();
            ds.backward(&cache, up.view()).unwrap().to_flat()
        };
        let base = grad_of(&x);
        let mut order: Vec<usize> = (0..9).collect();
        for _ in 0..10 {
            order.shuffle(&mut rng);
            assert_eq!(grad_of(&permuted(&x, &order)), base);
        }
    }

    #[test]
    fn singleton_and_duplicates() {
        let ds = net(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_matrix(1, 4, &mut rng);
        let direct = ds
            .rho
            .predict(ds.phi.predict(x.view()).unwrap().view())
            .unwrap();
        assert_eq!(ds.forward(x.view()).unwrap(), direct.row(0));

        let x = random_matrix(7, 4, &mut rng);
        let doubled = ndarray::concatenate![ndarray::Axis(0), x, x];
        let a = ds.forward(x.view()).unwrap();
        let b = ds.forward(doubled.view()).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() <= 1e-12 * u.abs().max(1.0));
        }
    }

    #[test]
    fn empty_set_rejected() {
        let ds = net(7);
        let empty = Array2::<f64>::zeros((0, 4));
        assert!(matches!(ds.forward(empty.view()), Err(Error::EmptySet)));
    }

    #[test]
    fn batch_equals_individual_sets() {
        let ds = net(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sets: Vec<Array2<f64>> = (0..4).map(|i| random_matrix(3 + i, 4, &mut rng)).collect();
        let views: Vec<_> = sets.iter().map(|s| s.view()).collect();
        let cache = ds.forward_batch(&SetBatch::new(&views).unwrap()).unwrap();
        for (b, s) in sets.iter().enumerate() {
            let single = ds.forward(s.view()).unwrap();
            for j in 0..3 {
                assert!((cache.output()[[b, j]] - single[j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            let ds = net(10 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(20 + seed);
            let sets: Vec<Array2<f64>> = (0..3).map(|_| random_matrix(5, 4, &mut rng)).collect();
            let views: Vec<_> = sets.iter().map(|s| s.view()).collect();
            let batch = SetBatch::new(&views).unwrap();
            let proj = random_matrix(3, 3, &mut rng);
            let loss = |d: &DeepSet| (d.forward_batch(&batch).unwrap().output() * &proj).sum();
            let cache = ds.forward_batch(&batch).unwrap();
            let analytic = ds.backward(&cache, proj.view()).unwrap().to_flat();

            let h = 1e-5;
            let mut probe = ds.clone();
            let mut k = 0;
            let mut worst: f64 = 0.0;
            let n_tensors = probe.tensors().len();
            for ti in 0..n_tensors {
                let len = probe.tensors()[ti].len();
                for i in 0..len {
                    let v = probe.tensors()[ti][i];
                    probe.tensors_mut()[ti][i] = v + h;
                    let fp = loss(&probe);
                    probe.tensors_mut()[ti][i] = v - h;
                    let fm = loss(&probe);
                    probe.tensors_mut()[ti][i] = v;
                    worst = worst.max(rel_err(analytic[k], (fp - fm) / (2.0 * h)));
                    k += 1;
                }
            }
            assert!(worst < 1e-5, "seed {seed}: {worst}");
        }
    }
}
