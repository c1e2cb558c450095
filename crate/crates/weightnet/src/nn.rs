//! Parameter-holding layers: fully-connected, grouped fully-connected (the
//! block-diagonal form), and batch normalization.
//!
//! A grouped fully-connected layer with `g` groups stores `g` blocks of
//! shape (o/g × i/g) — o·i/g scalars in total — never the zero-padded dense
//! matrix. Its dense equivalent is block diagonal; `g = 1` recovers a plain
//! FC layer and `g = i = o` recovers elementwise scaling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{concat, NDTensor, Scalar, Tape};

/// Dense linear map `y = x·Wᵀ (+ b)` with `W: [o×i]`.
pub struct FullyConnected<T: Scalar> {
    pub weight: NDTensor<T>,
    pub bias: Option<NDTensor<T>>,
    out_features: usize,
    in_features: usize,
}

impl<T: Scalar> FullyConnected<T> {
    pub fn new(in_features: usize, out_features: usize, bias: bool) -> Result<Self> {
        if in_features == 0 || out_features == 0 {
            return Err(Error::Config(format!(
                "fully-connected extents must be >= 1, got {out_features}x{in_features}"
            )));
        }
        Ok(FullyConnected {
            weight: NDTensor::zeros(vec![out_features, in_features])?,
            bias: if bias {
                Some(NDTensor::zeros(vec![out_features])?)
            } else {
                None
            },
            out_features,
            in_features,
        })
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    /// Weights ~ U(−s, s) with s = 1/√fan_in; biases zero.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_uniform(&self.weight, self.in_features, &mut rng);
        if let Some(b) = &self.bias {
            b.update_data(|d| d.fill(T::ZERO));
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: &NDTensor<T>) -> Result<NDTensor<T>> {
        let y = x.matmul(&self.weight.watch(tape).transpose2d()?)?;
        match &self.bias {
            Some(b) => y.add_bias2d(&b.watch(tape)),
            None => Ok(y),
        }
    }

    pub fn parameters(&self) -> Vec<(&'static str, &NDTensor<T>)> {
        let mut v = vec![("weight", &self.weight)];
        if let Some(b) = &self.bias {
            v.push(("bias", b));
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, |b| b.numel())
    }
}

/// Block-diagonal linear map: `g` independent (o/g × i/g) blocks over
/// contiguous channel slices.
pub struct GroupedFullyConnected<T: Scalar> {
    pub blocks: Vec<NDTensor<T>>,
    pub bias: Option<NDTensor<T>>,
    groups: usize,
    in_features: usize,
    out_features: usize,
}

impl<T: Scalar> GroupedFullyConnected<T> {
    pub fn new(in_features: usize, out_features: usize, groups: usize, bias: bool) -> Result<Self> {
        if groups == 0 {
            return Err(Error::Config("group count must be >= 1".into()));
        }
        if in_features % groups != 0 {
            return Err(Error::Config(format!(
                "groups {groups} must divide input width {in_features}"
            )));
        }
        if out_features % groups != 0 {
            return Err(Error::Config(format!(
                "groups {groups} must divide output width {out_features}"
            )));
        }
        let (ig, og) = (in_features / groups, out_features / groups);
        let blocks = (0..groups)
            .map(|_| NDTensor::zeros(vec![og, ig]))
            .collect::<Result<Vec<_>>>()?;
        Ok(GroupedFullyConnected {
            blocks,
            bias: if bias {
                Some(NDTensor::zeros(vec![out_features])?)
            } else {
                None
            },
            groups,
            in_features,
            out_features,
        })
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    pub fn block_shape(&self) -> (usize, usize) {
        (self.out_features / self.groups, self.in_features / self.groups)
    }

    /// Per-block fan_in is the block input width i/g.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = self.in_features / self.groups;
        for blk in &self.blocks {
            init_uniform(blk, fan_in, &mut rng);
        }
        if let Some(b) = &self.bias {
            b.update_data(|d| d.fill(T::ZERO));
        }
    }

    /// `[B×i] -> [B×o]`: per-group matmul on channel slices.
    pub fn forward(&self, tape: &Tape<T>, x: &NDTensor<T>) -> Result<NDTensor<T>> {
        if x.shape().len() != 2 || x.shape()[1] != self.in_features {
            return Err(Error::ShapeMismatch {
                op: "grouped_fc",
                lhs: x.shape().to_vec(),
                rhs: vec![self.in_features],
            });
        }
        let ig = self.in_features / self.groups;
        let mut parts = Vec::with_capacity(self.groups);
        for (gi, blk) in self.blocks.iter().enumerate() {
            let xg = x.narrow(1, gi * ig, ig)?;
            parts.push(xg.matmul(&blk.watch(tape).transpose2d()?)?);
        }
        let refs: Vec<&NDTensor<T>> = parts.iter().collect();
        let y = concat(&refs, 1)?;
        match &self.bias {
            Some(b) => y.add_bias2d(&b.watch(tape)),
            None => Ok(y),
        }
    }

    /// The zero-padded dense [o×i] matrix. Test-oracle material only; the
    /// layer itself never stores it.
    pub fn materialize_dense(&self) -> Result<NDTensor<T>> {
        let (og, ig) = self.block_shape();
        let mut dense = vec![T::ZERO; self.out_features * self.in_features];
        for (gi, blk) in self.blocks.iter().enumerate() {
            let bd = blk.data();
            for r in 0..og {
                for c in 0..ig {
                    dense[(gi * og + r) * self.in_features + gi * ig + c] = bd[r * ig + c];
                }
            }
        }
        NDTensor::from_vec(vec![self.out_features, self.in_features], dense)
    }

    pub fn parameters(&self) -> Vec<(String, &NDTensor<T>)> {
        let mut v: Vec<(String, &NDTensor<T>)> = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| (format!("block{i}"), b))
            .collect();
        if let Some(b) = &self.bias {
            v.push(("bias".into(), b));
        }
        v
    }

    /// Stored scalar count: exactly o·i/g (+ bias).
    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.numel()).sum::<usize>()
            + self.bias.as_ref().map_or(0, |b| b.numel())
    }
}

/// Per-channel batch normalization with running statistics.
pub struct BatchNorm<T: Scalar> {
    pub scale: NDTensor<T>,
    pub shift: NDTensor<T>,
    pub running_mean: NDTensor<T>,
    pub running_var: NDTensor<T>,
    pub momentum: T,
    pub eps: T,
    channels: usize,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            scale: NDTensor::full(vec![channels], T::ONE)?,
            shift: NDTensor::zeros(vec![channels])?,
            running_mean: NDTensor::zeros(vec![channels])?,
            running_var: NDTensor::full(vec![channels], T::ONE)?,
            momentum: T::from_f64(0.1),
            eps: T::from_f64(1e-5),
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Training forward: normalize with batch statistics and fold them into
    /// the running estimates.
    pub fn forward_train(&self, tape: &Tape<T>, x: &NDTensor<T>) -> Result<NDTensor<T>> {
        let (y, mean, var) = crate::tensor::batch_norm_train(
            x,
            &self.scale.watch(tape),
            &self.shift.watch(tape),
            self.eps,
        )?;
        let m = self.momentum;
        let mean = mean.to_vec();
        let var = var.to_vec();
        self.running_mean
            .update_data(|d| d.iter_mut().zip(&mean).for_each(|(r, &b)| *r = *r * (T::ONE - m) + b * m));
        self.running_var
            .update_data(|d| d.iter_mut().zip(&var).for_each(|(r, &b)| *r = *r * (T::ONE - m) + b * m));
        Ok(y)
    }

    /// Inference forward: running statistics only. Folded to a per-channel
    /// affine with constant coefficients, so no gradient reaches scale/shift.
    pub fn forward_eval(&self, _tape: &Tape<T>, x: &NDTensor<T>) -> Result<NDTensor<T>> {
        let rm = self.running_mean.data();
        let rv = self.running_var.data();
        let sc = self.scale.data();
        let sh = self.shift.data();
        let mut a = vec![T::ZERO; self.channels];
        let mut b = vec![T::ZERO; self.channels];
        for c in 0..self.channels {
            let inv_sigma = T::ONE / (rv[c] + self.eps).sqrt();
            a[c] = sc[c] * inv_sigma;
            b[c] = sh[c] - rm[c] * a[c];
        }
        drop((rm, rv, sc, sh));
        let a = NDTensor::from_vec(vec![self.channels], a)?;
        let b = NDTensor::from_vec(vec![self.channels], b)?;
        x.affine_channels(&a, &b)
    }

    pub fn forward(&self, tape: &Tape<T>, x: &NDTensor<T>, training: bool) -> Result<NDTensor<T>> {
        if training {
            self.forward_train(tape, x)
        } else {
            self.forward_eval(tape, x)
        }
    }

    pub fn parameters(&self) -> Vec<(&'static str, &NDTensor<T>)> {
        vec![("scale", &self.scale), ("shift", &self.shift)]
    }

    /// Running statistics: checkpoint state, not trained parameters.
    pub fn state(&self) -> Vec<(&'static str, &NDTensor<T>)> {
        vec![
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ]
    }
}

/// U(−s, s) with s = 1/√fan_in, filled in index order from `rng`.
pub fn init_uniform<T: Scalar>(t: &NDTensor<T>, fan_in: usize, rng: &mut ChaCha8Rng) {
    let s = 1.0 / (fan_in as f64).sqrt();
    t.update_data(|d| {
        for v in d.iter_mut() {
            *v = T::from_f64(rng.gen_range(-s..s));
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn randn_tensor(shape: Vec<usize>, seed: u64) -> NDTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        NDTensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn grouped_fc_with_one_group_matches_dense_fc() {
        let mut fc = FullyConnected::<f64>::new(6, 4, false).unwrap();
        fc.init_params(3);
        let gfc = GroupedFullyConnected::<f64>::new(6, 4, 1, false).unwrap();
        gfc.blocks[0].update_data(|d| d.copy_from_slice(&fc.weight.to_vec()));
        let x = randn_tensor(vec![5, 6], 11);
        let tape = Tape::new();
        let a = fc.forward(&tape, &x).unwrap();
        let b = gfc.forward(&tape, &x).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn grouped_fc_diagonal_case_is_elementwise_scaling() {
        // g = i = o with 1x1 blocks.
        let n = 5;
        let gfc = GroupedFullyConnected::<f64>::new(n, n, n, false).unwrap();
        for (k, blk) in gfc.blocks.iter().enumerate() {
            blk.update_data(|d| d[0] = (k + 1) as f64);
        }
        let x = randn_tensor(vec![2, n], 12);
        let tape = Tape::new();
        let y = gfc.forward(&tape, &x).unwrap();
        let xv = x.to_vec();
        let yv = y.to_vec();
        for b in 0..2 {
            for k in 0..n {
                assert_eq!(yv[b * n + k], xv[b * n + k] * (k + 1) as f64);
            }
        }
    }

    #[test]
    fn grouped_fc_matches_materialized_block_diagonal() {
        let mut gfc = GroupedFullyConnected::<f64>::new(8, 16, 4, false).unwrap();
        gfc.init_params(7);
        let x = randn_tensor(vec![3, 8], 13);
        let tape = Tape::new();
        let y = gfc.forward(&tape, &x).unwrap();
        let dense = gfc.materialize_dense().unwrap();
        let oracle = x.matmul(&dense.transpose2d().unwrap()).unwrap();
        for (a, b) in y.to_vec().iter().zip(oracle.to_vec()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn dense_materialization_has_expected_sparsity() {
        let mut gfc = GroupedFullyConnected::<f64>::new(8, 16, 4, false).unwrap();
        gfc.init_params(1);
        assert_eq!(gfc.param_count(), 16 * 8 / 4);
        let dense = gfc.materialize_dense().unwrap();
        let nonzero_budget = 16 * 8 / 4;
        let nonzero = dense.to_vec().iter().filter(|v| **v != 0.0).count();
        assert!(nonzero <= nonzero_budget);
        // Entries outside the diagonal blocks are identically zero.
        let d = dense.to_vec();
        let (og, ig) = gfc.block_shape();
        for r in 0..16 {
            for c in 0..8 {
                if r / og != c / ig {
                    assert_eq!(d[r * 8 + c], 0.0);
                }
            }
        }
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut fc = FullyConnected::<f64>::new(100, 30, true).unwrap();
        fc.init_params(5);
        assert!(fc.weight.to_vec().iter().all(|v| v.abs() <= 0.1));
        assert!(fc.bias.as_ref().unwrap().to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_deterministic() {
        let mut a = FullyConnected::<f32>::new(9, 4, false).unwrap();
        let mut b = FullyConnected::<f32>::new(9, 4, false).unwrap();
        a.init_params(42);
        b.init_params(42);
        assert_eq!(a.weight.to_vec(), b.weight.to_vec());
    }

    #[test]
    fn grouped_init_uses_per_block_fan_in() {
        // i = 8, g = 4 -> per-block fan_in 2 -> bound 1/sqrt(2), well above
        // the dense-layer bound 1/sqrt(8).
        let mut gfc = GroupedFullyConnected::<f64>::new(8, 8, 4, false).unwrap();
        gfc.init_params(1234);
        let bound = 1.0 / (2.0f64).sqrt();
        let mut saw_large = false;
        for blk in &gfc.blocks {
            for v in blk.to_vec() {
                assert!(v.abs() <= bound);
                if v.abs() > 1.0 / (8.0f64).sqrt() {
                    saw_large = true;
                }
            }
        }
        // With 16 draws the chance all land inside the smaller bound is
        // (1/2)^16; this seed does not.
        assert!(saw_large);
    }

    #[test]
    fn grouped_fc_rejects_bad_divisibility() {
        assert!(matches!(
            GroupedFullyConnected::<f32>::new(7, 4, 2, false),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            GroupedFullyConnected::<f32>::new(8, 6, 4, false),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn batch_norm_normalizes_in_training() {
        let x = randn_tensor(vec![4, 3, 5, 5], 99);
        let bn = BatchNorm::<f64>::new(3).unwrap();
        let tape = Tape::new();
        let y = bn.forward_train(&tape, &x).unwrap();
        let yv = y.to_vec();
        let hw = 25;
        for c in 0..3 {
            let mut vals = Vec::new();
            for b in 0..4 {
                vals.extend_from_slice(&yv[(b * 3 + c) * hw..(b * 3 + c + 1) * hw]);
            }
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-10, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel {c} var {var}");
        }
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let bn = BatchNorm::<f64>::new(2).unwrap();
        bn.running_mean.update_data(|d| d.copy_from_slice(&[1.0, -1.0]));
        bn.running_var.update_data(|d| d.copy_from_slice(&[4.0, 0.25]));
        let x = NDTensor::from_vec(vec![1, 2, 1, 1], vec![3.0, 0.0]).unwrap();
        let tape = Tape::new();
        let y = bn.forward_eval(&tape, &x).unwrap();
        let yv = y.to_vec();
        let eps = 1e-5;
        assert!((yv[0] - (3.0 - 1.0) / (4.0f64 + eps).sqrt()).abs() < 1e-9);
        assert!((yv[1] - (0.0 + 1.0) / (0.25f64 + eps).sqrt()).abs() < 1e-9);
    }
}
