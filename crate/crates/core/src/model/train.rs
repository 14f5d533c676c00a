use serde::{Deserialize, Serialize};

use super::transformer::Forward;
use super::{Model, TokenPair};
use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::rng::{Rng, SeedTree};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            total_steps: 1000,
            warmup_steps: 200,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return fail("eps must be > 0".into());
        }
        if !(self.clip_norm > 0.0) {
            return fail("clip_norm must be > 0".into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.lr,
            warmup_steps: self.warmup_steps,
        }
    }
}

/// Constant learning rate after a linear warmup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: u64,
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> f64 {
        if step >= self.warmup_steps {
            self.base
        } else {
            self.base * (step + 1) as f64 / self.warmup_steps as f64
        }
    }
}

/// Adam moments, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Real = f32> {
    pub(crate) t: u64,
    pub(crate) m: Vec<Tensor<T>>,
    pub(crate) v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(model: &Model<T>) -> Self {
        let zeros = || model.params().iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        Self { t: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub(crate) fn from_parts(t: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Self {
        Self { t, m, v }
    }

    fn update(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64, tc: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (tc.beta1, tc.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let step = T::from_f64(lr / c1);
        let (b1, b2, eps) = (T::from_f64(b1), T::from_f64(b2), T::from_f64(tc.eps));
        let inv_c2 = T::from_f64(1.0 / c2);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
            for (((p, &g), m), v) in it {
                *m = b1 * *m + (T::ONE - b1) * g;
                *v = b2 * *v + (T::ONE - b2) * g * g;
                *p -= step * *m / ((*v * inv_c2).sqrt() + eps);
            }
        }
    }
}

/// Mean teacher-forced cross-entropy over all target tokens, without dropout.
pub fn batch_loss<T: Real>(model: &Model<T>, pairs: &[TokenPair<'_>]) -> Result<f64> {
    model.check_pairs(pairs)?;
    if pairs.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mut f = Forward::new(model, None);
    let logits = f.teacher_forced(pairs);
    let targets: Vec<TokenId> = pairs.iter().flat_map(|p| p.target.iter().copied()).collect();
    let loss = f.g.cross_entropy(logits, &targets);
    Ok(f.g.value(loss).get(0, 0).to_f64())
}

/// Loss and its gradient with respect to every parameter tensor.
/// Dropout is active only when a generator is supplied.
pub fn loss_and_gradients<T: Real>(
    model: &Model<T>,
    pairs: &[TokenPair<'_>],
    dropout_rng: Option<Rng>,
) -> Result<(f64, Vec<Tensor<T>>)> {
    model.check_pairs(pairs)?;
    if pairs.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mut f = Forward::new(model, dropout_rng);
    let logits = f.teacher_forced(pairs);
    let targets: Vec<TokenId> = pairs.iter().flat_map(|p| p.target.iter().copied()).collect();
    let loss = f.g.cross_entropy(logits, &targets);
    let value = f.g.value(loss).get(0, 0).to_f64();
    let grads = f
        .g
        .backward(loss, model.params.len())
        .into_iter()
        .zip(model.params())
        .map(|(g, p)| g.unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols())))
        .collect();
    Ok((value, grads))
}

/// One optimizer step on `batch`; returns the pre-update loss.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    adam: &mut Adam<T>,
    batch: &[TokenPair<'_>],
    tc: &TrainConfig,
) -> Result<f64> {
    let step = model.step();
    let dropout_rng = SeedTree::new(tc.seed).child("dropout").index(step).rng();
    let (loss, mut grads) = loss_and_gradients(model, batch, Some(dropout_rng))?;
    if !loss.is_finite() {
        return Err(Error::Training {
            step,
            detail: format!("loss is {loss}"),
        });
    }
    let norm = grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::Training {
            step,
            detail: format!("gradient norm is {norm}"),
        });
    }
    if norm > tc.clip_norm {
        let s = T::from_f64(tc.clip_norm / norm);
        grads.iter_mut().flat_map(|g| g.data_mut().iter_mut()).for_each(|x| *x *= s);
    }
    let lr = tc.schedule().at(step);
    adam.update(&mut model.params, &grads, lr, tc);
    model.set_step(step + 1);
    Ok(loss)
}

/// Indices of the examples in the batch for `step`: consecutive windows over
/// a fresh seeded permutation per epoch, so any step can be reproduced alone.
pub fn batch_indices(n: usize, batch_size: usize, step: u64, seed: u64) -> Vec<usize> {
    let tree = SeedTree::new(seed).child("shuffle");
    let start = step as usize * batch_size;
    let mut out = Vec::with_capacity(batch_size);
    let mut epoch = usize::MAX;
    let mut perm = Vec::new();
    for pos in start..start + batch_size {
        let e = pos / n;
        if e != epoch {
            epoch = e;
            perm = permutation(n, &mut tree.index(e as u64).rng());
        }
        out.push(perm[pos % n]);
    }
    out
}

fn permutation(n: usize, rng: &mut Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Runs `steps` optimizer steps over `pairs`, calling `on_step(step, loss)` after each.
pub fn fit<T: Real>(
    model: &mut Model<T>,
    adam: &mut Adam<T>,
    pairs: &[(Vec<TokenId>, Vec<TokenId>)],
    tc: &TrainConfig,
    steps: u64,
    mut on_step: impl FnMut(u64, f64) -> Result<()>,
) -> Result<()> {
    tc.validate()?;
    if pairs.is_empty() {
        return Err(Error::Data("no training pairs".into()));
    }
    for _ in 0..steps {
        let step = model.step();
        let batch: Vec<TokenPair<'_>> = batch_indices(pairs.len(), tc.batch_size, step, tc.seed)
            .into_iter()
            .map(|i| TokenPair {
                input: &pairs[i].0,
                target: &pairs[i].1,
            })
            .collect();
        let loss = train_step(model, adam, &batch, tc)?;
        on_step(step, loss)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EOS;
    use crate::model::ModelConfig;
    use crate::rng::SeedTree;
    use rand::Rng as _;

    fn tiny(bottleneck: usize, vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            max_len: 8,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 16,
            bottleneck_dim: bottleneck,
            dropout_rate: 0.0,
            positional: Default::default(),
        }
    }

    fn random_pairs(n: usize, vocab: u32, seed: u64) -> Vec<(Vec<TokenId>, Vec<TokenId>)> {
        let mut rng = SeedTree::new(seed).rng();
        (0..n)
            .map(|_| {
                let mut make = || {
                    let len = rng.random_range(1..6);
                    let mut s: Vec<TokenId> = (0..len).map(|_| rng.random_range(4..vocab)).collect();
                    s.push(EOS);
                    s
                };
                (make(), make())
            })
            .collect()
    }

    fn as_batch(pairs: &[(Vec<TokenId>, Vec<TokenId>)]) -> Vec<TokenPair<'_>> {
        pairs.iter().map(|(a, b)| TokenPair { input: a, target: b }).collect()
    }

    /// Central differences on randomly sampled coordinates.
    fn gradient_check(cfg: ModelConfig, samples: usize, seed: u64) -> (usize, f64) {
        let mut model = Model::<f64>::new(cfg.clone(), seed).unwrap();
        // Non-trivial layer-norm parameters and biases.
        let mut rng = SeedTree::new(seed).child("perturb").rng();
        for p in model.params_mut() {
            for x in p.data_mut() {
                *x += rng.random_range(-0.3..0.3);
            }
        }
        let pairs = random_pairs(3, cfg.vocab_size as u32, seed);
        let batch = as_batch(&pairs);
        let (_, grads) = loss_and_gradients(&model, &batch, None).unwrap();
        let h = 1e-4;
        let total: usize = model.params().iter().map(|p| p.len()).sum();
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for _ in 0..samples {
            let mut flat = rng.random_range(0..total);
            let mut ti = 0;
            while flat >= model.params()[ti].len() {
                flat -= model.params()[ti].len();
                ti += 1;
            }
            let orig = model.params()[ti].data()[flat];
            model.params_mut()[ti].data_mut()[flat] = orig + h;
            let up = batch_loss(&model, &batch).unwrap();
            model.params_mut()[ti].data_mut()[flat] = orig - h;
            let down = batch_loss(&model, &batch).unwrap();
            model.params_mut()[ti].data_mut()[flat] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[ti].data()[flat];
            let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-7);
            worst = worst.max(rel);
            checked += 1;
        }
        (checked, worst)
    }

    #[test]
    fn gradients_match_finite_differences() {
        for bottleneck in [6, 0] {
            let (n, worst) = gradient_check(tiny(bottleneck, 11), 250, 17 + bottleneck as u64);
            assert!(n >= 200);
            assert!(worst < 1e-3, "bottleneck {bottleneck}: worst relative error {worst}");
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut model = Model::<f32>::new(tiny(6, 11), 1).unwrap();
        let before = model.params().to_vec();
        let mut adam = Adam::new(&model);
        let pairs = random_pairs(4, 11, 2);
        let tc = TrainConfig { lr: 0.0, ..Default::default() };
        for _ in 0..3 {
            train_step(&mut model, &mut adam, &as_batch(&pairs), &tc).unwrap();
        }
        assert_eq!(model.params(), &before[..]);
        assert_eq!(model.step(), 3);
    }

    #[test]
    fn initial_loss_is_near_log_vocab() {
        let v = 64;
        let model = Model::<f32>::new(tiny(6, v), 4).unwrap();
        let pairs = random_pairs(64, v as u32, 9);
        let loss = batch_loss(&model, &as_batch(&pairs)).unwrap();
        let expected = (v as f64).ln();
        assert!((loss - expected).abs() < 0.1 * expected, "loss {loss} vs ln V {expected}");
    }

    #[test]
    fn overfits_a_single_pair() {
        let mut model = Model::<f32>::new(tiny(6, 11), 5).unwrap();
        let mut adam = Adam::new(&model);
        let pair = (vec![4, 5, 6, EOS], vec![7, 8, 9, 10, EOS]);
        let pairs = vec![pair; 4];
        let tc = TrainConfig {
            lr: 3e-3,
            warmup_steps: 10,
            batch_size: 4,
            ..Default::default()
        };
        fit(&mut model, &mut adam, &pairs, &tc, 500, |_, _| Ok(())).unwrap();
        assert_eq!(model.token_accuracy(&as_batch(&pairs[..1])).unwrap(), 1.0);
    }

    #[test]
    fn loss_trajectory_is_deterministic() {
        let run = || {
            let mut model = Model::<f32>::new(tiny(6, 11), 8).unwrap();
            let mut adam = Adam::new(&model);
            let pairs = random_pairs(40, 11, 3);
            let tc = TrainConfig {
                batch_size: 8,
                seed: 4,
                ..Default::default()
            };
            let mut losses = Vec::new();
            fit(&mut model, &mut adam, &pairs, &tc, 100, |_, l| {
                losses.push(l.to_bits());
                Ok(())
            })
            .unwrap();
            losses
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn diverging_loss_is_reported_with_its_step() {
        let mut model = Model::<f32>::new(tiny(6, 11), 1).unwrap();
        model.params_mut()[0].data_mut().fill(f32::NAN);
        let mut adam = Adam::new(&model);
        let pairs = random_pairs(2, 11, 2);
        let err = train_step(&mut model, &mut adam, &as_batch(&pairs), &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Training { step: 0, .. }));
    }

    #[test]
    fn batches_cover_each_epoch() {
        let mut seen: Vec<usize> = (0..5).flat_map(|s| batch_indices(10, 2, s, 3)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_indices(10, 4, 7, 3), batch_indices(10, 4, 7, 3));
    }

    #[test]
    fn warmup_is_linear() {
        let s = LrSchedule { base: 1.0, warmup_steps: 4 };
        assert_eq!([s.at(0), s.at(1), s.at(3), s.at(100)], [0.25, 0.5, 1.0, 1.0]);
        assert_eq!(LrSchedule { base: 2.0, warmup_steps: 0 }.at(0), 2.0);
    }
}
