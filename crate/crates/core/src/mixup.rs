//! Mixup: Beta-weighted convex combinations of example pairs and targets.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MixupConfig {
    /// Beta concentration; `None` disables mixup.
    pub alpha: Option<f64>,
}

impl MixupConfig {
    pub fn disabled() -> Self {
        MixupConfig { alpha: None }
    }

    pub fn with_alpha(alpha: f64) -> Self {
        MixupConfig { alpha: Some(alpha) }
    }

    pub fn enabled(&self) -> bool {
        self.alpha.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        match self.alpha {
            Some(a) if !(a > 0.0 && a.is_finite()) => {
                Err(Error::invalid(format!("mixup alpha {a} must be positive")))
            }
            _ => Ok(()),
        }
    }
}

/// One draw of `λ ~ Beta(α, α)` as `g1 / (g1 + g2)` with `g ~ Gamma(α, 1)`.
pub fn sample_lambda(alpha: f64, rng: &mut Rng) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("mixup alpha {alpha} must be positive")));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    loop {
        let (g1, g2): (f64, f64) = (gamma.sample(rng), gamma.sample(rng));
        // both draws can underflow to zero for very small alpha
        if g1 + g2 > 0.0 {
            return Ok(g1 / (g1 + g2));
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixupSample {
    pub lambda: f64,
    pub x: Tensor,
    pub y: f64,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("mixup lambda {lambda} outside [0, 1]")));
    }
    Ok(())
}

fn blend(a: f64, b: f64, lambda: f64) -> f64 {
    // exact at both endpoints
    if lambda == 1.0 {
        a
    } else if lambda == 0.0 {
        b
    } else {
        lambda * a + (1.0 - lambda) * b
    }
}

pub fn mix_pair(x_i: &Tensor, y_i: f64, x_j: &Tensor, y_j: f64, lambda: f64) -> Result<MixupSample> {
    check_lambda(lambda)?;
    if x_i.shape() != x_j.shape() {
        return Err(Error::ShapeMismatch {
            op: "mix_pair",
            expected: x_i.shape().to_vec(),
            got: x_j.shape().to_vec(),
        });
    }
    let data = x_i
        .data()
        .iter()
        .zip(x_j.data())
        .map(|(&a, &b)| blend(a, b, lambda))
        .collect();
    Ok(MixupSample {
        lambda,
        x: Tensor::new(x_i.shape().to_vec(), data)?,
        y: blend(y_i, y_j, lambda),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedBatch {
    pub inputs: Tensor,
    pub targets: Tensor,
    /// `None` when mixup is disabled.
    pub lambda: Option<f64>,
    pub partners: Vec<usize>,
}

/// Mixes example `i` with `π(i)` for a uniform random permutation `π`,
/// sharing one `λ` across the batch.
pub fn mixup_batch(inputs: &Tensor, targets: &Tensor, config: &MixupConfig, rng: &mut Rng) -> Result<MixedBatch> {
    config.validate()?;
    check_batch(inputs, targets)?;
    match config.alpha {
        None => Ok(MixedBatch {
            inputs: inputs.clone(),
            targets: targets.clone(),
            lambda: None,
            partners: (0..targets.len()).collect(),
        }),
        Some(alpha) => {
            let lambda = sample_lambda(alpha, rng)?;
            mixup_batch_with_lambda(inputs, targets, lambda, rng)
        }
    }
}

/// [`mixup_batch`] with a fixed `λ`; only the permutation is random.
pub fn mixup_batch_with_lambda(inputs: &Tensor, targets: &Tensor, lambda: f64, rng: &mut Rng) -> Result<MixedBatch> {
    check_lambda(lambda)?;
    check_batch(inputs, targets)?;
    let n = targets.len();
    let mut partners: Vec<usize> = (0..n).collect();
    partners.shuffle(rng);
    let per = inputs.len() / n;
    let (x, y) = (inputs.data(), targets.data());
    let mut mixed = Vec::with_capacity(inputs.len());
    for (i, &j) in partners.iter().enumerate() {
        let (a, b) = (&x[i * per..(i + 1) * per], &x[j * per..(j + 1) * per]);
        mixed.extend(a.iter().zip(b).map(|(&u, &v)| blend(u, v, lambda)));
    }
    let mixed_y = partners.iter().enumerate().map(|(i, &j)| blend(y[i], y[j], lambda)).collect();
    Ok(MixedBatch {
        inputs: Tensor::new(inputs.shape().to_vec(), mixed)?,
        targets: Tensor::from_vec(mixed_y),
        lambda: Some(lambda),
        partners,
    })
}

fn check_batch(inputs: &Tensor, targets: &Tensor) -> Result<()> {
    let n = targets.len();
    if n < 2 {
        return Err(Error::invalid(format!("mixup needs at least 2 examples, got {n}")));
    }
    if targets.rank() != 1 || inputs.shape().first() != Some(&n) {
        return Err(Error::ShapeMismatch {
            op: "mixup_batch",
            expected: vec![n],
            got: inputs.shape().to_vec(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn moments(alpha: f64, n: usize, seed: u64) -> (f64, f64) {
        let mut rng = seeded(seed);
        let draws: Vec<f64> = (0..n).map(|_| sample_lambda(alpha, &mut rng).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (mean, var)
    }

    #[test]
    fn alpha_one_is_uniform() {
        let (mean, var) = moments(1.0, 100_000, 1);
        assert!((mean - 0.5).abs() < 0.005);
        assert!((var - 1.0 / 12.0).abs() < 0.005);
    }

    #[test]
    fn alpha_sixteen_variance() {
        let (mean, var) = moments(16.0, 100_000, 2);
        let expected = 1.0 / 132.0;
        assert!((mean - 0.5).abs() < 0.01);
        assert!((var - expected).abs() < 0.1 * expected);
    }

    #[test]
    fn non_positive_alpha_rejected() {
        assert!(sample_lambda(0.0, &mut seeded(0)).is_err());
        assert!(sample_lambda(-1.0, &mut seeded(0)).is_err());
        assert!(MixupConfig::with_alpha(0.0).validate().is_err());
    }

    #[test]
    fn pair_examples() {
        let (a, b) = (Tensor::from_vec(vec![4.0]), Tensor::from_vec(vec![0.0]));
        let s = mix_pair(&a, 1.0, &b, 0.0, 1.0).unwrap();
        assert_eq!((s.x.data()[0], s.y), (4.0, 1.0));
        assert_eq!(mix_pair(&a, 1.0, &b, 0.0, 0.5).unwrap().y, 0.5);
        assert_eq!(mix_pair(&a, 1.0, &b, 0.0, 0.25).unwrap().x.data()[0], 1.0);
        assert!(mix_pair(&a, 1.0, &Tensor::zeros(&[2]), 0.0, 0.5).is_err());
        assert!(mix_pair(&a, 1.0, &b, 0.0, 1.5).is_err());
    }

    #[test]
    fn batch_identity_cases() {
        let x = Tensor::from_fn(&[4, 2], |i| i as f64);
        let y = Tensor::from_vec(vec![1.0, 0.0, 0.3, 0.8]);
        let off = mixup_batch(&x, &y, &MixupConfig::disabled(), &mut seeded(0)).unwrap();
        assert_eq!((off.inputs, off.targets), (x.clone(), y.clone()));
        let one = mixup_batch_with_lambda(&x, &y, 1.0, &mut seeded(0)).unwrap();
        assert_eq!((one.inputs, one.targets), (x.clone(), y.clone()));
        assert!(mixup_batch(&Tensor::zeros(&[1, 2]), &Tensor::zeros(&[1]), &MixupConfig::with_alpha(1.0), &mut seeded(0)).is_err());
    }

    #[test]
    fn batch_targets_in_convex_hull() {
        let x = Tensor::from_fn(&[6, 3], |i| (i % 5) as f64);
        let y = Tensor::from_vec(vec![0.2, 0.9, 0.4, 0.6, 0.3, 0.7]);
        let out = mixup_batch(&x, &y, &MixupConfig::with_alpha(0.4), &mut seeded(3)).unwrap();
        assert!(out.targets.data().iter().all(|&t| (0.2..=0.9).contains(&t)));
        let mut sorted = out.partners.clone();
        sorted.sort();
        assert_eq!(sorted, (0..6).collect::<Vec<_>>());
    }
}
