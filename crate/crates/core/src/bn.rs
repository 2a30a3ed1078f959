//! Per-channel batch normalization shared by the spectrum-normalized
//! harmonic block and the plain convolutional layers.

use crate::conv::{batch_moments, expect4};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Whether a forward pass uses batch statistics (training) or the stored
/// running statistics (evaluation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Learnable scale/shift plus running statistics for one normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BnState<T> {
    pub fn new(channels: usize) -> BnState<T> {
        BnState {
            gamma: vec![T::ONE; channels],
            beta: vec![T::ZERO; channels],
            running_mean: vec![T::ZERO; channels],
            running_var: vec![T::ONE; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Values saved by a training-phase forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Normalize `x` `[n][c][h][w]` per channel.
///
/// Training phase normalizes with the current batch's mean and population
/// variance and folds them into the running statistics with the state's
/// momentum; evaluation uses the running statistics unchanged.
pub fn bn_forward<T: Scalar>(
    x: &Tensor<T>,
    state: &mut BnState<T>,
    phase: Phase,
) -> Result<(Tensor<T>, Option<BnCache<T>>)> {
    let (n, c, h, w) = expect4(x, "bn input")?;
    if c != state.channels() {
        return Err(Error::shape(format!(
            "bn has {} channels, input has {c}",
            state.channels()
        )));
    }
    let eps = T::from_f64(state.eps);
    match phase {
        Phase::Train => {
            let (mean, var) = batch_moments(x)?;
            let mom = T::from_f64(state.momentum);
            let keep = T::from_f64(1.0 - state.momentum);
            let mut inv_std = vec![T::ZERO; c];
            for ci in 0..c {
                state.running_mean[ci] = keep * state.running_mean[ci] + mom * mean[ci];
                state.running_var[ci] = keep * state.running_var[ci] + mom * var[ci];
                inv_std[ci] = T::ONE / (var[ci] + eps).sqrt();
            }
            let mut xhat = Tensor::zeros(x.shape());
            let mut out = Tensor::zeros(x.shape());
            {
                let xd = x.data();
                let xh = xhat.data_mut();
                let od = out.data_mut();
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * h * w;
                        let (mu, istd) = (mean[ci], inv_std[ci]);
                        let (g, b) = (state.gamma[ci], state.beta[ci]);
                        for i in base..base + h * w {
                            let xc = (xd[i] - mu) * istd;
                            xh[i] = xc;
                            od[i] = g * xc + b;
                        }
                    }
                }
            }
            Ok((out, Some(BnCache { xhat, inv_std })))
        }
        Phase::Eval => {
            let mut out = Tensor::zeros(x.shape());
            {
                let xd = x.data();
                let od = out.data_mut();
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * h * w;
                        let istd = T::ONE / (state.running_var[ci] + eps).sqrt();
                        let (mu, g, b) = (state.running_mean[ci], state.gamma[ci], state.beta[ci]);
                        for i in base..base + h * w {
                            od[i] = g * (xd[i] - mu) * istd + b;
                        }
                    }
                }
            }
            Ok((out, None))
        }
    }
}

/// Gradients produced by [`bn_backward`].
pub struct BnGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Backward pass matching a training-phase [`bn_forward`].
pub fn bn_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    state: &BnState<T>,
    cache: &BnCache<T>,
) -> Result<BnGrads<T>> {
    let (n, c, h, w) = expect4(grad_out, "bn grad_out")?;
    if c != state.channels() || grad_out.shape() != cache.xhat.shape() {
        return Err(Error::shape(format!(
            "bn backward shapes: grad {:?}, cache {:?}, {} channels",
            grad_out.shape(),
            cache.xhat.shape(),
            state.channels()
        )));
    }
    let l = T::from_f64((n * h * w) as f64);
    let go = grad_out.data();
    let xh = cache.xhat.data();
    let mut g_gamma = vec![T::ZERO; c];
    let mut g_beta = vec![T::ZERO; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let mut sg = T::ZERO;
            let mut sgx = T::ZERO;
            for i in base..base + h * w {
                sg += go[i];
                sgx += go[i] * xh[i];
            }
            g_beta[ci] += sg;
            g_gamma[ci] += sgx;
        }
    }
    let mut gin = Tensor::zeros(grad_out.shape());
    {
        let gd = gin.data_mut();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                let scale = state.gamma[ci] * cache.inv_std[ci];
                let mean_g = g_beta[ci] / l;
                let mean_gx = g_gamma[ci] / l;
                for i in base..base + h * w {
                    gd[i] = scale * (go[i] - mean_g - xh[i] * mean_gx);
                }
            }
        }
    }
    Ok(BnGrads {
        input: gin,
        gamma: g_gamma,
        beta: g_beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::finite_diff_grad;
    use crate::rng::SeedRng;

    #[test]
    fn train_phase_standardizes() {
        let mut rng = SeedRng::new(3);
        let x = Tensor::<f64>::from_fn(&[4, 3, 5, 5], |_| rng.range(-2.0, 5.0));
        let mut st = BnState::<f64>::new(3);
        let (out, cache) = bn_forward(&x, &mut st, Phase::Train).unwrap();
        assert!(cache.is_some());
        let (m, v) = batch_moments(&out).unwrap();
        for c in 0..3 {
            assert!(m[c].abs() < 1e-12, "mean {}", m[c]);
            assert!((v[c] - 1.0).abs() < 1e-4, "var {}", v[c]); // eps shrinks it slightly
        }
        // running stats moved 10% of the way from (0, 1) to the batch stats
        let (bm, bv) = batch_moments(&x).unwrap();
        for c in 0..3 {
            assert!((st.running_mean[c] - 0.1 * bm[c]).abs() < 1e-12);
            assert!((st.running_var[c] - (0.9 + 0.1 * bv[c])).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_phase_uses_running_stats() {
        let mut st = BnState::<f64>::new(1);
        st.running_mean[0] = 2.0;
        st.running_var[0] = 4.0;
        st.gamma[0] = 3.0;
        st.beta[0] = -1.0;
        let x = Tensor::<f64>::new(&[1, 1, 1, 2], vec![2.0, 4.0]).unwrap();
        let (out, cache) = bn_forward(&x, &mut st.clone(), Phase::Eval).unwrap();
        assert!(cache.is_none());
        // (2-2)/2 * 3 - 1 = -1 ; (4-2)/2 * 3 - 1 ~ 2 (eps-shrunk)
        assert!((out.data()[0] - -1.0).abs() < 1e-9);
        assert!((out.data()[1] - 2.0).abs() < 1e-5);
    }

    #[test]
    fn backward_matches_finite_difference() {
        let mut rng = SeedRng::new(4);
        let x = Tensor::<f64>::from_fn(&[3, 2, 2, 2], |_| rng.range(-1.0, 1.0));
        let mut st = BnState::<f64>::new(2);
        st.gamma = vec![1.3, 0.7];
        st.beta = vec![0.1, -0.2];
        let coeffs: Vec<f64> = (0..x.numel()).map(|_| rng.range(-1.0, 1.0)).collect();
        let loss = |xs: &[f64]| -> f64 {
            let xt = Tensor::new(x.shape(), xs.to_vec()).unwrap();
            let (out, _) = bn_forward(&xt, &mut st.clone(), Phase::Train).unwrap();
            out.data().iter().zip(&coeffs).map(|(&o, &c)| o * c).sum()
        };
        let (_, cache) = bn_forward(&x, &mut st.clone(), Phase::Train).unwrap();
        let gout = Tensor::new(x.shape(), coeffs.clone()).unwrap();
        let grads = bn_backward(&gout, &st, &cache.unwrap()).unwrap();
        let mut f = loss;
        let fd = finite_diff_grad(&mut f, x.data(), 1e-6);
        for i in 0..x.numel() {
            assert!(
                (fd[i] - grads.input.data()[i]).abs() < 1e-7,
                "input grad {i}: fd {} vs {}",
                fd[i],
                grads.input.data()[i]
            );
        }
    }

    #[test]
    fn backward_gamma_beta_match_finite_difference() {
        let mut rng = SeedRng::new(5);
        let x = Tensor::<f64>::from_fn(&[2, 2, 3, 3], |_| rng.range(-1.0, 1.0));
        let st = BnState::<f64>::new(2);
        let coeffs: Vec<f64> = (0..x.numel()).map(|_| rng.range(-1.0, 1.0)).collect();
        let gout = Tensor::new(x.shape(), coeffs.clone()).unwrap();
        let (_, cache) = bn_forward(&x, &mut st.clone(), Phase::Train).unwrap();
        let grads = bn_backward(&gout, &st, &cache.unwrap()).unwrap();
        for param in ["gamma", "beta"] {
            let base = match param {
                "gamma" => st.gamma.clone(),
                _ => st.beta.clone(),
            };
            let mut f = |vals: &[f64]| -> f64 {
                let mut s2 = st.clone();
                match param {
                    "gamma" => s2.gamma = vals.to_vec(),
                    _ => s2.beta = vals.to_vec(),
                }
                let (out, _) = bn_forward(&x, &mut s2, Phase::Train).unwrap();
                out.data().iter().zip(&coeffs).map(|(&o, &c)| o * c).sum()
            };
            let fd = finite_diff_grad(&mut f, &base, 1e-6);
            let analytic = match param {
                "gamma" => &grads.gamma,
                _ => &grads.beta,
            };
            for i in 0..2 {
                assert!(
                    (fd[i] - analytic[i]).abs() < 1e-7,
                    "{param} {i}: fd {} vs {}",
                    fd[i],
                    analytic[i]
                );
            }
        }
    }
}
