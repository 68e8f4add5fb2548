use crate::autodiff::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// How batch normalization obtains its statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    /// Batch statistics; running statistics are refreshed when
    /// `update_stats` is set.
    Train { update_stats: bool },
    /// Stored running statistics.
    Eval,
}

impl ForwardMode {
    pub const TRAIN: ForwardMode = ForwardMode::Train { update_stats: true };
}

/// Affine parameters and running statistics of one normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

pub(crate) fn channel_shape(c: usize) -> Shape {
    Shape::new(1, 1, 1, c)
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: Tensor::full(channel_shape(channels), T::one()),
            beta: Tensor::zeros(channel_shape(channels)),
            running_mean: Tensor::zeros(channel_shape(channels)),
            running_var: Tensor::full(channel_shape(channels), T::one()),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Blends batch statistics into the running ones; the variance is
    /// corrected to the unbiased estimate.
    pub fn update(&mut self, batch: &BatchStats<T>) {
        let m = T::from_f64_lossy(self.momentum);
        let keep = T::one() - m;
        let n = batch.count as f64;
        let correction = T::from_f64_lossy(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(batch.mean.data()) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(batch.var.data()) {
            *r = keep * *r + m * b * correction;
        }
    }
}

/// Per-channel mean and biased variance of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    pub count: usize,
}

fn batch_stats<T: Scalar>(x: &Tensor<T>) -> BatchStats<T> {
    let c = x.shape().channels();
    let rows = x.shape().rows();
    let mut mean = vec![T::zero(); c];
    for row in x.data().chunks_exact(c.max(1)) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m = *m + v;
        }
    }
    let n = T::from_usize(rows.max(1)).unwrap();
    mean.iter_mut().for_each(|m| *m = *m / n);
    let mut var = vec![T::zero(); c];
    for row in x.data().chunks_exact(c.max(1)) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            *s = *s + (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s = *s / n);
    BatchStats {
        mean: Tensor::from_vec(channel_shape(c), mean).expect("channel vector"),
        var: Tensor::from_vec(channel_shape(c), var).expect("channel vector"),
        count: rows,
    }
}

struct BatchNormOp<T> {
    normalized: Tensor<T>,
    inv_std: Vec<T>,
    /// Batch statistics feed back into the input gradient only in train mode.
    batch: bool,
}

impl<T: Scalar> Backward<T> for BatchNormOp<T> {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let gamma = inputs[1].data();
        let c = gamma.len();
        let rows = grad.shape().rows();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for (g_row, n_row) in grad.data().chunks_exact(c).zip(self.normalized.data().chunks_exact(c)) {
            for ch in 0..c {
                dgamma[ch] = dgamma[ch] + g_row[ch] * n_row[ch];
                dbeta[ch] = dbeta[ch] + g_row[ch];
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); grad.len()];
            if self.batch {
                // dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)),
                // with dxhat = gamma * dy.
                let n = T::from_usize(rows).unwrap();
                for (((d_row, g_row), n_row), _) in dx
                    .chunks_exact_mut(c)
                    .zip(grad.data().chunks_exact(c))
                    .zip(self.normalized.data().chunks_exact(c))
                    .zip(0..rows)
                {
                    for ch in 0..c {
                        let mean_d = gamma[ch] * dbeta[ch] / n;
                        let mean_dx = gamma[ch] * dgamma[ch] / n;
                        d_row[ch] = self.inv_std[ch] * (gamma[ch] * g_row[ch] - mean_d - n_row[ch] * mean_dx);
                    }
                }
            } else {
                for (d_row, g_row) in dx.chunks_exact_mut(c).zip(grad.data().chunks_exact(c)) {
                    for ch in 0..c {
                        d_row[ch] = gamma[ch] * self.inv_std[ch] * g_row[ch];
                    }
                }
            }
            Tensor::from_vec(grad.shape(), dx).expect("input shape")
        });
        Ok(vec![
            dx,
            needs[1].then(|| Tensor::from_vec(channel_shape(c), dgamma).expect("channel vector")),
            needs[2].then(|| Tensor::from_vec(channel_shape(c), dbeta).expect("channel vector")),
        ])
    }
}

/// Statistics source for [`Tape::batch_norm`].
#[derive(Clone, Copy, Debug)]
pub enum Statistics<'a, T> {
    Batch,
    Running { mean: &'a Tensor<T>, var: &'a Tensor<T> },
}

impl<T: Scalar> Tape<T> {
    /// Per-channel normalization over `(b, h, w)`. Returns the batch
    /// statistics when they were used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Statistics<'_, T>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let shape = self.shape(x);
        let c = shape.channels();
        for p in [gamma, beta] {
            if self.shape(p) != channel_shape(c) {
                return Err(Error::Dimension {
                    op: "batch_norm",
                    left: shape,
                    right: self.shape(p),
                });
            }
        }
        if shape.rows() == 0 {
            return Err(Error::domain(format!("batch_norm over empty input {shape}")));
        }
        let (mean, var, batch) = match stats {
            Statistics::Batch => {
                let s = batch_stats(self.value(x));
                (s.mean.clone(), s.var.clone(), Some(s))
            }
            Statistics::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Dimension {
                        op: "batch_norm",
                        left: shape,
                        right: mean.shape(),
                    });
                }
                (mean.clone(), var.clone(), None)
            }
        };
        let eps = T::from_f64_lossy(eps);
        let inv_std: Vec<T> = var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut normalized = vec![T::zero(); shape.numel()];
        let mut out = vec![T::zero(); shape.numel()];
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        for ((n_row, o_row), x_row) in normalized
            .chunks_exact_mut(c)
            .zip(out.chunks_exact_mut(c))
            .zip(self.value(x).data().chunks_exact(c))
        {
            for ch in 0..c {
                n_row[ch] = (x_row[ch] - mean.data()[ch]) * inv_std[ch];
                o_row[ch] = g[ch] * n_row[ch] + b[ch];
            }
        }
        let op = BatchNormOp {
            normalized: Tensor::from_vec(shape, normalized)?,
            inv_std,
            batch: batch.is_some(),
        };
        let y = self.record(op, &[x, gamma, beta], Tensor::from_vec(shape, out)?)?;
        Ok((y, batch))
    }
}

/// Tensor-level normalization; train mode refreshes `state`'s running
/// statistics.
pub fn batch_norm<T: Scalar>(x: &Tensor<T>, state: &mut BatchNormState<T>, mode: ForwardMode) -> Result<Tensor<T>> {
    if x.shape().channels() != state.channels() {
        return Err(Error::Dimension {
            op: "batch_norm",
            left: x.shape(),
            right: state.gamma.shape(),
        });
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(state.gamma.clone());
    let b = tape.constant(state.beta.clone());
    let stats = match mode {
        ForwardMode::Train { .. } => Statistics::Batch,
        ForwardMode::Eval => Statistics::Running {
            mean: &state.running_mean,
            var: &state.running_var,
        },
    };
    let (y, batch) = tape.batch_norm(xv, g, b, stats, state.eps)?;
    if let (ForwardMode::Train { update_stats: true }, Some(batch)) = (mode, batch) {
        state.update(&batch);
    }
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::oracle::{check_problem, GradProblem};

    fn sample(seed: u64) -> Tensor<f64> {
        Tensor::randn(Shape::new(2, 3, 2, 4), 2.0, &mut ChaCha8Rng::seed_from_u64(seed)).map(|v| v + 1.5)
    }

    #[test]
    fn train_output_is_standardized() {
        let x = sample(1);
        let input = batch_stats(&x);
        let mut st = BatchNormState::new(4);
        let y = batch_norm(&x, &mut st, ForwardMode::TRAIN).unwrap();
        let s = batch_stats(&y);
        for c in 0..4 {
            let v = input.var.data()[c];
            assert!(s.mean.data()[c].abs() < 1e-12);
            assert!((s.var.data()[c] - v / (v + BN_EPS)).abs() < 1e-12);
        }
        let mut exact = BatchNormState::new(4);
        exact.eps = 1e-12;
        let s = batch_stats(&batch_norm(&x, &mut exact, ForwardMode::TRAIN).unwrap());
        for c in 0..4 {
            assert!((s.var.data()[c] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn pre_normalized_input_passes_through() {
        let x = sample(2);
        let mut exact = BatchNormState::new(4);
        exact.eps = 1e-12;
        let z = batch_norm(&x, &mut exact.clone(), ForwardMode::TRAIN).unwrap();
        let y = batch_norm(&z, &mut exact, ForwardMode::TRAIN).unwrap();
        assert!(y.max_abs_diff(&z).unwrap() < 1e-6);
        let mut st = BatchNormState::new(4);
        let y = batch_norm(&z, &mut st, ForwardMode::TRAIN).unwrap();
        let scaled = z.map(|v| v / (1.0 + BN_EPS).sqrt());
        assert!(y.max_abs_diff(&scaled).unwrap() < 1e-9);
    }

    #[test]
    fn running_stats_follow_train_mode_only() {
        let x = sample(3);
        let mut st = BatchNormState::new(4);
        batch_norm(&x, &mut st, ForwardMode::Eval).unwrap();
        assert_eq!(st, BatchNormState::new(4));
        batch_norm(&x, &mut st, ForwardMode::Train { update_stats: false }).unwrap();
        assert_eq!(st, BatchNormState::new(4));
        batch_norm(&x, &mut st, ForwardMode::TRAIN).unwrap();
        let s = batch_stats(&x);
        let unbiased = s.var.data()[0] * 12.0 / 11.0;
        assert!((st.running_mean.data()[0] - 0.1 * s.mean.data()[0]).abs() < 1e-12);
        assert!((st.running_var.data()[0] - (0.9 + 0.1 * unbiased)).abs() < 1e-12);
    }

    #[test]
    fn eval_uses_running_stats() {
        let x = sample(4);
        let mut st = BatchNormState::new(4);
        st.running_mean = Tensor::full(channel_shape(4), 1.0);
        st.running_var = Tensor::full(channel_shape(4), 4.0);
        let y = batch_norm(&x, &mut st, ForwardMode::Eval).unwrap();
        let want = (x.data()[0] - 1.0) / (4.0f64 + BN_EPS).sqrt();
        assert!((y.data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn constant_single_element_batch_is_finite() {
        let x = Tensor::full(Shape::new(1, 1, 1, 3), 7.0f64);
        let mut st = BatchNormState::new(3);
        let y = batch_norm(&x, &mut st, ForwardMode::TRAIN).unwrap();
        assert!(y.all_finite());
        assert!(st.running_var.all_finite());
    }

    #[test]
    fn channel_mismatch() {
        let mut st = BatchNormState::<f64>::new(3);
        assert!(matches!(
            batch_norm(&sample(1), &mut st, ForwardMode::Eval),
            Err(Error::Dimension { .. })
        ));
    }

    fn problem(batch: bool) -> GradProblem<'static> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gamma = Tensor::randn(channel_shape(4), 1.0, &mut rng);
        let beta = Tensor::randn(channel_shape(4), 1.0, &mut rng);
        let mean = Tensor::randn(channel_shape(4), 1.0, &mut rng);
        let var = Tensor::full(channel_shape(4), 2.0);
        GradProblem {
            name: "batch_norm".into(),
            tensors: vec![("x".into(), sample(5)), ("gamma".into(), gamma), ("beta".into(), beta)],
            loss: Box::new(move |tape, v| {
                let stats = if batch {
                    Statistics::Batch
                } else {
                    Statistics::Running { mean: &mean, var: &var }
                };
                let (y, _) = tape.batch_norm(v[0], v[1], v[2], stats, BN_EPS)?;
                crate::oracle::probe_loss(tape, y, 3)
            }),
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for batch in [true, false] {
            for r in check_problem(&problem(batch), 1e-4).unwrap() {
                assert!(r.passed, "{r:?}");
            }
        }
    }
}
