use super::{contract_err, shape_err, Backward, GradSink, Result, Scalar, Tape, Tensor, TensorError, Var};

/// Per-channel batch statistics from a training-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    /// Biased (1/M) variance.
    pub var: Vec<T>,
}

fn bn_layout<T: Scalar>(tape: &Tape<T>, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
    let s = tape.shape(x);
    if s.len() < 2 {
        return Err(shape_err("batch_norm", format!("need [B, C, ...], got {s:?}")));
    }
    let (b, c) = (s[0], s[1]);
    let spatial = s[2..].iter().product();
    if tape.shape(gamma) != [c] || tape.shape(beta) != [c] {
        return Err(shape_err(
            "batch_norm",
            format!("gamma/beta must be [{c}] to match axis 1 of {s:?}"),
        ));
    }
    Ok((b, c, spatial))
}

struct BnTrainRule<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    c: usize,
    spatial: usize,
}

impl<T: Scalar> Backward<T> for BnTrainRule<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], sink: &mut GradSink<'_, T>) {
        let gamma = inputs[1].data();
        let (c, s) = (self.c, self.spatial);
        let b = grad.len() / (c * s);
        let m = T::from_usize(b * s).unwrap();
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * s;
                for i in off..off + s {
                    sum_dy[ch] += grad[i];
                    sum_dy_xhat[ch] += grad[i] * self.xhat[i];
                }
            }
        }
        sink.accumulate(0, |g| {
            for bi in 0..b {
                for ch in 0..c {
                    let k = gamma[ch] * self.inv_std[ch] / m;
                    let off = (bi * c + ch) * s;
                    for i in off..off + s {
                        g[i] += k * (m * grad[i] - sum_dy[ch] - self.xhat[i] * sum_dy_xhat[ch]);
                    }
                }
            }
        });
        sink.add(1, &sum_dy_xhat);
        sink.add(2, &sum_dy);
    }
}

struct BnEvalRule<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    c: usize,
    spatial: usize,
}

impl<T: Scalar> Backward<T> for BnEvalRule<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], sink: &mut GradSink<'_, T>) {
        let gamma = inputs[1].data();
        let (c, s) = (self.c, self.spatial);
        let b = grad.len() / (c * s);
        sink.accumulate(0, |g| {
            for bi in 0..b {
                for ch in 0..c {
                    let k = gamma[ch] * self.inv_std[ch];
                    let off = (bi * c + ch) * s;
                    for i in off..off + s {
                        g[i] += k * grad[i];
                    }
                }
            }
        });
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * s;
                for i in off..off + s {
                    dgamma[ch] += grad[i] * self.xhat[i];
                    dbeta[ch] += grad[i];
                }
            }
        }
        sink.add(1, &dgamma);
        sink.add(2, &dbeta);
    }
}

struct L2NormRule<T> {
    norms: Vec<T>,
}

impl<T: Scalar> Backward<T> for L2NormRule<T> {
    fn backward(&self, _: &[&Tensor<T>], out: &Tensor<T>, grad: &[T], sink: &mut GradSink<'_, T>) {
        let d = out.shape()[1];
        let y = out.data();
        sink.accumulate(0, |g| {
            for (r, &norm) in self.norms.iter().enumerate() {
                let row = r * d..(r + 1) * d;
                let dot: T = y[row.clone()].iter().zip(&grad[row.clone()]).map(|(&a, &b)| a * b).sum();
                for i in row {
                    g[i] += (grad[i] - y[i] * dot) / norm;
                }
            }
        });
    }
}

impl<T: Scalar> Tape<T> {
    /// Training-mode batch norm: normalise by the batch's own per-channel
    /// statistics. Needs at least two samples.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BnStats<T>)> {
        let (b, c, s) = bn_layout(self, x, gamma, beta)?;
        if b < 2 {
            return Err(contract_err(
                "batch_norm",
                "training mode needs a batch of at least 2 (single-sample variance is zero)",
            ));
        }
        let src = self.data(x);
        let m = T::from_usize(b * s).unwrap();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * s;
                mean[ch] += src[off..off + s].iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|v| *v = *v / m);
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * s;
                var[ch] += src[off..off + s].iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
            }
        }
        var.iter_mut().for_each(|v| *v = *v / m);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gamma_v, beta_v) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * s;
                for i in off..off + s {
                    xhat[i] = (src[i] - mean[ch]) * inv_std[ch];
                    out[i] = gamma_v[ch] * xhat[i] + beta_v[ch];
                }
            }
        }
        let out = Tensor { shape: self.shape(x).to_vec(), data: out };
        let rule = BnTrainRule { xhat, inv_std, c, spatial: s };
        let y = self.push(out, &[x, gamma, beta], Box::new(rule));
        Ok((y, BnStats { mean, var }))
    }

    /// Inference-mode batch norm with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (b, c, s) = bn_layout(self, x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err("batch_norm", format!("running statistics must have {c} channels")));
        }
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let src = self.data(x);
        let (gamma_v, beta_v) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * s;
                for i in off..off + s {
                    xhat[i] = (src[i] - running_mean[ch]) * inv_std[ch];
                    out[i] = gamma_v[ch] * xhat[i] + beta_v[ch];
                }
            }
        }
        let out = Tensor { shape: self.shape(x).to_vec(), data: out };
        let rule = BnEvalRule { xhat, inv_std, c, spatial: s };
        Ok(self.push(out, &[x, gamma, beta], Box::new(rule)))
    }

    /// Scale every row of `[B, D]` to unit Euclidean norm. Rows with norm at
    /// or below `1e-12` are an error rather than a silent division.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err("l2_normalize", format!("need [B, D], got {s:?}")));
        }
        let eps = 1e-12;
        let d = s[1];
        let src = self.data(x);
        let mut norms = Vec::with_capacity(s[0]);
        let mut out = Vec::with_capacity(src.len());
        for (r, row) in src.chunks_exact(d).enumerate() {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let n64 = norm.to_f64().unwrap_or(0.0);
            if !(n64 > eps) {
                return Err(TensorError::NearZeroNorm { op: "l2_normalize", row: r, norm: n64, eps });
            }
            norms.push(norm);
            out.extend(row.iter().map(|&v| v / norm));
        }
        let out = Tensor { shape: s, data: out };
        Ok(self.push(out, &[x], Box::new(L2NormRule { norms })))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_four_five() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let y = tape.l2_normalize(x).unwrap();
        assert!((tape.data(y)[0] - 0.6).abs() < 1e-15);
        assert!((tape.data(y)[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn unit_vector_is_fixed_point() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap());
        let y = tape.l2_normalize(x).unwrap();
        assert_eq!(tape.data(y), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn zero_row_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1e-13]).unwrap());
        assert!(matches!(tape.l2_normalize(x), Err(TensorError::NearZeroNorm { row: 1, .. })));
    }

    #[test]
    fn standardised_input_passes_through() {
        let mut tape = Tape::<f64>::new();
        // per-channel mean 0, var 1 over batch of 2
        let x = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, -1.0, -1.0, 1.0]).unwrap());
        let g = tape.leaf(Tensor::full(&[2], 1.0));
        let b = tape.leaf(Tensor::zeros(&[2]));
        let (y, stats) = tape.batch_norm_train(x, g, b, 1e-5).unwrap();
        assert_eq!(stats.mean, vec![0.0, 0.0]);
        for (a, e) in tape.data(y).iter().zip([1.0, -1.0, -1.0, 1.0]) {
            assert!((a - e).abs() < 1e-5);
        }
    }

    #[test]
    fn train_output_is_standardised() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..4 * 3 * 5).map(|i| ((i * 37) % 17) as f64 * 0.3 + 2.0).collect();
        let x = tape.leaf(Tensor::new(vec![4, 3, 5], data).unwrap());
        let g = tape.leaf(Tensor::full(&[3], 1.0));
        let b = tape.leaf(Tensor::zeros(&[3]));
        let (y, _) = tape.batch_norm_train(x, g, b, 1e-5).unwrap();
        let out = tape.data(y);
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|bi| out[(bi * 3 + ch) * 5..(bi * 3 + ch + 1) * 5].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn single_sample_train_batch_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 3]));
        let g = tape.leaf(Tensor::full(&[2], 1.0));
        let b = tape.leaf(Tensor::zeros(&[2]));
        assert!(tape.batch_norm_train(x, g, b, 1e-5).is_err());
    }
}
