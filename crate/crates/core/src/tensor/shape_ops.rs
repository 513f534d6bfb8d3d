use super::{shape_err, Backward, GradSink, Result, Scalar, Tape, Tensor, Var};

struct ReshapeRule;
impl<T: Scalar> Backward<T> for ReshapeRule {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], sink: &mut GradSink<'_, T>) {
        sink.add(0, grad);
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For every output position, the flat index of the input element it reads.
fn permute_index(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let n: usize = out_shape.iter().product();
    let mut idx = vec![0usize; out_shape.len()];
    let mut map = Vec::with_capacity(n);
    for _ in 0..n {
        map.push(idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum());
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}

struct PermuteRule {
    map: Vec<usize>,
}
impl<T: Scalar> Backward<T> for PermuteRule {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], sink: &mut GradSink<'_, T>) {
        sink.accumulate(0, |g| {
            for (o, &i) in self.map.iter().enumerate() {
                g[i] += grad[o];
            }
        });
    }
}

/// `(outer, dim, inner)` split of a shape around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

struct ConcatRule {
    axis: usize,
}
impl<T: Scalar> Backward<T> for ConcatRule {
    fn backward(&self, inputs: &[&Tensor<T>], out: &Tensor<T>, grad: &[T], sink: &mut GradSink<'_, T>) {
        let (outer, total, inner) = split_at_axis(out.shape(), self.axis);
        let mut offset = 0;
        for (k, x) in inputs.iter().enumerate() {
            let d = x.shape()[self.axis];
            sink.accumulate(k, |g| {
                for o in 0..outer {
                    let src = &grad[(o * total + offset) * inner..(o * total + offset + d) * inner];
                    let dst = &mut g[o * d * inner..(o + 1) * d * inner];
                    for (g, &v) in dst.iter_mut().zip(src) {
                        *g += v;
                    }
                }
            });
            offset += d;
        }
    }
}

struct NarrowRule {
    axis: usize,
    start: usize,
}
impl<T: Scalar> Backward<T> for NarrowRule {
    fn backward(&self, inputs: &[&Tensor<T>], out: &Tensor<T>, grad: &[T], sink: &mut GradSink<'_, T>) {
        let (outer, dim, inner) = split_at_axis(inputs[0].shape(), self.axis);
        let len = out.shape()[self.axis];
        sink.accumulate(0, |g| {
            for o in 0..outer {
                let dst = &mut g[(o * dim + self.start) * inner..(o * dim + self.start + len) * inner];
                let src = &grad[o * len * inner..(o + 1) * len * inner];
                for (g, &v) in dst.iter_mut().zip(src) {
                    *g += v;
                }
            }
        });
    }
}

struct MeanAxisRule {
    axis: usize,
}
impl<T: Scalar> Backward<T> for MeanAxisRule {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], sink: &mut GradSink<'_, T>) {
        let (outer, dim, inner) = split_at_axis(inputs[0].shape(), self.axis);
        let w = T::one() / T::from_usize(dim).unwrap();
        sink.accumulate(0, |g| {
            for o in 0..outer {
                for d in 0..dim {
                    let dst = &mut g[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                    let src = &grad[o * inner..(o + 1) * inner];
                    for (g, &v) in dst.iter_mut().zip(src) {
                        *g += v * w;
                    }
                }
            }
        });
    }
}

/// PyTorch-style adaptive bins: `[floor(i·n/m), ceil((i+1)·n/m))`.
fn adaptive_bins(n: usize, m: usize) -> Vec<(usize, usize)> {
    (0..m)
        .map(|i| ((i * n) / m, ((i + 1) * n).div_ceil(m)))
        .collect()
}

struct AdaptivePoolRule {
    bins: Vec<(usize, usize)>,
}
impl<T: Scalar> Backward<T> for AdaptivePoolRule {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], sink: &mut GradSink<'_, T>) {
        let t = inputs[0].shape()[2];
        let m = self.bins.len();
        let rows = inputs[0].len() / t;
        sink.accumulate(0, |g| {
            for r in 0..rows {
                for (i, &(s, e)) in self.bins.iter().enumerate() {
                    let w = grad[r * m + i] / T::from_usize(e - s).unwrap();
                    for v in &mut g[r * t + s..r * t + e] {
                        *v += w;
                    }
                }
            }
        });
    }
}

impl<T: Scalar> Tape<T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, &[x], Box::new(ReshapeRule)))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", format!("{perm:?} is not a permutation of {} axes", shape.len())));
        }
        let map = permute_index(&shape, perm);
        let src = self.data(x);
        let data = map.iter().map(|&i| src[i]).collect();
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let out = Tensor { shape: out_shape, data };
        Ok(self.push(out, &[x], Box::new(PermuteRule { map })))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(ax, (a, b))| ax == axis || a == b);
            if !compatible {
                return Err(shape_err(
                    "concat",
                    format!("{s:?} vs {first:?} disagree off axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&first, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &x in xs {
                let d = self.shape(x)[axis];
                data.extend_from_slice(&self.data(x)[o * d * inner..(o + 1) * d * inner]);
            }
        }
        Ok(self.push(Tensor { shape, data }, xs, Box::new(ConcatRule { axis })))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(shape_err(
                "narrow",
                format!("range {start}..{} invalid on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, dim, inner) = split_at_axis(&shape, axis);
        let src = self.data(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * dim + start) * inner..(o * dim + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor { shape: out_shape, data };
        Ok(self.push(out, &[x], Box::new(NarrowRule { axis, start })))
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape.len() < 2 {
            return Err(shape_err("mean_axis", format!("cannot reduce axis {axis} of {shape:?}")));
        }
        let (outer, dim, inner) = split_at_axis(&shape, axis);
        let src = self.data(x);
        let w = T::one() / T::from_usize(dim).unwrap();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let row = &src[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        data.iter_mut().for_each(|v| *v *= w);
        let mut out_shape = shape;
        out_shape.remove(axis);
        let out = Tensor { shape: out_shape, data };
        Ok(self.push(out, &[x], Box::new(MeanAxisRule { axis })))
    }

    /// Global average pooling: `[B, C, ...]` → `[B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 3 {
            return Err(shape_err("global_avg_pool", format!("need [B, C, ...], got {shape:?}")));
        }
        let flat = self.reshape(x, &[shape[0], shape[1], shape[2..].iter().product()])?;
        self.mean_axis(flat, 2)
    }

    /// Average-pool the last axis of `[B, C, T]` to exactly `out_len` steps.
    pub fn adaptive_avg_pool1d(&mut self, x: Var, out_len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || out_len == 0 || shape[2] < out_len {
            return Err(shape_err(
                "adaptive_avg_pool1d",
                format!("cannot pool time axis of {shape:?} to {out_len}"),
            ));
        }
        let t = shape[2];
        let bins = adaptive_bins(t, out_len);
        let src = self.data(x);
        let rows = shape[0] * shape[1];
        let mut data = Vec::with_capacity(rows * out_len);
        for r in 0..rows {
            for &(s, e) in &bins {
                let sum: T = src[r * t + s..r * t + e].iter().copied().sum();
                data.push(sum / T::from_usize(e - s).unwrap());
            }
        }
        let out = Tensor {
            shape: vec![shape[0], shape[1], out_len],
            data,
        };
        Ok(self.push(out, &[x], Box::new(AdaptivePoolRule { bins })))
    }
}
