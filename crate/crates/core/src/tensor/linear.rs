use super::{gemm, shape_err, Backward, GradSink, MatRef, Result, Scalar, Tape, Tensor, Var};

struct DenseRule;

impl<T: Scalar> Backward<T> for DenseRule {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], sink: &mut GradSink<'_, T>) {
        let (x, w) = (inputs[0], inputs[1]);
        let (b, i) = (x.shape()[0], x.shape()[1]);
        let o = w.shape()[1];
        let dy = MatRef::new(grad, b, o);
        if sink.wants(0) {
            sink.accumulate(0, |g| gemm(dy, MatRef::new(w.data(), i, o).t(), g, true));
        }
        if sink.wants(1) {
            sink.accumulate(1, |g| gemm(MatRef::new(x.data(), b, i).t(), dy, g, true));
        }
        if inputs.len() == 3 {
            sink.accumulate(2, |g| {
                for row in grad.chunks_exact(o) {
                    for (g, &d) in g.iter_mut().zip(row) {
                        *g += d;
                    }
                }
            });
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Fully connected layer `y = x·w + b` for `x: [B, I]`, `w: [I, O]`, `b: [O]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(shape_err(
                "dense",
                format!("x {xs:?} axis 1 must match w {ws:?} axis 0"),
            ));
        }
        let (rows, inner, o) = (xs[0], xs[1], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(shape_err(
                    "dense",
                    format!("bias {:?} must be [{o}] to match w axis 1", self.shape(b)),
                ));
            }
        }
        let mut out = vec![T::zero(); rows * o];
        if let Some(b) = b {
            let bias = self.data(b);
            for row in out.chunks_exact_mut(o) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            MatRef::new(self.data(x), rows, inner),
            MatRef::new(self.data(w), inner, o),
            &mut out,
            b.is_some(),
        );
        let out = Tensor {
            shape: vec![rows, o],
            data: out,
        };
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, &inputs, Box::new(DenseRule)))
    }
}
