use super::{shape_err, Backward, GradSink, Result, Scalar, Tape, Tensor, Var};

fn same_shape<T: Scalar>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(shape_err(
            op,
            format!("operands {:?} and {:?} differ", tape.shape(a), tape.shape(b)),
        ));
    }
    Ok(())
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor {
        shape: a.shape().to_vec(),
        data,
    }
}

struct AddRule;
impl<T: Scalar> Backward<T> for AddRule {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], sink: &mut GradSink<'_, T>) {
        sink.add(0, grad);
        sink.add(1, grad);
    }
}

struct SubRule;
impl<T: Scalar> Backward<T> for SubRule {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], sink: &mut GradSink<'_, T>) {
        sink.add(0, grad);
        sink.accumulate(1, |g| {
            for (g, &d) in g.iter_mut().zip(grad) {
                *g -= d;
            }
        });
    }
}

struct MulRule;
impl<T: Scalar> Backward<T> for MulRule {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], sink: &mut GradSink<'_, T>) {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        sink.accumulate(0, |g| {
            for i in 0..g.len() {
                g[i] += grad[i] * b[i];
            }
        });
        sink.accumulate(1, |g| {
            for i in 0..g.len() {
                g[i] += grad[i] * a[i];
            }
        });
    }
}

struct ScaleRule<T>(T);
impl<T: Scalar> Backward<T> for ScaleRule<T> {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], sink: &mut GradSink<'_, T>) {
        let s = self.0;
        sink.accumulate(0, |g| {
            for (g, &d) in g.iter_mut().zip(grad) {
                *g += s * d;
            }
        });
    }
}

struct SumRule;
impl<T: Scalar> Backward<T> for SumRule {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], sink: &mut GradSink<'_, T>) {
        let d = grad[0];
        sink.accumulate(0, |g| g.iter_mut().for_each(|g| *g += d));
    }
}

struct ReluRule;
impl<T: Scalar> Backward<T> for ReluRule {
    fn backward(&self, _: &[&Tensor<T>], out: &Tensor<T>, grad: &[T], sink: &mut GradSink<'_, T>) {
        let y = out.data();
        sink.accumulate(0, |g| {
            for i in 0..g.len() {
                if y[i] > T::zero() {
                    g[i] += grad[i];
                }
            }
        });
    }
}

struct TanhRule;
impl<T: Scalar> Backward<T> for TanhRule {
    fn backward(&self, _: &[&Tensor<T>], out: &Tensor<T>, grad: &[T], sink: &mut GradSink<'_, T>) {
        let y = out.data();
        sink.accumulate(0, |g| {
            for i in 0..g.len() {
                g[i] += grad[i] * (T::one() - y[i] * y[i]);
            }
        });
    }
}

struct SigmoidRule;
impl<T: Scalar> Backward<T> for SigmoidRule {
    fn backward(&self, _: &[&Tensor<T>], out: &Tensor<T>, grad: &[T], sink: &mut GradSink<'_, T>) {
        let y = out.data();
        sink.accumulate(0, |g| {
            for i in 0..g.len() {
                g[i] += grad[i] * y[i] * (T::one() - y[i]);
            }
        });
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(out, &[a, b], Box::new(AddRule)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(out, &[a, b], Box::new(SubRule)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(out, &[a, b], Box::new(MulRule)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, &[a], Box::new(ScaleRule(s)))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum();
        self.push(Tensor::scalar(s), &[a], Box::new(SumRule))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).len()).unwrap();
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(out, &[a], Box::new(ReluRule))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        // Largest magnitude below one, so outputs stay inside the open interval.
        let lim = T::one() - T::epsilon() / T::lit(2.0);
        let out = self.value(a).map(|x| x.tanh().max(-lim).min(lim));
        self.push(out, &[a], Box::new(TanhRule))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, &[a], Box::new(SigmoidRule))
    }
}
