use super::{contract_err, Result, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a recorded op.
///
/// `inputs` are the op's input values in recording order, `out` its output
/// value and `grad` the gradient flowing into the output.
pub trait Backward<T: Scalar>: Send {
    fn backward(&self, inputs: &[&Tensor<T>], out: &Tensor<T>, grad: &[T], sink: &mut GradSink<'_, T>);
}

/// Receives input gradients during the reverse sweep. Inputs that do not
/// need a gradient are skipped so ops can avoid computing them.
pub struct GradSink<'a, T> {
    inputs: &'a [Var],
    needs: Vec<bool>,
    sizes: Vec<usize>,
    grads: &'a mut [Option<Vec<T>>],
}

impl<T: Scalar> GradSink<'_, T> {
    pub fn wants(&self, input: usize) -> bool {
        self.needs[input]
    }

    /// Run `f` on the (zero-initialised on first use) gradient buffer of an input.
    pub fn accumulate(&mut self, input: usize, f: impl FnOnce(&mut [T])) {
        if !self.needs[input] {
            return;
        }
        let slot = &mut self.grads[self.inputs[input].0];
        let buf = slot.get_or_insert_with(|| vec![T::zero(); self.sizes[input]]);
        f(buf);
    }

    /// Elementwise `grad[input] += values`.
    pub fn add(&mut self, input: usize, values: &[T]) {
        self.accumulate(input, |g| {
            for (g, &v) in g.iter_mut().zip(values) {
                *g += v;
            }
        });
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    rule: Option<Box<dyn Backward<T>>>,
    needs_grad: bool,
    leaf: bool,
}

/// Linear record of a forward computation. Single use: [`Tape::backward`]
/// consumes the recorded rules and a second call fails with
/// [`TensorError::TapeConsumed`].
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input (a parameter).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Vec::new(), None, true, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Vec::new(), None, false, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// First element of a value, for scalar losses.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Record an op output. The rule is dropped when no input needs a gradient.
    pub fn push(&mut self, value: Tensor<T>, inputs: &[Var], rule: Box<dyn Backward<T>>) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let rule = if needs { Some(rule) } else { None };
        self.push_node(value, inputs.to_vec(), rule, needs, false)
    }

    fn push_node(
        &mut self,
        value: Tensor<T>,
        inputs: Vec<Var>,
        rule: Option<Box<dyn Backward<T>>>,
        needs_grad: bool,
        leaf: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            inputs,
            rule,
            needs_grad,
            leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar loss. Leaves the loss does not reach get
    /// an all-zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let loss_shape = self.nodes[loss.0].value.shape().to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape));
        }
        if loss.0 >= self.nodes.len() {
            return Err(contract_err("backward", "loss is not on this tape"));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(rule) = self.nodes[idx].rule.take() else {
                continue;
            };
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let (before, rest) = self.nodes.split_at(idx);
            let node = &rest[0];
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &before[v.0].value).collect();
            let needs = node.inputs.iter().map(|v| before[v.0].needs_grad).collect();
            let sizes = node.inputs.iter().map(|v| before[v.0].value.len()).collect();
            let mut sink = GradSink {
                inputs: &node.inputs,
                needs,
                sizes,
                grads: &mut grads[..idx],
            };
            rule.backward(&inputs, &node.value, &grad, &mut sink);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                if node.leaf && node.needs_grad {
                    let data = g.unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                    Some(Tensor {
                        shape: node.value.shape().to_vec(),
                        data,
                    })
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Gradients of differentiable leaves after a backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf; `None` for constants and intermediate values.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
