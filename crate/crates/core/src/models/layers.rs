use rand::Rng;

use crate::tensor::{kaiming_uniform, xavier_uniform, ConvGeom, ParamId, ParamStore, Session, Tensor, Var};

use super::Result;

/// Batch-norm running-statistics momentum: `running ← 0.9·running + 0.1·batch`.
pub const BN_MOMENTUM: f32 = 0.9;
pub const BN_EPS: f32 = 1e-5;

/// Initialisation scheme for a weight matrix or kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Kaiming-uniform, for layers feeding a ReLU.
    Relu,
    /// Xavier-uniform, for linear, tanh and gate outputs.
    Linear,
    /// All zeros. Used for tanh heads trained on CCC: a zero output has zero
    /// variance, where the CCC gradient points along cov(features, target)
    /// instead of toward a saturated constant.
    Zero,
}

fn init_weight(rng: &mut impl Rng, init: Init, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    match init {
        Init::Relu => kaiming_uniform(rng, shape, fan_in),
        Init::Linear => xavier_uniform(rng, shape, fan_in, fan_out),
        Init::Zero => Tensor::zeros(shape),
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub geom: ConvGeom,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let fan_in = cin * k * k;
        let w = store.add(
            format!("{name}.w"),
            init_weight(rng, Init::Relu, &[cout, cin, k, k], fan_in, cout * k * k),
            true,
        );
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[cout]), true));
        Self {
            w,
            b,
            geom: ConvGeom::square(k, stride, pad),
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(self.w);
        let b = self.b.map(|b| s.param(b));
        Ok(s.tape.conv2d(x, w, b, self.geom)?)
    }
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            init_weight(rng, Init::Relu, &[cout, cin, k], cin * k, cout * k),
            true,
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]), true);
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(self.w);
        let b = s.param(self.b);
        Ok(s.tape.conv1d(x, w, Some(b), self.stride, self.pad)?)
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, input: usize, output: usize, init: Init) -> Self {
        let w = store.add(format!("{name}.w"), init_weight(rng, init, &[input, output], input, output), true);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[output]), true);
        Self { w, b }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(self.w);
        let b = s.param(self.b);
        Ok(s.tape.dense(x, w, Some(b))?)
    }
}

/// Batch norm over axis 1 with running statistics held as buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::full(&[channels], 1.0), false),
        }
    }

    /// Batch statistics (and a queued running-stat update) in training
    /// sessions, running statistics otherwise.
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        let store = s.store();
        if s.is_train() {
            let (y, stats) = s.tape.batch_norm_train(x, gamma, beta, BN_EPS)?;
            let blend = |old: &Tensor, new: &[f32]| {
                let data = old
                    .data()
                    .iter()
                    .zip(new)
                    .map(|(&o, &n)| BN_MOMENTUM * o + (1.0 - BN_MOMENTUM) * n)
                    .collect();
                Tensor::from_vec(data)
            };
            let mean = blend(store.get(self.running_mean), &stats.mean);
            let var = blend(store.get(self.running_var), &stats.var);
            s.record_stat(self.running_mean, mean);
            s.record_stat(self.running_var, var);
            Ok(y)
        } else {
            let mean = store.get(self.running_mean).data();
            let var = store.get(self.running_var).data();
            Ok(s.tape.batch_norm_eval(x, gamma, beta, mean, var, BN_EPS)?)
        }
    }
}
