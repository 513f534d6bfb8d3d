use rand::Rng;
use sha2::{Digest, Sha256};

use super::{Gradients, Result, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Buffers such as batch-norm running statistics are stored but never
    /// receive gradients.
    pub trainable: bool,
}

/// Ordered, named collection of model parameters and buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.entries.push(ParamEntry { name, value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// SHA-256 over names, shapes and the bit patterns of all values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            for &d in e.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                h.update(v.to_f64().unwrap_or(f64::NAN).to_bits().to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}

/// Uniform init with bound `sqrt(6 / fan_in)`, for layers feeding a ReLU.
pub fn kaiming_uniform<T: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    uniform(rng, shape, (6.0 / fan_in as f64).sqrt())
}

/// Uniform init with bound `sqrt(6 / (fan_in + fan_out))`, for tanh/sigmoid layers.
pub fn xavier_uniform<T: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
    uniform(rng, shape, (6.0 / (fan_in + fan_out) as f64).sqrt())
}

fn uniform<T: Scalar>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// One forward/backward pass over a [`ParamStore`]. Parameters are bound to
/// the tape lazily on first use, as differentiable leaves when gradients are
/// tracked and as constants otherwise.
pub struct Session<'p, T: Scalar = f32> {
    pub tape: Tape<T>,
    store: &'p ParamStore<T>,
    bound: Vec<Option<Var>>,
    train: bool,
    track_grads: bool,
    stat_updates: Vec<(ParamId, Tensor<T>)>,
}

impl<'p, T: Scalar> Session<'p, T> {
    /// `train` selects batch statistics in batch norm; `track_grads` makes
    /// parameters differentiable.
    pub fn new(store: &'p ParamStore<T>, train: bool, track_grads: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            train,
            track_grads,
            stat_updates: Vec::new(),
        }
    }

    /// Frozen inference: eval-mode normalisation, no parameter gradients.
    pub fn inference(store: &'p ParamStore<T>) -> Self {
        Self::new(store, false, false)
    }

    pub fn training(store: &'p ParamStore<T>) -> Self {
        Self::new(store, true, true)
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let entry = &self.store.entries[id.0];
        let value = entry.value.clone();
        let v = if self.track_grads && entry.trainable {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.tape.constant(value)
    }

    /// Queue a new value for a non-trainable buffer (applied by the trainer).
    pub fn record_stat(&mut self, id: ParamId, value: Tensor<T>) {
        self.stat_updates.push((id, value));
    }

    pub fn take_stat_updates(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Backward from `loss`; returns one gradient slot per store entry
    /// (`None` for buffers and parameters never bound).
    pub fn backward(&mut self, loss: Var) -> Result<Vec<Option<Tensor<T>>>> {
        let mut grads: Gradients<T> = self.tape.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .map(|b| b.and_then(|v| grads.take(v)))
            .collect())
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn apply_stats(&mut self, updates: Vec<(ParamId, Tensor<T>)>) {
        for (id, value) in updates {
            self.entries[id.0].value = value;
        }
    }
}
