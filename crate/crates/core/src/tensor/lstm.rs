use super::{shape_err, Result, Scalar, Tape, Tensor, TensorError, Var};

/// Weights of one LSTM layer, gate blocks ordered input, forget, cell, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmLayer {
    /// `[I, 4H]`
    pub w_ih: Var,
    /// `[H, 4H]`
    pub w_hh: Var,
    /// `[4H]`
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmOutput {
    /// Top-layer hidden state at every step, `[B, T, H]`.
    pub outputs: Var,
    /// Top-layer hidden state at the last step, `[B, H]`.
    pub last: Var,
}

impl<T: Scalar> Tape<T> {
    /// Stacked LSTM over `x: [B, T, I]` with zero initial state.
    pub fn lstm(&mut self, x: Var, layers: &[LstmLayer]) -> Result<LstmOutput> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(shape_err("lstm", format!("need [B, T, I], got {xs:?}")));
        }
        if xs[1] == 0 {
            return Err(TensorError::EmptySequence);
        }
        if layers.is_empty() {
            return Err(shape_err("lstm", "no layers"));
        }
        let (b, steps) = (xs[0], xs[1]);
        let mut inputs: Vec<Var> = (0..steps)
            .map(|t| {
                let xt = self.narrow(x, 1, t, 1)?;
                self.reshape(xt, &[b, xs[2]])
            })
            .collect::<Result<_>>()?;
        for layer in layers {
            let hs = self.shape(layer.w_hh).to_vec();
            if hs.len() != 2 || hs[1] != 4 * hs[0] {
                return Err(shape_err("lstm", format!("w_hh {hs:?} must be [H, 4H]")));
            }
            let h_dim = hs[0];
            let mut h = self.constant(Tensor::zeros(&[b, h_dim]));
            let mut c = self.constant(Tensor::zeros(&[b, h_dim]));
            let mut outs = Vec::with_capacity(steps);
            for &xt in &inputs {
                let zx = self.dense(xt, layer.w_ih, Some(layer.bias))?;
                let zh = self.dense(h, layer.w_hh, None)?;
                let z = self.add(zx, zh)?;
                let gi = self.narrow(z, 1, 0, h_dim)?;
                let gf = self.narrow(z, 1, h_dim, h_dim)?;
                let gg = self.narrow(z, 1, 2 * h_dim, h_dim)?;
                let go = self.narrow(z, 1, 3 * h_dim, h_dim)?;
                let i = self.sigmoid(gi);
                let f = self.sigmoid(gf);
                let g = self.tanh(gg);
                let o = self.sigmoid(go);
                let keep = self.mul(f, c)?;
                let write = self.mul(i, g)?;
                c = self.add(keep, write)?;
                let squashed = self.tanh(c);
                h = self.mul(o, squashed)?;
                outs.push(h);
            }
            inputs = outs;
        }
        let last = *inputs.last().expect("at least one step");
        let h_dim = self.shape(last)[1];
        let stacked: Vec<Var> = inputs
            .iter()
            .map(|&h| self.reshape(h, &[b, 1, h_dim]))
            .collect::<Result<_>>()?;
        let outputs = self.concat(&stacked, 1)?;
        Ok(LstmOutput { outputs, last })
    }
}
