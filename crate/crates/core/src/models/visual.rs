use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Conv2d, Dense, Init};
use super::{load_params, ModelError, Result};
use crate::tensor::{ParamStore, Session, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualNetConfig {
    /// Square input side length.
    pub input_size: usize,
    pub in_channels: usize,
    /// One stride-2 3×3 conv + BN + ReLU per entry.
    pub backbone_channels: Vec<usize>,
    /// Width of the 1×1 conv feeding the dense blocks.
    pub stem_channels: usize,
    pub dense_blocks: usize,
    /// BN-ReLU-conv3×3 layers per dense block.
    pub layers_per_block: usize,
    pub growth: usize,
    pub d_face: usize,
    pub fec_dim: usize,
    pub aff_dim: usize,
    pub distill_dim: usize,
    pub role: Role,
}

impl Default for VisualNetConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            in_channels: 3,
            backbone_channels: vec![8, 16, 32],
            stem_channels: 24,
            dense_blocks: 5,
            layers_per_block: 1,
            growth: 8,
            d_face: 128,
            fec_dim: 32,
            aff_dim: 8,
            distill_dim: 80,
            role: Role::Teacher,
        }
    }
}

impl VisualNetConfig {
    pub fn student() -> Self {
        Self {
            role: Role::Student,
            ..Self::default()
        }
    }

    /// Channel count entering the exit 1×1 conv.
    pub fn dense_output_channels(&self) -> usize {
        self.stem_channels + self.dense_blocks * self.layers_per_block * self.growth
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.input_size,
            self.in_channels,
            self.stem_channels,
            self.growth,
            self.d_face,
            self.fec_dim,
            self.aff_dim,
            self.distill_dim,
        ];
        if positive.contains(&0) || self.backbone_channels.contains(&0) {
            return Err(ModelError::Config("visual net sizes must be positive".into()));
        }
        let mut side = self.input_size;
        for _ in &self.backbone_channels {
            side = crate::tensor::conv_out_len(side, 3, 2, 1).unwrap_or(0);
        }
        if side == 0 {
            return Err(ModelError::Config(format!(
                "input size {} is too small for {} stride-2 stages",
                self.input_size,
                self.backbone_channels.len()
            )));
        }
        Ok(())
    }
}

struct DenseLayer {
    bn: BatchNorm,
    conv: Conv2d,
}

/// Image embedding network. Forward: backbone convs, 1×1 conv + BN + ReLU,
/// dense blocks, 1×1 conv + BN + ReLU to `d_face` maps, global average pool,
/// then linear heads.
pub struct VisualNet {
    pub config: VisualNetConfig,
    pub store: ParamStore,
    backbone: Vec<(Conv2d, BatchNorm)>,
    stem: (Conv2d, BatchNorm),
    blocks: Vec<Vec<DenseLayer>>,
    exit: (Conv2d, BatchNorm),
    fec: Dense,
    aff: Dense,
    distill: Option<Dense>,
}

#[derive(Clone, Copy, Debug)]
pub struct VisualOutput {
    /// `[B, d_face]`
    pub e_face: Var,
    /// `[B, fec_dim]`, unit rows.
    pub fec: Var,
    /// `[B, aff_dim]` logits.
    pub aff: Var,
    /// `[B, distill_dim]`, students only.
    pub distill: Option<Var>,
}

impl VisualNet {
    pub fn new(config: VisualNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let mut cin = c.in_channels;
        let mut backbone = Vec::new();
        for (i, &cout) in c.backbone_channels.iter().enumerate() {
            let name = format!("backbone.{i}");
            let conv = Conv2d::new(&mut store, &mut rng, &format!("{name}.conv"), cin, cout, 3, 2, 1, false);
            let bn = BatchNorm::new(&mut store, &format!("{name}.bn"), cout);
            backbone.push((conv, bn));
            cin = cout;
        }
        let stem = (
            Conv2d::new(&mut store, &mut rng, "stem.conv", cin, c.stem_channels, 1, 1, 0, false),
            BatchNorm::new(&mut store, "stem.bn", c.stem_channels),
        );
        let mut width = c.stem_channels;
        let mut blocks = Vec::new();
        for bi in 0..c.dense_blocks {
            let mut layers = Vec::new();
            for li in 0..c.layers_per_block {
                let name = format!("dense.{bi}.{li}");
                layers.push(DenseLayer {
                    bn: BatchNorm::new(&mut store, &format!("{name}.bn"), width),
                    conv: Conv2d::new(&mut store, &mut rng, &format!("{name}.conv"), width, c.growth, 3, 1, 1, false),
                });
                width += c.growth;
            }
            blocks.push(layers);
        }
        let exit = (
            Conv2d::new(&mut store, &mut rng, "exit.conv", width, c.d_face, 1, 1, 0, false),
            BatchNorm::new(&mut store, "exit.bn", c.d_face),
        );
        let fec = Dense::new(&mut store, &mut rng, "head.fec", c.d_face, c.fec_dim, Init::Linear);
        let aff = Dense::new(&mut store, &mut rng, "head.aff", c.d_face, c.aff_dim, Init::Linear);
        // Created last so a student shares its trunk initialisation with a
        // teacher built from the same seed.
        let distill = (c.role == Role::Student)
            .then(|| Dense::new(&mut store, &mut rng, "head.distill", c.d_face, c.distill_dim, Init::Linear));
        Ok(Self {
            config,
            store,
            backbone,
            stem,
            blocks,
            exit,
            fec,
            aff,
            distill,
        })
    }

    /// Rebuild from stored parameters (names and shapes must match `config`).
    pub fn from_params(config: VisualNetConfig, params: ParamStore) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        load_params(&mut net.store, params)?;
        Ok(net)
    }

    /// `e_face: [B, d_face]` for `images: [B, C, H, W]`, before any head.
    pub fn embedding(&self, s: &mut Session<'_>, images: Var) -> Result<Var> {
        let shape = s.tape.shape(images).to_vec();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(ModelError::Dimension(format!(
                "visual net expects [B, {}, H, W] images, got {shape:?}",
                self.config.in_channels
            )));
        }
        let mut x = images;
        for (conv, bn) in &self.backbone {
            x = conv.forward(s, x)?;
            x = bn.forward(s, x)?;
            x = s.tape.relu(x);
        }
        x = self.stem.0.forward(s, x)?;
        x = self.stem.1.forward(s, x)?;
        x = s.tape.relu(x);
        for block in &self.blocks {
            for layer in block {
                let h = layer.bn.forward(s, x)?;
                let h = s.tape.relu(h);
                let h = layer.conv.forward(s, h)?;
                x = s.tape.concat(&[x, h], 1)?;
            }
        }
        x = self.exit.0.forward(s, x)?;
        x = self.exit.1.forward(s, x)?;
        x = s.tape.relu(x);
        Ok(s.tape.global_avg_pool(x)?)
    }

    /// `images: [B, C, H, W]` with values in `[−1, 1]`.
    pub fn forward(&self, s: &mut Session<'_>, images: Var) -> Result<VisualOutput> {
        let e_face = self.embedding(s, images)?;
        let fec_raw = self.fec.forward(s, e_face)?;
        let fec = s.tape.l2_normalize(fec_raw)?;
        let aff = self.aff.forward(s, e_face)?;
        let distill = match &self.distill {
            Some(head) => Some(head.forward(s, e_face)?),
            None => None,
        };
        Ok(VisualOutput { e_face, fec, aff, distill })
    }

    /// Eval-mode `e_face` only; defined for inputs whose head outputs are
    /// degenerate (e.g. blank frames).
    pub fn infer_embedding(&self, images: Tensor) -> Result<Tensor> {
        let mut s = Session::inference(&self.store);
        let x = s.input(images);
        let e = self.embedding(&mut s, x)?;
        Ok(s.tape.value(e).clone())
    }

    /// Eval-mode forward over a batch tensor, returning plain values
    /// `(e_face, fec, aff)`.
    pub fn infer(&self, images: Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let mut s = Session::inference(&self.store);
        let x = s.input(images);
        let out = self.forward(&mut s, x)?;
        Ok((
            s.tape.value(out.e_face).clone(),
            s.tape.value(out.fec).clone(),
            s.tape.value(out.aff).clone(),
        ))
    }
}

/// Distillation target from two teachers' head outputs: each of
/// `t1_fec, t1_aff, t2_fec, t2_aff` is L2-normalised per row and the four
/// are concatenated in that order.
pub fn teacher_distill_target(t1_fec: &Tensor, t1_aff: &Tensor, t2_fec: &Tensor, t2_aff: &Tensor) -> Result<Tensor> {
    let parts = [t1_fec, t1_aff, t2_fec, t2_aff];
    let b = t1_fec.shape()[0];
    if parts.iter().any(|p| p.rank() != 2 || p.shape()[0] != b) {
        return Err(ModelError::Dimension("teacher outputs must be [B, D] with equal B".into()));
    }
    let width: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut out = Vec::with_capacity(b * width);
    for r in 0..b {
        for p in &parts {
            let row = p.row(r);
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            if norm <= 1e-12 {
                return Err(crate::tensor::TensorError::NearZeroNorm {
                    op: "teacher_distill_target",
                    row: r,
                    norm: norm as f64,
                    eps: 1e-12,
                }
                .into());
            }
            out.extend(row.iter().map(|v| v / norm));
        }
    }
    Ok(Tensor::new(vec![b, width], out)?)
}
