use std::io::{Read, Write};

use rand::Rng;

use super::ViTConfig;
use crate::error::{Error, Result};
use crate::tensor::{read_exact_counted, read_u32, Graph, Tensor, Var};

const CHECKPOINT_MAGIC: &[u8; 4] = b"FMCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Std of the class token, positional embeddings and classifier weights.
pub const EMBED_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

const LAYER_FIELDS: [&str; 16] = [
    "ln1.gamma", "ln1.beta", "attn.w_q", "attn.b_q", "attn.w_k", "attn.b_k", "attn.w_v", "attn.b_v",
    "attn.w_o", "attn.b_o", "ln2.gamma", "ln2.beta", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
];

impl LayerParams {
    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_gamma, &self.ln1_beta, &self.w_q, &self.b_q, &self.w_k, &self.b_k, &self.w_v,
            &self.b_v, &self.w_o, &self.b_o, &self.ln2_gamma, &self.ln2_beta, &self.mlp_w1,
            &self.mlp_b1, &self.mlp_w2, &self.mlp_b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_gamma, &mut self.ln1_beta, &mut self.w_q, &mut self.b_q, &mut self.w_k,
            &mut self.b_k, &mut self.w_v, &mut self.b_v, &mut self.w_o, &mut self.b_o,
            &mut self.ln2_gamma, &mut self.ln2_beta, &mut self.mlp_w1, &mut self.mlp_b1,
            &mut self.mlp_w2, &mut self.mlp_b2,
        ]
    }
}

/// All weights of a [`ViTConfig`]-shaped transformer.
#[derive(Clone, Debug, PartialEq)]
pub struct ViTParams {
    pub config: ViTConfig,
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub cls_token: Tensor,
    pub pos_embed: Tensor,
    pub layers: Vec<LayerParams>,
    pub norm_gamma: Tensor,
    pub norm_beta: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

fn linear<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
}

impl ViTParams {
    /// Random initialization: `N(0, 1/fan_in)` projections, `N(0, 0.02^2)`
    /// class token, positional embeddings and head, unit layernorm gains and
    /// zero biases.
    pub fn init<R: Rng + ?Sized>(config: &ViTConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let m = config.mlp_dim();
        let layers = (0..config.num_layers)
            .map(|_| LayerParams {
                ln1_gamma: Tensor::ones(&[d]),
                ln1_beta: Tensor::zeros(&[d]),
                w_q: linear(d, d, rng),
                b_q: Tensor::zeros(&[d]),
                w_k: linear(d, d, rng),
                b_k: Tensor::zeros(&[d]),
                w_v: linear(d, d, rng),
                b_v: Tensor::zeros(&[d]),
                w_o: linear(d, d, rng),
                b_o: Tensor::zeros(&[d]),
                ln2_gamma: Tensor::ones(&[d]),
                ln2_beta: Tensor::zeros(&[d]),
                mlp_w1: linear(d, m, rng),
                mlp_b1: Tensor::zeros(&[m]),
                mlp_w2: linear(m, d, rng),
                mlp_b2: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(ViTParams {
            config: config.clone(),
            patch_w: linear(config.patch_dim(), d, rng),
            patch_b: Tensor::zeros(&[d]),
            cls_token: Tensor::randn(&[d], EMBED_INIT_STD, rng),
            pos_embed: Tensor::randn(&[config.seq_len(), d], EMBED_INIT_STD, rng),
            layers,
            norm_gamma: Tensor::ones(&[d]),
            norm_beta: Tensor::zeros(&[d]),
            head_w: Tensor::randn(&[d, config.num_classes], EMBED_INIT_STD, rng),
            head_b: Tensor::zeros(&[config.num_classes]),
        })
    }

    /// Every tensor in canonical order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.patch_w, &self.patch_b, &self.cls_token, &self.pos_embed];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        out.extend([&self.norm_gamma, &self.norm_beta, &self.head_w, &self.head_b]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.patch_w,
            &mut self.patch_b,
            &mut self.cls_token,
            &mut self.pos_embed,
        ];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.extend([
            &mut self.norm_gamma,
            &mut self.norm_beta,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        out
    }

    /// Names aligned with [`tensors`](Self::tensors).
    pub fn names(&self) -> Vec<String> {
        let mut out: Vec<String> = ["patch.w", "patch.b", "cls", "pos"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for i in 0..self.layers.len() {
            out.extend(LAYER_FIELDS.iter().map(|f| format!("layers.{i}.{f}")));
        }
        out.extend(["norm.gamma", "norm.beta", "head.w", "head.b"].map(String::from));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        for t in self.tensors_mut() {
            t.set_requires_grad(flag);
        }
    }

    /// Same shapes, all values zero.
    pub fn zeros_like(&self) -> ViTParams {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Registers every tensor on `g`. With `trainable` the leaves track
    /// gradients, otherwise they are constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let mut leaf = |t: &Tensor| if trainable { g.leaf(&t.clone().with_grad()) } else { g.constant(t) };
        let patch_w = leaf(&self.patch_w);
        let patch_b = leaf(&self.patch_b);
        let cls_token = leaf(&self.cls_token);
        let pos_embed = leaf(&self.pos_embed);
        let layers = self
            .layers
            .iter()
            .map(|l| BoundLayer {
                ln1_gamma: leaf(&l.ln1_gamma),
                ln1_beta: leaf(&l.ln1_beta),
                w_q: leaf(&l.w_q),
                b_q: leaf(&l.b_q),
                w_k: leaf(&l.w_k),
                b_k: leaf(&l.b_k),
                w_v: leaf(&l.w_v),
                b_v: leaf(&l.b_v),
                w_o: leaf(&l.w_o),
                b_o: leaf(&l.b_o),
                ln2_gamma: leaf(&l.ln2_gamma),
                ln2_beta: leaf(&l.ln2_beta),
                mlp_w1: leaf(&l.mlp_w1),
                mlp_b1: leaf(&l.mlp_b1),
                mlp_w2: leaf(&l.mlp_w2),
                mlp_b2: leaf(&l.mlp_b2),
            })
            .collect();
        BoundParams {
            patch_w,
            patch_b,
            cls_token,
            pos_embed,
            layers,
            norm_gamma: leaf(&self.norm_gamma),
            norm_beta: leaf(&self.norm_beta),
            head_w: leaf(&self.head_w),
            head_b: leaf(&self.head_b),
        }
    }

    /// Writes a checkpoint: magic `FMCK`, `u32` version, `u32`-prefixed JSON
    /// config, `u32` tensor count, then per tensor a `u32`-prefixed UTF-8 name
    /// followed by its binary tensor record. Returns the bytes written.
    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<usize> {
        let header = serde_json::to_vec(&self.config)?;
        let mut written = 0;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        written += 12 + header.len();
        let names = self.names();
        let tensors = self.tensors();
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        written += 4;
        for (name, t) in names.iter().zip(tensors) {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            t.write_to(w)?;
            written += 4 + name.len() + t.encoded_len();
        }
        Ok(written)
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        Ok(buf)
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<ViTParams> {
        let mut magic = [0u8; 4];
        read_exact_counted(r, &mut magic)
            .map_err(|_| Error::MalformedHeader("checkpoint shorter than its magic".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::MalformedHeader(format!("bad checkpoint magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::MalformedHeader(format!("unsupported checkpoint version {version}")));
        }
        let len = read_u32(r)? as usize;
        let mut header = vec![0u8; len];
        read_exact_counted(r, &mut header)?;
        let config: ViTConfig = serde_json::from_slice(&header)?;
        config.validate()?;
        // Use a zero-initialized template to learn the expected names/shapes.
        let mut params = ViTParams::template(&config);
        let names = params.names();
        let count = read_u32(r)? as usize;
        if count != names.len() {
            return Err(Error::MalformedHeader(format!(
                "checkpoint holds {count} tensors, config expects {}",
                names.len()
            )));
        }
        for (expected, slot) in names.iter().zip(params.tensors_mut()) {
            let nlen = read_u32(r)? as usize;
            let mut name = vec![0u8; nlen];
            read_exact_counted(r, &mut name)?;
            if name != expected.as_bytes() {
                return Err(Error::MalformedHeader(format!(
                    "expected tensor {expected}, found {}",
                    String::from_utf8_lossy(&name)
                )));
            }
            let t = Tensor::read_from(r)?;
            if t.shape() != slot.shape() {
                return Err(Error::shape("checkpoint", slot.shape(), t.shape()));
            }
            *slot = t;
        }
        Ok(params)
    }

    /// Correctly shaped parameters filled with zeros.
    pub fn template(config: &ViTConfig) -> ViTParams {
        let d = config.embed_dim;
        let m = config.mlp_dim();
        let z = Tensor::zeros;
        ViTParams {
            config: config.clone(),
            patch_w: z(&[config.patch_dim(), d]),
            patch_b: z(&[d]),
            cls_token: z(&[d]),
            pos_embed: z(&[config.seq_len(), d]),
            layers: (0..config.num_layers)
                .map(|_| LayerParams {
                    ln1_gamma: z(&[d]),
                    ln1_beta: z(&[d]),
                    w_q: z(&[d, d]),
                    b_q: z(&[d]),
                    w_k: z(&[d, d]),
                    b_k: z(&[d]),
                    w_v: z(&[d, d]),
                    b_v: z(&[d]),
                    w_o: z(&[d, d]),
                    b_o: z(&[d]),
                    ln2_gamma: z(&[d]),
                    ln2_beta: z(&[d]),
                    mlp_w1: z(&[d, m]),
                    mlp_b1: z(&[m]),
                    mlp_w2: z(&[m, d]),
                    mlp_b2: z(&[d]),
                })
                .collect(),
            norm_gamma: z(&[d]),
            norm_beta: z(&[d]),
            head_w: z(&[d, config.num_classes]),
            head_b: z(&[config.num_classes]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundLayer {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_o: Var,
    pub b_o: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
}

/// [`ViTParams`] registered on a graph.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub patch_w: Var,
    pub patch_b: Var,
    pub cls_token: Var,
    pub pos_embed: Var,
    pub layers: Vec<BoundLayer>,
    pub norm_gamma: Var,
    pub norm_beta: Var,
    pub head_w: Var,
    pub head_b: Var,
}

impl BoundParams {
    /// Vars in the same canonical order as [`ViTParams::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.patch_w, self.patch_b, self.cls_token, self.pos_embed];
        for l in &self.layers {
            out.extend([
                l.ln1_gamma, l.ln1_beta, l.w_q, l.b_q, l.w_k, l.b_k, l.w_v, l.b_v, l.w_o, l.b_o,
                l.ln2_gamma, l.ln2_beta, l.mlp_w1, l.mlp_b1, l.mlp_w2, l.mlp_b2,
            ]);
        }
        out.extend([self.norm_gamma, self.norm_beta, self.head_w, self.head_b]);
        out
    }

    /// Gradients for every parameter after `g.backward`, in canonical order.
    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.vars().into_iter().map(|v| g.grad_or_zeros(v)).collect()
    }
}
