use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{batch_logits, TokenMask, ViTConfig, ViTParams};

/// Weighted logit average of client models.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    members: Vec<ViTParams>,
    weights: Vec<f64>,
}

impl Ensemble {
    pub fn new(members: Vec<ViTParams>, weights: Vec<f64>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::invalid("ensemble needs at least one member"));
        }
        if weights.len() != members.len() {
            return Err(Error::invalid(format!(
                "{} weights for {} members",
                weights.len(),
                members.len()
            )));
        }
        if weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::invalid("ensemble weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("ensemble weights sum to {total}, expected 1")));
        }
        if members.iter().any(|m| m.config != members[0].config) {
            return Err(Error::invalid("ensemble members must share a config"));
        }
        Ok(Ensemble { members, weights })
    }

    pub fn uniform(members: Vec<ViTParams>) -> Result<Self> {
        let n = members.len().max(1);
        Self::new(members, vec![1.0 / n as f64; n])
    }

    pub fn members(&self) -> &[ViTParams] {
        &self.members
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn config(&self) -> &ViTConfig {
        &self.members[0].config
    }

    /// `Σ w_i f_i(x)` for a batch `[B, H, W, C]`; every member sees `masks`.
    pub fn batch_logits(&self, images: &Tensor, masks: &[TokenMask]) -> Result<Tensor> {
        let mut acc: Option<Tensor> = None;
        for (m, &w) in self.members.iter().zip(&self.weights) {
            let logits = batch_logits(m, images, masks)?;
            match acc.as_mut() {
                None => {
                    let mut t = logits;
                    t.data_mut().iter_mut().for_each(|v| *v *= w);
                    acc = Some(t);
                }
                Some(a) => a.data_mut().iter_mut().zip(logits.data()).for_each(|(a, b)| *a += w * b),
            }
        }
        Ok(acc.expect("nonempty ensemble"))
    }

    /// Ensemble logits `[K]` for one image `[H, W, C]`.
    pub fn logits(&self, image: &Tensor, mask: Option<&TokenMask>) -> Result<Tensor> {
        let cfg = self.config();
        let [h, w, c] = cfg.image_shape();
        if image.shape() != [h, w, c] {
            return Err(Error::shape("ensemble_logits", image.shape(), &[h, w, c]));
        }
        let mask = mask.cloned().unwrap_or_else(|| TokenMask::full(cfg.num_patches()));
        let out = self.batch_logits(&image.reshaped(&[1, h, w, c])?, std::slice::from_ref(&mask))?;
        out.reshaped(&[cfg.num_classes])
    }
}

/// Per-tensor weighted average of `members`.
pub fn fedavg_aggregate(members: &[ViTParams], weights: &[f64]) -> Result<ViTParams> {
    let first = members.first().ok_or_else(|| Error::invalid("fedavg needs at least one member"))?;
    if weights.len() != members.len() {
        return Err(Error::invalid(format!("{} weights for {} members", weights.len(), members.len())));
    }
    let mut out = first.zeros_like();
    for (m, &w) in members.iter().zip(weights) {
        if m.config != first.config {
            return Err(Error::invalid("fedavg members must share a config"));
        }
        for (dst, src) in out.tensors_mut().into_iter().zip(m.tensors()) {
            if dst.shape() != src.shape() {
                return Err(Error::shape("fedavg_aggregate", dst.shape(), src.shape()));
            }
            dst.data_mut().iter_mut().zip(src.data()).for_each(|(a, b)| *a += w * b);
        }
    }
    Ok(out)
}
