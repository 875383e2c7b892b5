//! Scalar objectives for local training, inversion and distillation.
//!
//! Graph builders take batched logits `[B, K]` / images `[B, H, W, C]` and
//! return the **sum** over the batch; callers divide by `B` where a mean is
//! wanted. Teacher distributions are always passed as plain tensors, so no
//! gradient can reach a teacher.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::Ensemble;
use crate::tensor::{Graph, Tensor, Var};
use crate::vit::{forward_graph, BoundParams, GraphForward, TokenMask, ViTConfig, ViTParams};

/// Sign applied to the JS term of the inversion objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JsSign {
    /// Subtract `alpha_js * JS`: inversion seeks teacher/student disagreement.
    #[default]
    Negative,
    Positive,
}

impl JsSign {
    pub fn factor(self) -> f64 {
        match self {
            JsSign::Negative => -1.0,
            JsSign::Positive => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha_js: f64,
    pub js_sign: JsSign,
    pub alpha_tv: f64,
    pub alpha_l2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub temperature: f64,
    /// Feed the teacher the low-token view (high tokens masked) in the
    /// low-density relabel term; `false` feeds it the full image.
    pub mask_teacher_low: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha_js: 1.0,
            js_sign: JsSign::Negative,
            alpha_tv: 1e-4,
            alpha_l2: 0.0,
            lambda1: 0.5,
            lambda2: 0.5,
            temperature: 1.0,
            mask_teacher_low: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("alpha_js", self.alpha_js),
            ("alpha_tv", self.alpha_tv),
            ("alpha_l2", self.alpha_l2),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("temperature", self.temperature),
        ];
        for (name, v) in named {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.temperature == 0.0 {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        Ok(())
    }
}

fn check_labels(labels: &[usize], k: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= k) {
        Some(&label) => Err(Error::LabelOutOfRange { label, classes: k }),
        None => Ok(()),
    }
}

fn batch_dims(g: &Graph, logits: Var) -> Result<(usize, usize)> {
    match *g.shape(logits) {
        [b, k] => Ok((b, k)),
        ref s => Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "expected batched logits [B, K]".into(),
        }),
    }
}

/// Row-wise softmax of `logits / tau` as a plain tensor.
pub fn softmax_rows(logits: &Tensor, tau: f64) -> Tensor {
    let k = *logits.shape().last().expect("logits have rank >= 1");
    let mut out = logits.clone();
    out.set_requires_grad(false);
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / tau));
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v / tau - max).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

/// Summed cross entropy `-Σ_b log softmax(logits_b)[y_b]`.
pub fn cross_entropy_graph(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, k) = batch_dims(g, logits)?;
    if labels.len() != b {
        return Err(Error::invalid(format!("{} labels for a batch of {b}", labels.len())));
    }
    check_labels(labels, k)?;
    let mut onehot = vec![0.0; b * k];
    for (i, &y) in labels.iter().enumerate() {
        onehot[i * k + y] = 1.0;
    }
    let onehot = g.constant_from(&[b, k], onehot)?;
    let ls = g.log_softmax(logits, 1)?;
    let picked = g.mul(ls, onehot)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0))
}

/// Summed `KL(softmax(teacher/τ) ‖ softmax(student/τ))` with a detached teacher.
pub fn kl_graph(g: &mut Graph, teacher: &Tensor, student: Var, tau: f64) -> Result<Var> {
    kl_graph_weighted(g, teacher, student, tau, None)
}

/// As [`kl_graph`], with row `i` scaled by `row_weight[i]`.
pub(crate) fn kl_graph_weighted(
    g: &mut Graph,
    teacher: &Tensor,
    student: Var,
    tau: f64,
    row_weight: Option<&[f64]>,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be > 0, got {tau}")));
    }
    let (b, k) = batch_dims(g, student)?;
    if teacher.shape() != [b, k] {
        return Err(Error::shape("kl_divergence", teacher.shape(), &[b, k]));
    }
    let mut p = softmax_rows(teacher, tau);
    let mut neg_entropy = 0.0;
    for (i, row) in p.data_mut().chunks_mut(k).enumerate() {
        let wi = row_weight.map_or(1.0, |w| w[i]);
        // 0 ln 0 = 0
        neg_entropy += wi * row.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>();
        row.iter_mut().for_each(|v| *v *= wi);
    }
    let scaled = g.scale(student, 1.0 / tau);
    let lq = g.log_softmax(scaled, 1)?;
    let pv = g.constant(&p);
    let cross = g.mul(lq, pv)?;
    let cross = g.sum(cross);
    let neg = g.scale(cross, -1.0);
    Ok(g.add_scalar(neg, neg_entropy))
}

/// Summed Jensen-Shannon divergence between `softmax(p)` and `softmax(q)`;
/// gradients flow into both.
pub fn js_graph(g: &mut Graph, p: Var, q: Var) -> Result<Var> {
    let (b, k) = batch_dims(g, p)?;
    if g.shape(q) != [b, k] {
        return Err(Error::shape("js_divergence", &[b, k], g.shape(q)));
    }
    let lp = g.log_softmax(p, 1)?;
    let lq = g.log_softmax(q, 1)?;
    let lm = g.log_add_exp(lp, lq)?;
    let lm = g.add_scalar(lm, -std::f64::consts::LN_2);
    let half = |g: &mut Graph, l: Var| -> Result<Var> {
        let prob = g.exp(l);
        let diff = g.sub(l, lm)?;
        let t = g.mul(prob, diff)?;
        Ok(g.sum(t))
    };
    let a = half(g, lp)?;
    let c = half(g, lq)?;
    let s = g.add(a, c)?;
    Ok(g.scale(s, 0.5))
}

fn image_dims(g: &Graph, images: Var) -> Result<[usize; 4]> {
    match *g.shape(images) {
        [b, h, w, c] => Ok([b, h, w, c]),
        ref s => Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "expected images [B, H, W, C]".into(),
        }),
    }
}

/// Summed squared anisotropic total variation.
pub fn tv_graph(g: &mut Graph, images: Var) -> Result<Var> {
    let [_, h, w, _] = image_dims(g, images)?;
    if h < 2 || w < 2 {
        return Err(Error::invalid(format!("total variation needs H, W >= 2, got {h}x{w}")));
    }
    let diff = |g: &mut Graph, axis: usize, n: usize| -> Result<Var> {
        let hi = g.slice(images, axis, 1, n - 1)?;
        let lo = g.slice(images, axis, 0, n - 1)?;
        let d = g.sub(hi, lo)?;
        let d = g.square(d);
        Ok(g.sum(d))
    };
    let v = diff(g, 1, h)?;
    let hz = diff(g, 2, w)?;
    g.add(v, hz)
}

/// Summed squared pixel norm.
pub fn l2_graph(g: &mut Graph, images: Var) -> Var {
    let sq = g.square(images);
    g.sum(sq)
}

fn row_logits(logits: &Tensor, g: &mut Graph) -> Result<Var> {
    let k = logits.numel();
    if logits.rank() != 1 {
        return Err(Error::InvalidShape {
            shape: logits.shape().to_vec(),
            reason: "expected logits [K]".into(),
        });
    }
    g.constant_from(&[1, k], logits.data().to_vec())
}

fn single_image(g: &mut Graph, image: &Tensor) -> Result<Var> {
    match *image.shape() {
        [h, w, c] => g.constant_from(&[1, h, w, c], image.data().to_vec()),
        ref s => Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "expected an image [H, W, C]".into(),
        }),
    }
}

pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    let mut g = Graph::new();
    let l = row_logits(logits, &mut g)?;
    let v = cross_entropy_graph(&mut g, l, &[label])?;
    Ok(g.item(v))
}

pub fn kl_divergence(p_logits: &Tensor, q_logits: &Tensor, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let q = row_logits(q_logits, &mut g)?;
    let p = p_logits.reshaped(&[1, p_logits.numel()])?;
    let v = kl_graph(&mut g, &p, q, tau)?;
    Ok(g.item(v))
}

pub fn js_divergence(p_logits: &Tensor, q_logits: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let p = row_logits(p_logits, &mut g)?;
    let q = row_logits(q_logits, &mut g)?;
    let v = js_graph(&mut g, p, q)?;
    Ok(g.item(v))
}

pub fn tv_regularizer(image: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let x = single_image(&mut g, image)?;
    let v = tv_graph(&mut g, x)?;
    Ok(g.item(v))
}

pub fn l2_regularizer(image: &Tensor) -> f64 {
    image.data().iter().map(|v| v * v).sum()
}

/// Components of the inversion objective; `total` already carries the
/// weights and JS sign.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InversionTerms<T> {
    pub total: T,
    pub ce: T,
    pub js: T,
    pub tv: T,
    pub l2: T,
}

impl InversionTerms<Var> {
    pub fn values(&self, g: &Graph) -> InversionTerms<f64> {
        InversionTerms {
            total: g.item(self.total),
            ce: g.item(self.ce),
            js: g.item(self.js),
            tv: g.item(self.tv),
            l2: g.item(self.l2),
        }
    }
}

/// `[B, H, W, C]` flags: 1 for pixels of active patches, 0 otherwise.
pub fn pixel_keep(config: &ViTConfig, masks: &[TokenMask]) -> Vec<f64> {
    let [h, w, c] = config.image_shape();
    let (p, grid) = (config.patch_size, config.grid());
    let mut keep = Vec::with_capacity(masks.len() * h * w * c);
    for m in masks {
        for r in 0..h {
            for col in 0..w {
                let on = f64::from(u8::from(m.is_active((r / p) * grid + col / p)));
                keep.extend(std::iter::repeat_n(on, c));
            }
        }
    }
    keep
}

/// Batched inversion objective (summed over images) for frozen `local` and
/// `server` networks; both see the same masks. The priors act on the
/// active-patch image, so halted pixels receive no gradient from any term.
/// Also returns the local network's forward.
#[allow(clippy::too_many_arguments)]
pub fn inversion_objective(
    g: &mut Graph,
    local: &BoundParams,
    server: &BoundParams,
    config: &ViTConfig,
    images: Var,
    labels: &[usize],
    masks: &[TokenMask],
    w: &LossWeights,
) -> Result<(InversionTerms<Var>, GraphForward)> {
    let lo = forward_graph(g, local, config, images, masks)?;
    let ce = cross_entropy_graph(g, lo.logits, labels)?;
    let js = if w.alpha_js > 0.0 {
        let so = forward_graph(g, server, config, images, masks)?;
        js_graph(g, lo.logits, so.logits)?
    } else {
        g.constant(&Tensor::scalar(0.0))
    };
    let visible = if masks.iter().all(TokenMask::is_full) {
        images
    } else {
        let shape = g.shape(images).to_vec();
        let keep = g.constant_from(&shape, pixel_keep(config, masks))?;
        g.mul(images, keep)?
    };
    let tv = tv_graph(g, visible)?;
    let l2 = l2_graph(g, visible);
    let js_w = g.scale(js, w.js_sign.factor() * w.alpha_js);
    let tv_w = g.scale(tv, w.alpha_tv);
    let l2_w = g.scale(l2, w.alpha_l2);
    let total = g.add(ce, js_w)?;
    let total = g.add(total, tv_w)?;
    let total = g.add(total, l2_w)?;
    Ok((InversionTerms { total, ce, js, tv, l2 }, lo))
}

/// Inversion objective for one image, evaluated with pixel gradients.
/// Returns the terms and `∂total/∂x̂` shaped like `image`.
pub fn inversion_loss(
    local: &ViTParams,
    server: &ViTParams,
    image: &Tensor,
    label: usize,
    mask: &TokenMask,
    w: &LossWeights,
) -> Result<(InversionTerms<f64>, Tensor)> {
    w.validate()?;
    let cfg = &local.config;
    let mut g = Graph::new();
    let lb = local.bind(&mut g, false);
    let sb = server.bind(&mut g, false);
    let [h, wd, c] = cfg.image_shape();
    let x = g.leaf(&image.reshaped(&[1, h, wd, c])?.with_grad());
    let (terms, _) = inversion_objective(&mut g, &lb, &sb, cfg, x, &[label], std::slice::from_ref(mask), w)?;
    g.backward(terms.total)?;
    let grad = g.grad_or_zeros(x).reshaped(image.shape())?;
    Ok((terms.values(&g), grad))
}

/// Components of the token-relabel objective. `total = kd + λ1·ce_high + λ2·kl_low`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelabelTerms<T> {
    pub total: T,
    pub kd: T,
    pub ce_high: T,
    pub kl_low: T,
}

impl RelabelTerms<Var> {
    pub fn values(&self, g: &Graph) -> RelabelTerms<f64> {
        RelabelTerms {
            total: g.item(self.total),
            kd: g.item(self.kd),
            ce_high: g.item(self.ce_high),
            kl_low: g.item(self.kl_low),
        }
    }
}

/// Precomputed ensemble outputs for a synthetic batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherTargets {
    /// Ensemble logits on the full images, `[B, K]`.
    pub full: Tensor,
    /// Ensemble logits for the low-token view, `[B, K]`; rows of images with
    /// an empty low set are unused.
    pub low: Tensor,
}

impl TeacherTargets {
    pub fn compute(ensemble: &Ensemble, images: &Tensor, masks: &[TokenMask], w: &LossWeights) -> Result<Self> {
        let b = images.shape()[0];
        let l = ensemble.config().num_patches();
        let full_masks = vec![TokenMask::full(l); b];
        let full = ensemble.batch_logits(images, &full_masks)?;
        let low = if w.mask_teacher_low {
            let low_masks: Vec<TokenMask> = masks
                .iter()
                .map(|m| m.complement().unwrap_or_else(|| TokenMask::full(l)))
                .collect();
            ensemble.batch_logits(images, &low_masks)?
        } else {
            full.clone()
        };
        Ok(TeacherTargets { full, low })
    }
}

/// Batched token-relabel objective, averaged over the batch. Gradients reach
/// only the bound `server` parameters.
pub fn relabel_objective(
    g: &mut Graph,
    server: &BoundParams,
    config: &ViTConfig,
    images: &Tensor,
    labels: &[usize],
    masks: &[TokenMask],
    teacher: &TeacherTargets,
    w: &LossWeights,
) -> Result<RelabelTerms<Var>> {
    w.validate()?;
    let b = images.shape()[0];
    let l = config.num_patches();
    let inv_b = 1.0 / b as f64;
    let x = g.constant(images);

    let full_masks = vec![TokenMask::full(l); b];
    let full = forward_graph(g, server, config, x, &full_masks)?;
    let kd = kl_graph(g, &teacher.full, full.logits, w.temperature)?;
    let kd = g.scale(kd, inv_b);

    // terms with zero weight are skipped and reported as 0
    let ce_high = if w.lambda1 > 0.0 {
        let high = forward_graph(g, server, config, x, masks)?;
        let ce = cross_entropy_graph(g, high.logits, labels)?;
        g.scale(ce, inv_b)
    } else {
        g.constant(&Tensor::scalar(0.0))
    };

    // images without low tokens get a placeholder view and zero weight
    let weights: Vec<f64> = masks.iter().map(|m| if m.is_full() { 0.0 } else { 1.0 }).collect();
    let kl_low = if w.lambda2 > 0.0 && weights.iter().any(|&v| v > 0.0) {
        let low_masks: Vec<TokenMask> = masks
            .iter()
            .map(|m| m.complement().unwrap_or_else(|| TokenMask::full(l)))
            .collect();
        let low = forward_graph(g, server, config, x, &low_masks)?;
        let kl = kl_graph_weighted(g, &teacher.low, low.logits, w.temperature, Some(&weights))?;
        g.scale(kl, inv_b)
    } else {
        g.constant(&Tensor::scalar(0.0))
    };

    let t2 = g.scale(ce_high, w.lambda1);
    let t3 = g.scale(kl_low, w.lambda2);
    let total = g.add(kd, t2)?;
    let total = g.add(total, t3)?;
    Ok(RelabelTerms {
        total,
        kd,
        ce_high,
        kl_low,
    })
}

/// Token-relabel objective for one synthetic image.
pub fn relabel_loss(
    server: &ViTParams,
    ensemble: &Ensemble,
    image: &Tensor,
    label: usize,
    mask: &TokenMask,
    w: &LossWeights,
) -> Result<RelabelTerms<f64>> {
    let cfg = &server.config;
    let [h, wd, c] = cfg.image_shape();
    let batch = image.reshaped(&[1, h, wd, c])?;
    let masks = std::slice::from_ref(mask);
    let teacher = TeacherTargets::compute(ensemble, &batch, masks, w)?;
    let mut g = Graph::new();
    let bound = server.bind(&mut g, true);
    let terms = relabel_objective(&mut g, &bound, cfg, &batch, &[label], masks, &teacher, w)?;
    Ok(terms.values(&g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_check_many;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    fn probs(v: &[f64]) -> Vec<f64> {
        let z: f64 = v.iter().map(|x| x.exp()).sum();
        v.iter().map(|x| x.exp() / z).collect()
    }

    fn kl_oracle(p: &[f64], q: &[f64]) -> f64 {
        let (p, q) = (probs(p), probs(q));
        p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum()
    }

    fn js_oracle(p: &[f64], q: &[f64]) -> f64 {
        let (p, q) = (probs(p), probs(q));
        let m: Vec<f64> = p.iter().zip(&q).map(|(a, b)| 0.5 * (a + b)).collect();
        let kl = |a: &[f64]| a.iter().zip(&m).map(|(x, y)| x * (x / y).ln()).sum::<f64>();
        0.5 * kl(&p) + 0.5 * kl(&q)
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((cross_entropy(&t(&[0.0; 4]), 1).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&t(&[30.0, 0.0, 0.0, 0.0]), 0).unwrap() < 1e-12);
        let want = -probs(&[1.0, 2.0, 3.0])[2].ln();
        assert!((cross_entropy(&t(&[1.0, 2.0, 3.0]), 2).unwrap() - want).abs() < 1e-12);
        assert!(matches!(
            cross_entropy(&t(&[1.0, 2.0]), 2),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn cross_entropy_gradient_is_p_minus_onehot() {
        let mut g = Graph::new();
        let l = g.leaf(&Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap().with_grad());
        let v = cross_entropy_graph(&mut g, l, &[0]).unwrap();
        g.backward(v).unwrap();
        let p = probs(&[1.0, 2.0, 3.0]);
        let grad = g.grad(l).unwrap();
        for (i, gi) in grad.data().iter().enumerate() {
            let want = p[i] - if i == 0 { 1.0 } else { 0.0 };
            assert!((gi - want).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_examples() {
        assert!(kl_divergence(&t(&[0.3, -1.0]), &t(&[0.3, -1.0]), 1.0).unwrap().abs() < 1e-15);
        let (p, q) = ([2f64.ln(), 0.0], [0.0, 0.0]);
        let want = (2.0 / 3.0) * ((2.0 / 3.0) / 0.5f64).ln() + (1.0 / 3.0) * ((1.0 / 3.0) / 0.5f64).ln();
        assert!((kl_divergence(&t(&p), &t(&q), 1.0).unwrap() - want).abs() < 1e-12);
        assert!((kl_oracle(&p, &q) - want).abs() < 1e-12);
        // τ-consistency
        let (p, q) = ([0.2, 1.5, -0.4], [1.0, 0.0, 0.3]);
        let base = kl_divergence(&t(&p), &t(&q), 1.0).unwrap();
        let p4: Vec<f64> = p.iter().map(|v| v * 4.0).collect();
        let q4: Vec<f64> = q.iter().map(|v| v * 4.0).collect();
        assert!((kl_divergence(&t(&p4), &t(&q4), 4.0).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn kl_gradient_reaches_only_student() {
        let teacher = Tensor::new(vec![2, 3], vec![0.1, 0.9, -0.3, 1.0, 2.0, 0.0]).unwrap();
        let student = Tensor::new(vec![2, 3], vec![0.5, -0.2, 0.4, 0.0, 1.0, 1.0]).unwrap();
        let err = finite_difference_check_many(|g, v| kl_graph(g, &teacher, v[0], 2.0), &[student], 1e-5).unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn js_examples() {
        assert!(js_divergence(&t(&[1.0, 2.0]), &t(&[1.0, 2.0])).unwrap().abs() < 1e-15);
        let disjoint = js_divergence(&t(&[60.0, 0.0]), &t(&[0.0, 60.0])).unwrap();
        assert!((disjoint - 2f64.ln()).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Tensor::randn(&[5], 2.0, &mut rng);
        let q = Tensor::randn(&[5], 2.0, &mut rng);
        let a = js_divergence(&p, &q).unwrap();
        assert!((a - js_divergence(&q, &p).unwrap()).abs() < 1e-15);
        assert!((a - js_oracle(p.data(), q.data())).abs() < 1e-12);
    }

    #[test]
    fn js_gradients_flow_into_both_arguments() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let q = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let err = finite_difference_check_many(|g, v| js_graph(g, v[0], v[1]), &[p, q], 1e-5).unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv_regularizer(&Tensor::full(&[3, 3, 2], 0.4)).unwrap(), 0.0);
        let x = Tensor::new(vec![2, 2, 1], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(tv_regularizer(&x).unwrap(), 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[4, 5, 2], 1.0, &mut rng);
        let mut shifted = x.clone();
        shifted.data_mut().iter_mut().for_each(|v| *v += 3.0);
        assert!((tv_regularizer(&x).unwrap() - tv_regularizer(&shifted).unwrap()).abs() < 1e-10);
        assert!(tv_regularizer(&Tensor::zeros(&[1, 1, 1])).is_err());
    }

    #[test]
    fn l2_examples() {
        assert_eq!(l2_regularizer(&Tensor::zeros(&[2, 2, 1])), 0.0);
        assert_eq!(l2_regularizer(&Tensor::new(vec![1, 2, 1], vec![3.0, 4.0]).unwrap()), 25.0);
        let mut g = Graph::new();
        let x = g.constant(&Tensor::new(vec![1, 1, 2, 1], vec![3.0, 4.0]).unwrap());
        let v = l2_graph(&mut g, x);
        assert_eq!(g.item(v), 25.0);
    }

    fn model(seed: u64) -> ViTParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ViTParams::init(&ViTConfig::default(), &mut rng).unwrap();
        p.head_w.data_mut().iter_mut().for_each(|v| *v *= 20.0);
        p
    }

    fn sample(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&ViTConfig::default().image_shape(), 1.0, &mut rng)
    }

    fn some_mask() -> TokenMask {
        let mut m = vec![true; 16];
        for i in [0, 4, 9, 10, 15] {
            m[i] = false;
        }
        TokenMask::new(m).unwrap()
    }

    #[test]
    fn inversion_loss_isolates_cross_entropy() {
        let (local, server) = (model(1), model(2));
        let x = sample(3);
        let mask = some_mask();
        let w = LossWeights {
            alpha_js: 0.0,
            alpha_tv: 0.0,
            alpha_l2: 0.0,
            ..LossWeights::default()
        };
        let (terms, _) = inversion_loss(&local, &server, &x, 1, &mask, &w).unwrap();
        let logits = crate::vit::vit_forward(&local, &x, Some(&mask)).unwrap().logits;
        assert!((terms.total - cross_entropy(&logits, 1).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn inversion_loss_is_weighted_component_sum() {
        let (local, server) = (model(1), model(2));
        let x = sample(4);
        let mask = some_mask();
        let w = LossWeights {
            alpha_l2: 1e-3,
            ..LossWeights::default()
        };
        let (terms, _) = inversion_loss(&local, &server, &x, 2, &mask, &w).unwrap();
        let lo = crate::vit::vit_forward(&local, &x, Some(&mask)).unwrap().logits;
        let so = crate::vit::vit_forward(&server, &x, Some(&mask)).unwrap().logits;
        // priors see halted patches as zero
        let mut visible = x.clone();
        for (i, v) in visible.data_mut().iter_mut().enumerate() {
            if !mask.is_active((i / 16 / 4) * 4 + (i % 16) / 4) {
                *v = 0.0;
            }
        }
        let want = cross_entropy(&lo, 2).unwrap() - 1.0 * js_divergence(&lo, &so).unwrap()
            + 1e-4 * tv_regularizer(&visible).unwrap()
            + 1e-3 * l2_regularizer(&visible);
        assert!((terms.total - want).abs() < 1e-12);
        assert!(terms.js > 0.0);

        let same = inversion_loss(&local, &local, &x, 2, &mask, &w).unwrap().0;
        assert!(same.js.abs() < 1e-15);
        let priors = 1e-4 * tv_regularizer(&visible).unwrap() + 1e-3 * l2_regularizer(&visible);
        assert!((same.total - cross_entropy(&lo, 2).unwrap() - priors).abs() < 1e-12);
    }

    #[test]
    fn inversion_gradient_vanishes_on_masked_patches() {
        let (local, server) = (model(5), model(6));
        let x = sample(7);
        let mask = some_mask();
        let w = LossWeights {
            alpha_l2: 1e-3,
            ..LossWeights::default()
        };
        let (_, grad) = inversion_loss(&local, &server, &x, 0, &mask, &w).unwrap();
        for (i, v) in grad.data().iter().enumerate() {
            let patch = (i / 16 / 4) * 4 + (i % 16) / 4;
            if !mask.is_active(patch) {
                assert_eq!(v.to_bits(), 0.0f64.to_bits());
            }
        }
    }

    #[test]
    fn relabel_loss_examples() {
        let server = model(8);
        let ensemble = Ensemble::uniform(vec![model(9), model(10)]).unwrap();
        let x = sample(11);
        let mask = some_mask();
        let kd_only = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            ..LossWeights::default()
        };
        let r = relabel_loss(&server, &ensemble, &x, 3, &mask, &kd_only).unwrap();
        let e_full = ensemble.logits(&x, None).unwrap();
        let s_full = crate::vit::vit_forward(&server, &x, None).unwrap().logits;
        let kd = kl_divergence(&e_full, &s_full, 1.0).unwrap();
        assert!((r.total - kd).abs() < 1e-12);

        let w = LossWeights::default();
        let r = relabel_loss(&server, &ensemble, &x, 3, &mask, &w).unwrap();
        let low = mask.complement().unwrap();
        let s_high = crate::vit::vit_forward(&server, &x, Some(&mask)).unwrap().logits;
        let s_low = crate::vit::vit_forward(&server, &x, Some(&low)).unwrap().logits;
        let e_low = ensemble.logits(&x, Some(&low)).unwrap();
        let want = kd + 0.5 * cross_entropy(&s_high, 3).unwrap() + 0.5 * kl_divergence(&e_low, &s_low, 1.0).unwrap();
        assert!((r.total - want).abs() < 1e-12);

        let unmasked_teacher = LossWeights {
            mask_teacher_low: false,
            ..LossWeights::default()
        };
        let r2 = relabel_loss(&server, &ensemble, &x, 3, &mask, &unmasked_teacher).unwrap();
        let want_kl = kl_divergence(&e_full, &s_low, 1.0).unwrap();
        assert!((r2.kl_low - want_kl).abs() < 1e-12);

        let full = TokenMask::full(16);
        let r = relabel_loss(&server, &ensemble, &x, 3, &full, &w).unwrap();
        assert_eq!(r.kl_low, 0.0);
        assert!((r.ce_high - cross_entropy(&s_full, 3).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn relabel_batch_mean_and_teacher_detachment() {
        let server = model(12);
        let ensemble = Ensemble::uniform(vec![model(13)]).unwrap();
        let (x0, x1) = (sample(14), sample(15));
        let mut data = x0.data().to_vec();
        data.extend_from_slice(x1.data());
        let batch = Tensor::new(vec![2, 16, 16, 1], data).unwrap();
        let masks = vec![some_mask(), TokenMask::full(16)];
        let labels = [1, 2];
        let w = LossWeights::default();
        let teacher = TeacherTargets::compute(&ensemble, &batch, &masks, &w).unwrap();
        let mut g = Graph::new();
        let bound = server.bind(&mut g, true);
        let member = ensemble.members()[0].bind(&mut g, true);
        let terms = relabel_objective(&mut g, &bound, &server.config, &batch, &labels, &masks, &teacher, &w).unwrap();
        let a = relabel_loss(&server, &ensemble, &x0, 1, &masks[0], &w).unwrap();
        let b = relabel_loss(&server, &ensemble, &x1, 2, &masks[1], &w).unwrap();
        assert!((g.item(terms.total) - 0.5 * (a.total + b.total)).abs() < 1e-12);
        g.backward(terms.total).unwrap();
        assert!(member.vars().iter().all(|&v| g.grad(v).is_none_or(|t| t.data().iter().all(|&x| x == 0.0))));
        assert!(bound.grads(&g).iter().any(|t| t.frobenius_norm() > 0.0));
    }

    proptest! {
        #[test]
        fn divergences_are_bounded(p in prop::collection::vec(-20.0f64..20.0, 4), q in prop::collection::vec(-20.0f64..20.0, 4)) {
            let kl = kl_divergence(&t(&p), &t(&q), 1.0).unwrap();
            let js = js_divergence(&t(&p), &t(&q)).unwrap();
            prop_assert!(kl >= -1e-12);
            prop_assert!(js >= -1e-12 && js <= 2f64.ln() + 1e-12);
        }
    }
}
