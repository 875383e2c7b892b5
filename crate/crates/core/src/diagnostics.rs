//! Stability diagnostics: value-projection gradient norms (with an explicit
//! `Xᵀ Aᵀ δ` reconstruction and a foreground/background split), error-signal
//! norms, and the closed-form stability and generalization bounds.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::Ensemble;
use crate::inversion::{build_synthetic_pool, init_noise, InversionConfig, SyntheticBatch};
use crate::losses::{cross_entropy_graph, kl_graph, relabel_objective, softmax_rows, LossWeights, TeacherTargets};
use crate::optim::Sgd;
use crate::tensor::{kernels, Graph, Tensor};
use crate::vit::{batch_logits, forward_graph, BoundParams, GraphForward, TokenMask, ViTConfig, ViTParams};

/// Explicit value-projection gradient `Xᵀ Aᵀ δ` for one head.
///
/// `x` is `[S, D]`, `a` is `[S, S]`, `delta` is `[S, hd]`; the result is
/// `[D, hd]`.
pub fn value_grad_from_chain(x: &Tensor, a: &Tensor, delta: &Tensor) -> Result<Tensor> {
    let (s, d) = match *x.shape() {
        [s, d] => (s, d),
        ref sh => return Err(Error::shape("value_grad_from_chain", sh, &[0, 0])),
    };
    if a.shape() != [s, s] || delta.rank() != 2 || delta.shape()[0] != s {
        return Err(Error::shape("value_grad_from_chain", a.shape(), delta.shape()));
    }
    let hd = delta.shape()[1];
    let mut dv = vec![0.0; s * hd];
    kernels::gemm_tn(a.data(), delta.data(), &mut dv, s, s, hd);
    let mut out = vec![0.0; d * hd];
    kernels::gemm_tn(x.data(), &dv, &mut out, s, d, hd);
    Tensor::new(vec![d, hd], out)
}

/// `∇W_V` of one layer rebuilt from graph intermediates, split by token rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueGradParts {
    /// `[D, D]`, all token rows.
    pub total: Tensor,
    /// Class token and active patches.
    pub foreground: Tensor,
    /// Halted patches.
    pub background: Tensor,
}

/// Reconstructs every layer's `∇W_V` as `Σ_rows X_jᵀ (Aᵀ δ)_j` after
/// `backward` has run. `split` assigns patch rows to the foreground when
/// active; `None` counts every row as foreground.
pub fn value_grad_parts(
    g: &Graph,
    forward: &GraphForward,
    config: &ViTConfig,
    split: Option<&[TokenMask]>,
) -> Result<Vec<ValueGradParts>> {
    let (s, d, heads, hd) = (config.seq_len(), config.embed_dim, config.num_heads, config.head_dim());
    let b = g.shape(forward.logits)[0];
    forward
        .layers
        .iter()
        .map(|layer| {
            let x = g.data(layer.normed);
            let a = g.data(layer.attention);
            let delta = g.grad_or_zeros(layer.head_out);
            let mut fg = vec![0.0; d * d];
            let mut bg = vec![0.0; d * d];
            let mut dv = vec![0.0; s * hd];
            for bi in 0..b {
                let keep: Vec<bool> = match split {
                    Some(m) => std::iter::once(true).chain(m[bi].active().iter().copied()).collect(),
                    None => vec![true; s],
                };
                for h in 0..heads {
                    let gh = bi * heads + h;
                    dv.iter_mut().for_each(|v| *v = 0.0);
                    let ab = &a[gh * s * s..(gh + 1) * s * s];
                    let db = &delta.data()[gh * s * hd..(gh + 1) * s * hd];
                    kernels::gemm_tn(ab, db, &mut dv, s, s, hd);
                    for j in 0..s {
                        let dst = if keep[j] { &mut fg } else { &mut bg };
                        let xj = &x[(bi * s + j) * d..(bi * s + j + 1) * d];
                        for (r, &xv) in xj.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            for k in 0..hd {
                                dst[r * d + h * hd + k] += xv * dv[j * hd + k];
                            }
                        }
                    }
                }
            }
            let total: Vec<f64> = fg.iter().zip(&bg).map(|(a, b)| a + b).collect();
            Ok(ValueGradParts {
                total: Tensor::new(vec![d, d], total)?,
                foreground: Tensor::new(vec![d, d], fg)?,
                background: Tensor::new(vec![d, d], bg)?,
            })
        })
        .collect()
}

/// Root of the summed squared Frobenius norms.
pub fn stacked_norm<'a>(ts: impl IntoIterator<Item = &'a Tensor>) -> f64 {
    ts.into_iter().map(|t| t.frobenius_norm().powi(2)).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub enum LossKind {
    /// Mean cross entropy against hard labels.
    HardCe(Vec<usize>),
    /// Mean KL from precomputed teacher logits `[B, K]` to the model.
    SoftKl(Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueGradNorms {
    /// Autodiff `‖∇W_V‖_F` per layer.
    pub per_layer: Vec<f64>,
    /// First layer rebuilt from `Xᵀ Aᵀ δ`.
    pub explicit_first: f64,
    /// `‖autodiff − explicit‖ / max(‖autodiff‖, tiny)` on the first layer.
    pub relative_gap: f64,
}

/// Backpropagates `kind` through `params` on `images` and reports each
/// layer's value-projection gradient norm.
pub fn value_grad_norm(params: &ViTParams, images: &Tensor, masks: &[TokenMask], kind: &LossKind) -> Result<ValueGradNorms> {
    let cfg = &params.config;
    let b = images.shape()[0];
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let x = g.constant(images);
    let fwd = forward_graph(&mut g, &bound, cfg, x, masks)?;
    let loss = match kind {
        LossKind::HardCe(labels) => cross_entropy_graph(&mut g, fwd.logits, labels)?,
        LossKind::SoftKl(teacher) => kl_graph(&mut g, teacher, fwd.logits, 1.0)?,
    };
    let loss = g.scale(loss, 1.0 / b as f64);
    g.backward(loss)?;
    let per_layer: Vec<f64> = bound.layers.iter().map(|l| g.grad_or_zeros(l.w_v).frobenius_norm()).collect();
    let parts = value_grad_parts(&g, &fwd, cfg, None)?;
    let auto = g.grad_or_zeros(bound.layers[0].w_v);
    let explicit = &parts[0].total;
    let diff = auto
        .data()
        .iter()
        .zip(explicit.data())
        .map(|(a, e)| (a - e).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(ValueGradNorms {
        per_layer,
        explicit_first: explicit.frobenius_norm(),
        relative_gap: diff / auto.frobenius_norm().max(f64::MIN_POSITIVE),
    })
}

/// Batch means of `‖p − onehot(y)‖²` and `‖p − q‖²` where `p` is the
/// server's and `q` the ensemble's softmax output.
pub fn error_signal_norms(server: &ViTParams, ensemble: &Ensemble, images: &Tensor, labels: &[usize]) -> Result<(f64, f64)> {
    let b = images.shape()[0];
    if labels.len() != b {
        return Err(Error::invalid(format!("{} labels for {b} images", labels.len())));
    }
    let k = server.config.num_classes;
    let masks = vec![TokenMask::full(server.config.num_patches()); b];
    let p = softmax_rows(&batch_logits(server, images, &masks)?, 1.0);
    let q = softmax_rows(&ensemble.batch_logits(images, &masks)?, 1.0);
    let (mut hard, mut soft) = (0.0, 0.0);
    for i in 0..b {
        for c in 0..k {
            let pi = p.data()[i * k + c];
            let y = f64::from(u8::from(labels[i] == c));
            hard += (pi - y).powi(2);
            soft += (pi - q.data()[i * k + c]).powi(2);
        }
    }
    Ok((hard / b as f64, soft / b as f64))
}

fn require(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::invalid(msg()))
    }
}

/// Uniform-stability bound of SGD with steps `c/t` on a `μ`-smooth loss:
/// `β = (1 + 1/(μc)) / (N − 1) · (2cL²)^{1/(μc+1)} · T^{μc/(μc+1)}`.
pub fn sgd_stability_bound(l: f64, mu: f64, c: f64, t: f64, n: f64) -> Result<f64> {
    require(l >= 0.0 && l.is_finite(), || format!("L must be finite and >= 0, got {l}"))?;
    require(mu > 0.0 && c > 0.0 && t > 0.0, || format!("mu, c, T must be > 0, got {mu}, {c}, {t}"))?;
    require(n >= 2.0, || format!("N must be >= 2, got {n}"))?;
    let mc = mu * c;
    Ok((1.0 + 1.0 / mc) / (n - 1.0) * (2.0 * c * l * l).powf(1.0 / (mc + 1.0)) * t.powf(mc / (mc + 1.0)))
}

/// `R_emp + 2β + (4Nβ + M) · sqrt(ln(1/δ) / (2N))`.
pub fn generalization_bound(r_emp: f64, beta: f64, m: f64, n: f64, delta: f64) -> Result<f64> {
    require((0.0..=m).contains(&r_emp), || format!("R_emp must lie in [0, M={m}], got {r_emp}"))?;
    require(beta >= 0.0, || format!("beta must be >= 0, got {beta}"))?;
    require(n >= 1.0, || format!("N must be >= 1, got {n}"))?;
    require(delta > 0.0 && delta < 1.0, || format!("delta must lie in (0, 1), got {delta}"))?;
    Ok(r_emp + 2.0 * beta + (4.0 * n * beta + m) * ((1.0 / delta).ln() / (2.0 * n)).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundInputs {
    pub mu: f64,
    pub c: f64,
    /// Loss range upper bound.
    pub m: f64,
    pub delta: f64,
    pub r_emp: f64,
}

impl Default for BoundInputs {
    fn default() -> Self {
        BoundInputs {
            mu: 1.0,
            c: 1.0,
            m: 1.0,
            delta: 0.05,
            r_emp: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub l: f64,
    pub mu: f64,
    pub c: f64,
    pub t: f64,
    /// Training-sample count (not the client count).
    pub n: f64,
    pub m: f64,
    pub delta: f64,
    pub r_emp: f64,
    pub beta: f64,
    pub bound: f64,
}

impl StabilityReport {
    pub fn compute(l: f64, t: f64, n: f64, inputs: &BoundInputs) -> Result<Self> {
        let beta = sgd_stability_bound(l, inputs.mu, inputs.c, t, n)?;
        let bound = generalization_bound(inputs.r_emp, beta, inputs.m, n, inputs.delta)?;
        Ok(StabilityReport {
            l,
            mu: inputs.mu,
            c: inputs.c,
            t,
            n,
            m: inputs.m,
            delta: inputs.delta,
            r_emp: inputs.r_emp,
            beta,
            bound,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Matched distillation steps per run; `L̂` is the max over them.
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Noise images for the error-signal measurement.
    pub noise_batch: usize,
    pub bounds: BoundInputs,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            steps: 200,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            noise_batch: 256,
            bounds: BoundInputs::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradNormRow {
    pub seed: u64,
    pub step: usize,
    pub norm_dense: f64,
    pub norm_fed: f64,
    pub bg_dense: f64,
    pub bg_fed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradNormReport {
    pub rows: Vec<GradNormRow>,
    /// Max observed dense-loss norm over the step budget.
    pub l_di: f64,
    /// Max observed FedMITR-loss norm over the step budget.
    pub l_fed: f64,
    /// Max decomposition residual `‖G − (G_fg + G_bg)‖ / ‖G‖` seen.
    pub max_split_residual: f64,
}

pub const GRAD_NORM_CSV_HEADER: &str = "seed,step,norm_dense,norm_fed,bg_dense,bg_fed";

pub fn write_grad_norm_csv<W: Write>(w: &mut W, reports: &[GradNormReport]) -> Result<()> {
    writeln!(w, "{GRAD_NORM_CSV_HEADER}")?;
    for r in reports {
        for row in &r.rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                row.seed, row.step, row.norm_dense, row.norm_fed, row.bg_dense, row.bg_fed
            )?;
        }
    }
    Ok(())
}

fn split_residual(auto: &[Tensor], parts: &[ValueGradParts]) -> f64 {
    auto.iter()
        .zip(parts)
        .map(|(a, p)| {
            let r = a
                .data()
                .iter()
                .zip(p.foreground.data().iter().zip(p.background.data()))
                .map(|(x, (f, b))| (x - f - b).powi(2))
                .sum::<f64>()
                .sqrt();
            r / a.frobenius_norm().max(f64::MIN_POSITIVE)
        })
        .fold(0.0, f64::max)
}

fn value_grads(g: &Graph, bound: &BoundParams) -> Vec<Tensor> {
    bound.layers.iter().map(|l| g.grad_or_zeros(l.w_v)).collect()
}

/// Dense step: mean hard cross entropy on full images. Returns
/// `(‖∇W_V‖, background part, residual)`.
fn dense_step(server: &mut ViTParams, opt: &mut Sgd, batch: &SyntheticBatch) -> Result<(f64, f64, f64)> {
    let cfg = server.config.clone();
    let b = batch.len();
    let mut g = Graph::new();
    let bound = server.bind(&mut g, true);
    let x = g.constant(&batch.images);
    let full = vec![TokenMask::full(cfg.num_patches()); b];
    let fwd = forward_graph(&mut g, &bound, &cfg, x, &full)?;
    let ce = cross_entropy_graph(&mut g, fwd.logits, &batch.labels)?;
    let loss = g.scale(ce, 1.0 / b as f64);
    g.backward(loss)?;
    let auto = value_grads(&g, &bound);
    let parts = value_grad_parts(&g, &fwd, &cfg, Some(&batch.masks))?;
    let out = (
        stacked_norm(&auto),
        stacked_norm(parts.iter().map(|p| &p.background)),
        split_residual(&auto, &parts),
    );
    opt.step(&mut server.tensors_mut(), &bound.grads(&g))?;
    Ok(out)
}

/// Background part of the hard-label high-token term alone.
fn hard_term_background(server: &ViTParams, batch: &SyntheticBatch) -> Result<f64> {
    let cfg = &server.config;
    let mut g = Graph::new();
    let bound = server.bind(&mut g, true);
    let x = g.constant(&batch.images);
    let fwd = forward_graph(&mut g, &bound, cfg, x, &batch.masks)?;
    let ce = cross_entropy_graph(&mut g, fwd.logits, &batch.labels)?;
    let loss = g.scale(ce, 1.0 / batch.len() as f64);
    g.backward(loss)?;
    let parts = value_grad_parts(&g, &fwd, cfg, Some(&batch.masks))?;
    Ok(stacked_norm(parts.iter().map(|p| &p.background)))
}

fn fed_step(
    server: &mut ViTParams,
    opt: &mut Sgd,
    batch: &SyntheticBatch,
    teacher: &TeacherTargets,
    weights: &LossWeights,
) -> Result<(f64, f64)> {
    let bg = hard_term_background(server, batch)?;
    let cfg = server.config.clone();
    let mut g = Graph::new();
    let bound = server.bind(&mut g, true);
    let terms = relabel_objective(&mut g, &bound, &cfg, &batch.images, &batch.labels, &batch.masks, teacher, weights)?;
    g.backward(terms.total)?;
    let norm = stacked_norm(&value_grads(&g, &bound));
    opt.step(&mut server.tensors_mut(), &bound.grads(&g))?;
    Ok((norm, bg))
}

/// Matched distillation runs on one (sparse) synthetic pool: the dense run
/// minimizes hard cross entropy on full images, the FedMITR run the
/// token-relabel objective. Both start from `server` and visit identical
/// batches; `L̂` is the largest `‖∇W_V‖` seen before each update.
#[allow(clippy::too_many_arguments)]
pub fn lipschitz_comparison(
    clients: &[ViTParams],
    server: &ViTParams,
    ensemble: &Ensemble,
    inversion: &InversionConfig,
    weights: &LossWeights,
    diag: &DiagnosticsConfig,
    seed: u64,
    workers: usize,
) -> Result<GradNormReport> {
    let pool = build_synthetic_pool(clients, server, inversion, weights, 0, seed, true, workers)?;
    let teachers: Vec<TeacherTargets> = pool
        .iter()
        .map(|b| TeacherTargets::compute(ensemble, &b.images, &b.masks, weights))
        .collect::<Result<_>>()?;
    let (mut dense, mut fed) = (server.clone(), server.clone());
    let mut opt_d = Sgd::new(diag.lr, diag.momentum, diag.weight_decay);
    let mut opt_f = Sgd::new(diag.lr, diag.momentum, diag.weight_decay);
    let mut report = GradNormReport {
        rows: Vec::with_capacity(diag.steps),
        l_di: 0.0,
        l_fed: 0.0,
        max_split_residual: 0.0,
    };
    for step in 0..diag.steps {
        let i = step % pool.len();
        let (norm_dense, bg_dense, residual) = dense_step(&mut dense, &mut opt_d, &pool[i])?;
        let (norm_fed, bg_fed) = fed_step(&mut fed, &mut opt_f, &pool[i], &teachers[i], weights)?;
        if !(norm_dense.is_finite() && norm_fed.is_finite()) {
            return Err(Error::NonFiniteLoss {
                value: norm_dense.max(norm_fed),
                context: format!("diagnostics step {step}"),
            });
        }
        report.l_di = report.l_di.max(norm_dense);
        report.l_fed = report.l_fed.max(norm_fed);
        report.max_split_residual = report.max_split_residual.max(residual);
        report.rows.push(GradNormRow {
            seed,
            step,
            norm_dense,
            norm_fed,
            bg_dense,
            bg_fed,
        });
    }
    Ok(report)
}

/// Error-signal norms on `init_noise` inputs drawn from `seed`.
pub fn noise_error_signals(server: &ViTParams, ensemble: &Ensemble, batch: usize, seed: u64) -> Result<(f64, f64)> {
    let (images, labels) = init_noise(batch, &server.config, seed);
    error_signal_norms(server, ensemble, &images, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(seed: u64) -> ViTParams {
        let mut p = ViTParams::init(&ViTConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        p.head_w.data_mut().iter_mut().for_each(|v| *v *= 20.0);
        p
    }

    #[test]
    fn chain_product_hand_case() {
        let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let a = Tensor::new(vec![2, 2], vec![0.25, 0.75, 0.6, 0.4]).unwrap();
        let d = Tensor::new(vec![2, 2], vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        let got = value_grad_from_chain(&x, &a, &d).unwrap();
        // Aᵀδ
        let atd = [
            0.25 * 1.0 + 0.6 * 0.5,
            0.25 * -1.0 + 0.6 * 2.0,
            0.75 * 1.0 + 0.4 * 0.5,
            0.75 * -1.0 + 0.4 * 2.0,
        ];
        let want = [
            1.0 * atd[0] + 3.0 * atd[2],
            1.0 * atd[1] + 3.0 * atd[3],
            2.0 * atd[0] + 4.0 * atd[2],
            2.0 * atd[1] + 4.0 * atd[3],
        ];
        for (g, w) in got.data().iter().zip(want) {
            assert!((g - w).abs() < 1e-15);
        }
        let fro = want.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((got.frobenius_norm() - fro).abs() < 1e-14);
    }

    #[test]
    fn autodiff_matches_explicit_chain() {
        let p = net(1);
        let (x, y) = init_noise(5, &p.config, 2);
        let masks = vec![TokenMask::full(16); 5];
        let r = value_grad_norm(&p, &x, &masks, &LossKind::HardCe(y)).unwrap();
        assert!(r.relative_gap < 1e-8, "gap {}", r.relative_gap);
        assert!((r.per_layer[0] - r.explicit_first).abs() <= 1e-8 * r.per_layer[0]);
        assert!(r.per_layer.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn soft_loss_against_itself_has_zero_norms() {
        let p = net(3);
        let (x, _) = init_noise(3, &p.config, 4);
        let masks = vec![TokenMask::full(16); 3];
        let teacher = batch_logits(&p, &x, &masks).unwrap();
        let r = value_grad_norm(&p, &x, &masks, &LossKind::SoftKl(teacher)).unwrap();
        assert!(r.per_layer.iter().all(|&v| v < 1e-12), "{:?}", r.per_layer);
    }

    #[test]
    fn split_is_exact_and_masked_background_vanishes() {
        let p = net(5);
        let (x, y) = init_noise(3, &p.config, 6);
        let masks: Vec<TokenMask> = (0..3)
            .map(|i| TokenMask::new((0..16).map(|j| (j + i) % 3 != 0).collect()).unwrap())
            .collect();
        let batch = SyntheticBatch {
            images: x,
            labels: y,
            masks,
            cls_attention: vec![],
            client: 0,
            epoch: 0,
            log: vec![],
        };
        let mut s = p.clone();
        let mut opt = Sgd::new(0.0, 0.0, 0.0);
        let (norm, bg, residual) = dense_step(&mut s, &mut opt, &batch).unwrap();
        assert!(norm > 0.0 && bg > 0.0);
        assert!(residual < 1e-8);
        assert_eq!(hard_term_background(&p, &batch).unwrap().to_bits(), 0.0f64.to_bits());
    }

    #[test]
    fn error_signals_examples() {
        let untrained = ViTParams::init(&ViTConfig::default(), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let single = Ensemble::uniform(vec![untrained.clone()]).unwrap();
        let (hard, soft) = noise_error_signals(&untrained, &single, 256, 1).unwrap();
        assert_eq!(soft, 0.0);
        assert!((0.70..=0.80).contains(&hard), "hard {hard}");
        let other = Ensemble::uniform(vec![net(8), net(9)]).unwrap();
        let (h, s) = noise_error_signals(&net(10), &other, 64, 2).unwrap();
        assert!((0.0..=2.0).contains(&h) && (0.0..=2.0).contains(&s));
    }

    #[test]
    fn uniform_prediction_gives_one_minus_inverse_k() {
        let cfg = ViTConfig::default();
        let zero = ViTParams::template(&cfg);
        let single = Ensemble::uniform(vec![zero.clone()]).unwrap();
        let (hard, _) = noise_error_signals(&zero, &single, 16, 3).unwrap();
        assert!((hard - 0.75).abs() < 1e-12);
    }

    #[test]
    fn stability_bound_examples() {
        assert_eq!(sgd_stability_bound(0.0, 1.0, 1.0, 10.0, 5.0).unwrap(), 0.0);
        let b = sgd_stability_bound(1.0, 1.0, 1.0, 1.0, 2.0).unwrap();
        assert!((b - 2.0 * 2f64.sqrt()).abs() < 1e-12);
        assert!(
            sgd_stability_bound(0.5, 1.0, 1.0, 100.0, 50.0).unwrap()
                < sgd_stability_bound(1.0, 1.0, 1.0, 100.0, 50.0).unwrap()
        );
        assert!(sgd_stability_bound(1.0, 1.0, 1.0, 1.0, 1.0).is_err());
        assert!(sgd_stability_bound(1.0, 0.0, 1.0, 1.0, 3.0).is_err());
    }

    #[test]
    fn generalization_bound_examples() {
        let n = 100.0;
        let g = generalization_bound(0.2, 0.0, 1.0, n, 0.05).unwrap();
        assert!((g - (0.2 + ((1.0f64 / 0.05).ln() / (2.0 * n)).sqrt())).abs() < 1e-15);
        let near_one = generalization_bound(0.2, 0.01, 1.0, n, 1.0 - 1e-15).unwrap();
        assert!((near_one - 0.22).abs() < 1e-5);
        assert!(generalization_bound(0.2, 0.01, 1.0, n, 0.1).unwrap() < generalization_bound(0.2, 0.02, 1.0, n, 0.1).unwrap());
        assert!(generalization_bound(1.5, 0.0, 1.0, n, 0.1).is_err());
        assert!(generalization_bound(0.5, 0.0, 1.0, n, 1.0).is_err());
    }

    #[test]
    fn lipschitz_comparison_runs_and_logs() {
        let clients = vec![net(11), net(12)];
        let server = crate::federation::fedavg_aggregate(&clients, &[0.5, 0.5]).unwrap();
        let ensemble = Ensemble::uniform(clients.clone()).unwrap();
        let inv = InversionConfig {
            iterations: 4,
            batch_size: 4,
            lr: 0.05,
            ..InversionConfig::default()
        };
        let diag = DiagnosticsConfig {
            steps: 3,
            ..DiagnosticsConfig::default()
        };
        let r = lipschitz_comparison(&clients, &server, &ensemble, &inv, &LossWeights::default(), &diag, 1, 1).unwrap();
        assert_eq!(r.rows.len(), 3);
        assert!(r.rows.iter().all(|row| row.bg_fed == 0.0 && row.bg_dense > 0.0));
        assert!(r.max_split_residual < 1e-8);
        let mut csv = Vec::new();
        write_grad_norm_csv(&mut csv, &[r]).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with(GRAD_NORM_CSV_HEADER));
    }

    proptest! {
        #[test]
        fn beta_monotone_in_l(l in 0.01f64..10.0, dl in 0.01f64..1.0, mu in 0.1f64..3.0, c in 0.1f64..3.0) {
            let a = sgd_stability_bound(l, mu, c, 50.0, 100.0).unwrap();
            let b = sgd_stability_bound(l + dl, mu, c, 50.0, 100.0).unwrap();
            prop_assert!(b > a && a >= 0.0);
        }

        #[test]
        fn bound_monotone_in_beta(beta in 0.0f64..5.0, db in 1e-6f64..1.0, r in 0.0f64..1.0) {
            let a = generalization_bound(r, beta, 1.0, 200.0, 0.1).unwrap();
            let b = generalization_bound(r, beta + db, 1.0, 200.0, 0.1).unwrap();
            prop_assert!(b > a && a >= r);
        }
    }
}
