use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{finite_difference_check_many, relative_error, Graph, Tensor};

fn tiny_config() -> ViTConfig {
    ViTConfig {
        image_size: 4,
        channels: 1,
        patch_size: 2,
        embed_dim: 4,
        num_heads: 2,
        num_layers: 2,
        mlp_ratio: 2,
        num_classes: 3,
    }
}

/// Random parameters with non-trivial norm gains/biases so every path is exercised.
fn random_params(cfg: &ViTConfig, seed: u64) -> ViTParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ViTParams::init(cfg, &mut rng).unwrap();
    for t in p.tensors_mut() {
        let shape = t.shape().to_vec();
        *t = Tensor::uniform(&shape, -0.8, 0.8, &mut rng);
    }
    p
}

fn image(cfg: &ViTConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&cfg.image_shape(), 1.0, &mut rng)
}

// ---- straight-line reference forward, independent of the graph ----

fn ln_row(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    let is = 1.0 / (var + LAYERNORM_EPS).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) * is * gamma[i] + beta[i])
        .collect()
}

fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    (0..cols)
        .map(|j| (0..rows).map(|i| x[i] * w.data()[i * cols + j]).sum::<f64>() + b.data()[j])
        .collect()
}

fn gelu_ref(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn oracle_logits(p: &ViTParams, img: &Tensor, mask: &[bool]) -> Vec<f64> {
    let cfg = &p.config;
    let (ps, grid, c, d) = (cfg.patch_size, cfg.grid(), cfg.channels, cfg.embed_dim);
    let width = cfg.image_size;
    let s = cfg.seq_len();
    let keep: Vec<bool> = std::iter::once(true).chain(mask.iter().copied()).collect();
    let mut x: Vec<Vec<f64>> = Vec::with_capacity(s);
    let pos = |i: usize| &p.pos_embed.data()[i * d..(i + 1) * d];
    x.push(p.cls_token.data().iter().zip(pos(0)).map(|(a, b)| a + b).collect());
    for py in 0..grid {
        for px in 0..grid {
            let mut patch = Vec::new();
            for r in 0..ps {
                for col in 0..ps {
                    for ch in 0..c {
                        patch.push(img.data()[((py * ps + r) * width + px * ps + col) * c + ch]);
                    }
                }
            }
            let e = affine(&patch, &p.patch_w, &p.patch_b);
            let l = py * grid + px;
            x.push(e.iter().zip(pos(l + 1)).map(|(a, b)| a + b).collect());
        }
    }
    for (i, row) in x.iter_mut().enumerate() {
        if !keep[i] {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let heads = cfg.num_heads;
    let hd = cfg.head_dim();
    for layer in &p.layers {
        let n: Vec<Vec<f64>> = x
            .iter()
            .map(|r| ln_row(r, layer.ln1_gamma.data(), layer.ln1_beta.data()))
            .collect();
        let q: Vec<Vec<f64>> = n.iter().map(|r| affine(r, &layer.w_q, &layer.b_q)).collect();
        let k: Vec<Vec<f64>> = n.iter().map(|r| affine(r, &layer.w_k, &layer.b_k)).collect();
        let v: Vec<Vec<f64>> = n.iter().map(|r| affine(r, &layer.w_v, &layer.b_v)).collect();
        let mut merged = vec![vec![0.0; d]; s];
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            for i in 0..s {
                let scores: Vec<f64> = (0..s)
                    .map(|j| {
                        let dot: f64 = cols.clone().map(|c| q[i][c] * k[j][c]).sum();
                        dot / (hd as f64).sqrt()
                    })
                    .collect();
                let max = (0..s).filter(|&j| keep[j]).map(|j| scores[j]).fold(f64::MIN, f64::max);
                let w: Vec<f64> = (0..s)
                    .map(|j| if keep[j] { (scores[j] - max).exp() } else { 0.0 })
                    .collect();
                let z: f64 = w.iter().sum();
                for c in cols.clone() {
                    merged[i][c] = (0..s).map(|j| w[j] / z * v[j][c]).sum();
                }
            }
        }
        for i in 0..s {
            let mut o = affine(&merged[i], &layer.w_o, &layer.b_o);
            if !keep[i] {
                o.iter_mut().for_each(|v| *v = 0.0);
            }
            let h: Vec<f64> = x[i].iter().zip(&o).map(|(a, b)| a + b).collect();
            let m = ln_row(&h, layer.ln2_gamma.data(), layer.ln2_beta.data());
            let hidden: Vec<f64> = affine(&m, &layer.mlp_w1, &layer.mlp_b1).into_iter().map(gelu_ref).collect();
            let m = affine(&hidden, &layer.mlp_w2, &layer.mlp_b2);
            x[i] = h.iter().zip(&m).map(|(a, b)| if keep[i] { a + b } else { 0.0 }).collect();
        }
    }
    let cls = ln_row(&x[0], p.norm_gamma.data(), p.norm_beta.data());
    affine(&cls, &p.head_w, &p.head_b)
}

#[test]
fn patchify_single_patch_reading_order() {
    let cfg = ViTConfig {
        image_size: 4,
        patch_size: 4,
        ..ViTConfig::default()
    };
    let img = Tensor::new(vec![4, 4, 1], (0..16).map(f64::from).collect()).unwrap();
    let p = patchify(&img, &cfg).unwrap();
    assert_eq!(p.shape(), &[1, 16]);
    assert_eq!(p.data(), img.data());
}

#[test]
fn patchify_constant_image_rows_identical() {
    let cfg = ViTConfig::default();
    let img = Tensor::full(&cfg.image_shape(), 0.7);
    let p = patchify(&img, &cfg).unwrap();
    let w = p.shape()[1];
    for r in 1..p.shape()[0] {
        assert_eq!(&p.data()[r * w..(r + 1) * w], &p.data()[..w]);
    }
}

#[test]
fn patchify_ramp_matches_index_oracle() {
    let cfg = ViTConfig {
        image_size: 8,
        patch_size: 4,
        ..ViTConfig::default()
    };
    let img = Tensor::new(vec![8, 8, 1], (0..64).map(f64::from).collect()).unwrap();
    let p = patchify(&img, &cfg).unwrap();
    assert_eq!(p.shape(), &[4, 16]);
    for patch in 0..4 {
        let (py, px) = (patch / 2, patch % 2);
        for k in 0..16 {
            let (r, c) = (k / 4, k % 4);
            let want = ((py * 4 + r) * 8 + px * 4 + c) as f64;
            assert_eq!(p.data()[patch * 16 + k], want);
        }
    }
}

#[test]
fn patchify_rejects_wrong_sizes() {
    let cfg = ViTConfig::default();
    assert!(patchify(&Tensor::zeros(&[15, 15, 1]), &cfg).is_err());
    assert!(patchify(&Tensor::zeros(&[16, 16]), &cfg).is_err());
    let bad = ViTConfig {
        patch_size: 5,
        ..ViTConfig::default()
    };
    assert!(bad.validate().is_err());
}

fn identity_layer(d: usize) -> LayerParams {
    let eye = |n: usize| {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data_mut()[i * n + i] = 1.0;
        }
        t
    };
    LayerParams {
        ln1_gamma: Tensor::ones(&[d]),
        ln1_beta: Tensor::zeros(&[d]),
        w_q: eye(d),
        b_q: Tensor::zeros(&[d]),
        w_k: eye(d),
        b_k: Tensor::zeros(&[d]),
        w_v: eye(d),
        b_v: Tensor::zeros(&[d]),
        w_o: eye(d),
        b_o: Tensor::zeros(&[d]),
        ln2_gamma: Tensor::ones(&[d]),
        ln2_beta: Tensor::zeros(&[d]),
        mlp_w1: Tensor::zeros(&[d, d]),
        mlp_b1: Tensor::zeros(&[d]),
        mlp_w2: Tensor::zeros(&[d, d]),
        mlp_b2: Tensor::zeros(&[d]),
    }
}

#[test]
fn attention_singleton_sequence() {
    let layer = identity_layer(2);
    let tokens = Tensor::new(vec![1, 2], vec![0.3, -1.2]).unwrap();
    let (out, a) = attention(&tokens, &layer, 1, &TokenMask::full(0)).unwrap();
    assert_eq!(a.data(), &[1.0]);
    assert_eq!(out.data(), tokens.data());
}

#[test]
fn attention_orthogonal_query_is_uniform() {
    let mut layer = identity_layer(2);
    // queries live on the first axis, keys on the second
    layer.w_q = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    layer.w_k = Tensor::new(vec![2, 2], vec![0.0, 0.0, 0.0, 1.0]).unwrap();
    let tokens = Tensor::new(vec![4, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, -2.0, 0.0, 3.0]).unwrap();
    let mask = TokenMask::new(vec![true, false, true]).unwrap();
    let (_, a) = attention(&tokens, &layer, 1, &mask).unwrap();
    let row0 = &a.data()[0..4];
    assert!((row0[0] - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(row0[2], 0.0);
    assert!((row0[1] - 1.0 / 3.0).abs() < 1e-15);
    assert!((row0[3] - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn attention_two_token_hand_case() {
    let layer = identity_layer(2);
    let x = [[1.0, 2.0], [0.5, -1.0]];
    let tokens = Tensor::new(vec![2, 2], x.concat()).unwrap();
    let (_, a) = attention(&tokens, &layer, 1, &TokenMask::full(1)).unwrap();
    for i in 0..2 {
        let s: Vec<f64> = (0..2)
            .map(|j| (x[i][0] * x[j][0] + x[i][1] * x[j][1]) / 2f64.sqrt())
            .collect();
        let z = s[0].exp() + s[1].exp();
        for j in 0..2 {
            assert!((a.data()[i * 2 + j] - s[j].exp() / z).abs() < 1e-12);
        }
    }
}

#[test]
fn full_mask_equals_unmasked_forward() {
    let cfg = ViTConfig::default();
    let p = random_params(&cfg, 1);
    let img = image(&cfg, 2);
    let a = vit_forward(&p, &img, None).unwrap();
    let b = vit_forward(&p, &img, Some(&TokenMask::full(cfg.num_patches()))).unwrap();
    assert_eq!(a.logits, b.logits);
}

#[test]
fn zero_weights_yield_head_bias() {
    let cfg = ViTConfig::default();
    let mut p = ViTParams::template(&cfg);
    p.head_b = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
    let out = vit_forward(&p, &image(&cfg, 3), None).unwrap();
    assert_eq!(out.logits.data(), p.head_b.data());
}

#[test]
fn forward_matches_straight_line_oracle() {
    let cfg = ViTConfig::default();
    let p = random_params(&cfg, 4);
    let img = image(&cfg, 5);
    let mut active = vec![true; cfg.num_patches()];
    for i in [0, 3, 7, 12] {
        active[i] = false;
    }
    for m in [vec![true; cfg.num_patches()], active] {
        let mask = TokenMask::new(m.clone()).unwrap();
        let got = vit_forward(&p, &img, Some(&mask)).unwrap();
        let want = oracle_logits(&p, &img, &m);
        for (a, b) in got.logits.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn cls_attention_examples() {
    // single head, uniform attention, 4 active patches
    let uniform = Tensor::full(&[1, 5, 5], 0.2);
    let trace = ForwardTrace {
        logits: Tensor::zeros(&[2]),
        attention: vec![uniform],
        tokens: vec![],
        cls_attention: vec![],
    };
    for v in extract_cls_attention(&trace) {
        assert!((v - 0.25).abs() < 1e-15);
    }
    // masked column 2 carries zero weight
    let mut a = Tensor::zeros(&[1, 5, 5]);
    a.data_mut()[..5].copy_from_slice(&[0.1, 0.3, 0.0, 0.4, 0.2]);
    let trace = ForwardTrace {
        attention: vec![a],
        ..trace.clone()
    };
    let got = extract_cls_attention(&trace);
    let want = [0.3 / 0.9, 0.0, 0.4 / 0.9, 0.2 / 0.9];
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() < 1e-15);
    }
    // two heads: elementwise mean of the rows, then renormalize
    let mut a = Tensor::zeros(&[2, 3, 3]);
    a.data_mut()[0..3].copy_from_slice(&[0.2, 0.6, 0.2]);
    a.data_mut()[9..12].copy_from_slice(&[0.5, 0.1, 0.4]);
    let trace = ForwardTrace {
        attention: vec![a],
        ..trace
    };
    let got = extract_cls_attention(&trace);
    let mean = [0.35, 0.3];
    let z = 0.65;
    assert!((got[0] - mean[0] / z).abs() < 1e-15);
    assert!((got[1] - mean[1] / z).abs() < 1e-15);
    let maxed = extract_cls_attention_with(
        &trace,
        ClsReadout {
            layer: None,
            heads: HeadReduce::Max,
        },
    );
    assert!((maxed[0] - 0.6 / 1.0).abs() < 1e-15);
}

#[test]
fn attention_rows_normalized_and_masked_columns_zero() {
    let cfg = ViTConfig::default();
    let p = random_params(&cfg, 6);
    let img = image(&cfg, 7);
    let mut m = vec![true; cfg.num_patches()];
    m[1] = false;
    m[9] = false;
    let mask = TokenMask::new(m.clone()).unwrap();
    let trace = vit_forward(&p, &img, Some(&mask)).unwrap();
    let s = cfg.seq_len();
    for a in &trace.attention {
        for row in a.data().chunks(s) {
            let total: f64 = row.iter().sum();
            assert!((total - 1.0).abs() < 1e-10);
            assert_eq!(row[2], 0.0);
            assert_eq!(row[10], 0.0);
        }
    }
    assert!(trace.cls_attention.iter().all(|&v| v >= 0.0));
    assert_eq!(trace.cls_attention[1], 0.0);
}

#[test]
fn masked_patch_pixels_get_exactly_zero_gradient() {
    let cfg = ViTConfig::default();
    let p = random_params(&cfg, 8);
    let img = image(&cfg, 9);
    let mut m = vec![true; cfg.num_patches()];
    for i in [0, 5, 6, 15] {
        m[i] = false;
    }
    let mask = TokenMask::new(m.clone()).unwrap();
    let mut g = Graph::new();
    let bound = p.bind(&mut g, false);
    let x = g.leaf(&img.reshaped(&[1, 16, 16, 1]).unwrap().with_grad());
    let out = forward_graph(&mut g, &bound, &cfg, x, &[mask]).unwrap();
    let ls = g.log_softmax(out.logits, 1).unwrap();
    let loss = g.sum(ls);
    g.backward(loss).unwrap();
    let grad = g.grad(x).unwrap();
    let pixel_patch = |i: usize| {
        let (r, c) = (i / 16, i % 16);
        (r / 4) * 4 + c / 4
    };
    let mut nonzero_active = 0;
    for (i, &v) in grad.data().iter().enumerate() {
        if !m[pixel_patch(i)] {
            assert_eq!(v.to_bits(), 0.0f64.to_bits(), "pixel {i}");
        } else if v != 0.0 {
            nonzero_active += 1;
        }
    }
    assert!(nonzero_active > 0);
}

#[test]
fn permuting_patches_with_positions_preserves_logits() {
    let cfg = ViTConfig::default();
    let p = random_params(&cfg, 10);
    let img = image(&cfg, 11);
    let (a, b) = (2usize, 13usize);
    // swap the pixel blocks of patches a and b
    let mut swapped = img.clone();
    let ps = cfg.patch_size;
    for r in 0..ps {
        for c in 0..ps {
            let ia = ((a / 4) * ps + r) * 16 + (a % 4) * ps + c;
            let ib = ((b / 4) * ps + r) * 16 + (b % 4) * ps + c;
            swapped.data_mut().swap(ia, ib);
        }
    }
    let mut q = p.clone();
    let d = cfg.embed_dim;
    for k in 0..d {
        q.pos_embed.data_mut().swap((a + 1) * d + k, (b + 1) * d + k);
    }
    let x = vit_forward(&p, &img, None).unwrap();
    let y = vit_forward(&q, &swapped, None).unwrap();
    assert!(x.logits.max_abs_diff(&y.logits) < 1e-10);
}

#[test]
fn full_model_cross_entropy_gradients_match_finite_differences() {
    let cfg = tiny_config();
    let p = random_params(&cfg, 12);
    let img = image(&cfg, 13).reshaped(&[1, 4, 4, 1]).unwrap();
    let masks = [TokenMask::new(vec![true, false, true, true]).unwrap()];
    let tensors: Vec<Tensor> = p.tensors().into_iter().cloned().collect();
    let err = finite_difference_check_many(
        |g, vars| {
            let mut it = vars.iter().copied();
            let mut next = || it.next().unwrap();
            let bound = BoundParams {
                patch_w: next(),
                patch_b: next(),
                cls_token: next(),
                pos_embed: next(),
                layers: (0..cfg.num_layers)
                    .map(|_| BoundLayer {
                        ln1_gamma: next(),
                        ln1_beta: next(),
                        w_q: next(),
                        b_q: next(),
                        w_k: next(),
                        b_k: next(),
                        w_v: next(),
                        b_v: next(),
                        w_o: next(),
                        b_o: next(),
                        ln2_gamma: next(),
                        ln2_beta: next(),
                        mlp_w1: next(),
                        mlp_b1: next(),
                        mlp_w2: next(),
                        mlp_b2: next(),
                    })
                    .collect(),
                norm_gamma: next(),
                norm_beta: next(),
                head_w: next(),
                head_b: next(),
            };
            let x = g.constant(&img);
            let out = forward_graph(g, &bound, &cfg, x, &masks)?;
            let ls = g.log_softmax(out.logits, 1)?;
            let onehot = g.constant(&Tensor::new(vec![1, 3], vec![0.0, 0.0, 1.0])?);
            let picked = g.mul(ls, onehot)?;
            let s = g.sum(picked);
            Ok(g.scale(s, -1.0))
        },
        &tensors,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "full ViT rel err {err}");
}

#[test]
fn checkpoint_round_trip_and_size() {
    let cfg = ViTConfig::default();
    let p = random_params(&cfg, 14);
    let bytes = p.checkpoint_bytes().unwrap();
    let mut sink = Vec::new();
    assert_eq!(p.write_checkpoint(&mut sink).unwrap(), bytes.len());
    let back = ViTParams::read_checkpoint(&mut bytes.as_slice()).unwrap();
    assert_eq!(back, p);
    assert!(ViTParams::read_checkpoint(&mut &b"FMCX"[..]).is_err());
    assert!(ViTParams::read_checkpoint(&mut &bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn relative_error_floor() {
    assert_eq!(relative_error(0.0, 0.0), 0.0);
    assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
}
