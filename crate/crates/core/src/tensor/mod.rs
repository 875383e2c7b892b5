//! Dense `f64` tensors with a reverse-mode differentiation tape.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod value;

pub use gradcheck::{finite_difference_check, finite_difference_check_many, relative_error, REL_ERROR_FLOOR};
pub use graph::{Graph, Var};
pub(crate) use value::{read_exact_counted, read_u32};
pub use value::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn rand_in(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape, -2.0, 2.0, &mut rng)
    }

    /// Contracts an arbitrary-shaped output to a scalar with fixed random
    /// weights so every output element contributes a distinct gradient.
    fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> crate::Result<Var> {
        let w = rand_in(g.shape(v), seed ^ 0xABCD);
        let w = g.constant(&w);
        let p = g.mul(v, w)?;
        Ok(g.sum(p))
    }

    #[test]
    fn matmul_identity_and_annihilation() {
        let mut g = Graph::new();
        let i2 = g.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.data(p), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let b = g.constant(&t(&[2, 2], &[0.0, 0.0, 0.0, 1.0]));
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.data(p), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::zeros(&[2, 3]));
        let b = g.constant(&Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let a = rand_in(&[3, 4], 1);
        let b = rand_in(&[4, 2], 2);
        let err = finite_difference_check_many(
            |g, v| {
                let p = g.matmul(v[0], v[1])?;
                weighted_sum(g, p, 3)
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "matmul rel err {err}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(&t(&[3], &[0.0, 0.0, 0.0]));
        let s = g.softmax(x, 0).unwrap();
        for &v in g.data(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(&t(&[1], &[5.0]));
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.data(s), &[1.0]);
        let x = g.constant(&t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]));
        let s = g.softmax(x, 0).unwrap();
        let want = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (v, w) in g.data(s).iter().zip(want) {
            assert!((v - w).abs() < 1e-15);
        }
        assert!(matches!(g.softmax(x, 1), Err(Error::InvalidAxis { .. })));
    }

    #[test]
    fn softmax_along_inner_axis() {
        let mut g = Graph::new();
        let x = g.constant(&rand_in(&[2, 3, 4], 9));
        let s = g.softmax(x, 1).unwrap();
        let d = g.data(s);
        for o in 0..2 {
            for i in 0..4 {
                let total: f64 = (0..3).map(|k| d[(o * 3 + k) * 4 + i]).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layernorm_degenerate_cases() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::full(&[2, 4], 3.5));
        let gamma = g.constant(&Tensor::ones(&[4]));
        let beta = g.constant(&Tensor::zeros(&[4]));
        let y = g.layernorm(x, gamma, beta, 1e-5).unwrap();
        assert!(g.data(y).iter().all(|&v| v == 0.0));

        let x = g.constant(&rand_in(&[3, 4], 4));
        let gamma0 = g.constant(&Tensor::zeros(&[4]));
        let beta_v = t(&[4], &[0.1, -0.2, 0.3, 0.0]);
        let beta = g.constant(&beta_v);
        let y = g.layernorm(x, gamma0, beta, 1e-5).unwrap();
        for r in 0..3 {
            assert_eq!(&g.data(y)[r * 4..r * 4 + 4], beta_v.data());
        }
        let bad = g.constant(&Tensor::zeros(&[3]));
        assert!(g.layernorm(x, bad, beta, 1e-5).is_err());
        assert!(g.layernorm(x, gamma0, beta, 0.0).is_err());
    }

    #[test]
    fn layernorm_gradients_match_finite_differences() {
        let x = rand_in(&[3, 8], 5);
        let gamma = rand_in(&[8], 6);
        let beta = rand_in(&[8], 7);
        let err = finite_difference_check_many(
            |g, v| {
                let y = g.layernorm(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(g, y, 8)
            },
            &[x, gamma, beta],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "layernorm rel err {err}");
    }

    #[test]
    fn backward_basic_contracts() {
        let x = Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap().with_grad();
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let s = g.sum(xv);
        g.backward(s).unwrap();
        assert_eq!(g.grad(xv).unwrap().data(), &[1.0; 4]);
        assert!(matches!(g.backward(s), Err(Error::BackwardTwice)));

        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let z = g.scale(xv, 0.0);
        let s = g.sum(z);
        g.backward(s).unwrap();
        assert!(g.grad(xv).unwrap().data().iter().all(|&v| v == 0.0));

        let mut g = Graph::new();
        let xv = g.leaf(&x);
        assert!(matches!(g.backward(xv), Err(Error::NonScalarLoss(_))));
        let mut empty = Graph::new();
        assert!(matches!(empty.backward(Var::from_index_for_test(0)), Err(Error::EmptyGraph)));
    }

    #[test]
    fn finite_difference_check_examples() {
        let x = t(&[2], &[1.0, 2.0]);
        let err = finite_difference_check(
            |g, v| {
                let s = g.square(v);
                Ok(g.sum(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");

        let err = finite_difference_check(
            |g, v| {
                let z = g.scale(v, 0.0);
                let s = g.sum(z);
                Ok(g.add_scalar(s, 4.2))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);

        // softmax then CE at uniform logits has gradient p - y
        let logits = Tensor::zeros(&[4]).with_grad();
        let mut g = Graph::new();
        let lv = g.leaf(&logits);
        let ls = g.log_softmax(lv, 0).unwrap();
        let onehot = g.constant(&t(&[4], &[0.0, 1.0, 0.0, 0.0]));
        let picked = g.mul(ls, onehot).unwrap();
        let s = g.sum(picked);
        let loss = g.scale(s, -1.0);
        g.backward(loss).unwrap();
        let grad = g.grad(lv).unwrap();
        let want = [0.25, -0.75, 0.25, 0.25];
        for (a, b) in grad.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    type UnaryCase = (&'static str, fn(&mut Graph, Var) -> crate::Result<Var>, f64);

    #[test]
    fn every_op_matches_finite_differences() {
        let cases: Vec<UnaryCase> = vec![
            ("scale", |g, v| Ok(g.scale(v, -1.7)), 1e-6),
            ("add_scalar", |g, v| Ok(g.add_scalar(v, 0.3)), 1e-6),
            ("exp", |g, v| Ok(g.exp(v)), 1e-4),
            ("square", |g, v| Ok(g.square(v)), 1e-4),
            ("gelu", |g, v| Ok(g.gelu(v)), 1e-4),
            ("ln", |g, v| {
                let e = g.exp(v);
                let p = g.add_scalar(e, 0.5);
                Ok(g.ln(p))
            }, 1e-4),
            ("transpose", |g, v| g.transpose(v), 1e-6),
            ("permute", |g, v| {
                let r = g.reshape(v, &[2, 3, 4])?;
                g.permute(r, &[1, 2, 0])
            }, 1e-6),
            ("reshape", |g, v| g.reshape(v, &[4, 6]), 1e-6),
            ("slice", |g, v| g.slice(v, 1, 1, 2), 1e-6),
            ("concat", |g, v| {
                let a = g.slice(v, 0, 0, 2)?;
                let b = g.slice(v, 0, 3, 3)?;
                g.concat(&[b, a, b], 0)
            }, 1e-6),
            ("tile", |g, v| g.tile(v, 3), 1e-6),
            ("mean", |g, v| Ok(g.mean(v)), 1e-6),
            ("softmax_axis0", |g, v| g.softmax(v, 0), 1e-4),
            ("softmax_axis1", |g, v| g.softmax(v, 1), 1e-4),
            ("log_softmax", |g, v| g.log_softmax(v, 1), 1e-4),
            ("mask_rows", |g, v| g.mask_rows(v, &[true, false, true, true, false, true]), 1e-6),
            ("masked_softmax", |g, v| {
                let r = g.reshape(v, &[2, 3, 4])?;
                g.masked_softmax(r, &[true, false, true, true, false, true, true, true])
            }, 1e-4),
            ("add", |g, v| {
                let s = g.scale(v, 2.0);
                g.add(v, s)
            }, 1e-6),
            ("sub", |g, v| {
                let t = g.transpose(v)?;
                let t = g.reshape(t, &[6, 4])?;
                g.sub(v, t)
            }, 1e-6),
            ("mul", |g, v| {
                let e = g.exp(v);
                g.mul(v, e)
            }, 1e-4),
            ("log_add_exp", |g, v| {
                let s = g.scale(v, -0.5);
                g.log_add_exp(v, s)
            }, 1e-4),
        ];
        for (i, (name, f, tol)) in cases.into_iter().enumerate() {
            let x = rand_in(&[6, 4], 100 + i as u64);
            let err = finite_difference_check(
                |g, v| {
                    let y = f(g, v)?;
                    weighted_sum(g, y, 200 + i as u64)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < tol, "{name}: rel err {err} >= {tol}");
        }
    }

    #[test]
    fn binary_broadcast_and_bmm_gradients() {
        let x = rand_in(&[5, 3], 11);
        let v = rand_in(&[3], 12);
        let err = finite_difference_check_many(
            |g, vars| {
                let y = g.add_row_broadcast(vars[0], vars[1])?;
                weighted_sum(g, y, 13)
            },
            &[x, v],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "add_row_broadcast {err}");

        let a = rand_in(&[2, 3, 4], 14);
        let b = rand_in(&[2, 4, 5], 15);
        let err = finite_difference_check_many(
            |g, vars| {
                let y = g.bmm(vars[0], vars[1])?;
                weighted_sum(g, y, 16)
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "bmm {err}");
    }

    #[test]
    fn masked_softmax_zeroes_inactive_columns() {
        let mut g = Graph::new();
        let x = g.leaf(&rand_in(&[1, 2, 3], 20).with_grad());
        let s = g.masked_softmax(x, &[true, false, true]).unwrap();
        for r in 0..2 {
            let row = &g.data(s)[r * 3..r * 3 + 3];
            assert_eq!(row[1], 0.0);
            assert!((row[0] + row[2] - 1.0).abs() < 1e-12);
        }
        let w = g.constant(&rand_in(&[1, 2, 3], 21));
        let p = g.mul(s, w).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        let grad = g.grad(x).unwrap();
        assert_eq!(grad.data()[1].to_bits(), 0.0f64.to_bits());
        assert_eq!(grad.data()[4].to_bits(), 0.0f64.to_bits());
        assert!(g.masked_softmax(x, &[false, false, false]).is_err());
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let x = rand_in(&[4, 3], 30).with_grad();
        let w = rand_in(&[3, 2], 31);
        let run = |which: u8| {
            let mut g = Graph::new();
            let xv = g.leaf(&x);
            let wv = g.constant(&w);
            let h = g.matmul(xv, wv).unwrap();
            let a = g.gelu(h);
            let l1 = g.sum(a);
            let sm = g.softmax(h, 1).unwrap();
            let sq = g.square(sm);
            let l2 = g.mean(sq);
            let loss = match which {
                0 => l1,
                1 => l2,
                _ => g.add(l1, l2).unwrap(),
            };
            g.backward(loss).unwrap();
            g.grad(xv).unwrap()
        };
        let (g1, g2, g12) = (run(0), run(1), run(2));
        for i in 0..g1.numel() {
            assert!((g1.data()[i] + g2.data()[i] - g12.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let run = || {
            let x = rand_in(&[4, 6], 40).with_grad();
            let mut g = Graph::new();
            let xv = g.leaf(&x);
            let gamma = g.constant(&Tensor::ones(&[6]));
            let beta = g.constant(&Tensor::zeros(&[6]));
            let y = g.layernorm(xv, gamma, beta, 1e-6).unwrap();
            let s = g.softmax(y, 1).unwrap();
            let l = g.sum(s);
            let e = g.exp(y);
            let l2 = g.mean(e);
            let loss = g.add(l, l2).unwrap();
            g.backward(loss).unwrap();
            g.grad(xv).unwrap().into_data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    proptest! {
        #[test]
        fn softmax_rows_normalized_and_shift_invariant(
            row in prop::collection::vec(-20.0f64..20.0, 1..12),
            shift in -50.0f64..50.0,
        ) {
            let n = row.len();
            let mut g = Graph::new();
            let x = g.constant(&Tensor::new(vec![n], row.clone()).unwrap());
            let s = g.softmax(x, 0).unwrap();
            let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
            let xs = g.constant(&Tensor::new(vec![n], shifted).unwrap());
            let ss = g.softmax(xs, 0).unwrap();
            let total: f64 = g.data(s).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(g.data(s).iter().all(|&v| v >= 0.0));
            for (a, b) in g.data(s).iter().zip(g.data(ss)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
