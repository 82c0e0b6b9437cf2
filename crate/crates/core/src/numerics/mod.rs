//! Dense tensors with reverse-mode automatic differentiation.

pub mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use tape::{AttentionSpec, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let eye = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let m = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let z = t.constant(Tensor::zeros(&[2, 2]));
        let r = t.matmul(eye, m).unwrap();
        assert_eq!(t.data(r), &[1.0, 2.0, 3.0, 4.0]);
        let r = t.matmul(m, z).unwrap();
        assert_eq!(t.data(r), &[0.0; 4]);
        let a = t.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let b = t.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
        let r = t.matmul(a, b).unwrap();
        assert_eq!(t.data(r), &[11.0]);
        assert_eq!(t.shape(r), &[1, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Dimension { .. }));
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(&[0.0, 0.0]));
        let y = t.softmax_rows(x, None).unwrap();
        assert_eq!(t.data(y), &[0.5, 0.5]);

        let x = t.constant(Tensor::vector(&[5.0, 5.0, 5.0]));
        let y = t.softmax_rows(x, Some(&[true, true, false])).unwrap();
        assert_eq!(t.data(y), &[0.5, 0.5, 0.0]);

        let x = t.constant(Tensor::vector(&[2f64.ln(), 0.0]));
        let y = t.softmax_rows(x, None).unwrap();
        assert!(close(t.data(y), &[2.0 / 3.0, 1.0 / 3.0], 1e-15));

        let x = t.constant(Tensor::vector(&[1.0, 2.0]));
        assert!(matches!(
            t.softmax_rows(x, Some(&[false, false])),
            Err(Error::DegenerateRow { row: 0 })
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_masked_are_zero() {
        let mut r = rng();
        let mut t = Tape::new();
        let x = t.constant(Tensor::randn(&[6, 9], 3.0, &mut r));
        let mask: Vec<bool> = (0..54).map(|i| i % 9 == 0 || (i * 7) % 5 != 0).collect();
        let y = t.softmax_rows(x, Some(&mask)).unwrap();
        for (row, m) in t.data(y).chunks(9).zip(mask.chunks(9)) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (p, keep) in row.iter().zip(m) {
                if !keep {
                    assert_eq!(*p, 0.0);
                }
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut t = Tape::new();
        let g = t.constant(Tensor::filled(&[4], 1.0));
        let b = t.constant(Tensor::zeros(&[4]));
        let x = t.constant(Tensor::vector(&[1.0; 4]));
        let y = t.layer_norm(x, g, b).unwrap();
        assert_eq!(t.data(y), &[0.0; 4]);

        let g = t.constant(Tensor::filled(&[2], 1.0));
        let b = t.constant(Tensor::zeros(&[2]));
        let x = t.constant(Tensor::vector(&[-1.0, 1.0]));
        let y = t.layer_norm(x, g, b).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!(close(t.data(y), &[-expect, expect], 1e-15));
        assert!(close(t.data(y), &[-1.0, 1.0], 1e-5));
    }

    #[test]
    fn gelu_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(&[0.0, 10.0]));
        let y = t.gelu(x);
        assert_eq!(t.data(y)[0], 0.0);
        assert!((t.data(y)[1] - 10.0).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::zeros(&[3, 4]));
        let ce = t.cross_entropy_logits(l, &[0, 3, 2], 99).unwrap();
        assert!((t.data(ce)[0] - 4f64.ln()).abs() < 1e-12);

        let mut logits = Tensor::zeros(&[1, 4]);
        logits.data_mut()[2] = 100.0;
        let l = t.constant(logits);
        let ce = t.cross_entropy_logits(l, &[2], 99).unwrap();
        assert!(t.data(ce)[0] < 1e-6);

        let l = t.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(
            t.cross_entropy_logits(l, &[0, 0], 0),
            Err(Error::EmptyLoss)
        ));
    }

    #[test]
    fn cross_entropy_matches_per_position_log_softmax() {
        let mut r = rng();
        let logits = Tensor::randn(&[5, 7], 2.0, &mut r);
        let targets = [3usize, 0, 6, 2, 2];
        // independent route: explicit softmax per row, then -ln
        let mut expect = 0.0;
        for (row, &tg) in logits.data().chunks(7).zip(&targets) {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            expect += -(row[tg].exp() / z).ln();
        }
        expect /= 5.0;
        let mut t = Tape::new();
        let l = t.constant(logits);
        let ce = t.cross_entropy_logits(l, &targets, 99).unwrap();
        assert!((t.data(ce)[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn backward_examples() {
        let mut r = rng();
        let x0 = Tensor::randn(&[3, 4], 1.0, &mut r);
        let mut t = Tape::new();
        let x = t.param(x0.clone());
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert!(t.grad(x).unwrap().iter().all(|&g| g == 1.0));

        let mut t = Tape::new();
        let x = t.param(x0.clone());
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        let half = t.scale(s, 0.5);
        t.backward(half).unwrap();
        assert!(close(t.grad(x).unwrap(), x0.data(), 1e-15));
        // repeatable
        let first = t.grad(x).unwrap().to_vec();
        t.backward(half).unwrap();
        assert_eq!(t.grad(x).unwrap(), &first[..]);

        let mut t = Tape::new();
        let x = t.param(x0);
        assert!(matches!(t.backward(x), Err(Error::Rank(_))));
    }

    #[test]
    fn masked_attention_ignores_padded_values() {
        let mut r = rng();
        let q = Tensor::randn(&[2, 3, 8], 1.0, &mut r);
        let k = Tensor::randn(&[2, 5, 8], 1.0, &mut r);
        let v = Tensor::randn(&[2, 5, 8], 1.0, &mut r);
        let mask = vec![true, true, true, false, false, true, true, true, true, true];
        let run = |k: Tensor, v: Tensor| {
            let mut t = Tape::new();
            let (q, k, v) = (t.constant(q.clone()), t.constant(k), t.constant(v));
            let o = t
                .attention(
                    q,
                    k,
                    v,
                    AttentionSpec {
                        heads: 2,
                        causal: false,
                        key_mask: Some(mask.clone()),
                    },
                )
                .unwrap();
            t.data(o).to_vec()
        };
        let base = run(k.clone(), v.clone());
        let (mut k2, mut v2) = (k, v);
        for j in [3usize, 4] {
            for c in 0..8 {
                k2.data_mut()[j * 8 + c] = 1e200;
                v2.data_mut()[j * 8 + c] = f64::NAN;
            }
        }
        assert_eq!(base, run(k2, v2));
    }
}
