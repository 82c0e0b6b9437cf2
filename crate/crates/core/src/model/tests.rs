use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::numerics::gradcheck;

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        d_model: 16,
        heads: 2,
        policy_layers: 2,
        value_layers: 1,
        max_len: 10,
        ffn_mult: 2,
        tokens_per_view: 2,
        feature_dim: 3,
    }
}

fn tiny_model(seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Model::new(tiny_cfg(), &mut rng).unwrap();
    m.init_value_from_policy();
    // non-zero head so value tests see signal
    let head = m.value.as_ref().unwrap().head;
    *m.store.get_mut(head) = Tensor::randn(&[16, 1], 0.5, &mut rng);
    m
}

fn studies(rng: &mut ChaCha8Rng, counts: &[usize]) -> Vec<Vec<Vec<f64>>> {
    counts
        .iter()
        .map(|&c| {
            (0..c)
                .map(|_| Tensor::randn(&[6], 1.0, rng).into_data())
                .collect()
        })
        .collect()
}

fn refs(s: &[Vec<Vec<f64>>]) -> Vec<&[Vec<f64>]> {
    s.iter().map(Vec::as_slice).collect()
}

#[test]
fn causality_is_exact() {
    let m = tiny_model(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = studies(&mut rng, &[2]);
    let packed = m.pack(&refs(&s)).unwrap();
    let a = [1usize, 7, 8, 9, 3, 6];
    let mut b = a;
    b[3] = 11;
    let la = m
        .policy_logits(&TokenBatch::from_sequences(&[&a], 0), &packed)
        .unwrap();
    let lb = m
        .policy_logits(&TokenBatch::from_sequences(&[&b], 0), &packed)
        .unwrap();
    let v = 12;
    assert_eq!(&la.data()[..3 * v], &lb.data()[..3 * v]);
    assert_ne!(&la.data()[3 * v..4 * v], &lb.data()[3 * v..4 * v]);
}

#[test]
fn padded_visual_slots_are_inert() {
    let m = tiny_model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = studies(&mut rng, &[1, 3, 2]);
    let packed = m.pack(&refs(&s)).unwrap();
    let mut scrambled = packed.clone();
    for (x, keep) in scrambled.s_hat.data_mut().chunks_mut(16).zip(&packed.mask) {
        if !keep {
            x.iter_mut().for_each(|v| *v = 1e9);
        }
    }
    assert_ne!(scrambled, packed);
    let toks = TokenBatch::from_sequences(&[&[1, 6, 7], &[1, 8], &[1, 3, 4, 9]], 0);
    assert_eq!(
        m.policy_logits(&toks, &packed).unwrap(),
        m.policy_logits(&toks, &scrambled).unwrap()
    );
    assert_eq!(
        m.values(&toks, &packed).unwrap(),
        m.values(&toks, &scrambled).unwrap()
    );
}

#[test]
fn overlong_prefix_is_a_length_error() {
    let m = tiny_model(5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = studies(&mut rng, &[1]);
    let packed = m.pack(&refs(&s)).unwrap();
    let long = vec![6usize; 11];
    assert!(matches!(
        m.policy_logits(&TokenBatch::from_sequences(&[&long], 0), &packed),
        Err(Error::Length { len: 11, max: 10 })
    ));
}

#[test]
fn zero_value_head_gives_zero_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut m = Model::new(tiny_cfg(), &mut rng).unwrap();
    m.init_value_from_policy();
    let s = studies(&mut rng, &[2, 1]);
    let packed = m.pack(&refs(&s)).unwrap();
    let toks = TokenBatch::from_sequences(&[&[1, 6, 7, 2], &[1, 8, 3, 4]], 0);
    let v = m.values(&toks, &packed).unwrap();
    assert_eq!(v.len(), 8);
    assert!(v.iter().all(|&x| x == 0.0));
}

#[test]
fn value_net_starts_as_a_copy_and_shares_nothing() {
    let m = tiny_model(7);
    let pol = m.store.find("pol.layer0.attn.wq").unwrap();
    let val = m.store.find("val.layer0.attn.wq").unwrap();
    assert_ne!(pol, val);
    assert_eq!(m.store.get(pol), m.store.get(val));
    assert!(m.store.find("val.layer1.attn.wq").is_none());
}

#[test]
fn incremental_matches_full_forward() {
    let m = tiny_model(8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s = studies(&mut rng, &[3, 1]);
    let packed = m.pack(&refs(&s)).unwrap();
    let seqs: [&[usize]; 3] = [&[1, 6, 7, 3, 8, 4, 9, 2], &[1, 10, 11], &[1, 6, 6, 6, 4, 2]];
    let study_of = [0usize, 1, 0];

    for (ids, out_dim) in [(&m.policy, 12usize), (m.value.as_ref().unwrap(), 1)] {
        let mut run = StackRunner::new(&m, ids, &packed);
        let handles: Vec<usize> = study_of.iter().map(|&st| run.add_sequence(st)).collect();
        let mut inc: Vec<Vec<f64>> = vec![Vec::new(); 3];
        for t in 0..8 {
            let items: Vec<(usize, usize)> = (0..3)
                .filter(|&i| t < seqs[i].len())
                .map(|i| (handles[i], seqs[i][t]))
                .collect();
            let out = run.step(&items).unwrap();
            for (r, &(h, _)) in items.iter().enumerate() {
                inc[h].extend_from_slice(&out[r * out_dim..(r + 1) * out_dim]);
            }
        }
        for i in 0..3 {
            let one = crate::encoder::PackedStudyBatch {
                ..packed.select(study_of[i])
            };
            let toks = TokenBatch::from_sequences(&[seqs[i]], 0);
            let full: Vec<f64> = if out_dim == 1 {
                m.values(&toks, &one).unwrap()
            } else {
                m.policy_logits(&toks, &one).unwrap().into_data()
            };
            assert_eq!(full.len(), inc[i].len());
            for (a, b) in full.iter().zip(&inc[i]) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }
    // final value after the incremental path equals the batch recompute
    let last = m
        .final_values(&[seqs[0], seqs[2]], &packed.select(0))
        .unwrap();
    let full = m
        .values(
            &TokenBatch::from_sequences(&[seqs[0]], 0),
            &packed.select(0),
        )
        .unwrap();
    assert_eq!(last[0], *full.last().unwrap());
}

#[test]
fn ce_gradient_matches_finite_differences() {
    let m = tiny_model(10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let s = studies(&mut rng, &[2, 1]);
    let inputs: Vec<Tensor> = m.store.tensors().to_vec();
    let toks = TokenBatch::from_sequences(&[&[1, 6, 3, 7, 4, 8], &[1, 9, 4, 10]], 0);
    let targets: Vec<usize> = vec![6, 3, 7, 4, 8, 2, 9, 4, 10, 2, 0, 0];
    let res = gradcheck::check(
        |tape, vars| {
            let b = Bound {
                vars: vars.to_vec(),
            };
            let mem = m.encode(tape, &b, &refs(&s))?;
            let logits = m.run_stack(tape, &b, &m.policy, &toks, &mem)?;
            let ce = tape.cross_entropy_logits(logits, &targets, 0)?;
            let v = m.run_stack(tape, &b, m.value.as_ref().unwrap(), &toks, &mem)?;
            let v2 = tape.mul(v, v)?;
            let vm = tape.mean(v2);
            tape.add(ce, vm)
        },
        &inputs,
        gradcheck::DEFAULT_STEP,
        7,
    )
    .unwrap();
    assert!(res.checked > 1000);
    assert!(res.max_rel_err < 1e-3, "{res:?}");
}

#[test]
fn nucleus_example() {
    let logits: Vec<f64> = [0.5f64, 0.3, 0.15, 0.05].iter().map(|p| p.ln()).collect();
    let n = nucleus_probs(&logits, 1.0, 0.9, &[]).unwrap();
    let ids: Vec<usize> = n.iter().map(|e| e.0).collect();
    assert_eq!(ids, vec![0, 1, 2]);
    for ((_, p), want) in n.iter().zip([10.0 / 19.0, 6.0 / 19.0, 3.0 / 19.0]) {
        assert!((p - want).abs() < 1e-12);
    }
}

#[test]
fn cold_sampling_is_argmax_and_respects_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let logits = [0.1, 2.0, 1.5, -1.0];
    for _ in 0..50 {
        assert_eq!(sample_next(&logits, 1e-8, 1.0, &[], &mut rng).unwrap(), 1);
        assert_eq!(sample_next(&logits, 1e-8, 1.0, &[1], &mut rng).unwrap(), 2);
    }
    assert!(matches!(
        sample_next(&logits, 1.0, 1.0, &[0, 1, 2, 3], &mut rng),
        Err(Error::AllBlocked)
    ));
}

#[test]
fn ties_break_by_ascending_id() {
    let n = nucleus_probs(&[1.0, 3.0, 3.0, 3.0], 1.0, 0.5, &[]).unwrap();
    assert_eq!(n.iter().map(|e| e.0).collect::<Vec<_>>(), vec![1, 2]);
}

#[test]
fn sampling_is_seed_reproducible() {
    let logits = [0.3, 0.2, 0.1, 0.4, 0.0];
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..20)
            .map(|_| sample_next(&logits, 1.0, 0.9, &[], &mut rng).unwrap())
            .collect::<Vec<_>>()
    };
    assert_eq!(draw(3), draw(3));
}

#[test]
fn checkpoint_round_trip_and_magic() {
    let m = tiny_model(13);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    save_checkpoint(&m, &p).unwrap();
    let back = load_checkpoint(&p).unwrap();
    assert_eq!(back.cfg, m.cfg);
    assert_eq!(back.store, m.store);
    assert!(back.value.is_some());

    let mut bytes = std::fs::read(&p).unwrap();
    bytes[0] = b'X';
    std::fs::write(&p, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint { .. })));
    std::fs::write(&p, &bytes[..40]).unwrap();
    assert!(load_checkpoint(&p).is_err());
}
