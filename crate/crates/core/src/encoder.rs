//! Shared per-view encoding, study-level flattening and padded packing.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Padded visual tokens and their validity mask for a batch of studies.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedStudyBatch {
    /// `[B, M_max, d_model]`, zero at padded slots.
    pub s_hat: Tensor,
    /// `[B * M_max]`, leading `K_i * N` entries of row `i` are `true`.
    pub mask: Vec<bool>,
    pub counts: Vec<usize>,
    pub tokens_per_view: usize,
}

impl PackedStudyBatch {
    pub fn batch(&self) -> usize {
        self.counts.len()
    }

    pub fn m_max(&self) -> usize {
        self.s_hat.shape()[1]
    }

    pub fn d_model(&self) -> usize {
        self.s_hat.shape()[2]
    }

    pub fn valid_len(&self, study: usize) -> usize {
        self.counts[study] * self.tokens_per_view
    }

    /// Row-major `[valid_len, d_model]` tokens of one study.
    pub fn study_tokens(&self, study: usize) -> &[f64] {
        let (m, d) = (self.m_max(), self.d_model());
        &self.s_hat.data()[study * m * d..][..self.valid_len(study) * d]
    }

    /// A one-study batch sliced out of this one (no padding).
    pub fn select(&self, study: usize) -> PackedStudyBatch {
        let (d, len) = (self.d_model(), self.valid_len(study));
        PackedStudyBatch {
            s_hat: Tensor::new(vec![1, len, d], self.study_tokens(study).to_vec())
                .expect("slice shape"),
            mask: vec![true; len],
            counts: vec![self.counts[study]],
            tokens_per_view: self.tokens_per_view,
        }
    }
}

/// Row map from packed `[B * M_max]` slots to flat view-token rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackPlan {
    pub index: Vec<Option<usize>>,
    pub mask: Vec<bool>,
    pub m_max: usize,
}

pub fn pack_plan(counts: &[usize], tokens_per_view: usize, total_views: usize) -> Result<PackPlan> {
    let sum: usize = counts.iter().sum();
    if sum != total_views || counts.contains(&0) {
        return Err(Error::Shape(format!(
            "view counts {counts:?} do not partition {total_views} encoded views"
        )));
    }
    let m_max = counts.iter().max().copied().unwrap_or(0) * tokens_per_view;
    let mut index = Vec::with_capacity(counts.len() * m_max);
    let mut mask = Vec::with_capacity(counts.len() * m_max);
    let mut row = 0;
    for &c in counts {
        let valid = c * tokens_per_view;
        for j in 0..m_max {
            if j < valid {
                index.push(Some(row + j));
                mask.push(true);
            } else {
                index.push(None);
                mask.push(false);
            }
        }
        row += valid;
    }
    Ok(PackPlan { index, mask, m_max })
}

/// Packs per-view features `[I, N, d]` into a padded batch.
pub fn pack_views(f: &Tensor, counts: &[usize]) -> Result<PackedStudyBatch> {
    if f.rank() != 3 {
        return Err(Error::Shape(format!(
            "features must be [views, tokens, d], got {:?}",
            f.shape()
        )));
    }
    let (views, n, d) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let plan = pack_plan(counts, n, views)?;
    let mut data = vec![0.0; plan.index.len() * d];
    for (slot, src) in plan.index.iter().enumerate() {
        if let Some(r) = src {
            data[slot * d..][..d].copy_from_slice(&f.data()[r * d..][..d]);
        }
    }
    Ok(PackedStudyBatch {
        s_hat: Tensor::new(vec![counts.len(), plan.m_max, d], data)?,
        mask: plan.mask,
        counts: counts.to_vec(),
        tokens_per_view: n,
    })
}

/// Inverse of [`pack_views`]: per-study `[K_i * N, d]` token blocks.
pub fn unpack_views(b: &PackedStudyBatch) -> Vec<Tensor> {
    (0..b.batch())
        .map(|i| {
            Tensor::new(
                vec![b.valid_len(i), b.d_model()],
                b.study_tokens(i).to_vec(),
            )
            .expect("slice shape")
        })
        .collect()
}

/// Tape handles of the shared token-wise perceptron.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub w1: Var,
    pub b1: Var,
    /// `[N, d]` slot embedding added inside the hidden layer.
    pub slot: Var,
    pub w2: Var,
    pub b2: Var,
}

/// `F[i, j] = W2 gelu(W1 x_ij + b1 + P_j) + b2` for every view `i` and token `j`.
pub fn encode_views(
    tape: &mut Tape,
    p: &EncoderVars,
    views: &[&[f64]],
    n: usize,
    d_in: usize,
) -> Result<Var> {
    if views.is_empty() {
        return Err(Error::Shape("no views to encode".into()));
    }
    let mut flat = Vec::with_capacity(views.len() * n * d_in);
    for v in views {
        if v.len() != n * d_in {
            return Err(Error::Shape(format!(
                "view grid has {} values, expected {n}x{d_in}",
                v.len()
            )));
        }
        flat.extend_from_slice(v);
    }
    let rows = views.len() * n;
    let x = tape.constant(Tensor::new(vec![rows, d_in], flat)?);
    let h = tape.matmul(x, p.w1)?;
    let h = tape.add_row(h, p.b1)?;
    let d = tape.shape(h)[1];
    let slots: Vec<Option<usize>> = (0..rows).map(|r| Some(r % n)).collect();
    let pe = tape.gather_rows(p.slot, &slots, vec![rows, d])?;
    let h = tape.add(h, pe)?;
    let h = tape.gelu(h);
    let out = tape.matmul(h, p.w2)?;
    let out = tape.add_row(out, p.b2)?;
    let d_out = tape.shape(out)[1];
    tape.reshape(out, vec![views.len(), n, d_out])
}

/// Packs encoded features on the tape; gradients flow to valid slots only.
pub fn pack_on_tape(tape: &mut Tape, f: Var, counts: &[usize]) -> Result<(Var, PackPlan)> {
    let s = tape.shape(f).to_vec();
    let (views, n, d) = (s[0], s[1], s[2]);
    let plan = pack_plan(counts, n, views)?;
    let flat = tape.reshape(f, vec![views * n, d])?;
    let packed = tape.gather_rows(flat, &plan.index, vec![counts.len(), plan.m_max, d])?;
    Ok((packed, plan))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pack_example_mask() {
        let f = Tensor::filled(&[3, 4, 2], 1.0);
        let b = pack_views(&f, &[2, 1]).unwrap();
        assert_eq!(b.m_max(), 8);
        let ones: Vec<bool> = [vec![true; 8], vec![true; 4], vec![false; 4]].concat();
        assert_eq!(b.mask, ones);
        assert!(b.s_hat.data()[(8 + 4) * 2..].iter().all(|&x| x == 0.0));

        let one = pack_views(&Tensor::filled(&[1, 4, 2], 1.0), &[1]).unwrap();
        assert!(one.mask.iter().all(|&m| m));
    }

    #[test]
    fn count_mismatch_is_an_error() {
        let f = Tensor::zeros(&[3, 4, 2]);
        assert!(pack_views(&f, &[2, 2]).is_err());
        assert!(pack_views(&f, &[3, 0]).is_err());
    }

    fn vars(
        tape: &mut Tape,
        d_in: usize,
        d: usize,
        n: usize,
        rng: &mut ChaCha8Rng,
        std: f64,
    ) -> EncoderVars {
        EncoderVars {
            w1: tape.constant(Tensor::randn(&[d_in, d], std, rng)),
            b1: tape.constant(Tensor::randn(&[d], std, rng)),
            slot: tape.constant(Tensor::randn(&[n, d], std, rng)),
            w2: tape.constant(Tensor::randn(&[d, d], std, rng)),
            b2: tape.constant(Tensor::randn(&[d], std, rng)),
        }
    }

    #[test]
    fn zero_encoder_gives_zero_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::new();
        let p = vars(&mut t, 3, 5, 2, &mut rng, 0.0);
        let view = [1.0, -2.0, 3.0, 4.0, 5.0, 6.0];
        let f = encode_views(&mut t, &p, &[&view, &view], 2, 3).unwrap();
        assert_eq!(t.shape(f), &[2, 2, 5]);
        assert!(t.data(f).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn permuting_studies_permutes_feature_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut t = Tape::new();
        let p = vars(&mut t, 3, 4, 2, &mut rng, 1.0);
        let views: Vec<Vec<f64>> = (0..3)
            .map(|_| Tensor::randn(&[6], 1.0, &mut rng).into_data())
            .collect();
        // studies A = views[0..2], B = views[2]
        let ab: Vec<&[f64]> = views.iter().map(Vec::as_slice).collect();
        let ba: Vec<&[f64]> = vec![&views[2], &views[0], &views[1]];
        let f1 = encode_views(&mut t, &p, &ab, 2, 3).unwrap();
        let f2 = encode_views(&mut t, &p, &ba, 2, 3).unwrap();
        let (a, b) = (t.data(f1).to_vec(), t.data(f2).to_vec());
        let blk = 2 * 4;
        assert_eq!(&a[..2 * blk], &b[blk..]);
        assert_eq!(&a[2 * blk..], &b[..blk]);
    }

    #[test]
    fn tape_pack_matches_tensor_pack() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = Tensor::randn(&[4, 2, 3], 1.0, &mut rng);
        let mut t = Tape::new();
        let fv = t.constant(f.clone());
        let (pv, plan) = pack_on_tape(&mut t, fv, &[1, 3]).unwrap();
        let b = pack_views(&f, &[1, 3]).unwrap();
        assert_eq!(t.data(pv), b.s_hat.data());
        assert_eq!(plan.mask, b.mask);
    }

    proptest! {
        #[test]
        fn unpack_inverts_pack(counts in prop::collection::vec(1usize..=3, 1..6), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let total: usize = counts.iter().sum();
            let f = Tensor::randn(&[total, 4, 3], 1.0, &mut rng);
            let b = pack_views(&f, &counts).unwrap();
            let parts = unpack_views(&b);
            let mut row = 0;
            for (i, part) in parts.iter().enumerate() {
                let len = counts[i] * 4 * 3;
                prop_assert_eq!(part.data(), &f.data()[row..row + len]);
                prop_assert_eq!(b.mask[i * b.m_max()..(i + 1) * b.m_max()].iter().filter(|&&m| m).count(), counts[i] * 4);
                row += len;
            }
        }
    }
}
