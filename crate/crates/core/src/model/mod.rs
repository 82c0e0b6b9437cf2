//! Decoder-only policy and value networks over packed visual tokens.
//!
//! Each block runs masked self-attention, cross-attention to the packed
//! visual tokens, then a GELU feed-forward, all pre-norm residual.

mod checkpoint;
mod incremental;
mod sampling;

use std::collections::HashMap;

use rand::Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use incremental::StackRunner;
pub use sampling::{masked_log_softmax, nucleus_probs, sample_next};

use crate::encoder::{encode_views, pack_on_tape, EncoderVars, PackedStudyBatch};
use crate::error::{Error, Result};
use crate::numerics::{AttentionSpec, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub policy_layers: usize,
    pub value_layers: usize,
    pub max_len: usize,
    pub ffn_mult: usize,
    pub tokens_per_view: usize,
    pub feature_dim: usize,
}

impl ModelConfig {
    pub fn desk(vocab_size: usize, tokens_per_view: usize, feature_dim: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            heads: 4,
            policy_layers: 4,
            value_layers: 2,
            max_len: 128,
            ffn_mult: 4,
            tokens_per_view,
            feature_dim,
        }
    }

    pub fn full_scale(vocab_size: usize, tokens_per_view: usize, feature_dim: usize) -> Self {
        Self {
            d_model: 768,
            heads: 12,
            policy_layers: 30,
            value_layers: 6,
            max_len: 512,
            ..Self::desk(vocab_size, tokens_per_view, feature_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.d_model < 2 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be >= 2 and divisible by heads");
        }
        if self.policy_layers == 0 || self.max_len < 4 || self.ffn_mult == 0 {
            return bad("policy_layers, ffn_mult must be >= 1 and max_len >= 4");
        }
        if self.value_layers > self.policy_layers {
            return bad("value_layers cannot exceed policy_layers (value net is initialised from the policy)");
        }
        if self.vocab_size <= crate::tokenizer::UNK
            || self.tokens_per_view == 0
            || self.feature_dim == 0
        {
            return bad("vocab_size, tokens_per_view and feature_dim must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in creation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn add(&mut self, name: &str, t: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn count_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub slot: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockIds {
    pub ln1: (ParamId, ParamId),
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2: (ParamId, ParamId),
    pub cq: ParamId,
    pub ck: ParamId,
    pub cv: ParamId,
    pub co: ParamId,
    pub ln3: (ParamId, ParamId),
    pub f1: ParamId,
    pub fb1: ParamId,
    pub f2: ParamId,
    pub fb2: ParamId,
}

/// One decoder stack: embeddings, blocks, final norm and output head.
#[derive(Clone, Debug)]
pub struct StackIds {
    pub tok: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockIds>,
    pub lnf: (ParamId, ParamId),
    pub head: ParamId,
    pub head_bias: Option<ParamId>,
}

impl StackIds {
    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.get(self.head).shape()[1]
    }
}

pub const ENCODER_PREFIX: &str = "enc.";
pub const POLICY_PREFIX: &str = "pol.";
pub const VALUE_PREFIX: &str = "val.";

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub enc: EncoderIds,
    pub policy: StackIds,
    pub value: Option<StackIds>,
}

struct Init<'a, R: Rng> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let t = Tensor::randn(shape, std, self.rng);
        self.store.add(name, t)
    }

    fn fill(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        self.store.add(name, Tensor::filled(shape, v))
    }

    fn norm(&mut self, name: &str, d: usize) -> (ParamId, ParamId) {
        (
            self.fill(&format!("{name}.g"), &[d], 1.0),
            self.fill(&format!("{name}.b"), &[d], 0.0),
        )
    }
}

fn build_stack<R: Rng>(
    init: &mut Init<'_, R>,
    cfg: &ModelConfig,
    prefix: &str,
    layers: usize,
    out: usize,
) -> StackIds {
    let d = cfg.d_model;
    let f = d * cfg.ffn_mult;
    let w = 1.0 / (d as f64).sqrt();
    let proj = w / (2.0 * cfg.policy_layers as f64).sqrt();
    let tok = init.normal(&format!("{prefix}tok"), &[cfg.vocab_size, d], 0.1);
    let pos = init.normal(&format!("{prefix}pos"), &[cfg.max_len, d], 0.1);
    let blocks = (0..layers)
        .map(|l| {
            let p = format!("{prefix}layer{l}.");
            BlockIds {
                ln1: init.norm(&format!("{p}ln1"), d),
                wq: init.normal(&format!("{p}attn.wq"), &[d, d], w),
                wk: init.normal(&format!("{p}attn.wk"), &[d, d], w),
                wv: init.normal(&format!("{p}attn.wv"), &[d, d], w),
                wo: init.normal(&format!("{p}attn.wo"), &[d, d], proj),
                ln2: init.norm(&format!("{p}ln2"), d),
                cq: init.normal(&format!("{p}cross.wq"), &[d, d], w),
                ck: init.normal(&format!("{p}cross.wk"), &[d, d], w),
                cv: init.normal(&format!("{p}cross.wv"), &[d, d], w),
                co: init.normal(&format!("{p}cross.wo"), &[d, d], proj),
                ln3: init.norm(&format!("{p}ln3"), d),
                f1: init.normal(&format!("{p}ffn.w1"), &[d, f], w),
                fb1: init.fill(&format!("{p}ffn.b1"), &[f], 0.0),
                f2: init.normal(
                    &format!("{p}ffn.w2"),
                    &[f, d],
                    1.0 / (f as f64).sqrt() / (2.0 * cfg.policy_layers as f64).sqrt(),
                ),
                fb2: init.fill(&format!("{p}ffn.b2"), &[d], 0.0),
            }
        })
        .collect();
    let lnf = init.norm(&format!("{prefix}lnf"), d);
    let (head, head_bias) = if out == 1 {
        (
            init.fill(&format!("{prefix}head.w"), &[d, 1], 0.0),
            Some(init.fill(&format!("{prefix}head.b"), &[1], 0.0)),
        )
    } else {
        (
            init.normal(&format!("{prefix}head.w"), &[d, out], 0.02),
            None,
        )
    };
    StackIds {
        tok,
        pos,
        blocks,
        lnf,
        head,
        head_bias,
    }
}

/// Re-derives parameter ids for a store laid out by [`Model::new`].
fn lookup_stack(
    store: &ParamStore,
    cfg: &ModelConfig,
    prefix: &str,
    layers: usize,
) -> Result<StackIds> {
    let get = |n: String| {
        store
            .find(&n)
            .ok_or_else(|| Error::Data(format!("missing parameter {n}")))
    };
    let norm = |n: String| -> Result<(ParamId, ParamId)> {
        Ok((get(format!("{n}.g"))?, get(format!("{n}.b"))?))
    };
    let blocks = (0..layers)
        .map(|l| {
            let p = format!("{prefix}layer{l}.");
            Ok(BlockIds {
                ln1: norm(format!("{p}ln1"))?,
                wq: get(format!("{p}attn.wq"))?,
                wk: get(format!("{p}attn.wk"))?,
                wv: get(format!("{p}attn.wv"))?,
                wo: get(format!("{p}attn.wo"))?,
                ln2: norm(format!("{p}ln2"))?,
                cq: get(format!("{p}cross.wq"))?,
                ck: get(format!("{p}cross.wk"))?,
                cv: get(format!("{p}cross.wv"))?,
                co: get(format!("{p}cross.wo"))?,
                ln3: norm(format!("{p}ln3"))?,
                f1: get(format!("{p}ffn.w1"))?,
                fb1: get(format!("{p}ffn.b1"))?,
                f2: get(format!("{p}ffn.w2"))?,
                fb2: get(format!("{p}ffn.b2"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let _ = cfg;
    Ok(StackIds {
        tok: get(format!("{prefix}tok"))?,
        pos: get(format!("{prefix}pos"))?,
        blocks,
        lnf: norm(format!("{prefix}lnf"))?,
        head: get(format!("{prefix}head.w"))?,
        head_bias: store.find(&format!("{prefix}head.b")),
    })
}

/// Tape handles for every parameter, indexed by [`ParamId`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps handles already on a tape, one per store entry in order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Encoded visual tokens on a tape with their mask.
#[derive(Clone, Debug)]
pub struct Memory {
    pub var: Var,
    pub mask: Vec<bool>,
    pub counts: Vec<usize>,
}

/// A right-padded batch of token sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub len: usize,
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    pub fn from_sequences(seqs: &[&[usize]], pad: usize) -> Self {
        let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(pad, len - s.len()));
        }
        Self {
            ids,
            batch: seqs.len(),
            len,
            lengths: seqs.iter().map(|s| s.len()).collect(),
        }
    }
}

impl Model {
    /// Fresh policy + encoder; the value net is added by [`Model::init_value_from_policy`].
    pub fn new<R: Rng>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::default();
        let mut init = Init {
            store: &mut store,
            rng,
        };
        let (d, n, din) = (cfg.d_model, cfg.tokens_per_view, cfg.feature_dim);
        let enc = EncoderIds {
            w1: init.normal("enc.w1", &[din, d], 0.25 / (din as f64).sqrt()),
            b1: init.fill("enc.b1", &[d], 0.0),
            slot: init.normal("enc.slot", &[n, d], 2.0),
            w2: init.normal("enc.w2", &[d, d], 1.0 / (d as f64).sqrt()),
            b2: init.fill("enc.b2", &[d], 0.0),
        };
        let policy = build_stack(
            &mut init,
            &cfg,
            POLICY_PREFIX,
            cfg.policy_layers,
            cfg.vocab_size,
        );
        Ok(Self {
            cfg,
            store,
            enc,
            policy,
            value: None,
        })
    }

    /// Rebuilds ids over a store holding exactly this model's parameters.
    pub fn from_store(cfg: ModelConfig, store: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let get = |n: &str| {
            store
                .find(n)
                .ok_or_else(|| Error::Data(format!("missing parameter {n}")))
        };
        let enc = EncoderIds {
            w1: get("enc.w1")?,
            b1: get("enc.b1")?,
            slot: get("enc.slot")?,
            w2: get("enc.w2")?,
            b2: get("enc.b2")?,
        };
        let policy = lookup_stack(&store, &cfg, POLICY_PREFIX, cfg.policy_layers)?;
        let value = if store.find("val.tok").is_some() {
            Some(lookup_stack(&store, &cfg, VALUE_PREFIX, cfg.value_layers)?)
        } else {
            None
        };
        let model = Self {
            cfg,
            store,
            enc,
            policy,
            value,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let mut fresh = Model::new(
            self.cfg.clone(),
            &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0),
        )?;
        if self.value.is_some() {
            fresh.init_value_from_policy();
        }
        if fresh.store.len() != self.store.len() {
            return Err(Error::Data(format!(
                "parameter count {} does not match configuration ({})",
                self.store.len(),
                fresh.store.len()
            )));
        }
        for id in fresh.store.ids() {
            let name = fresh.store.name(id);
            let mine = self
                .store
                .find(name)
                .ok_or_else(|| Error::Data(format!("missing parameter {name}")))?;
            if self.store.get(mine).shape() != fresh.store.get(id).shape() {
                return Err(Error::Data(format!(
                    "parameter {name}: shape {:?}, expected {:?}",
                    self.store.get(mine).shape(),
                    fresh.store.get(id).shape()
                )));
            }
        }
        Ok(())
    }

    /// Adds a value net copying the policy's embeddings and first layers, with a zero scalar head.
    pub fn init_value_from_policy(&mut self) {
        if self.value.is_some() {
            return;
        }
        let pol = self.policy.clone();
        let copy = |store: &mut ParamStore, from: ParamId| -> ParamId {
            let name = store.name(from).replacen(POLICY_PREFIX, VALUE_PREFIX, 1);
            let t = store.get(from).clone();
            store.add(&name, t)
        };
        let s = &mut self.store;
        let pair = |s: &mut ParamStore, p: (ParamId, ParamId)| (copy(s, p.0), copy(s, p.1));
        let tok = copy(s, pol.tok);
        let pos = copy(s, pol.pos);
        let blocks = pol.blocks[..self.cfg.value_layers]
            .iter()
            .map(|b| BlockIds {
                ln1: pair(s, b.ln1),
                wq: copy(s, b.wq),
                wk: copy(s, b.wk),
                wv: copy(s, b.wv),
                wo: copy(s, b.wo),
                ln2: pair(s, b.ln2),
                cq: copy(s, b.cq),
                ck: copy(s, b.ck),
                cv: copy(s, b.cv),
                co: copy(s, b.co),
                ln3: pair(s, b.ln3),
                f1: copy(s, b.f1),
                fb1: copy(s, b.fb1),
                f2: copy(s, b.f2),
                fb2: copy(s, b.fb2),
            })
            .collect();
        let lnf = pair(s, pol.lnf);
        let d = self.cfg.d_model;
        let head = s.add("val.head.w", Tensor::zeros(&[d, 1]));
        let head_bias = Some(s.add("val.head.b", Tensor::zeros(&[1])));
        self.value = Some(StackIds {
            tok,
            pos,
            blocks,
            lnf,
            head,
            head_bias,
        });
    }

    pub fn value_ids(&self) -> Result<&StackIds> {
        self.value.as_ref().ok_or_else(|| {
            Error::Config("model has no value network; it is created when PPO starts".into())
        })
    }

    /// Puts every parameter on `tape`; those whose name satisfies `trainable` track gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .store
            .ids()
            .map(|id| {
                let t = self.store.get(id).clone();
                if trainable(self.store.name(id)) {
                    tape.param(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn encoder_vars(&self, b: &Bound) -> EncoderVars {
        EncoderVars {
            w1: b.var(self.enc.w1),
            b1: b.var(self.enc.b1),
            slot: b.var(self.enc.slot),
            w2: b.var(self.enc.w2),
            b2: b.var(self.enc.b2),
        }
    }

    /// Encodes and packs the views of each study on the tape.
    pub fn encode(&self, tape: &mut Tape, b: &Bound, studies: &[&[Vec<f64>]]) -> Result<Memory> {
        let views: Vec<&[f64]> = studies
            .iter()
            .flat_map(|s| s.iter().map(Vec::as_slice))
            .collect();
        let counts: Vec<usize> = studies.iter().map(|s| s.len()).collect();
        let f = encode_views(
            tape,
            &self.encoder_vars(b),
            &views,
            self.cfg.tokens_per_view,
            self.cfg.feature_dim,
        )?;
        let (var, plan) = pack_on_tape(tape, f, &counts)?;
        Ok(Memory {
            var,
            mask: plan.mask,
            counts,
        })
    }

    /// Forward-only encoding into a [`PackedStudyBatch`].
    pub fn pack(&self, studies: &[&[Vec<f64>]]) -> Result<PackedStudyBatch> {
        let mut tape = Tape::new();
        let b = self.bind_prefix(&mut tape, ENCODER_PREFIX);
        let mem = self.encode(&mut tape, &b, studies)?;
        Ok(PackedStudyBatch {
            s_hat: tape.value(mem.var).clone(),
            mask: mem.mask,
            counts: mem.counts,
            tokens_per_view: self.cfg.tokens_per_view,
        })
    }

    /// Binds only parameters under `prefix` as constants (others get empty placeholders).
    fn bind_prefix(&self, tape: &mut Tape, prefix: &str) -> Bound {
        let vars = self
            .store
            .ids()
            .map(|id| {
                if self.store.name(id).starts_with(prefix) {
                    tape.constant(self.store.get(id).clone())
                } else {
                    tape.constant(Tensor::scalar(0.0))
                }
            })
            .collect();
        Bound { vars }
    }

    /// A packed batch placed on the tape as a constant memory.
    pub fn memory_from_packed(&self, tape: &mut Tape, p: &PackedStudyBatch) -> Memory {
        Memory {
            var: tape.constant(p.s_hat.clone()),
            mask: p.mask.clone(),
            counts: p.counts.clone(),
        }
    }

    /// Runs one decoder stack; returns `[B * T, out_dim]` outputs.
    pub fn run_stack(
        &self,
        tape: &mut Tape,
        b: &Bound,
        ids: &StackIds,
        tokens: &TokenBatch,
        mem: &Memory,
    ) -> Result<Var> {
        let (bsz, t, d) = (tokens.batch, tokens.len, self.cfg.d_model);
        if t > self.cfg.max_len {
            return Err(Error::Length {
                len: t,
                max: self.cfg.max_len,
            });
        }
        if bsz != mem.counts.len() {
            return Err(Error::dim("decoder batch", &[bsz], &[mem.counts.len()]));
        }
        let heads = self.cfg.heads;
        let tok = tape.embedding(b.var(ids.tok), &tokens.ids, vec![bsz, t, d])?;
        let positions: Vec<usize> = (0..bsz).flat_map(|_| 0..t).collect();
        let pos = tape.embedding(b.var(ids.pos), &positions, vec![bsz, t, d])?;
        let mut x = tape.add(tok, pos)?;
        for blk in &ids.blocks {
            let h = tape.layer_norm(x, b.var(blk.ln1.0), b.var(blk.ln1.1))?;
            let q = tape.matmul(h, b.var(blk.wq))?;
            let k = tape.matmul(h, b.var(blk.wk))?;
            let v = tape.matmul(h, b.var(blk.wv))?;
            let a = tape.attention(
                q,
                k,
                v,
                AttentionSpec {
                    heads,
                    causal: true,
                    key_mask: None,
                },
            )?;
            let a = tape.matmul(a, b.var(blk.wo))?;
            x = tape.add(x, a)?;

            let h = tape.layer_norm(x, b.var(blk.ln2.0), b.var(blk.ln2.1))?;
            let q = tape.matmul(h, b.var(blk.cq))?;
            let k = tape.matmul(mem.var, b.var(blk.ck))?;
            let v = tape.matmul(mem.var, b.var(blk.cv))?;
            let c = tape.attention(
                q,
                k,
                v,
                AttentionSpec {
                    heads,
                    causal: false,
                    key_mask: Some(mem.mask.clone()),
                },
            )?;
            let c = tape.matmul(c, b.var(blk.co))?;
            x = tape.add(x, c)?;

            let h = tape.layer_norm(x, b.var(blk.ln3.0), b.var(blk.ln3.1))?;
            let f = tape.matmul(h, b.var(blk.f1))?;
            let f = tape.add_row(f, b.var(blk.fb1))?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, b.var(blk.f2))?;
            let f = tape.add_row(f, b.var(blk.fb2))?;
            x = tape.add(x, f)?;
        }
        let x = tape.layer_norm(x, b.var(ids.lnf.0), b.var(ids.lnf.1))?;
        let x = tape.reshape(x, vec![bsz * t, d])?;
        let out = tape.matmul(x, b.var(ids.head))?;
        match ids.head_bias {
            Some(hb) => tape.add_row(out, b.var(hb)),
            None => Ok(out),
        }
    }

    /// Per-position next-token logits `[B * T, V]` for tokens against a packed batch.
    pub fn policy_logits(&self, tokens: &TokenBatch, packed: &PackedStudyBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.bind_prefix(&mut tape, POLICY_PREFIX);
        let mem = self.memory_from_packed(&mut tape, packed);
        let out = self.run_stack(&mut tape, &b, &self.policy, tokens, &mem)?;
        Ok(tape.value(out).clone())
    }

    /// Per-position values `[B * T]`.
    pub fn values(&self, tokens: &TokenBatch, packed: &PackedStudyBatch) -> Result<Vec<f64>> {
        let ids = self.value_ids()?;
        let mut tape = Tape::new();
        let b = self.bind_prefix(&mut tape, VALUE_PREFIX);
        let mem = self.memory_from_packed(&mut tape, packed);
        let out = self.run_stack(&mut tape, &b, ids, tokens, &mem)?;
        Ok(tape.data(out).to_vec())
    }

    /// Value at the last real position of each sequence, all against one study.
    pub fn final_values(&self, seqs: &[&[usize]], study: &PackedStudyBatch) -> Result<Vec<f64>> {
        let tokens = TokenBatch::from_sequences(seqs, crate::tokenizer::PAD);
        let packed = replicate(study, seqs.len());
        let v = self.values(&tokens, &packed)?;
        Ok(tokens
            .lengths
            .iter()
            .enumerate()
            .map(|(i, &l)| v[i * tokens.len + l - 1])
            .collect())
    }
}

/// Repeats a one-study batch `n` times.
pub fn replicate(study: &PackedStudyBatch, n: usize) -> PackedStudyBatch {
    let s = study.s_hat.shape();
    let mut data = Vec::with_capacity(n * study.s_hat.len());
    for _ in 0..n {
        data.extend_from_slice(study.s_hat.data());
    }
    PackedStudyBatch {
        s_hat: Tensor::new(vec![n, s[1], s[2]], data).expect("replicated shape"),
        mask: study.mask.repeat(n),
        counts: vec![study.counts[0]; n],
        tokens_per_view: study.tokens_per_view,
    }
}

#[cfg(test)]
mod tests;
