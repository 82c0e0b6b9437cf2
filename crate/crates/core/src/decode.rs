//! Controlled generation: next-token forcing, two-temperature sampling and
//! best-of-N re-ranking by the value network.
//!
//! Phase 1 writes findings. With forcing on, sampled `<eos>`/`<impression>`
//! become `<next>` until `k` boundaries exist, then `<impression>` is
//! appended. Without forcing the policy ends findings itself by sampling
//! `<impression>` (`<eos>` is blocked). Phase 3 writes the impression with
//! `<next>`/`<impression>` blocked until `<eos>` or the length cap.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::PackedStudyBatch;
use crate::error::{Error, Result};
use crate::model::{masked_log_softmax, sample_next, Model, StackRunner};
use crate::tokenizer::{TokenSequence, BOS, EOS, IMPRESSION, NEXT, PAD};

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    /// Required `<next>` tokens before the impression.
    pub k: usize,
    /// Best-of-N candidates.
    pub n: usize,
    pub t_find: f64,
    pub t_imp: f64,
    pub top_p: f64,
    pub max_len: usize,
    /// Off: free decoding, the policy decides where findings end.
    pub force: bool,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            k: 6,
            n: 8,
            t_find: 1.0,
            t_imp: 0.8,
            top_p: 0.9,
            max_len: 128,
            force: true,
            seed: 7,
        }
    }
}

impl DecodeConfig {
    /// Ten forced sentences, for corpora with long findings sections.
    pub fn full_scale() -> Self {
        Self {
            k: 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("decode.n must be >= 1".into()));
        }
        if !(self.t_find > 0.0 && self.t_imp > 0.0) {
            return Err(Error::Config("temperatures must be > 0".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config("top_p must lie in (0, 1]".into()));
        }
        let need = if self.force { self.k + 3 } else { 3 };
        if self.max_len < need {
            return Err(Error::Config(format!(
                "max_len {} cannot hold <bos>, {} <next>, <impression> and <eos>",
                self.max_len, self.k
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Findings,
    Impression,
}

pub const FORCED_FINDINGS_BLOCK: &[usize] = &[PAD, BOS];
pub const FREE_FINDINGS_BLOCK: &[usize] = &[PAD, BOS, EOS];
pub const IMPRESSION_BLOCK: &[usize] = &[PAD, BOS, NEXT, IMPRESSION];

/// Tokens removed from the support for a phase.
pub fn blocked_for(phase: Phase, force: bool) -> &'static [usize] {
    match (phase, force) {
        (Phase::Findings, true) => FORCED_FINDINGS_BLOCK,
        (Phase::Findings, false) => FREE_FINDINGS_BLOCK,
        (Phase::Impression, _) => IMPRESSION_BLOCK,
    }
}

/// One emitted token after `<bos>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    /// Index of the token in the output sequence.
    pub index: usize,
    pub phase: Phase,
    /// False for forced or substituted tokens.
    pub sampled: bool,
    /// Log-probability of the emitted token under the tempered, blocked softmax.
    pub logp: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub tokens: TokenSequence,
    pub steps: Vec<Step>,
    pub truncated: bool,
    /// Sampled `<eos>`/`<impression>` replaced by `<next>`.
    pub replaced: usize,
}

/// Anything that yields next-token logits one position at a time.
pub trait StepPolicy {
    fn vocab_size(&self) -> usize;
    /// Longest sequence the policy can condition on.
    fn context(&self) -> usize;
    fn session<'a>(&'a self, packed: &'a PackedStudyBatch) -> Box<dyn PolicySession + 'a>;
}

pub trait PolicySession {
    fn add_sequence(&mut self, study: usize) -> usize;
    /// `items` are `(sequence, token)`; returns `[items, vocab]` logits.
    fn step(&mut self, items: &[(usize, usize)]) -> Result<Vec<f64>>;
}

/// Scores complete candidates for one study.
pub trait ValueScorer {
    fn final_values(&self, seqs: &[&[usize]], study: &PackedStudyBatch) -> Result<Vec<f64>>;
}

struct RunnerSession<'a>(StackRunner<'a>);

impl PolicySession for RunnerSession<'_> {
    fn add_sequence(&mut self, study: usize) -> usize {
        self.0.add_sequence(study)
    }

    fn step(&mut self, items: &[(usize, usize)]) -> Result<Vec<f64>> {
        self.0.step(items)
    }
}

impl StepPolicy for Model {
    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn context(&self) -> usize {
        self.cfg.max_len
    }

    fn session<'a>(&'a self, packed: &'a PackedStudyBatch) -> Box<dyn PolicySession + 'a> {
        Box::new(RunnerSession(StackRunner::new(self, &self.policy, packed)))
    }
}

impl ValueScorer for Model {
    fn final_values(&self, seqs: &[&[usize]], study: &PackedStudyBatch) -> Result<Vec<f64>> {
        Model::final_values(self, seqs, study)
    }
}

/// SplitMix64 over `base` and `parts`.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    parts
        .iter()
        .fold(mix(base.wrapping_add(0x9e37_79b9_7f4a_7c15)), |acc, &p| {
            mix(acc ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(acc << 6))
        })
}

/// Stable 64-bit FNV-1a, for turning study ids into seeds.
pub fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

struct State {
    handle: usize,
    tokens: Vec<usize>,
    steps: Vec<Step>,
    phase: Phase,
    nexts: usize,
    replaced: usize,
    truncated: bool,
    done: bool,
    rng: ChaCha8Rng,
}

impl State {
    fn emit(&mut self, token: usize, sampled: bool, logp: f64) {
        self.steps.push(Step {
            index: self.tokens.len(),
            phase: self.phase,
            sampled,
            logp,
        });
        self.tokens.push(token);
    }

    fn decide(&mut self, logits: &[f64], cfg: &DecodeConfig) -> Result<()> {
        let len = self.tokens.len();
        match self.phase {
            Phase::Findings => {
                let block = blocked_for(Phase::Findings, cfg.force);
                let logp = |tok: usize| -> Result<f64> {
                    let scaled: Vec<f64> = logits.iter().map(|x| x / cfg.t_find).collect();
                    Ok(masked_log_softmax(&scaled, block)?[tok])
                };
                if cfg.force && self.nexts >= cfg.k {
                    self.emit(IMPRESSION, false, logp(IMPRESSION)?);
                    self.phase = Phase::Impression;
                } else if cfg.force && len + (cfg.k - self.nexts) + 2 >= cfg.max_len {
                    self.emit(NEXT, false, logp(NEXT)?);
                    self.nexts += 1;
                } else if !cfg.force && len + 2 >= cfg.max_len {
                    self.emit(IMPRESSION, false, f64::NAN);
                    self.phase = Phase::Impression;
                } else {
                    let tok = sample_next(logits, cfg.t_find, cfg.top_p, block, &mut self.rng)?;
                    if cfg.force && (tok == EOS || tok == IMPRESSION) {
                        self.replaced += 1;
                        self.emit(NEXT, false, logp(NEXT)?);
                        self.nexts += 1;
                    } else {
                        self.emit(tok, true, logp(tok)?);
                        if tok == NEXT {
                            self.nexts += 1;
                        } else if tok == IMPRESSION {
                            self.phase = Phase::Impression;
                        }
                    }
                }
            }
            Phase::Impression => {
                let scaled: Vec<f64> = logits.iter().map(|x| x / cfg.t_imp).collect();
                let lp = masked_log_softmax(&scaled, IMPRESSION_BLOCK)?;
                if len + 1 >= cfg.max_len {
                    self.emit(EOS, false, lp[EOS]);
                    self.truncated = true;
                    self.done = true;
                } else {
                    let tok = sample_next(
                        logits,
                        cfg.t_imp,
                        cfg.top_p,
                        IMPRESSION_BLOCK,
                        &mut self.rng,
                    )?;
                    self.emit(tok, true, lp[tok]);
                    self.done = tok == EOS;
                }
            }
        }
        Ok(())
    }
}

/// Generates one sequence per `(study, seed)` request, all in lockstep.
///
/// Each request owns its RNG, so the result equals running them one by one.
/// The length cap is clipped to the policy context.
pub fn generate_many(
    policy: &dyn StepPolicy,
    packed: &PackedStudyBatch,
    requests: &[(usize, u64)],
    cfg: &DecodeConfig,
) -> Result<Vec<Generation>> {
    let clipped = DecodeConfig {
        max_len: cfg.max_len.min(policy.context()),
        ..cfg.clone()
    };
    let cfg = &clipped;
    cfg.validate()?;
    let mut session = policy.session(packed);
    let mut states: Vec<State> = requests
        .iter()
        .map(|&(study, seed)| State {
            handle: session.add_sequence(study),
            tokens: vec![BOS],
            steps: Vec::new(),
            phase: Phase::Findings,
            nexts: 0,
            replaced: 0,
            truncated: false,
            done: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
        .collect();
    let v = policy.vocab_size();
    loop {
        let active: Vec<usize> = (0..states.len()).filter(|&i| !states[i].done).collect();
        if active.is_empty() {
            break;
        }
        let items: Vec<(usize, usize)> = active
            .iter()
            .map(|&i| {
                (
                    states[i].handle,
                    *states[i].tokens.last().expect("starts with <bos>"),
                )
            })
            .collect();
        let logits = session.step(&items)?;
        for (r, &i) in active.iter().enumerate() {
            states[i].decide(&logits[r * v..(r + 1) * v], cfg)?;
        }
    }
    Ok(states
        .into_iter()
        .map(|s| Generation {
            tokens: TokenSequence(s.tokens),
            steps: s.steps,
            truncated: s.truncated,
            replaced: s.replaced,
        })
        .collect())
}

/// A single candidate for a one-study batch.
pub fn generate_candidate(
    policy: &dyn StepPolicy,
    study: &PackedStudyBatch,
    cfg: &DecodeConfig,
    seed: u64,
) -> Result<Generation> {
    Ok(generate_many(policy, study, &[(0, seed)], cfg)?.remove(0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestOfN {
    pub chosen: usize,
    /// Value score of every candidate; empty when no scorer was given.
    pub scores: Vec<f64>,
    pub candidates: Vec<Generation>,
}

impl BestOfN {
    pub fn best(&self) -> &Generation {
        &self.candidates[self.chosen]
    }
}

/// Index of the maximum; ties resolve to the lowest index.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Candidate seed `j` for a study seeded by `study_seed`.
pub fn candidate_seed(cfg: &DecodeConfig, study_seed: u64, j: usize) -> u64 {
    derive_seed(cfg.seed, &[study_seed, j as u64])
}

/// Best-of-N for every study of `packed`; `study_seeds[i]` individualises study `i`.
pub fn generate_reports(
    policy: &dyn StepPolicy,
    value: Option<&dyn ValueScorer>,
    packed: &PackedStudyBatch,
    study_seeds: &[u64],
    cfg: &DecodeConfig,
) -> Result<Vec<BestOfN>> {
    if cfg.n > 1 && value.is_none() {
        return Err(Error::Config(
            "best-of-N with n > 1 needs a value network".into(),
        ));
    }
    let requests: Vec<(usize, u64)> = (0..packed.batch())
        .flat_map(|i| (0..cfg.n).map(move |j| (i, j)))
        .map(|(i, j)| (i, candidate_seed(cfg, study_seeds[i], j)))
        .collect();
    let mut gens = generate_many(policy, packed, &requests, cfg)?.into_iter();
    let mut out = Vec::with_capacity(packed.batch());
    for i in 0..packed.batch() {
        let candidates: Vec<Generation> = gens.by_ref().take(cfg.n).collect();
        let scores = match value {
            Some(v) => {
                let seqs: Vec<&[usize]> = candidates.iter().map(|g| g.tokens.ids()).collect();
                v.final_values(&seqs, &packed.select(i))?
            }
            None => Vec::new(),
        };
        let chosen = if scores.is_empty() {
            0
        } else {
            argmax_first(&scores)
        };
        out.push(BestOfN {
            chosen,
            scores,
            candidates,
        });
    }
    Ok(out)
}

/// Best-of-N for one study.
pub fn generate_report(
    policy: &dyn StepPolicy,
    value: Option<&dyn ValueScorer>,
    study: &PackedStudyBatch,
    cfg: &DecodeConfig,
    study_seed: u64,
) -> Result<BestOfN> {
    Ok(generate_reports(policy, value, study, &[study_seed], cfg)?.remove(0))
}

/// Checks the forcing and single-boundary invariants for one sequence.
pub fn check_structure(t: &TokenSequence, k: usize) -> std::result::Result<(), String> {
    let ids = t.ids();
    let imp = t.position(IMPRESSION).ok_or("no <impression>")?;
    if t.count(IMPRESSION) != 1 {
        return Err(format!("{} <impression> tokens", t.count(IMPRESSION)));
    }
    if ids.last() != Some(&EOS) || t.count(EOS) != 1 {
        return Err("sequence must end in exactly one <eos>".into());
    }
    let prefix = &ids[..imp];
    let nexts = prefix.iter().filter(|&&x| x == NEXT).count();
    if nexts < k {
        return Err(format!("{nexts} <next> before <impression>, need {k}"));
    }
    if ids[imp..].contains(&NEXT) {
        return Err("<next> inside impression".into());
    }
    Ok(())
}
