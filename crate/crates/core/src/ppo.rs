//! PPO fine-tuning against the impression reward with a per-token KL penalty
//! to a frozen reference policy.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decode::{blocked_for, derive_seed, generate_many, hash_str, DecodeConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_corpus, Section};
use crate::model::{masked_log_softmax, Bound, Memory, Model, TokenBatch};
use crate::numerics::{Tape, Tensor, Var};
use crate::optim::{accumulate, collect_grads, Adam, Grads};
use crate::reward::impression_reward;
use crate::synthdata::StudyRecord;
use crate::tokenizer::{TokenSequence, Vocabulary, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RewardNorm {
    /// Subtract each study's group mean, divide by the batch std.
    Group,
    /// Plain z-score over the batch.
    Batch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PpoConfig {
    pub clip: f64,
    pub kl_coef: f64,
    /// Rollouts per study.
    pub group: usize,
    pub temperature: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub warmup_iters: usize,
    pub iterations: usize,
    /// Studies per micro-batch.
    pub batch_studies: usize,
    pub grad_accum: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub value_weight: f64,
    pub norm: RewardNorm,
    /// Forced rollouts with this many `<next>` tokens; `None` decodes freely.
    pub rollout_k: Option<usize>,
    /// Validation studies decoded after every iteration.
    pub val_studies: usize,
    pub divergence_limit: f64,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            kl_coef: 0.05,
            group: 4,
            temperature: 1.0,
            lr_start: 1e-5,
            lr_end: 1e-4,
            warmup_iters: 20,
            iterations: 200,
            batch_studies: 2,
            grad_accum: 4,
            gamma: 1.0,
            lambda: 0.95,
            value_weight: 0.5,
            norm: RewardNorm::Group,
            rollout_k: None,
            val_studies: 32,
            divergence_limit: 10.0,
            seed: 3,
        }
    }
}

impl PpoConfig {
    /// Full-scale schedule: slow warmup, long run, large accumulation.
    pub fn full_scale() -> Self {
        Self {
            lr_start: 1e-6,
            lr_end: 1e-5,
            warmup_iters: 300,
            iterations: 1275,
            grad_accum: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::Config("ppo clip must lie in (0, 1)".into()));
        }
        if self.group == 0 || self.batch_studies == 0 || self.grad_accum == 0 {
            return Err(Error::Config(
                "ppo group, batch_studies and grad_accum must be >= 1".into(),
            ));
        }
        if self.norm == RewardNorm::Group && self.group < 2 {
            return Err(Error::Config(
                "group reward normalization needs group >= 2".into(),
            ));
        }
        if !(self.temperature > 0.0) || self.lr_start < 0.0 || self.lr_end < 0.0 {
            return Err(Error::Config(
                "ppo temperature must be > 0 and learning rates >= 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.lambda) || !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config("gamma and lambda must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Linear warmup from `lr_start` to `lr_end`, then constant.
    pub fn lr(&self, iter: usize) -> f64 {
        if self.warmup_iters == 0 || iter >= self.warmup_iters {
            return self.lr_end;
        }
        self.lr_start + (self.lr_end - self.lr_start) * iter as f64 / self.warmup_iters as f64
    }

    pub fn studies_per_iter(&self) -> usize {
        self.batch_studies * self.grad_accum
    }

    pub fn rollout_decode(&self, max_len: usize) -> DecodeConfig {
        DecodeConfig {
            k: self.rollout_k.unwrap_or(0),
            n: 1,
            t_find: self.temperature,
            t_imp: self.temperature,
            top_p: 1.0,
            max_len,
            force: self.rollout_k.is_some(),
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// Index into the iteration's study list.
    pub study: usize,
    pub tokens: TokenSequence,
    pub force: bool,
    /// Token index of each sampled action.
    pub positions: Vec<usize>,
    pub phases: Vec<crate::decode::Phase>,
    pub old_logp: Vec<f64>,
    pub ref_logp: Vec<f64>,
    pub values: Vec<f64>,
    pub raw_reward: f64,
    pub norm_reward: f64,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub truncated: bool,
}

impl Trajectory {
    pub fn blocked(&self, i: usize) -> &'static [usize] {
        blocked_for(self.phases[i], self.force)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBatch {
    pub group: usize,
    /// Grouped by study: trajectories `[g * group, (g + 1) * group)` share a study.
    pub trajectories: Vec<Trajectory>,
}

/// Per-step shaped rewards: KL penalty everywhere, terminal reward at the last step.
pub fn shaped_rewards(old_logp: &[f64], ref_logp: &[f64], kl_coef: f64, terminal: f64) -> Vec<f64> {
    let mut r: Vec<f64> = old_logp
        .iter()
        .zip(ref_logp)
        .map(|(o, f)| -kl_coef * (o - f))
        .collect();
    if let Some(last) = r.last_mut() {
        *last += terminal;
    }
    r
}

fn population_std(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Normalizes raw terminal rewards laid out in consecutive groups of `group`.
pub fn normalize_rewards(raw: &[f64], group: usize, norm: RewardNorm) -> Vec<f64> {
    if raw.is_empty() {
        return Vec::new();
    }
    let std = population_std(raw).max(1e-6);
    match norm {
        RewardNorm::Group => raw
            .chunks(group)
            .flat_map(|g| {
                let m = g.iter().sum::<f64>() / g.len() as f64;
                g.iter().map(move |r| (r - m) / std)
            })
            .collect(),
        RewardNorm::Batch => {
            let m = raw.iter().sum::<f64>() / raw.len() as f64;
            raw.iter().map(|r| (r - m) / std).collect()
        }
    }
}

/// GAE advantages and returns for one trajectory; `V` after the last step is 0.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Shifts and scales `x` in place to mean 0, std 1.
pub fn standardize(x: &mut [f64]) {
    if x.is_empty() {
        return;
    }
    let m = x.iter().sum::<f64>() / x.len() as f64;
    let s = population_std(x).max(1e-8);
    x.iter_mut().for_each(|v| *v = (*v - m) / s);
}

/// Normalization, shaping, GAE and batch-wide advantage standardization.
pub fn finalize(batch: &mut RolloutBatch, cfg: &PpoConfig) {
    let raw: Vec<f64> = batch.trajectories.iter().map(|t| t.raw_reward).collect();
    let norm = normalize_rewards(&raw, batch.group, cfg.norm);
    for (t, n) in batch.trajectories.iter_mut().zip(norm) {
        t.norm_reward = n;
        t.rewards = shaped_rewards(&t.old_logp, &t.ref_logp, cfg.kl_coef, n);
        let (a, r) = gae(&t.rewards, &t.values, cfg.gamma, cfg.lambda);
        t.advantages = a;
        t.returns = r;
    }
    let mut all: Vec<f64> = batch
        .trajectories
        .iter()
        .flat_map(|t| t.advantages.iter().copied())
        .collect();
    standardize(&mut all);
    let mut it = all.into_iter();
    for t in &mut batch.trajectories {
        for a in &mut t.advantages {
            *a = it.next().expect("same count");
        }
    }
}

/// Log-probabilities of each trajectory's actions under `model`, full forward.
fn action_log_probs(
    model: &Model,
    studies: &[&StudyRecord],
    trajs: &[Trajectory],
    temperature: f64,
) -> Result<Vec<Vec<f64>>> {
    let views: Vec<&[Vec<f64>]> = trajs
        .iter()
        .map(|t| studies[t.study].views.as_slice())
        .collect();
    let seqs: Vec<&[usize]> = trajs.iter().map(|t| t.tokens.ids()).collect();
    let tokens = TokenBatch::from_sequences(&seqs, PAD);
    let logits = model.policy_logits(&tokens, &model.pack(&views)?)?;
    let v = model.cfg.vocab_size;
    trajs
        .iter()
        .enumerate()
        .map(|(r, t)| {
            t.positions
                .iter()
                .enumerate()
                .map(|(i, &p)| {
                    let row = (r * tokens.len + p - 1) * v;
                    let scaled: Vec<f64> = logits.data()[row..row + v]
                        .iter()
                        .map(|x| x / temperature)
                        .collect();
                    Ok(masked_log_softmax(&scaled, t.blocked(i))?[t.tokens.ids()[p]])
                })
                .collect()
        })
        .collect()
}

/// Samples `group` trajectories per study and fills log-probs, values and raw rewards.
pub fn collect_rollouts(
    model: &Model,
    reference: &Model,
    studies: &[&StudyRecord],
    vocab: &Vocabulary,
    cfg: &PpoConfig,
    iter: usize,
) -> Result<RolloutBatch> {
    let dcfg = cfg.rollout_decode(model.cfg.max_len);
    let views: Vec<&[Vec<f64>]> = studies.iter().map(|s| s.views.as_slice()).collect();
    let packed = model.pack(&views)?;
    let requests: Vec<(usize, u64)> = studies
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            let h = hash_str(&s.study_id);
            (0..cfg.group).map(move |g| (i, derive_seed(cfg.seed, &[iter as u64, h, g as u64])))
        })
        .collect();
    let gens = generate_many(model, &packed, &requests, &dcfg)?;
    let mut trajs: Vec<Trajectory> = gens
        .into_iter()
        .zip(&requests)
        .map(|(g, &(study, _))| {
            let steps: Vec<_> = g.steps.iter().filter(|s| s.sampled).collect();
            Trajectory {
                study,
                force: dcfg.force,
                positions: steps.iter().map(|s| s.index).collect(),
                phases: steps.iter().map(|s| s.phase).collect(),
                raw_reward: impression_reward(&g.tokens, vocab, &studies[study].labels),
                tokens: g.tokens,
                old_logp: Vec::new(),
                ref_logp: Vec::new(),
                values: Vec::new(),
                norm_reward: 0.0,
                rewards: Vec::new(),
                advantages: Vec::new(),
                returns: Vec::new(),
                truncated: g.truncated,
            }
        })
        .collect();
    if trajs.iter().any(|t| t.positions.is_empty()) {
        return Err(Error::Data("rollout without a sampled action".into()));
    }
    let old = action_log_probs(model, studies, &trajs, cfg.temperature)?;
    let refs = action_log_probs(reference, studies, &trajs, cfg.temperature)?;
    let rep: Vec<&[Vec<f64>]> = trajs
        .iter()
        .map(|t| studies[t.study].views.as_slice())
        .collect();
    let seqs: Vec<&[usize]> = trajs.iter().map(|t| t.tokens.ids()).collect();
    let tokens = TokenBatch::from_sequences(&seqs, PAD);
    let values = model.values(&tokens, &model.pack(&rep)?)?;
    for (r, ((t, o), f)) in trajs.iter_mut().zip(old).zip(refs).enumerate() {
        if o.iter().chain(&f).any(|x| !x.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite log-probability in rollout {r}"
            )));
        }
        t.values = t
            .positions
            .iter()
            .map(|&p| values[r * tokens.len + p - 1])
            .collect();
        t.old_logp = o;
        t.ref_logp = f;
    }
    Ok(RolloutBatch {
        group: cfg.group,
        trajectories: trajs,
    })
}

/// `-(1/denom) * sum(min(r A, clip(r, 1-eps, 1+eps) A))` with `r = exp(new - old)`.
pub fn ppo_loss(
    tape: &mut Tape,
    new_logp: Var,
    old_logp: &[f64],
    adv: &[f64],
    eps: f64,
    denom: f64,
) -> Result<Var> {
    let old = tape.constant(Tensor::vector(old_logp));
    let a = tape.constant(Tensor::vector(adv));
    let diff = tape.sub(new_logp, old)?;
    let ratio = tape.exp(diff);
    let unclipped = tape.mul(ratio, a)?;
    let clipped_ratio = tape.clamp(ratio, 1.0 - eps, 1.0 + eps);
    let clipped = tape.mul(clipped_ratio, a)?;
    let obj = tape.minimum(unclipped, clipped)?;
    let total = tape.sum(obj);
    Ok(tape.scale(total, -1.0 / denom))
}

/// `(1/denom) * sum((v - target)^2)`.
pub fn value_loss(tape: &mut Tape, values: Var, targets: &[f64], denom: f64) -> Result<Var> {
    let t = tape.constant(Tensor::new(tape.shape(values).to_vec(), targets.to_vec())?);
    let d = tape.sub(values, t)?;
    let sq = tape.mul(d, d)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / denom))
}

pub struct SurrogateStats {
    /// Sum of |ratio - 1| over actions.
    pub ratio_dev: f64,
    /// Actions whose ratio left the clip range.
    pub clipped: usize,
}

/// Token rows of trajectories laid out as one padded batch.
pub fn trajectory_tokens(trajs: &[Trajectory]) -> TokenBatch {
    let seqs: Vec<&[usize]> = trajs.iter().map(|t| t.tokens.ids()).collect();
    TokenBatch::from_sequences(&seqs, PAD)
}

/// Clipped surrogate loss of `trajs` under the policy bound in `b`.
pub fn surrogate_on_tape(
    model: &Model,
    tape: &mut Tape,
    b: &Bound,
    mem: &Memory,
    trajs: &[Trajectory],
    cfg: &PpoConfig,
    denom: f64,
) -> Result<(Var, SurrogateStats)> {
    let tokens = trajectory_tokens(trajs);
    let mut logits = model.run_stack(tape, b, &model.policy, &tokens, mem)?;
    if cfg.temperature != 1.0 {
        logits = tape.scale(logits, 1.0 / cfg.temperature);
    }
    let mut picks = Vec::new();
    let mut blocked = Vec::new();
    let (mut old, mut adv) = (Vec::new(), Vec::new());
    for (r, t) in trajs.iter().enumerate() {
        for (i, &p) in t.positions.iter().enumerate() {
            picks.push((r * tokens.len + p - 1, t.tokens.ids()[p]));
            blocked.push(t.blocked(i).to_vec());
        }
        old.extend_from_slice(&t.old_logp);
        adv.extend_from_slice(&t.advantages);
    }
    let new_logp = tape.token_log_probs(logits, &picks, &blocked)?;
    let mut stats = SurrogateStats {
        ratio_dev: 0.0,
        clipped: 0,
    };
    for (n, o) in tape.data(new_logp).iter().zip(&old) {
        let dev = ((n - o).exp() - 1.0).abs();
        stats.ratio_dev += dev;
        if dev > cfg.clip {
            stats.clipped += 1;
        }
    }
    Ok((
        ppo_loss(tape, new_logp, &old, &adv, cfg.clip, denom)?,
        stats,
    ))
}

/// Value regression: returns at every action state plus the normalized
/// terminal reward at the final position.
pub fn value_loss_on_tape(
    model: &Model,
    tape: &mut Tape,
    b: &Bound,
    mem: &Memory,
    trajs: &[Trajectory],
    denom: f64,
) -> Result<Var> {
    let tokens = trajectory_tokens(trajs);
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (r, t) in trajs.iter().enumerate() {
        for (i, &p) in t.positions.iter().enumerate() {
            rows.push(Some(r * tokens.len + p - 1));
            targets.push(t.returns[i]);
        }
        rows.push(Some(r * tokens.len + t.tokens.len() - 1));
        targets.push(t.norm_reward);
    }
    let v_all = model.run_stack(tape, b, model.value_ids()?, &tokens, mem)?;
    let v = tape.gather_rows(v_all, &rows, vec![rows.len(), 1])?;
    value_loss(tape, v, &targets, denom)
}

/// One micro-batch: surrogate plus weighted value loss, value net reading a
/// detached copy of the encoder output.
fn micro_batch_grads(
    model: &Model,
    studies: &[&StudyRecord],
    trajs: &[Trajectory],
    cfg: &PpoConfig,
    policy_denom: f64,
    value_denom: f64,
) -> Result<(Grads, SurrogateStats)> {
    let mut tape = Tape::new();
    let b: Bound = model.bind(&mut tape, |_| true);
    let views: Vec<&[Vec<f64>]> = trajs
        .iter()
        .map(|t| studies[t.study].views.as_slice())
        .collect();
    let mem = model.encode(&mut tape, &b, &views)?;
    let (pl, stats) = surrogate_on_tape(model, &mut tape, &b, &mem, trajs, cfg, policy_denom)?;
    let detached = Memory {
        var: {
            let v = tape.value(mem.var).clone();
            tape.constant(v)
        },
        mask: mem.mask.clone(),
        counts: mem.counts.clone(),
    };
    let vl = value_loss_on_tape(model, &mut tape, &b, &detached, trajs, value_denom)?;
    let vl = tape.scale(vl, cfg.value_weight);
    let loss = tape.add(pl, vl)?;
    tape.backward(loss)?;
    Ok((collect_grads(&tape, &b), stats))
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationMetrics {
    pub iter: usize,
    pub mean_reward: f64,
    pub val_impression_f1: f64,
    pub val_findings_f1: f64,
    pub mean_kl: f64,
    pub clip_frac: f64,
    pub lr: f64,
}

pub const PPO_LOG_HEADER: &str =
    "iter,mean_reward,val_impression_f1,val_findings_f1,mean_kl,clip_frac,lr";

pub fn iteration_csv_row(m: &IterationMetrics) -> String {
    format!(
        "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:e}",
        m.iter, m.mean_reward, m.val_impression_f1, m.val_findings_f1, m.mean_kl, m.clip_frac, m.lr
    )
}

pub fn ppo_log_csv(rows: &[IterationMetrics]) -> String {
    let mut out = format!("{PPO_LOG_HEADER}\n");
    for r in rows {
        writeln!(out, "{}", iteration_csv_row(r)).expect("string write");
    }
    out
}

/// Decoding used for the per-iteration validation F1.
pub fn validation_decode(model: &Model) -> DecodeConfig {
    DecodeConfig {
        force: false,
        n: 1,
        max_len: model.cfg.max_len,
        ..DecodeConfig::default()
    }
}

pub struct PpoState {
    pub model: Model,
    pub reference: Model,
    pub adam: Adam,
    pub iter: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl PpoState {
    /// Starts from a pretrained model; the value net is initialised from the policy if absent.
    pub fn new(pretrained: Model, train_len: usize, cfg: &PpoConfig) -> Result<Self> {
        cfg.validate()?;
        if train_len == 0 {
            return Err(Error::Data("PPO needs a non-empty training split".into()));
        }
        let reference = pretrained.clone();
        let mut model = pretrained;
        if model.value.is_none() {
            model.init_value_from_policy();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..train_len).collect();
        order.shuffle(&mut rng);
        Ok(Self {
            model,
            reference,
            adam: Adam::default(),
            iter: 0,
            order,
            cursor: 0,
            rng,
        })
    }

    fn next_studies(&mut self, n: usize) -> Vec<usize> {
        (0..n)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

/// Collect, normalize, estimate advantages, accumulate and apply one Adam step.
pub fn train_iteration(
    state: &mut PpoState,
    train: &[StudyRecord],
    val: &[StudyRecord],
    vocab: &Vocabulary,
    cfg: &PpoConfig,
) -> Result<IterationMetrics> {
    let idx = state.next_studies(cfg.studies_per_iter());
    let studies: Vec<&StudyRecord> = idx.iter().map(|&i| &train[i]).collect();
    let iter = state.iter;
    let mut batch = collect_rollouts(&state.model, &state.reference, &studies, vocab, cfg, iter)?;
    finalize(&mut batch, cfg);
    let trajs = &batch.trajectories;
    let steps: usize = trajs.iter().map(|t| t.positions.len()).sum();
    let value_rows = steps + trajs.len();

    let mut acc = Grads::new();
    let (mut dev, mut clipped) = (0.0, 0usize);
    let per_micro = cfg.batch_studies * cfg.group;
    for chunk in trajs.chunks(per_micro) {
        let (g, s) = micro_batch_grads(
            &state.model,
            &studies,
            chunk,
            cfg,
            steps as f64,
            value_rows as f64,
        )?;
        accumulate(&mut acc, &g, 1.0);
        dev += s.ratio_dev;
        clipped += s.clipped;
    }
    let mean_dev = dev / steps as f64;
    if mean_dev > cfg.divergence_limit {
        return Err(Error::Divergence { iter, mean_dev });
    }
    let lr = cfg.lr(iter);
    state.adam.step(&mut state.model.store, &acc, lr);
    state.iter += 1;

    let mean_kl = trajs
        .iter()
        .flat_map(|t| t.old_logp.iter().zip(&t.ref_logp).map(|(o, f)| o - f))
        .sum::<f64>()
        / steps as f64;
    let (val_impression_f1, val_findings_f1) = if cfg.val_studies == 0 || val.is_empty() {
        (0.0, 0.0)
    } else {
        let subset = &val[..cfg.val_studies.min(val.len())];
        let m = evaluate_corpus(
            &state.model,
            subset,
            vocab,
            &validation_decode(&state.model),
        )?
        .metrics;
        (m.f1(Section::Impression), m.f1(Section::Findings))
    };
    Ok(IterationMetrics {
        iter,
        mean_reward: trajs.iter().map(|t| t.raw_reward).sum::<f64>() / trajs.len() as f64,
        val_impression_f1,
        val_findings_f1,
        mean_kl,
        clip_frac: clipped as f64 / steps as f64,
        lr,
    })
}

/// Runs `cfg.iterations` iterations from `pretrained`.
pub fn run_ppo(
    pretrained: Model,
    train: &[StudyRecord],
    val: &[StudyRecord],
    vocab: &Vocabulary,
    cfg: &PpoConfig,
    mut on_iter: impl FnMut(&IterationMetrics),
) -> Result<(Model, Vec<IterationMetrics>)> {
    let mut state = PpoState::new(pretrained, train.len(), cfg)?;
    let mut log = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let m = train_iteration(&mut state, train, val, vocab, cfg)?;
        on_iter(&m);
        log.push(m);
    }
    Ok((state.model, log))
}
