//! Teacher-forced cross-entropy pretraining on encoded reports.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{Bound, Model, TokenBatch, ENCODER_PREFIX, POLICY_PREFIX};
use crate::numerics::{Tape, Var};
use crate::optim::{collect_grads, Adam};
use crate::synthdata::StudyRecord;
use crate::tokenizer::{encode_report, Vocabulary, PAD};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub shuffle_sentences: bool,
    /// Std of additive Gaussian noise on view features (0 disables).
    pub feature_noise: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            epochs: 14,
            batch_size: 16,
            shuffle_sentences: true,
            feature_noise: 0.35,
            seed: 1,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.epochs == 0 || self.batch_size == 0 || self.feature_noise < 0.0
        {
            return Err(Error::Config(
                "pretrain needs lr > 0, epochs >= 1, batch_size >= 1, feature_noise >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// One encoded training sample.
#[derive(Clone, Debug)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub views: Vec<Vec<f64>>,
}

/// Applies sentence shuffling and feature noise, then encodes.
pub fn augment(
    r: &StudyRecord,
    vocab: &Vocabulary,
    cfg: &PretrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Example> {
    let mut report = r.report.clone();
    if cfg.shuffle_sentences {
        report.findings.shuffle(rng);
    }
    let mut views = r.views.clone();
    if cfg.feature_noise > 0.0 {
        let noise =
            Normal::new(0.0, cfg.feature_noise).map_err(|e| Error::Config(e.to_string()))?;
        for v in &mut views {
            for x in v.iter_mut() {
                *x += noise.sample(rng);
            }
        }
    }
    Ok(Example {
        tokens: encode_report(&report, vocab)?.0,
        views,
    })
}

pub fn plain_example(r: &StudyRecord, vocab: &Vocabulary) -> Result<Example> {
    Ok(Example {
        tokens: encode_report(&r.report, vocab)?.0,
        views: r.views.clone(),
    })
}

/// Inputs drop the last token, targets drop the first; padding targets are `PAD`.
pub fn shifted(examples: &[Example]) -> (TokenBatch, Vec<usize>) {
    let inputs: Vec<&[usize]> = examples
        .iter()
        .map(|e| &e.tokens[..e.tokens.len() - 1])
        .collect();
    let batch = TokenBatch::from_sequences(&inputs, PAD);
    let mut targets = Vec::with_capacity(batch.ids.len());
    for e in examples {
        let t = &e.tokens[1..];
        targets.extend_from_slice(t);
        targets.extend(std::iter::repeat_n(PAD, batch.len - t.len()));
    }
    (batch, targets)
}

/// Mean teacher-forced CE over non-padding targets; returns the loss node and logits.
pub fn teacher_forced_loss(
    model: &Model,
    tape: &mut Tape,
    b: &Bound,
    examples: &[Example],
) -> Result<(Var, Var, Vec<usize>)> {
    if examples.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let studies: Vec<&[Vec<f64>]> = examples.iter().map(|e| e.views.as_slice()).collect();
    let mem = model.encode(tape, b, &studies)?;
    let (batch, targets) = shifted(examples);
    let logits = model.run_stack(tape, b, &model.policy, &batch, &mem)?;
    let loss = tape.cross_entropy_logits(logits, &targets, PAD)?;
    Ok((loss, logits, targets))
}

fn trainable(name: &str) -> bool {
    name.starts_with(ENCODER_PREFIX) || name.starts_with(POLICY_PREFIX)
}

/// One Adam step on a batch; returns the pre-update loss.
pub fn pretrain_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[&StudyRecord],
    vocab: &Vocabulary,
    cfg: &PretrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("empty pretraining batch".into()));
    }
    let examples = batch
        .iter()
        .map(|r| augment(r, vocab, cfg, rng))
        .collect::<Result<Vec<_>>>()?;
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, trainable);
    let (loss, _, _) = teacher_forced_loss(model, &mut tape, &b, &examples)?;
    tape.backward(loss)?;
    let grads = collect_grads(&tape, &b);
    let value = tape.data(loss)[0];
    adam.step(&mut model.store, &grads, cfg.lr);
    Ok(value)
}

/// Token-weighted CE and argmax accuracy over `records`, no augmentation.
pub fn evaluate_teacher_forced(
    model: &Model,
    records: &[StudyRecord],
    vocab: &Vocabulary,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let mut total = 0.0;
    let mut correct = 0usize;
    let mut count = 0usize;
    for chunk in records.chunks(batch_size.max(1)) {
        let examples = chunk
            .iter()
            .map(|r| plain_example(r, vocab))
            .collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, |_| false);
        let (loss, logits, targets) = teacher_forced_loss(model, &mut tape, &b, &examples)?;
        let n = targets.iter().filter(|&&t| t != PAD).count();
        total += tape.data(loss)[0] * n as f64;
        count += n;
        let l = tape.value(logits);
        for (r, &t) in targets.iter().enumerate() {
            if t == PAD {
                continue;
            }
            let row = l.row(r);
            let arg = (0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best });
            correct += usize::from(arg == t);
        }
    }
    if count == 0 {
        return Err(Error::Data("no validation tokens".into()));
    }
    Ok((total / count as f64, correct as f64 / count as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

pub const PRETRAIN_LOG_HEADER: &str = "epoch,train_loss,val_loss,seconds";

pub fn epoch_csv_row(e: &EpochLog) -> String {
    format!(
        "{},{:.6},{:.6},{:.3}",
        e.epoch, e.train_loss, e.val_loss, e.seconds
    )
}

pub fn pretrain_log_csv(rows: &[EpochLog]) -> String {
    let mut s = format!("{PRETRAIN_LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{}", epoch_csv_row(r));
    }
    s
}

pub struct PretrainOutcome {
    pub best: Model,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Epoch loop with seeded batching; keeps the best-validation model.
///
/// `wall_clock = false` writes 0 into the seconds column so logs stay byte-stable.
pub fn run_pretraining(
    mut model: Model,
    train: &[StudyRecord],
    val: &[StudyRecord],
    vocab: &Vocabulary,
    cfg: &PretrainConfig,
    wall_clock: bool,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(
            "pretraining needs non-empty train and val splits".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    let start = wall_clock.then(Instant::now);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut steps = 0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&StudyRecord> = idx.iter().map(|&i| &train[i]).collect();
            sum += pretrain_step(&mut model, &mut adam, &batch, vocab, cfg, &mut rng)?;
            steps += 1;
        }
        let (val_loss, _) = evaluate_teacher_forced(&model, val, vocab, 64)?;
        let row = EpochLog {
            epoch,
            train_loss: sum / steps as f64,
            val_loss,
            seconds: start.map_or(0.0, |t| t.elapsed().as_secs_f64()),
        };
        on_epoch(&row);
        log.push(row);
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, model.clone()));
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(PretrainOutcome {
        best,
        best_epoch,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synthdata::{generate_corpus, CorpusConfig};

    fn setup() -> (Vec<StudyRecord>, Vec<StudyRecord>, Vocabulary, ModelConfig) {
        let c = generate_corpus(&CorpusConfig {
            n_train: 24,
            n_val: 8,
            n_test: 1,
            ..CorpusConfig::default()
        })
        .unwrap();
        let vocab = Vocabulary::from_reports(c.train.iter().map(|s| &s.report));
        let mc = ModelConfig {
            d_model: 16,
            heads: 2,
            policy_layers: 1,
            value_layers: 1,
            ..ModelConfig::desk(vocab.len(), 4, 16)
        };
        (c.train, c.val, vocab, mc)
    }

    #[test]
    fn fresh_loss_is_near_log_vocab() {
        let (train, _, vocab, mc) = setup();
        let model = Model::new(mc, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (ce, _) = evaluate_teacher_forced(&model, &train, &vocab, 8).unwrap();
        let lnv = (vocab.len() as f64).ln();
        assert!((ce - lnv).abs() < 0.1 * lnv, "{ce} vs ln V {lnv}");
    }

    #[test]
    fn padding_never_changes_the_loss() {
        let (train, _, vocab, mc) = setup();
        let model = Model::new(mc, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let a = plain_example(&train[0], &vocab).unwrap();
        let long = train
            .iter()
            .max_by_key(|r| r.report.full_text().len())
            .unwrap();
        let b = plain_example(long, &vocab).unwrap();
        let alone = {
            let mut t = Tape::new();
            let bd = model.bind(&mut t, |_| false);
            let (l, _, _) =
                teacher_forced_loss(&model, &mut t, &bd, std::slice::from_ref(&a)).unwrap();
            t.data(l)[0]
        };
        // duplicating `a` next to a longer sequence pads it; the mean over a's tokens is unchanged
        let mut t = Tape::new();
        let bd = model.bind(&mut t, |_| false);
        let (_, logits, targets) =
            teacher_forced_loss(&model, &mut t, &bd, &[a.clone(), b]).unwrap();
        let len = targets.len() / 2;
        let rows: Vec<usize> = (0..len).filter(|&r| targets[r] != PAD).collect();
        let picks: Vec<(usize, usize)> = rows.iter().map(|&r| (r, targets[r])).collect();
        let lp = t.token_log_probs(logits, &picks, &[]).unwrap();
        let padded = -t.data(lp).iter().sum::<f64>() / rows.len() as f64;
        assert!((alone - padded).abs() < 1e-12);
        assert!(a.tokens.len() - 1 < len);
    }

    #[test]
    fn augmentation_keeps_layout() {
        let (train, _, vocab, _) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = PretrainConfig::default();
        for r in &train {
            let e = augment(r, &vocab, &cfg, &mut rng).unwrap();
            let (back, diag) = crate::tokenizer::decode_sequence(
                &crate::tokenizer::TokenSequence(e.tokens),
                &vocab,
            );
            assert!(diag.is_clean());
            assert_eq!(back.impression, r.report.impression);
            let mut a = back.findings.clone();
            let mut b = r.report.findings.clone();
            a.sort();
            b.sort();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn runs_are_deterministic_and_shuffle_matters() {
        let (train, val, vocab, mc) = setup();
        let run = |shuffle: bool| {
            let cfg = PretrainConfig {
                epochs: 2,
                batch_size: 8,
                shuffle_sentences: shuffle,
                ..PretrainConfig::default()
            };
            let m = Model::new(mc.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            run_pretraining(m, &train, &val, &vocab, &cfg, false, |_| {})
                .unwrap()
                .log
        };
        let a = run(false);
        assert_eq!(a, run(false));
        let s = run(true);
        assert_eq!(s, run(true));
        assert_ne!(a, s);
        assert!(a[1].val_loss < a[0].val_loss);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let (train, _, vocab, mc) = setup();
        let mut m = Model::new(mc, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = PretrainConfig::default();
        assert!(matches!(
            pretrain_step(&mut m, &mut Adam::default(), &[], &vocab, &cfg, &mut rng),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            run_pretraining(m, &train, &[], &vocab, &cfg, false, |_| {}),
            Err(Error::Data(_))
        ));
    }
}
