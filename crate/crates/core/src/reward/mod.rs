//! Rule labeler over the 14-condition schema and the impression F1 reward.

mod rules;

pub use rules::{Rule, RuleTable};

use crate::error::{Error, Result};
use crate::synthdata::{LabelVector, NUM_CONDITIONS};
use crate::tokenizer::{decode_sequence, words, TokenSequence, Vocabulary, PERIOD};

/// Labels a list of sentences with the bundled rule table.
pub fn extract_labels(sentences: &[Vec<String>]) -> LabelVector {
    RuleTable::bundled().label(sentences)
}

/// Splits free text on [`PERIOD`] and labels it.
pub fn extract_labels_text(text: &str) -> LabelVector {
    let w = words(&text.replace('.', " . "));
    let sentences: Vec<Vec<String>> = w
        .split(|t| t == PERIOD)
        .filter(|s| !s.is_empty())
        .map(<[String]>::to_vec)
        .collect();
    extract_labels(&sentences)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn add(&mut self, pred: bool, gold: bool) {
        match (pred, gold) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => {}
        }
    }

    pub fn prf(&self) -> Prf {
        if self.tp + self.fp + self.fn_ == 0 {
            return Prf {
                p: 1.0,
                r: 1.0,
                f1: 1.0,
            };
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        let f1 = if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        };
        Prf { p, r, f1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prf {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
}

fn check_pairing(pred: usize, gold: usize) -> Result<()> {
    if pred != gold {
        return Err(Error::Pairing { pred, gold });
    }
    Ok(())
}

/// Pooled counts over every (study, condition) pair.
pub fn micro_confusion(pred: &[LabelVector], gold: &[LabelVector]) -> Result<Confusion> {
    check_pairing(pred.len(), gold.len())?;
    let mut c = Confusion::default();
    for (p, g) in pred.iter().zip(gold) {
        for i in 0..NUM_CONDITIONS {
            c.add(p.get(i), g.get(i));
        }
    }
    Ok(c)
}

/// Micro P/R/F1. No positives on either side counts as full agreement.
pub fn micro_f1(pred: &[LabelVector], gold: &[LabelVector]) -> Result<Prf> {
    Ok(micro_confusion(pred, gold)?.prf())
}

/// Per-condition counts, in label order.
pub fn per_class_confusion(
    pred: &[LabelVector],
    gold: &[LabelVector],
) -> Result<[Confusion; NUM_CONDITIONS]> {
    check_pairing(pred.len(), gold.len())?;
    let mut out = [Confusion::default(); NUM_CONDITIONS];
    for (p, g) in pred.iter().zip(gold) {
        for (i, c) in out.iter_mut().enumerate() {
            c.add(p.get(i), g.get(i));
        }
    }
    Ok(out)
}

/// F1 of the labels read from the impression span alone against `gold`.
pub fn impression_reward(generated: &TokenSequence, vocab: &Vocabulary, gold: &LabelVector) -> f64 {
    let (report, _) = decode_sequence(generated, vocab);
    let pred = extract_labels(&report.impression_sentences());
    micro_confusion(&[pred], &[*gold])
        .expect("one study each side")
        .prf()
        .f1
}
