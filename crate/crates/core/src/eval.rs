//! Clinical-efficacy and NLG metrics, corpus evaluation, sweeps and the
//! ablation grid.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::decode::{generate_reports, hash_str, BestOfN, DecodeConfig, StepPolicy, ValueScorer};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::reward::{extract_labels, micro_confusion, per_class_confusion, Prf};
use crate::synthdata::{LabelVector, StudyRecord, CONDITIONS, NUM_CONDITIONS};
use crate::tokenizer::{decode_sequence, Report, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Section {
    Findings,
    Impression,
    Full,
}

impl Section {
    pub const ALL: [Section; 3] = [Section::Findings, Section::Impression, Section::Full];

    pub fn name(self) -> &'static str {
        match self {
            Section::Findings => "findings",
            Section::Impression => "impression",
            Section::Full => "full",
        }
    }

    pub fn sentences(self, r: &Report) -> Vec<Vec<String>> {
        match self {
            Section::Findings => r.findings.clone(),
            Section::Impression => r.impression_sentences(),
            Section::Full => r.all_sentences(),
        }
    }

    pub fn words(self, r: &Report) -> Vec<String> {
        match self {
            Section::Findings => r.findings_words(),
            Section::Impression => r.impression.clone(),
            Section::Full => {
                let mut w = r.findings_words();
                w.extend(r.impression.iter().cloned());
                w
            }
        }
    }
}

impl FromStr for Section {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Section::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| {
                Error::Usage(format!("unknown section {s:?} (findings|impression|full)"))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CeBlock {
    pub micro: Prf,
    /// Mean of the per-class F1 values.
    pub macro_f1: f64,
    pub per_class: [Prf; NUM_CONDITIONS],
}

pub fn ce_metrics(reports: &[Report], gold: &[LabelVector], section: Section) -> Result<CeBlock> {
    let pred: Vec<LabelVector> = reports
        .iter()
        .map(|r| extract_labels(&section.sentences(r)))
        .collect();
    let micro = micro_confusion(&pred, gold)?.prf();
    let per_class = per_class_confusion(&pred, gold)?.map(|c| c.prf());
    let macro_f1 = per_class.iter().map(|p| p.f1).sum::<f64>() / NUM_CONDITIONS as f64;
    Ok(CeBlock {
        micro,
        macro_f1,
        per_class,
    })
}

fn ngrams(words: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if words.len() >= n {
        for g in words.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU with uniform weights over orders `1..=max_n`.
pub fn bleu(hyps: &[Vec<String>], refs: &[Vec<String>], max_n: usize) -> Result<f64> {
    if hyps.is_empty() {
        return Err(Error::Usage("BLEU over an empty corpus".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Pairing {
            pred: hyps.len(),
            gold: refs.len(),
        });
    }
    if !(1..=4).contains(&max_n) {
        return Err(Error::Usage(format!("BLEU order {max_n} outside 1..=4")));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let rc = ngrams(r, n);
            for (g, c) in ngrams(h, n) {
                matched[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    if matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / max_n as f64;
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * log_p.exp())
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

pub fn rouge_l_pair(hyp: &[String], reference: &[String]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return if hyp.is_empty() && reference.is_empty() {
            1.0
        } else {
            0.0
        };
    }
    let l = lcs(hyp, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / hyp.len() as f64;
    let r = l / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Mean pairwise ROUGE-L F (beta = 1).
pub fn rouge_l(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::Pairing {
            pred: hyps.len(),
            gold: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(Error::Usage("ROUGE-L over an empty corpus".into()));
    }
    Ok(hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| rouge_l_pair(h, r))
        .sum::<f64>()
        / hyps.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SectionMetrics {
    pub section: Section,
    pub ce: CeBlock,
    pub bleu1: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub studies: usize,
    pub sections: Vec<SectionMetrics>,
}

impl MetricsReport {
    pub fn section(&self, s: Section) -> &SectionMetrics {
        self.sections
            .iter()
            .find(|m| m.section == s)
            .expect("all sections present")
    }

    pub fn f1(&self, s: Section) -> f64 {
        self.section(s).ce.micro.f1
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("section,metric,value\n");
        for m in &self.sections {
            let rows = [
                ("micro_p", m.ce.micro.p),
                ("micro_r", m.ce.micro.r),
                ("micro_f1", m.ce.micro.f1),
                ("macro_f1", m.ce.macro_f1),
                ("bleu1", m.bleu1),
                ("bleu4", m.bleu4),
                ("rouge_l", m.rouge_l),
            ];
            for (k, v) in rows {
                writeln!(out, "{},{k},{v:.6}", m.section.name()).expect("string write");
            }
        }
        writeln!(out, "all,studies,{}", self.studies).expect("string write");
        out
    }

    pub fn per_class_csv(&self, s: Section) -> String {
        let mut out = String::from("condition,P,R,F1\n");
        for (name, p) in CONDITIONS.iter().zip(&self.section(s).ce.per_class) {
            writeln!(out, "{name},{:.6},{:.6},{:.6}", p.p, p.r, p.f1).expect("string write");
        }
        out
    }
}

/// Metrics of `generated` against the gold reports and labels of `records`.
pub fn score_reports(generated: &[Report], records: &[StudyRecord]) -> Result<MetricsReport> {
    if generated.len() != records.len() {
        return Err(Error::Pairing {
            pred: generated.len(),
            gold: records.len(),
        });
    }
    let gold: Vec<LabelVector> = records.iter().map(|r| r.labels).collect();
    let sections = Section::ALL
        .into_iter()
        .map(|s| {
            let hyps: Vec<Vec<String>> = generated.iter().map(|r| s.words(r)).collect();
            let refs: Vec<Vec<String>> = records.iter().map(|r| s.words(&r.report)).collect();
            Ok(SectionMetrics {
                section: s,
                ce: ce_metrics(generated, &gold, s)?,
                bleu1: bleu(&hyps, &refs, 1)?,
                bleu4: bleu(&hyps, &refs, 4)?,
                rouge_l: rouge_l(&hyps, &refs)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport {
        studies: records.len(),
        sections,
    })
}

/// Studies decoded together in one lockstep batch.
pub const EVAL_CHUNK: usize = 16;

/// Best-of-N generations for every record, in record order.
pub fn generate_corpus(
    model: &Model,
    policy: &dyn StepPolicy,
    value: Option<&dyn ValueScorer>,
    records: &[StudyRecord],
    cfg: &DecodeConfig,
) -> Result<Vec<BestOfN>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(EVAL_CHUNK) {
        let views: Vec<&[Vec<f64>]> = chunk.iter().map(|r| r.views.as_slice()).collect();
        let packed = model.pack(&views)?;
        let seeds: Vec<u64> = chunk.iter().map(|r| hash_str(&r.study_id)).collect();
        out.extend(generate_reports(policy, value, &packed, &seeds, cfg)?);
    }
    Ok(out)
}

pub struct Evaluation {
    pub metrics: MetricsReport,
    pub generations: Vec<BestOfN>,
    pub reports: Vec<Report>,
}

/// Generates a report for every record with `model` and scores the corpus.
pub fn evaluate_corpus(
    model: &Model,
    records: &[StudyRecord],
    vocab: &Vocabulary,
    cfg: &DecodeConfig,
) -> Result<Evaluation> {
    let value: Option<&dyn ValueScorer> = if cfg.n > 1 { Some(model) } else { None };
    let generations = generate_corpus(model, model, value, records, cfg)?;
    let reports: Vec<Report> = generations
        .iter()
        .map(|g| decode_sequence(&g.best().tokens, vocab).0)
        .collect();
    let metrics = score_reports(&reports, records)?;
    Ok(Evaluation {
        metrics,
        generations,
        reports,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub k: usize,
    pub t_find: f64,
    pub t_imp: f64,
    pub findings_f1: f64,
    pub impression_f1: f64,
}

/// Forcing-length sweep without best-of-N.
pub fn sweep_forcing(
    model: &Model,
    records: &[StudyRecord],
    vocab: &Vocabulary,
    ks: &[usize],
    cfg: &DecodeConfig,
) -> Result<Vec<SweepRow>> {
    ks.iter()
        .map(|&k| {
            let c = DecodeConfig {
                k,
                n: 1,
                force: true,
                ..cfg.clone()
            };
            let m = evaluate_corpus(model, records, vocab, &c)?.metrics;
            Ok(SweepRow {
                k,
                t_find: c.t_find,
                t_imp: c.t_imp,
                findings_f1: m.f1(Section::Findings),
                impression_f1: m.f1(Section::Impression),
            })
        })
        .collect()
}

/// Default `(T_find, T_imp)` grid for the temperature sweep.
pub const TEMPERATURE_GRID: [(f64, f64); 4] = [(1.2, 0.8), (1.0, 1.0), (1.0, 0.8), (1.0, 0.5)];

pub fn sweep_temperature(
    model: &Model,
    records: &[StudyRecord],
    vocab: &Vocabulary,
    grid: &[(f64, f64)],
    cfg: &DecodeConfig,
) -> Result<Vec<SweepRow>> {
    grid.iter()
        .map(|&(t_find, t_imp)| {
            let c = DecodeConfig {
                t_find,
                t_imp,
                ..cfg.clone()
            };
            let m = evaluate_corpus(model, records, vocab, &c)?.metrics;
            Ok(SweepRow {
                k: c.k,
                t_find,
                t_imp,
                findings_f1: m.f1(Section::Findings),
                impression_f1: m.f1(Section::Impression),
            })
        })
        .collect()
}

pub fn forcing_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("k,findings_f1,impression_f1\n");
    for r in rows {
        writeln!(out, "{},{:.6},{:.6}", r.k, r.findings_f1, r.impression_f1).expect("string write");
    }
    out
}

pub fn temperature_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("t_find,t_imp,findings_f1,impression_f1\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{:.6},{:.6}",
            r.t_find, r.t_imp, r.findings_f1, r.impression_f1
        )
        .expect("string write");
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: &'static str,
    pub metrics: MetricsReport,
}

pub const ABLATION_ROWS: [&str; 4] = ["SL", "+RL", "+FG", "+BoN"];

/// SL: pretrained, free decoding. +RL: fine-tuned, free decoding.
/// +FG: fine-tuned with forcing. +BoN: forcing plus best-of-N.
pub fn ablate(
    sl: &Model,
    rl: &Model,
    records: &[StudyRecord],
    vocab: &Vocabulary,
    cfg: &DecodeConfig,
) -> Result<Vec<AblationRow>> {
    let free = DecodeConfig {
        force: false,
        n: 1,
        ..cfg.clone()
    };
    let forced = DecodeConfig {
        force: true,
        n: 1,
        ..cfg.clone()
    };
    let bon = DecodeConfig {
        force: true,
        n: cfg.n.max(2),
        ..cfg.clone()
    };
    let runs: [(&Model, &DecodeConfig); 4] = [(sl, &free), (rl, &free), (rl, &forced), (rl, &bon)];
    ABLATION_ROWS
        .iter()
        .zip(runs)
        .map(|(&name, (m, c))| {
            Ok(AblationRow {
                name,
                metrics: evaluate_corpus(m, records, vocab, c)?.metrics,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("row,findings_f1,impression_f1,findings_bleu4,impression_rouge_l\n");
    for r in rows {
        let m = &r.metrics;
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6}",
            r.name,
            m.f1(Section::Findings),
            m.f1(Section::Impression),
            m.section(Section::Findings).bleu4,
            m.section(Section::Impression).rouge_l
        )
        .expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::words;

    fn w(s: &str) -> Vec<String> {
        words(s)
    }

    #[test]
    fn bleu_examples() {
        assert_eq!(bleu(&[w("a b c d e")], &[w("a b c d e")], 4).unwrap(), 1.0);
        let b1 = bleu(&[w("a b c")], &[w("a b d")], 1).unwrap();
        assert!((b1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(bleu(&[w("a b c d")], &[w("d c b a")], 4).unwrap(), 0.0);
        assert!(bleu(&[], &[], 1).is_err());
    }

    #[test]
    fn bleu_brevity_penalty() {
        let b = bleu(&[w("a b")], &[w("a b c d")], 1).unwrap();
        assert!((b - (1.0f64 - 2.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l(&[w("x y z")], &[w("x y z")]).unwrap(), 1.0);
        let f = rouge_l(&[w("a b c d")], &[w("a c d")]).unwrap();
        assert!((f - 6.0 / 7.0).abs() < 1e-12);
        assert_eq!(rouge_l(&[w("a b")], &[w("c d")]).unwrap(), 0.0);
        assert_eq!(rouge_l_pair(&[], &[]), 1.0);
        assert_eq!(rouge_l_pair(&[], &w("a")), 0.0);
    }

    #[test]
    fn section_names_parse() {
        for s in Section::ALL {
            assert_eq!(s.name().parse::<Section>().unwrap(), s);
        }
        assert!(matches!("summary".parse::<Section>(), Err(Error::Usage(_))));
    }
}
