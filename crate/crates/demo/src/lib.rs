//! WebAssembly bindings behind `www/index.html`.
//!
//! Every export returns JSON text so the page needs no glue beyond
//! `JSON.parse`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reportgen::decode::{check_structure, generate_candidate, DecodeConfig};
use reportgen::model::{nucleus_probs, Model, ModelConfig};
use reportgen::pretrain::{run_pretraining, PretrainConfig};
use reportgen::reward::{extract_labels, extract_labels_text, impression_reward, micro_f1};
use reportgen::synthdata::{
    condition_index, generate_corpus, CorpusConfig, LabelVector, StudyRecord, CONDITIONS,
    NO_FINDING,
};
use reportgen::tokenizer::{decode_sequence, Vocabulary};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data serializes")
}

#[derive(Serialize)]
struct Kept {
    token: usize,
    prob: f64,
}

/// Nucleus of a logit row after temperature and top-p.
///
/// `logits` is comma or whitespace separated.
#[wasm_bindgen]
pub fn nucleus(logits: &str, temperature: f64, top_p: f64) -> Result<String, String> {
    let row: Vec<f64> = logits
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("not a number: {s}")))
        .collect::<Result<_, _>>()?;
    if row.is_empty() {
        return Err("no logits given".into());
    }
    if !(temperature > 0.0) || !(top_p > 0.0 && top_p <= 1.0) {
        return Err("temperature must be > 0 and top-p in (0, 1]".into());
    }
    let kept = nucleus_probs(&row, temperature, top_p, &[]).map_err(|e| e.to_string())?;
    Ok(json(
        &kept
            .into_iter()
            .map(|(token, prob)| Kept { token, prob })
            .collect::<Vec<_>>(),
    ))
}

fn names(y: &LabelVector) -> Vec<&'static str> {
    y.positives().into_iter().map(|i| CONDITIONS[i]).collect()
}

fn parse_gold(gold: &str) -> Result<LabelVector, String> {
    let mut idx = Vec::new();
    for name in gold.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let i = condition_index(name).ok_or_else(|| format!("unknown condition: {name}"))?;
        if i != NO_FINDING {
            idx.push(i);
        }
    }
    Ok(LabelVector::from_positives(&idx))
}

#[derive(Serialize)]
struct Labeled {
    labels: Vec<&'static str>,
    gold: Vec<&'static str>,
    reward: f64,
}

/// Runs the rule labeler over `impression` and scores it against the
/// comma-separated `gold` condition names (empty means No Finding).
#[wasm_bindgen]
pub fn label_impression(impression: &str, gold: &str) -> Result<String, String> {
    let pred = extract_labels_text(impression);
    let gold = parse_gold(gold)?;
    let reward = micro_f1(&[pred], &[gold]).map_err(|e| e.to_string())?.f1;
    Ok(json(&Labeled {
        labels: names(&pred),
        gold: names(&gold),
        reward,
    }))
}

#[wasm_bindgen]
pub fn conditions() -> String {
    json(&CONDITIONS)
}

#[derive(Serialize)]
struct StudyView {
    id: String,
    views: usize,
    labels: Vec<&'static str>,
    findings: Vec<String>,
    impression: String,
}

#[derive(Serialize)]
struct Generated {
    tokens: Vec<String>,
    findings: Vec<String>,
    impression: String,
    predicted: Vec<&'static str>,
    reward: f64,
    structure: Option<String>,
    truncated: bool,
    replaced: usize,
}

/// A small synthetic corpus and a briefly trained decoder.
#[wasm_bindgen]
pub struct Demo {
    studies: Vec<StudyRecord>,
    vocab: Vocabulary,
    model: Model,
}

#[wasm_bindgen]
impl Demo {
    /// Builds the corpus and trains for `epochs` passes.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, epochs: usize) -> Result<Demo, String> {
        let err = |e: reportgen::Error| e.to_string();
        let corpus = generate_corpus(&CorpusConfig {
            seed,
            n_train: 160,
            n_val: 16,
            n_test: 12,
            ..CorpusConfig::default()
        })
        .map_err(err)?;
        let vocab = Vocabulary::from_reports(corpus.train.iter().map(|s| &s.report));
        let cfg = ModelConfig {
            d_model: 32,
            heads: 2,
            policy_layers: 1,
            value_layers: 1,
            max_len: 96,
            ffn_mult: 2,
            ..ModelConfig::desk(
                vocab.len(),
                corpus.train[0].tokens_per_view,
                corpus.train[0].feature_dim,
            )
        };
        let mut model = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(err)?;
        if epochs > 0 {
            let pc = PretrainConfig {
                epochs,
                lr: 3e-3,
                ..PretrainConfig::default()
            };
            model = run_pretraining(
                model,
                &corpus.train,
                &corpus.val,
                &vocab,
                &pc,
                false,
                |_| {},
            )
            .map_err(err)?
            .best;
        }
        Ok(Demo {
            studies: corpus.test,
            vocab,
            model,
        })
    }

    #[wasm_bindgen(getter)]
    pub fn studies(&self) -> usize {
        self.studies.len()
    }

    pub fn study(&self, i: usize) -> Result<String, String> {
        let s = self.studies.get(i).ok_or("study index out of range")?;
        Ok(json(&StudyView {
            id: s.study_id.clone(),
            views: s.views.len(),
            labels: names(&s.labels),
            findings: s.report.findings_text(),
            impression: s.report.impression_text(),
        }))
    }

    /// Decodes one report for study `i`. With `force`, findings are held open
    /// until `k` sentence boundaries exist.
    #[allow(clippy::too_many_arguments)]
    pub fn generate(
        &self,
        i: usize,
        k: usize,
        force: bool,
        t_find: f64,
        t_imp: f64,
        top_p: f64,
        seed: u64,
    ) -> Result<String, String> {
        let s = self.studies.get(i).ok_or("study index out of range")?;
        let cfg = DecodeConfig {
            k,
            n: 1,
            t_find,
            t_imp,
            top_p,
            max_len: self.model.cfg.max_len,
            force,
            seed,
        };
        cfg.validate().map_err(|e| e.to_string())?;
        let packed = self
            .model
            .pack(&[s.views.as_slice()])
            .map_err(|e| e.to_string())?;
        let g = generate_candidate(&self.model, &packed, &cfg, seed).map_err(|e| e.to_string())?;
        let (report, _) = decode_sequence(&g.tokens, &self.vocab);
        let predicted = extract_labels(&report.impression_sentences());
        let reward = impression_reward(&g.tokens, &self.vocab, &s.labels);
        Ok(json(&Generated {
            tokens: g
                .tokens
                .ids()
                .iter()
                .map(|&t| self.vocab.token(t).unwrap_or("<unk>").to_string())
                .collect(),
            findings: report.findings_text(),
            impression: report.impression_text(),
            predicted: names(&predicted),
            reward,
            structure: if force {
                check_structure(&g.tokens, k).err()
            } else {
                None
            },
            truncated: g.truncated,
            replaced: g.replaced,
        }))
    }
}
