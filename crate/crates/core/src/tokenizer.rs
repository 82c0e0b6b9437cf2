//! Word-level vocabulary with section control tokens.
//!
//! Encoded layout:
//! `<bos> s1 <next> s2 <next> ... sm <impression> impression-words <eos>`.
//! The last findings sentence is closed by `<impression>`, not `<next>`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const NEXT: usize = 3;
pub const IMPRESSION: usize = 4;
pub const UNK: usize = 5;

pub const RESERVED: [&str; 6] = ["<pad>", "<bos>", "<eos>", "<next>", "<impression>", "<unk>"];

/// Sentence separator inside the impression span.
pub const PERIOD: &str = ".";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from whitespace-tokenised, lowercased text. Words are ordered by
    /// descending frequency, ties broken lexicographically.
    pub fn build<'a, I>(texts: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for w in text.split_whitespace() {
                let w = w.to_lowercase();
                if !RESERVED.contains(&w.as_str()) {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .collect();
        Self::from_tokens(tokens).expect("reserved prefix present")
    }

    pub fn from_reports<'a>(reports: impl IntoIterator<Item = &'a Report>) -> Self {
        let texts: Vec<String> = reports.into_iter().map(Report::full_text).collect();
        Self::build(texts.iter().map(String::as_str))
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Data(format!("vocabulary line {i} must be {r}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `word`, or [`UNK`] when absent.
    pub fn id(&self, word: &str) -> usize {
        match self.index.get(word) {
            Some(&i) => i,
            None => self.index.get(&word.to_lowercase()).copied().unwrap_or(UNK),
        }
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn is_control(id: usize) -> bool {
        id < UNK
    }

    /// One token per line; line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            let _ = writeln!(s, "{t}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// A two-section report: findings sentences, then the impression.
///
/// Impression words may contain [`PERIOD`] tokens separating its sentences.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub findings: Vec<Vec<String>>,
    pub impression: Vec<String>,
}

impl Report {
    pub fn new(findings: &[&str], impression: &str) -> Self {
        Self {
            findings: findings.iter().map(|s| words(s)).collect(),
            impression: words(impression),
        }
    }

    pub fn findings_text(&self) -> Vec<String> {
        self.findings.iter().map(|s| s.join(" ")).collect()
    }

    pub fn impression_text(&self) -> String {
        self.impression.join(" ")
    }

    /// Findings words followed by impression words.
    pub fn full_text(&self) -> String {
        let mut parts = self.findings_text();
        parts.push(self.impression_text());
        parts.join(" ")
    }

    pub fn findings_words(&self) -> Vec<String> {
        self.findings.concat()
    }

    /// Impression split on [`PERIOD`]; empty sentences are dropped.
    pub fn impression_sentences(&self) -> Vec<Vec<String>> {
        self.impression
            .split(|w| w == PERIOD)
            .filter(|s| !s.is_empty())
            .map(<[String]>::to_vec)
            .collect()
    }

    /// Findings sentences followed by impression sentences.
    pub fn all_sentences(&self) -> Vec<Vec<String>> {
        let mut s = self.findings.clone();
        s.extend(self.impression_sentences());
        s
    }
}

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

/// Token ids, optionally carrying section structure through control tokens.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct TokenSequence(pub Vec<usize>);

impl TokenSequence {
    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self, id: usize) -> usize {
        self.0.iter().filter(|&&t| t == id).count()
    }

    pub fn position(&self, id: usize) -> Option<usize> {
        self.0.iter().position(|&t| t == id)
    }

    /// Renders ids as space-separated tokens, control tokens included.
    pub fn render(&self, v: &Vocabulary) -> String {
        self.0
            .iter()
            .map(|&i| v.token(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn encode_report(r: &Report, v: &Vocabulary) -> Result<TokenSequence> {
    if r.findings.is_empty() || r.findings.iter().any(Vec::is_empty) {
        return Err(Error::Structure(
            "findings must contain non-empty sentences".into(),
        ));
    }
    if r.impression.is_empty() {
        return Err(Error::Structure("impression is empty".into()));
    }
    let mut ids = vec![BOS];
    for (i, sentence) in r.findings.iter().enumerate() {
        if i > 0 {
            ids.push(NEXT);
        }
        ids.extend(sentence.iter().map(|w| v.id(w)));
    }
    ids.push(IMPRESSION);
    ids.extend(r.impression.iter().map(|w| v.id(w)));
    ids.push(EOS);
    Ok(TokenSequence(ids))
}

/// Structural problems found while decoding a (possibly generated) sequence.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Diagnostics {
    pub missing_bos: bool,
    pub missing_impression: bool,
    pub missing_eos: bool,
    pub empty_findings: bool,
    pub empty_impression: bool,
    /// Empty findings sentences (consecutive `<next>`) that were dropped.
    pub empty_sentences: usize,
    /// Control tokens met where they are not allowed; they are skipped.
    pub stray_control_tokens: usize,
    pub tokens_after_eos: usize,
    pub unknown_ids: usize,
}

impl Diagnostics {
    pub fn is_clean(&self) -> bool {
        *self == Self::default()
    }
}

/// Inverse of [`encode_report`], total over arbitrary id lists.
///
/// A `<next>` that closes a sentence right before `<impression>` (the shape
/// produced by forced decoding) is not a malformation; a `<next>` that closes
/// nothing is counted as a dropped empty sentence.
pub fn decode_sequence(t: &TokenSequence, v: &Vocabulary) -> (Report, Diagnostics) {
    let mut diag = Diagnostics::default();
    let mut report = Report::default();
    let ids = t.ids();
    let mut pos = 0;
    if ids.first() == Some(&BOS) {
        pos = 1;
    } else {
        diag.missing_bos = true;
    }

    let word = |id: usize, diag: &mut Diagnostics| -> String {
        match v.token(id) {
            Some(w) => w.to_string(),
            None => {
                diag.unknown_ids += 1;
                RESERVED[UNK].to_string()
            }
        }
    };

    let mut sentence: Vec<String> = Vec::new();
    let mut in_impression = false;
    let mut saw_eos = false;
    while pos < ids.len() {
        let id = ids[pos];
        pos += 1;
        if saw_eos {
            diag.tokens_after_eos += 1;
            continue;
        }
        match id {
            PAD => {}
            EOS => saw_eos = true,
            IMPRESSION if !in_impression => {
                if !sentence.is_empty() {
                    report.findings.push(std::mem::take(&mut sentence));
                }
                in_impression = true;
            }
            NEXT if !in_impression => {
                if sentence.is_empty() {
                    diag.empty_sentences += 1;
                } else {
                    report.findings.push(std::mem::take(&mut sentence));
                }
            }
            BOS | NEXT | IMPRESSION => diag.stray_control_tokens += 1,
            _ if in_impression => report.impression.push(word(id, &mut diag)),
            _ => sentence.push(word(id, &mut diag)),
        }
    }
    if !in_impression {
        diag.missing_impression = true;
        if !sentence.is_empty() {
            report.findings.push(sentence);
        }
    }
    diag.missing_eos = !saw_eos;
    diag.empty_findings = report.findings.is_empty();
    diag.empty_impression = report.impression.is_empty();
    (report, diag)
}
