use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::synthdata::{condition_index, LabelVector, NUM_PATHOLOGIES};
use crate::tokenizer::words;

const BUNDLED: &str = include_str!("../../data/rules.tsv");

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rule {
    pub condition: usize,
    pub patterns: Vec<Vec<String>>,
    pub cues: Vec<Vec<String>>,
}

/// Keyword rules for the 13 pathologies; "No Finding" is derived.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RuleTable {
    rules: Vec<Rule>,
}

fn phrase_list(field: &str) -> Vec<Vec<String>> {
    field
        .split('|')
        .map(words)
        .filter(|p| !p.is_empty())
        .collect()
}

impl RuleTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut rules = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::Data(format!(
                    "rule line {}: expected 3 tab-separated fields",
                    n + 1
                )));
            }
            let condition = condition_index(cols[0].trim())
                .filter(|&c| c < NUM_PATHOLOGIES)
                .ok_or_else(|| {
                    Error::Data(format!(
                        "rule line {}: unknown condition {:?}",
                        n + 1,
                        cols[0]
                    ))
                })?;
            let patterns = phrase_list(cols[1]);
            if patterns.is_empty() {
                return Err(Error::Data(format!("rule line {}: no patterns", n + 1)));
            }
            rules.push(Rule {
                condition,
                patterns,
                cues: phrase_list(cols[2]),
            });
        }
        Ok(Self { rules })
    }

    pub fn bundled() -> &'static RuleTable {
        static TABLE: OnceLock<RuleTable> = OnceLock::new();
        TABLE.get_or_init(|| RuleTable::parse(BUNDLED).expect("bundled rule table parses"))
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn label(&self, sentences: &[Vec<String>]) -> LabelVector {
        let mut p = [false; NUM_PATHOLOGIES];
        for rule in &self.rules {
            if !p[rule.condition] && sentences.iter().any(|s| rule.fires(s)) {
                p[rule.condition] = true;
            }
        }
        LabelVector::from_pathologies(p)
    }
}

fn occurrences<'a>(
    sentence: &'a [String],
    phrase: &'a [String],
) -> impl Iterator<Item = usize> + 'a {
    sentence
        .windows(phrase.len())
        .enumerate()
        .filter(move |(_, w)| *w == phrase)
        .map(|(i, _)| i)
}

impl Rule {
    /// True when some pattern occurs with no cue ending at or before its start.
    pub fn fires(&self, sentence: &[String]) -> bool {
        let first_cue_end = self
            .cues
            .iter()
            .filter_map(|c| occurrences(sentence, c).next().map(|i| i + c.len()))
            .min();
        self.patterns.iter().any(|p| {
            occurrences(sentence, p).any(|start| first_cue_end.is_none_or(|end| end > start))
        })
    }
}
