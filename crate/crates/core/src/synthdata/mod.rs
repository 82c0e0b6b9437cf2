//! Seeded multi-view study generator with known latent condition labels.
//!
//! Each view is an `N x D` grid `sum_c y_c * W_c + noise`, with one fixed
//! seeded projection `W_c` per condition. Reports are rendered from templates
//! that the bundled rule labeler reads back exactly.

pub mod labels;
pub mod templates;

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use labels::{
    condition_index, LabelVector, CONDITIONS, NO_FINDING, NUM_CONDITIONS, NUM_PATHOLOGIES,
};

use crate::error::{Error, Result};
use crate::tokenizer::{words, Report, PERIOD};

pub const MAX_VIEWS: usize = 3;

/// Pathology prevalences (label order, "No Finding" excluded).
pub const DEFAULT_PREVALENCE: [f64; NUM_PATHOLOGIES] = [
    0.092, 0.391, 0.379, 0.067, 0.180, 0.052, 0.046, 0.244, 0.019, 0.296, 0.038, 0.058, 0.332,
];

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Visual tokens per view (N).
    pub tokens_per_view: usize,
    /// Feature dimension per visual token (D).
    pub feature_dim: usize,
    pub prevalence: [f64; NUM_PATHOLOGIES],
    pub sigma_view: f64,
    pub template_version: u32,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            n_train: 2000,
            n_val: 200,
            n_test: 300,
            tokens_per_view: 4,
            feature_dim: 16,
            prevalence: DEFAULT_PREVALENCE,
            sigma_view: 3.5,
            template_version: templates::TEMPLATE_VERSION,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::Config("every split needs at least one study".into()));
        }
        if self.tokens_per_view == 0 || self.feature_dim == 0 {
            return Err(Error::Config(
                "tokens_per_view and feature_dim must be >= 1".into(),
            ));
        }
        if let Some(p) = self.prevalence.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return Err(Error::Config(format!("prevalence {p} outside (0, 1)")));
        }
        if !(self.sigma_view >= 0.0 && self.sigma_view.is_finite()) {
            return Err(Error::Config("sigma_view must be finite and >= 0".into()));
        }
        if self.template_version != templates::TEMPLATE_VERSION {
            return Err(Error::Config(format!(
                "template version {} not available (have {})",
                self.template_version,
                templates::TEMPLATE_VERSION
            )));
        }
        Ok(())
    }

    fn grid_len(&self) -> usize {
        self.tokens_per_view * self.feature_dim
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyRecord {
    pub study_id: String,
    pub labels: LabelVector,
    /// Each view is a row-major `tokens_per_view x feature_dim` grid.
    pub views: Vec<Vec<f64>>,
    pub tokens_per_view: usize,
    pub feature_dim: usize,
    pub report: Report,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<StudyRecord>,
    pub val: Vec<StudyRecord>,
    pub test: Vec<StudyRecord>,
}

/// The per-condition projections `W_c`, one `N x D` grid each.
pub fn projections(cfg: &CorpusConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..NUM_CONDITIONS)
        .map(|_| {
            (0..cfg.grid_len())
                .map(|_| normal.sample(&mut rng))
                .collect()
        })
        .collect()
}

pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let w = projections(cfg);
    let mut index = 0u64;
    let mut split = |name: &str, n: usize| -> Vec<StudyRecord> {
        (0..n)
            .map(|i| {
                index += 1;
                generate_study(cfg, &w, format!("{name}-{i:05}"), index)
            })
            .collect()
    };
    Ok(Corpus {
        train: split("train", cfg.n_train),
        val: split("val", cfg.n_val),
        test: split("test", cfg.n_test),
    })
}

fn generate_study(
    cfg: &CorpusConfig,
    w: &[Vec<f64>],
    study_id: String,
    stream: u64,
) -> StudyRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let mut p = [false; NUM_PATHOLOGIES];
    for (flag, &prev) in p.iter_mut().zip(&cfg.prevalence) {
        *flag = rng.random::<f64>() < prev;
    }
    let labels = LabelVector::from_pathologies(p);
    let n_views = rng.random_range(1..=MAX_VIEWS);
    let views = (0..n_views)
        .map(|_| render_view(cfg, w, &labels, &mut rng))
        .collect();
    let report = render_report(&labels, &mut rng);
    StudyRecord {
        study_id,
        labels,
        views,
        tokens_per_view: cfg.tokens_per_view,
        feature_dim: cfg.feature_dim,
        report,
    }
}

fn render_view<R: Rng>(
    cfg: &CorpusConfig,
    w: &[Vec<f64>],
    labels: &LabelVector,
    rng: &mut R,
) -> Vec<f64> {
    let mut grid = vec![0.0; cfg.grid_len()];
    for c in labels.positives() {
        for (g, x) in grid.iter_mut().zip(&w[c]) {
            *g += x;
        }
    }
    if cfg.sigma_view > 0.0 {
        let noise = Normal::new(0.0, cfg.sigma_view).expect("finite sigma");
        for g in &mut grid {
            *g += noise.sample(rng);
        }
    }
    grid
}

/// Renders a report whose findings and impression both carry `labels`.
pub fn render_report<R: Rng + ?Sized>(labels: &LabelVector, rng: &mut R) -> Report {
    let positives = labels.pathology_positives();
    let mut findings: Vec<&str> = positives
        .iter()
        .map(|&c| *templates::FINDINGS[c].choose(rng).expect("templates"))
        .collect();
    if positives.is_empty() {
        findings.push(templates::NORMAL_FINDINGS.choose(rng).expect("templates"));
    }
    let eligible: Vec<&str> = templates::DISTRACTORS
        .iter()
        .filter(|d| d.requires_absent.iter().all(|&c| !labels.get(c)))
        .map(|d| d.text)
        .collect();
    let n_distract = rng
        .random_range(0..=templates::MAX_DISTRACTORS)
        .min(eligible.len());
    findings.extend(eligible.choose_multiple(rng, n_distract));
    findings.shuffle(rng);

    let mut impression = Vec::new();
    if positives.is_empty() {
        impression.extend(words(templates::NORMAL_IMPRESSION));
        impression.push(PERIOD.to_string());
    }
    for &c in &positives {
        impression.extend(words(templates::IMPRESSIONS[c]));
        impression.push(PERIOD.to_string());
    }
    Report {
        findings: findings.iter().map(|s| words(s)).collect(),
        impression,
    }
}

#[derive(Serialize, Deserialize)]
struct StudyLine {
    study_id: String,
    labels: Vec<u8>,
    views: Vec<Vec<Vec<f64>>>,
    findings: Vec<String>,
    impression: String,
}

impl StudyRecord {
    pub fn to_json_line(&self) -> Result<String> {
        let line = StudyLine {
            study_id: self.study_id.clone(),
            labels: self.labels.to_ints().to_vec(),
            views: self
                .views
                .iter()
                .map(|v| v.chunks(self.feature_dim).map(<[f64]>::to_vec).collect())
                .collect(),
            findings: self.report.findings_text(),
            impression: self.report.impression_text(),
        };
        Ok(serde_json::to_string(&line)?)
    }

    pub fn from_json_line(s: &str) -> Result<Self> {
        let line: StudyLine = serde_json::from_str(s)?;
        let labels = LabelVector::from_ints(&line.labels)?;
        if line.views.is_empty() || line.views.len() > MAX_VIEWS {
            return Err(Error::Data(format!(
                "{}: {} views, expected 1..={MAX_VIEWS}",
                line.study_id,
                line.views.len()
            )));
        }
        let n = line.views[0].len();
        let d = line.views[0].first().map_or(0, Vec::len);
        if n == 0 || d == 0 {
            return Err(Error::Data(format!("{}: empty view grid", line.study_id)));
        }
        let mut views = Vec::with_capacity(line.views.len());
        for v in &line.views {
            if v.len() != n || v.iter().any(|row| row.len() != d) {
                return Err(Error::Data(format!("{}: ragged view grids", line.study_id)));
            }
            views.push(v.concat());
        }
        let report = Report {
            findings: line.findings.iter().map(|s| words(s)).collect(),
            impression: words(&line.impression),
        };
        Ok(Self {
            study_id: line.study_id,
            labels,
            views,
            tokens_per_view: n,
            feature_dim: d,
            report,
        })
    }
}

pub fn write_jsonl(path: &Path, studies: &[StudyRecord]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for s in studies {
        writeln!(w, "{}", s.to_json_line()?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<StudyRecord>> {
    let r = BufReader::new(
        std::fs::File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?,
    );
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(StudyRecord::from_json_line(&line)?);
        }
    }
    Ok(out)
}
