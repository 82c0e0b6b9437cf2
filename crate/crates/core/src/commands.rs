//! The command implementations behind the `reportgen` binary.
//!
//! A checkpoint directory holds `model.ckpt`, `vocab.txt` and `config.txt`;
//! a data directory holds `train.jsonl`, `val.jsonl`, `test.jsonl`,
//! `vocab.txt` and `config.txt`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::decode::{generate_report, hash_str, DecodeConfig, ValueScorer};
use crate::error::{Error, Result};
use crate::eval::{
    ablate, ablation_csv, evaluate_corpus, forcing_csv, sweep_forcing, sweep_temperature,
    temperature_csv, Section, TEMPERATURE_GRID,
};
use crate::model::{load_checkpoint, save_checkpoint, Model};
use crate::ppo::{iteration_csv_row, run_ppo, PPO_LOG_HEADER};
use crate::pretrain::{epoch_csv_row, run_pretraining, PRETRAIN_LOG_HEADER};
use crate::synthdata::{generate_corpus, read_jsonl, write_jsonl, StudyRecord};
use crate::tokenizer::{decode_sequence, Vocabulary};

pub const MODEL_FILE: &str = "model.ckpt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CONFIG_FILE: &str = "config.txt";
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

fn split_path(data: &Path, split: &str) -> PathBuf {
    data.join(format!("{split}.jsonl"))
}

/// Creates `out`, refusing to overwrite `marker` inside it unless `force`.
fn prepare_out(out: &Path, marker: &str, force: bool) -> Result<()> {
    let target = out.join(marker);
    if target.exists() && !force {
        return Err(Error::Exists(target));
    }
    std::fs::create_dir_all(out)?;
    Ok(())
}

/// `--config` if given, else the `config.txt` next to `fallback`, else defaults.
pub fn resolve_config(config: Option<&Path>, fallback: Option<&Path>) -> Result<RunConfig> {
    if let Some(p) = config {
        return RunConfig::load(p);
    }
    if let Some(dir) = fallback {
        let p = dir.join(CONFIG_FILE);
        if p.exists() {
            return RunConfig::load(&p);
        }
    }
    Ok(RunConfig::default())
}

pub fn gen_data(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    cfg.corpus.validate()?;
    prepare_out(out, "train.jsonl", force)?;
    let corpus = generate_corpus(&cfg.corpus)?;
    for (split, records) in SPLITS
        .iter()
        .zip([&corpus.train, &corpus.val, &corpus.test])
    {
        write_jsonl(&split_path(out, split), records)?;
    }
    Vocabulary::from_reports(corpus.train.iter().map(|s| &s.report)).save(&out.join(VOCAB_FILE))?;
    cfg.save(&out.join(CONFIG_FILE))
}

pub fn load_split(data: &Path, split: &str) -> Result<Vec<StudyRecord>> {
    if !SPLITS.contains(&split) {
        return Err(Error::Usage(format!(
            "unknown split {split:?} (train|val|test)"
        )));
    }
    read_jsonl(&split_path(data, split))
}

fn data_dir(flag: Option<&Path>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.data.clone())
        .ok_or_else(|| {
            Error::Usage("no data directory: pass --data or set `data` in the config".into())
        })
}

pub fn pretrain(cfg: &RunConfig, data: Option<&Path>, out: &Path, force: bool) -> Result<()> {
    let data = data_dir(data, cfg)?;
    let mut cfg = cfg.clone();
    cfg.data = Some(data.clone());
    cfg.validate()?;
    prepare_out(out, MODEL_FILE, force)?;
    let vocab = Vocabulary::load(&data.join(VOCAB_FILE))?;
    let train = load_split(&data, "train")?;
    let val = load_split(&data, "val")?;
    let first = train
        .first()
        .ok_or_else(|| Error::Data("empty training split".into()))?;
    let mc = cfg
        .model
        .model_config(vocab.len(), first.tokens_per_view, first.feature_dim);
    let model = Model::new(mc, &mut ChaCha8Rng::seed_from_u64(cfg.model.seed))?;
    cfg.save(&out.join(CONFIG_FILE))?;
    let log_path = out.join("pretrain_log.csv");
    let mut log = format!("{PRETRAIN_LOG_HEADER}\n");
    std::fs::write(&log_path, &log)?;
    let outcome = run_pretraining(
        model,
        &train,
        &val,
        &vocab,
        &cfg.pretrain,
        cfg.wall_clock,
        |e| {
            log.push_str(&epoch_csv_row(e));
            log.push('\n');
            let _ = std::fs::write(&log_path, &log);
        },
    )?;
    std::fs::write(&log_path, &log)?;
    save_checkpoint(&outcome.best, &out.join(MODEL_FILE))?;
    vocab.save(&out.join(VOCAB_FILE))
}

pub fn load_model_dir(dir: &Path) -> Result<(Model, Vocabulary)> {
    let ckpt = dir.join(MODEL_FILE);
    if !ckpt.exists() {
        return Err(Error::Checkpoint {
            path: ckpt,
            reason: "missing checkpoint".into(),
        });
    }
    Ok((
        load_checkpoint(&ckpt)?,
        Vocabulary::load(&dir.join(VOCAB_FILE))?,
    ))
}

pub fn ppo_train(cfg: &RunConfig, init: Option<&Path>, out: &Path, force: bool) -> Result<()> {
    let init = init.ok_or_else(|| {
        Error::StageOrder("ppo-train needs --init pointing at a pretraining checkpoint".into())
    })?;
    if !init.join(MODEL_FILE).exists() {
        return Err(Error::StageOrder(format!(
            "no {MODEL_FILE} in {}",
            init.display()
        )));
    }
    let mut cfg = cfg.clone();
    if cfg.data.is_none() {
        cfg.data = resolve_config(None, Some(init))?.data;
    }
    let data = data_dir(None, &cfg)?;
    cfg.validate()?;
    prepare_out(out, MODEL_FILE, force)?;
    let (model, vocab) = load_model_dir(init)?;
    let train = load_split(&data, "train")?;
    let val = load_split(&data, "val")?;
    cfg.save(&out.join(CONFIG_FILE))?;
    let log_path = out.join("ppo_log.csv");
    let mut log = format!("{PPO_LOG_HEADER}\n");
    std::fs::write(&log_path, &log)?;
    let (tuned, _) = run_ppo(model, &train, &val, &vocab, &cfg.ppo, |m| {
        log.push_str(&iteration_csv_row(m));
        log.push('\n');
        let _ = std::fs::write(&log_path, &log);
    })?;
    std::fs::write(&log_path, &log)?;
    save_checkpoint(&tuned, &out.join(MODEL_FILE))?;
    vocab.save(&out.join(VOCAB_FILE))
}

/// The decode settings clipped to the model context.
pub fn decode_for(model: &Model, cfg: &DecodeConfig) -> DecodeConfig {
    DecodeConfig {
        max_len: cfg.max_len.min(model.cfg.max_len),
        ..cfg.clone()
    }
}

/// Generates one report for `study_id`; returns printable text.
pub fn generate(
    checkpoint: &Path,
    data: &Path,
    study_id: &str,
    cfg: &DecodeConfig,
) -> Result<String> {
    let (model, vocab) = load_model_dir(checkpoint)?;
    let mut found = None;
    for split in SPLITS {
        if let Some(r) = load_split(data, split)?
            .into_iter()
            .find(|r| r.study_id == study_id)
        {
            found = Some(r);
            break;
        }
    }
    let study = found.ok_or_else(|| {
        Error::Data(format!(
            "study {study_id:?} not found in {}",
            data.display()
        ))
    })?;
    let dcfg = decode_for(&model, cfg);
    let value: Option<&dyn ValueScorer> = if dcfg.n > 1 { Some(&model) } else { None };
    let packed = model.pack(&[study.views.as_slice()])?;
    let res = generate_report(&model, value, &packed, &dcfg, hash_str(&study.study_id))?;
    let (report, diag) = decode_sequence(&res.best().tokens, &vocab);
    let mut s = String::new();
    writeln!(s, "study: {}", study.study_id).ok();
    writeln!(s, "findings: {}", report.findings_text().join(" . ")).ok();
    writeln!(s, "impression: {}", report.impression_text()).ok();
    writeln!(s, "chosen: {}", res.chosen).ok();
    for (j, c) in res.candidates.iter().enumerate() {
        let score = res
            .scores
            .get(j)
            .map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        writeln!(
            s,
            "candidate {j}: score {score} len {} replaced {} truncated {}",
            c.tokens.len(),
            c.replaced,
            c.truncated
        )
        .ok();
    }
    writeln!(s, "diagnostics: {diag:?}").ok();
    Ok(s)
}

pub fn evaluate(
    checkpoint: &Path,
    data: &Path,
    split: &str,
    cfg: &RunConfig,
    out: &Path,
) -> Result<String> {
    let (model, vocab) = load_model_dir(checkpoint)?;
    let records = load_split(data, split)?;
    std::fs::create_dir_all(out)?;
    let e = evaluate_corpus(&model, &records, &vocab, &decode_for(&model, &cfg.decode))?;
    let csv = e.metrics.to_csv();
    std::fs::write(out.join("metrics.csv"), &csv)?;
    for s in Section::ALL {
        std::fs::write(
            out.join(format!("per_class_{}.csv", s.name())),
            e.metrics.per_class_csv(s),
        )?;
    }
    cfg.save(&out.join(CONFIG_FILE))?;
    Ok(csv)
}

pub enum SweepAxis {
    K(Vec<usize>),
    Temperature(Vec<(f64, f64)>),
}

impl SweepAxis {
    /// `axis` is `k` or `temperature`; temperature values are `t_find:t_imp` pairs.
    pub fn parse(axis: &str, values: &[String]) -> Result<Self> {
        let bad = |v: &str| Error::Usage(format!("invalid sweep value {v:?}"));
        match axis {
            "k" => {
                if values.is_empty() {
                    return Err(Error::Usage("sweep --axis k needs --values".into()));
                }
                values
                    .iter()
                    .map(|v| v.parse().map_err(|_| bad(v)))
                    .collect::<Result<_>>()
                    .map(SweepAxis::K)
            }
            "temperature" if values.is_empty() => {
                Ok(SweepAxis::Temperature(TEMPERATURE_GRID.to_vec()))
            }
            "temperature" => values
                .iter()
                .map(|v| {
                    let (a, b) = v.split_once(':').ok_or_else(|| bad(v))?;
                    Ok((
                        a.parse().map_err(|_| bad(v))?,
                        b.parse().map_err(|_| bad(v))?,
                    ))
                })
                .collect::<Result<_>>()
                .map(SweepAxis::Temperature),
            _ => Err(Error::Usage(format!(
                "unknown sweep axis {axis:?} (k|temperature)"
            ))),
        }
    }
}

pub fn sweep(
    checkpoint: &Path,
    data: &Path,
    split: &str,
    axis: &SweepAxis,
    cfg: &RunConfig,
    out: &Path,
) -> Result<String> {
    let (model, vocab) = load_model_dir(checkpoint)?;
    let records = load_split(data, split)?;
    std::fs::create_dir_all(out)?;
    let dcfg = decode_for(&model, &cfg.decode);
    let (name, csv) = match axis {
        SweepAxis::K(ks) => (
            "sweep_k.csv",
            forcing_csv(&sweep_forcing(&model, &records, &vocab, ks, &dcfg)?),
        ),
        SweepAxis::Temperature(grid) => (
            "sweep_temperature.csv",
            temperature_csv(&sweep_temperature(&model, &records, &vocab, grid, &dcfg)?),
        ),
    };
    std::fs::write(out.join(name), &csv)?;
    cfg.save(&out.join(CONFIG_FILE))?;
    Ok(csv)
}

pub fn ablation(
    sl: &Path,
    rl: &Path,
    data: &Path,
    split: &str,
    cfg: &RunConfig,
    out: &Path,
) -> Result<String> {
    let (sl_model, vocab) = load_model_dir(sl)?;
    let (rl_model, _) = load_model_dir(rl)?;
    let records = load_split(data, split)?;
    std::fs::create_dir_all(out)?;
    let rows = ablate(
        &sl_model,
        &rl_model,
        &records,
        &vocab,
        &decode_for(&rl_model, &cfg.decode),
    )?;
    let csv = ablation_csv(&rows);
    std::fs::write(out.join("ablation.csv"), &csv)?;
    cfg.save(&out.join(CONFIG_FILE))?;
    Ok(csv)
}
