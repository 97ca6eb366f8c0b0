//! Self-training pipeline: seed training on the labeled source split,
//! encoder adaptation on the small labeled target split, confidence
//! calibration, pseudo-label harvesting on the unlabeled target split, and
//! retraining -- plus the experiment matrix that runs every system over a
//! set of master seeds.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::Digest;
use thiserror::Error;

use crate::confidence::{
    calibrate_threshold, select, CalibPoint, CalibrationOutcome, ConfidenceError,
    Measure, SelectionAudit, SelectionConfig,
};
use crate::corpus::{self, CorpusError, LoadView, Split, Utterance};
use crate::decode::{beam_search, greedy_decode, mc_dropout_decode, DecodeConfig, Hypothesis, NBestList};
use crate::eval::{score_corpus, spearman_rho, wer, CorpusScore};
use crate::model::{adapt, train, Model, ModelConfig, ModelError, TrainHyper, TrainMode, TrainReport};
use crate::seeding;

#[derive(Debug, Error)]
pub enum SslError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Confidence(#[from] ConfidenceError),
    #[error("io at {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("serde: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SslError + '_ {
    move |e| SslError::Io(path.to_path_buf(), e)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus_dir: PathBuf,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub seed_hyper: TrainHyper,
    pub adapt_hyper: TrainHyper,
    pub retrain_hyper: TrainHyper,
    pub decode: DecodeConfig,
    /// epoch multiplier for the dropout seed variant, which converges slower
    pub drop_epochs_factor: f64,
    /// MC-dropout samples per unlabeled utterance
    pub mc_samples: usize,
    pub mc_dropout_rate: f64,
    /// calibration split between reliable and unreliable 1-best decodes
    pub wer_split: f64,
    pub grid_step: f64,
    pub max_hyps_per_utt: usize,
    /// offset applied to the calibrated threshold for the loose variant,
    /// in the unconfident direction
    pub threshold_offset: f64,
    /// fraction of the source train split held out for early stopping
    pub seed_holdout: f64,
    pub seeds: Vec<u64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            corpus_dir: PathBuf::from("corpus"),
            out_dir: PathBuf::from("runs"),
            model: ModelConfig::default(),
            seed_hyper: TrainHyper {
                epochs: 12,
                batch_size: 8,
                lr: 3e-3,
                ..TrainHyper::default()
            },
            adapt_hyper: TrainHyper { epochs: 6, ..TrainHyper::default() },
            retrain_hyper: TrainHyper { epochs: 4, lr: 1e-3, ..TrainHyper::default() },
            decode: DecodeConfig::default(),
            drop_epochs_factor: 2.0,
            mc_samples: 8,
            mc_dropout_rate: 0.2,
            wer_split: 0.10,
            grid_step: 0.01,
            max_hyps_per_utt: 3,
            threshold_offset: 0.2,
            seed_holdout: 0.1,
            seeds: vec![1, 2, 3],
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), SslError> {
        let mut problems = Vec::new();
        if self.seeds.is_empty() {
            problems.push("seeds must be non-empty".to_string());
        }
        if !(0.0..1.0).contains(&self.mc_dropout_rate) {
            problems.push(format!("mc_dropout_rate {} outside [0, 1)", self.mc_dropout_rate));
        }
        if !(0.0..0.5).contains(&self.seed_holdout) {
            problems.push(format!("seed_holdout {} outside [0, 0.5)", self.seed_holdout));
        }
        if self.grid_step <= 0.0 {
            problems.push("grid_step must be positive".to_string());
        }
        if self.threshold_offset < 0.0 {
            problems.push("threshold_offset must be non-negative".to_string());
        }
        if self.drop_epochs_factor <= 0.0 {
            problems.push("drop_epochs_factor must be positive".to_string());
        }
        if self.max_hyps_per_utt == 0 {
            problems.push("max_hyps_per_utt must be at least 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(SslError::Invalid(problems.join("; ")))
        }
    }

    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = sha2::Sha256::new();
        h.update(json.as_bytes());
        format!("{:x}", h.finalize())
    }

    pub fn stage_dir(&self, stage: &str, system: &str, seed: u64) -> PathBuf {
        self.out_dir.join(stage).join(system).join(format!("seed{seed}"))
    }
}

/// Identifiers of the systems in the experiment matrix.
pub const SYSTEM_E2E: &str = "e2e";
pub const SYSTEM_E2E_S: &str = "e2e_s";
pub const SYSTEM_E2E_SU: &str = "e2e_su";
pub const SYSTEM_E2E_SU_ENT: &str = "e2e_su_ent";
pub const SYSTEM_E2E_SU_DROP: &str = "e2e_su_drop";
pub const SYSTEM_E2E_SU_LOOSE: &str = "e2e_su_loose";

pub const ALL_SYSTEMS: [&str; 6] = [
    SYSTEM_E2E,
    SYSTEM_E2E_S,
    SYSTEM_E2E_SU,
    SYSTEM_E2E_SU_ENT,
    SYSTEM_E2E_SU_DROP,
    SYSTEM_E2E_SU_LOOSE,
];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub system: String,
    pub seed: u64,
    pub config_hash: String,
    pub corpus_hash: String,
    pub version: String,
}

fn write_manifest(
    cfg: &PipelineConfig,
    dir: &Path,
    stage: &str,
    system: &str,
    seed: u64,
) -> Result<(), SslError> {
    let manifest = StageManifest {
        stage: stage.to_string(),
        system: system.to_string(),
        seed,
        config_hash: cfg.config_hash(),
        corpus_hash: corpus::corpus_hash(&cfg.corpus_dir)?,
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(io_err(&path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), SslError> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(io_err(path))
}

/// Split the source train set into train/holdout without shuffling; the
/// corpus generator already wrote utterances in a seed-determined order.
fn split_holdout(mut data: Vec<Utterance>, holdout: f64) -> (Vec<Utterance>, Vec<Utterance>) {
    let keep = data.len() - ((data.len() as f64 * holdout).round() as usize).min(data.len() / 2);
    let held = data.split_off(keep);
    (data, held)
}

/// Train a seed model on the labeled source split. `dropout` selects the
/// MC-dropout variant trained with inverted dropout at the model's rate.
pub fn train_seed_model(
    cfg: &PipelineConfig,
    seed: u64,
    dropout: bool,
) -> Result<(Model, TrainReport, PathBuf), SslError> {
    let system = if dropout { "e2e_drop_seedmodel" } else { "e2e_seedmodel" };
    let dir = cfg.stage_dir("seed", system, seed);
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let train_full = corpus::load_split(&cfg.corpus_dir, Split::Train, LoadView::Training)?;
    let (train_set, holdout) = split_holdout(train_full, cfg.seed_holdout);
    let mut model = Model::new(
        cfg.model.clone(),
        corpus::Alphabet::default(),
        seeding::mix(seed, &["seed-model", system]),
    );
    let mut hyper = cfg.seed_hyper.clone();
    hyper.dropout_rate = if dropout { cfg.model.dropout_rate } else { 0.0 };
    if dropout {
        hyper.epochs = ((hyper.epochs as f64 * cfg.drop_epochs_factor).round() as usize).max(1);
    }
    let report = train(
        &mut model,
        &train_set,
        &holdout,
        &hyper,
        TrainMode::All,
        seeding::mix(seed, &["seed-train", system]),
    )?;
    let ckpt = dir.join("model.ckpt");
    model.save(&ckpt)?;
    write_json(&dir.join("train_report.json"), &report)?;
    write_manifest(cfg, &dir, "seed", system, seed)?;
    Ok((model, report, ckpt))
}

/// Encoder-only adaptation on the labeled target split (dev1).
pub fn adapt_model(
    cfg: &PipelineConfig,
    mut model: Model,
    system: &str,
    seed: u64,
) -> Result<(Model, TrainReport, PathBuf), SslError> {
    let dir = cfg.stage_dir("adapt", system, seed);
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let dev1 = corpus::load_split(&cfg.corpus_dir, Split::Dev1, LoadView::Training)?;
    let report = adapt(
        &mut model,
        &dev1,
        &dev1,
        &cfg.adapt_hyper,
        TrainMode::EncoderOnly,
        seeding::mix(seed, &["adapt", system]),
    )?;
    let ckpt = dir.join("model.ckpt");
    model.save(&ckpt)?;
    write_json(&dir.join("train_report.json"), &report)?;
    write_manifest(cfg, &dir, "adapt", system, seed)?;
    Ok((model, report, ckpt))
}

/// Beam N-best decode of a set, one list per utterance, in parallel.
pub fn decode_beam_set(
    model: &Model,
    set: &[Utterance],
    decode: &DecodeConfig,
) -> Result<Vec<NBestList>, SslError> {
    use rayon::prelude::*;
    set.par_iter()
        .map(|u| {
            let hyps = beam_search(model, &u.features, decode)?;
            Ok(NBestList { utt_id: u.id.clone(), hyps })
        })
        .collect()
}

/// Greedy 1-best decode of a set, in parallel.
pub fn decode_greedy_set(model: &Model, set: &[Utterance]) -> Result<Vec<NBestList>, SslError> {
    use rayon::prelude::*;
    set.par_iter()
        .map(|u| {
            let hyp = greedy_decode(model, &u.features)?;
            Ok(NBestList { utt_id: u.id.clone(), hyps: vec![hyp] })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct McStats {
    pub utterances: usize,
    pub total_distinct: usize,
    pub total_collapsed: usize,
}

impl McStats {
    pub fn mean_distinct(&self) -> f64 {
        self.total_distinct as f64 / self.utterances.max(1) as f64
    }
}

/// MC-dropout sampling over a set; duplicates within an utterance collapse
/// to the best-scoring copy.
pub fn decode_mc_set(
    model: &Model,
    set: &[Utterance],
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<(Vec<NBestList>, McStats), SslError> {
    use rayon::prelude::*;
    let base = seeding::mix(seed, &["mc-decode"]);
    let lists: Result<Vec<(NBestList, usize)>, SslError> = set
        .par_iter()
        .map(|u| {
            let (hyps, collapsed) = mc_dropout_decode(
                model,
                &u.features,
                &u.id,
                cfg.mc_samples,
                cfg.mc_dropout_rate,
                base,
            )?;
            Ok((NBestList { utt_id: u.id.clone(), hyps }, collapsed))
        })
        .collect();
    let lists = lists?;
    let stats = McStats {
        utterances: lists.len(),
        total_distinct: lists.iter().map(|(l, _)| l.hyps.len()).sum(),
        total_collapsed: lists.iter().map(|(_, c)| c).sum(),
    };
    Ok((lists.into_iter().map(|(l, _)| l).collect(), stats))
}

/// Per-utterance calibration observations from greedy 1-best decoding of a
/// labeled set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibObservation {
    pub utt_id: String,
    pub decode_score: f64,
    pub entropy: f64,
    pub wer: f64,
}

pub fn calibration_observations(
    model: &Model,
    set: &[Utterance],
) -> Result<Vec<CalibObservation>, SslError> {
    use rayon::prelude::*;
    set.par_iter()
        .map(|u| {
            let reference =
                u.text.as_deref().ok_or_else(|| SslError::Invalid(format!("{} unlabeled", u.id)))?;
            let hyp = greedy_decode(model, &u.features)?;
            Ok(CalibObservation {
                utt_id: u.id.clone(),
                decode_score: hyp.decode_score,
                entropy: hyp.entropy,
                wer: wer(reference, &hyp.text),
            })
        })
        .collect()
}

/// Cross-validated calibration observations: dev1 splits into two folds by
/// index parity; for each fold a copy of the seed model is adapted on the
/// other fold and decodes the held-out one. This keeps the calibration
/// decodes honest -- the production adapted model has seen all of dev1, so
/// decoding dev1 with it understates the error rates.
pub fn cv_calibration_observations(
    cfg: &PipelineConfig,
    seed_model: &Model,
    dev1: &[Utterance],
    system: &str,
    seed: u64,
) -> Result<Vec<CalibObservation>, SslError> {
    let mut obs = Vec::new();
    for fold in 0..2usize {
        let held: Vec<Utterance> =
            dev1.iter().enumerate().filter(|(i, _)| i % 2 == fold).map(|(_, u)| u.clone()).collect();
        let rest: Vec<Utterance> =
            dev1.iter().enumerate().filter(|(i, _)| i % 2 != fold).map(|(_, u)| u.clone()).collect();
        let mut model = seed_model.clone();
        adapt(
            &mut model,
            &rest,
            &rest,
            &cfg.adapt_hyper,
            TrainMode::EncoderOnly,
            seeding::mix(seed, &["cv-adapt", system, &fold.to_string()]),
        )?;
        obs.extend(calibration_observations(&model, &held)?);
    }
    obs.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
    Ok(obs)
}

pub fn calibrate_from_observations(
    obs: &[CalibObservation],
    measure: Measure,
    cfg: &PipelineConfig,
) -> Result<CalibrationOutcome, SslError> {
    let points: Vec<CalibPoint> = obs
        .iter()
        .map(|o| CalibPoint { value: measure.value_raw(o), wer: o.wer })
        .collect();
    Ok(calibrate_threshold(&points, measure, cfg.wer_split, cfg.grid_step)?)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub utt_id: String,
    pub text: String,
    pub value: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub measure: Measure,
    pub threshold: f64,
    pub labels: Vec<PseudoLabel>,
    pub audit: SelectionAudit,
}

/// Merge beam and (optional) MC-dropout hypotheses per-utterance, collapsing
/// duplicate texts to the best decode_score / lowest entropy copy, then apply
/// threshold selection.
pub fn make_pseudo_labels(
    beam: &[NBestList],
    mc: Option<&[NBestList]>,
    measure: Measure,
    threshold: f64,
    max_hyps_per_utt: usize,
) -> PseudoLabelSet {
    let mut merged: BTreeMap<String, Vec<Hypothesis>> = BTreeMap::new();
    let mut push = |utt_id: &str, h: &Hypothesis| {
        let entry = merged.entry(utt_id.to_string()).or_default();
        match entry.iter_mut().find(|e| e.text == h.text) {
            Some(existing) => {
                let better = match measure {
                    Measure::DecodeScore => h.decode_score > existing.decode_score,
                    Measure::Entropy => h.entropy < existing.entropy,
                };
                if better {
                    *existing = h.clone();
                }
            }
            None => entry.push(h.clone()),
        }
    };
    for list in beam {
        for h in &list.hyps {
            push(&list.utt_id, h);
        }
    }
    if let Some(mc_lists) = mc {
        for list in mc_lists {
            for h in &list.hyps {
                push(&list.utt_id, h);
            }
        }
    }
    let lists: Vec<NBestList> =
        merged.into_iter().map(|(utt_id, hyps)| NBestList { utt_id, hyps }).collect();
    let sel_cfg = SelectionConfig { measure, threshold, max_hyps_per_utt };
    let (selected, audit) = select(&lists, &sel_cfg);
    let labels = selected
        .into_iter()
        .map(|s| PseudoLabel { utt_id: s.utt_id, text: s.text, value: s.value })
        .collect();
    PseudoLabelSet { measure, threshold, labels, audit }
}

pub fn write_pseudo_labels(path: &Path, set: &PseudoLabelSet) -> Result<(), SslError> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    let header = serde_json::json!({
        "measure": set.measure,
        "threshold": set.threshold,
        "audit": set.audit,
    });
    writeln!(w, "{header}").map_err(io_err(path))?;
    for label in &set.labels {
        writeln!(w, "{}", serde_json::to_string(label)?).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_pseudo_labels(path: &Path) -> Result<Vec<PseudoLabel>, SslError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut labels = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if i == 0 || line.trim().is_empty() {
            continue; // header
        }
        labels.push(serde_json::from_str(&line)?);
    }
    Ok(labels)
}

/// Attach pseudo-label texts to dev2 features; one training utterance per
/// selected hypothesis.
pub fn pseudo_to_utterances(labels: &[PseudoLabel], dev2: &[Utterance]) -> Vec<Utterance> {
    let by_id: BTreeMap<&str, &Utterance> = dev2.iter().map(|u| (u.id.as_str(), u)).collect();
    let mut out = Vec::new();
    let mut copy_idx: BTreeMap<&str, usize> = BTreeMap::new();
    for label in labels {
        let Some(base) = by_id.get(label.utt_id.as_str()) else { continue };
        let k = copy_idx.entry(label.utt_id.as_str()).or_insert(0);
        out.push(Utterance {
            id: format!("{}#p{k}", label.utt_id),
            features: base.features.clone(),
            text: Some(label.text.clone()),
            split: base.split,
            domain: base.domain,
        });
        *k += 1;
    }
    out
}

/// Warm-start retraining from an adapted model on dev1 plus pseudo-labeled
/// dev2. With no pseudo labels this is a no-op and returns the input model.
pub fn retrain(
    cfg: &PipelineConfig,
    mut model: Model,
    system: &str,
    seed: u64,
    pseudo: &PseudoLabelSet,
) -> Result<(Model, TrainReport, PathBuf), SslError> {
    let dir = cfg.stage_dir("retrain", system, seed);
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    write_pseudo_labels(&dir.join("pseudo_labels.jsonl"), pseudo)?;
    let report = if pseudo.labels.is_empty() {
        TrainReport::default()
    } else {
        let dev1 = corpus::load_split(&cfg.corpus_dir, Split::Dev1, LoadView::Training)?;
        let dev2 = corpus::load_split(&cfg.corpus_dir, Split::Dev2, LoadView::Training)?;
        let mut data = dev1.clone();
        data.extend(pseudo_to_utterances(&pseudo.labels, &dev2));
        train(
            &mut model,
            &data,
            &dev1,
            &cfg.retrain_hyper,
            TrainMode::All,
            seeding::mix(seed, &["retrain", system]),
        )?
    };
    let ckpt = dir.join("model.ckpt");
    model.save(&ckpt)?;
    write_json(&dir.join("train_report.json"), &report)?;
    write_manifest(cfg, &dir, "retrain", system, seed)?;
    Ok((model, report, ckpt))
}

/// Greedy-decode WER/CER of a model on a labeled evaluation split.
pub fn evaluate_model(model: &Model, set: &[Utterance]) -> Result<CorpusScore, SslError> {
    use rayon::prelude::*;
    let pairs: Result<Vec<(String, String)>, SslError> = set
        .par_iter()
        .map(|u| {
            let reference = u
                .text
                .clone()
                .ok_or_else(|| SslError::Invalid(format!("{} has no reference", u.id)))?;
            let hyp = greedy_decode(model, &u.features)?;
            Ok((reference, hyp.text))
        })
        .collect();
    let pairs = pairs?;
    Ok(score_corpus(pairs.iter().map(|(r, h)| (r.as_str(), h.as_str()))))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    /// WER by system id, then by eval split name ("dev3", "test")
    pub wer: BTreeMap<String, BTreeMap<String, f64>>,
    pub thresholds: BTreeMap<String, f64>,
    /// Spearman rho of measure value vs per-utterance WER on dev1
    pub spearman: BTreeMap<String, f64>,
    pub pseudo_counts: BTreeMap<String, usize>,
    pub mc_stats: McStats,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatrixOutcome {
    pub config_hash: String,
    pub corpus_hash: String,
    pub per_seed: Vec<SeedOutcome>,
    /// median WER across seeds, by system then split
    pub median_wer: BTreeMap<String, BTreeMap<String, f64>>,
}

fn eval_splits(cfg: &PipelineConfig) -> Result<Vec<(String, Vec<Utterance>)>, SslError> {
    Ok(vec![
        ("dev3".to_string(), corpus::load_split(&cfg.corpus_dir, Split::Dev3, LoadView::Training)?),
        ("test".to_string(), corpus::load_split(&cfg.corpus_dir, Split::Test, LoadView::Training)?),
    ])
}

/// Run every system for one master seed; artifacts land under the stage
/// directories, the returned outcome carries the numbers.
pub fn run_pipeline_for_seed(cfg: &PipelineConfig, seed: u64) -> Result<SeedOutcome, SslError> {
    cfg.validate()?;
    let evals = eval_splits(cfg)?;
    let dev2 = corpus::load_split(&cfg.corpus_dir, Split::Dev2, LoadView::Training)?;
    let mut wer_map: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    let eval_into = |system: &str, model: &Model, map: &mut BTreeMap<String, BTreeMap<String, f64>>| -> Result<(), SslError> {
        let mut per_split = BTreeMap::new();
        for (name, set) in &evals {
            per_split.insert(name.clone(), evaluate_model(model, set)?.wer);
        }
        map.insert(system.to_string(), per_split);
        Ok(())
    };

    // stage 1: seed models (plain and dropout variant)
    let (seed_plain, _, _) = train_seed_model(cfg, seed, false)?;
    let (seed_drop, _, _) = train_seed_model(cfg, seed, true)?;
    eval_into(SYSTEM_E2E, &seed_plain, &mut wer_map)?;

    // stage 2: encoder adaptation on dev1
    let (adapted, _, _) = adapt_model(cfg, seed_plain.clone(), SYSTEM_E2E_S, seed)?;
    let (adapted_drop, _, _) = adapt_model(cfg, seed_drop.clone(), "e2e_s_drop", seed)?;
    eval_into(SYSTEM_E2E_S, &adapted, &mut wer_map)?;

    // stage 3: cross-validated calibration over dev1
    let dev1 = corpus::load_split(&cfg.corpus_dir, Split::Dev1, LoadView::Training)?;
    let obs = cv_calibration_observations(cfg, &seed_plain, &dev1, SYSTEM_E2E_S, seed)?;
    let calib_dir = cfg.stage_dir("calibrate", SYSTEM_E2E_S, seed);
    std::fs::create_dir_all(&calib_dir).map_err(io_err(&calib_dir))?;
    write_json(&calib_dir.join("observations.json"), &obs)?;
    let cal_score = calibrate_from_observations(&obs, Measure::DecodeScore, cfg)?;
    let cal_ent = calibrate_from_observations(&obs, Measure::Entropy, cfg)?;
    let obs_drop = cv_calibration_observations(cfg, &seed_drop, &dev1, "e2e_s_drop", seed)?;
    let cal_drop = calibrate_from_observations(&obs_drop, Measure::DecodeScore, cfg)?;
    write_json(
        &calib_dir.join("thresholds.json"),
        &serde_json::json!({
            "decode_score": cal_score,
            "entropy": cal_ent,
            "decode_score_drop": cal_drop,
        }),
    )?;

    let mut spearman = BTreeMap::new();
    let wers: Vec<f64> = obs.iter().map(|o| o.wer).collect();
    let scores: Vec<f64> = obs.iter().map(|o| o.decode_score).collect();
    let entropies: Vec<f64> = obs.iter().map(|o| o.entropy).collect();
    if let Some(rho) = spearman_rho(&scores, &wers) {
        spearman.insert("decode_score".to_string(), rho);
    }
    if let Some(rho) = spearman_rho(&entropies, &wers) {
        spearman.insert("entropy".to_string(), rho);
    }

    // stage 4: decode the unlabeled split
    let beam_lists = decode_beam_set(&adapted, &dev2, &cfg.decode)?;
    let decode_dir = cfg.stage_dir("decode", SYSTEM_E2E_S, seed);
    std::fs::create_dir_all(&decode_dir).map_err(io_err(&decode_dir))?;
    crate::decode::write_nbest(&decode_dir.join("dev2_nbest.jsonl"), &beam_lists)
        .map_err(io_err(&decode_dir))?;
    let (mc_lists, mc_stats) = decode_mc_set(&adapted_drop, &dev2, cfg, seed)?;
    let beam_lists_drop = decode_beam_set(&adapted_drop, &dev2, &cfg.decode)?;

    // loose threshold moves toward accepting more data
    let loose = if Measure::DecodeScore.keep_ge() {
        cal_score.threshold - cfg.threshold_offset
    } else {
        cal_score.threshold + cfg.threshold_offset
    };
    let mut thresholds = BTreeMap::new();
    thresholds.insert("decode_score".to_string(), cal_score.threshold);
    thresholds.insert("entropy".to_string(), cal_ent.threshold);
    thresholds.insert("decode_score_drop".to_string(), cal_drop.threshold);
    thresholds.insert("decode_score_loose".to_string(), loose);

    // stage 5: pseudo labels and retraining, one system at a time
    let cap = cfg.max_hyps_per_utt;
    let mut pseudo_counts = BTreeMap::new();
    let jobs: Vec<(&str, &Model, PseudoLabelSet)> = vec![
        (
            SYSTEM_E2E_SU,
            &adapted,
            make_pseudo_labels(&beam_lists, None, Measure::DecodeScore, cal_score.threshold, cap),
        ),
        (
            SYSTEM_E2E_SU_ENT,
            &adapted,
            make_pseudo_labels(&beam_lists, None, Measure::Entropy, cal_ent.threshold, cap),
        ),
        (
            SYSTEM_E2E_SU_DROP,
            &adapted_drop,
            make_pseudo_labels(
                &beam_lists_drop,
                Some(&mc_lists),
                Measure::DecodeScore,
                cal_drop.threshold,
                cap,
            ),
        ),
        (
            SYSTEM_E2E_SU_LOOSE,
            &adapted,
            make_pseudo_labels(&beam_lists, None, Measure::DecodeScore, loose, cap),
        ),
    ];
    for (system, base_model, pseudo) in jobs {
        pseudo_counts.insert(system.to_string(), pseudo.labels.len());
        let (retrained, _, _) = retrain(cfg, base_model.clone(), system, seed, &pseudo)?;
        eval_into(system, &retrained, &mut wer_map)?;
    }

    Ok(SeedOutcome { seed, wer: wer_map, thresholds, spearman, pseudo_counts, mc_stats })
}

/// Run the full matrix over all configured seeds, then write the report CSV
/// and a machine-readable outcome file.
pub fn run_experiment_matrix(cfg: &PipelineConfig) -> Result<MatrixOutcome, SslError> {
    cfg.validate()?;
    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        per_seed.push(run_pipeline_for_seed(cfg, seed)?);
    }
    let mut median_wer: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for system in ALL_SYSTEMS {
        let mut per_split = BTreeMap::new();
        for split in ["dev3", "test"] {
            let vals: Vec<f64> = per_seed
                .iter()
                .filter_map(|s| s.wer.get(system).and_then(|m| m.get(split)).copied())
                .collect();
            if let Some(m) = crate::eval::median(&vals) {
                per_split.insert(split.to_string(), m);
            }
        }
        median_wer.insert(system.to_string(), per_split);
    }
    let outcome = MatrixOutcome {
        config_hash: cfg.config_hash(),
        corpus_hash: corpus::corpus_hash(&cfg.corpus_dir)?,
        per_seed,
        median_wer,
    };
    let report_dir = cfg.out_dir.join("report");
    std::fs::create_dir_all(&report_dir).map_err(io_err(&report_dir))?;
    write_json(&report_dir.join("matrix.json"), &outcome)?;
    write_matrix_report(&report_dir.join("results.csv"), &outcome)?;
    Ok(outcome)
}

pub fn write_matrix_report(path: &Path, outcome: &MatrixOutcome) -> Result<(), SslError> {
    let mut columns = Vec::new();
    for seed in outcome.per_seed.iter().map(|s| s.seed) {
        columns.push(format!("wer_dev3_seed{seed}"));
        columns.push(format!("wer_test_seed{seed}"));
    }
    let mut report = crate::eval::Report::new(columns);
    for system in ALL_SYSTEMS {
        let mut values = Vec::new();
        for s in &outcome.per_seed {
            for split in ["dev3", "test"] {
                values.push(s.wer.get(system).and_then(|m| m.get(split)).copied());
            }
        }
        report.push(system, values);
    }
    report.write_csv(path).map_err(io_err(path))
}

impl Measure {
    fn value_raw(&self, obs: &CalibObservation) -> f64 {
        match self {
            Measure::DecodeScore => obs.decode_score,
            Measure::Entropy => obs.entropy,
        }
    }
}
