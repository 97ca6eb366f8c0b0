//! N-best beam-search decoding and MC-dropout sampling.
//!
//! Hypotheses carry a length-normalized decoding score (mean per-symbol log
//! posterior) plus the entropy of the decoder posterior trace; both feed the
//! confidence-based data selection.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::confidence::entropy_of;
use crate::model::{ctc_forward_backward, Model, ModelError, PosteriorTrace};
use crate::nn::{DropoutMode, DropoutSpec};
use crate::seeding;
use crate::tape::Tape;
use crate::tensor::NdArray;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HypSource {
    Beam(usize),
    Dropout(usize),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Hypothesis {
    pub text: String,
    pub step_logprobs: Vec<f64>,
    pub total_logprob: f64,
    /// total_logprob / emitted symbols (incl. eos); the selection confidence.
    pub decode_score: f64,
    pub entropy: f64,
    pub source: HypSource,
    pub truncated: bool,
    #[serde(skip)]
    pub posteriors: PosteriorTrace,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NBestList {
    pub utt_id: String,
    pub hyps: Vec<Hypothesis>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub nbest: usize,
    pub max_steps_factor: f64,
    /// γ: optional full-sequence CTC rescoring weight on finalized hypotheses.
    pub ctc_rescore_weight: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { beam_width: 8, nbest: 10, max_steps_factor: 2.0, ctc_rescore_weight: 0.0 }
    }
}

impl DecodeConfig {
    fn validate(&self) {
        assert!(self.beam_width >= 1);
        // nbest may exceed beam_width: finalized hypotheses accumulate across
        // steps, so beam 8 can still yield a 10-best list
        assert!(self.nbest >= 1);
        assert!((0.0..=1.0).contains(&self.ctc_rescore_weight));
    }

    pub fn max_steps(&self, encoded_len: usize) -> usize {
        ((self.max_steps_factor * encoded_len as f64).ceil() as usize).max(1)
    }
}

struct ActiveBeam {
    prev: usize,
    state: crate::tape::Var,
    ids: Vec<usize>,
    step_logprobs: Vec<f64>,
    total: f64,
    trace: Vec<Vec<f64>>,
}

fn finalize(
    model: &Model,
    ids: &[usize],
    step_logprobs: Vec<f64>,
    trace: Vec<Vec<f64>>,
    truncated: bool,
) -> Hypothesis {
    let text: String = ids.iter().map(|&i| model.alphabet.char_at(i)).collect();
    let total: f64 = step_logprobs.iter().sum();
    let score = total / step_logprobs.len() as f64;
    let posteriors = PosteriorTrace { decoder_steps: trace, ctc_frames: None };
    Hypothesis {
        text,
        total_logprob: total,
        decode_score: score,
        entropy: entropy_of(&posteriors).unwrap_or(0.0),
        source: HypSource::Beam(0),
        truncated,
        step_logprobs,
        posteriors,
    }
}

/// Length-synchronous beam search; active beams are pruned on total log
/// probability, finalized hypotheses are ranked by decode_score (mixed with a
/// full-sequence CTC score when γ > 0). Ties break lexicographically on text.
pub fn beam_search(model: &Model, features: &NdArray, cfg: &DecodeConfig) -> Result<NBestListRaw, ModelError> {
    beam_search_with_dropout(model, features, cfg, &DropoutSpec::off())
}

/// Beam search result before an utterance id is attached.
pub type NBestListRaw = Vec<Hypothesis>;

fn beam_search_with_dropout(
    model: &Model,
    features: &NdArray,
    cfg: &DecodeConfig,
    dropout: &DropoutSpec,
) -> Result<NBestListRaw, ModelError> {
    cfg.validate();
    let mut tape = Tape::new();
    let leaves = model.leaves(&mut tape);
    let keys = model.encode(&mut tape, &leaves, features, dropout)?;
    let l = tape.shape(keys)[0];
    let max_steps = cfg.max_steps(l);
    let eos = model.alphabet.eos_id();
    let sos = model.alphabet.sos_id();
    let n_out = model.alphabet.decoder_dim();

    let mut beams = vec![ActiveBeam {
        prev: sos,
        state: model.init_state(&mut tape),
        ids: Vec::new(),
        step_logprobs: Vec::new(),
        total: 0.0,
        trace: Vec::new(),
    }];
    let mut finalized: Vec<Hypothesis> = Vec::new();

    for step in 0..max_steps {
        // eos competes with ordinary symbols for the beam_width slots; an eos
        // candidate that survives pruning moves to the finalized pool
        let mut candidates: Vec<ActiveBeam> = Vec::new();
        for beam in &beams {
            let out = model.decode_step(
                &mut tape,
                &leaves,
                beam.prev,
                beam.state,
                keys,
                dropout,
                step as u64,
            );
            let logp = tape.value(out.log_posterior);
            let probs: Vec<f64> = logp.data().iter().map(|&v| v.exp()).collect();
            for sym in 0..n_out {
                if sym == sos {
                    continue;
                }
                let lp = logp.at(0, sym);
                let mut step_lps = beam.step_logprobs.clone();
                step_lps.push(lp);
                let mut trace = beam.trace.clone();
                trace.push(probs.clone());
                let mut ids = beam.ids.clone();
                if sym != eos {
                    ids.push(sym);
                }
                candidates.push(ActiveBeam {
                    prev: sym,
                    state: out.state,
                    ids,
                    total: beam.total + lp,
                    step_logprobs: step_lps,
                    trace,
                });
            }
        }
        candidates.sort_by(|a, b| {
            b.total.partial_cmp(&a.total).unwrap().then_with(|| a.ids.cmp(&b.ids))
        });
        candidates.truncate(cfg.beam_width);
        beams = Vec::new();
        for cand in candidates {
            if cand.prev == eos {
                finalized.push(finalize(model, &cand.ids, cand.step_logprobs, cand.trace, false));
            } else {
                beams.push(cand);
            }
        }
        if beams.is_empty() {
            break;
        }
    }
    tape.check_finite().map_err(ModelError::NonFinite)?;

    if finalized.is_empty() {
        // nothing terminated within the step cap: best truncated beam
        let best = beams
            .into_iter()
            .max_by(|a, b| {
                let sa = a.total / a.step_logprobs.len().max(1) as f64;
                let sb = b.total / b.step_logprobs.len().max(1) as f64;
                sa.partial_cmp(&sb).unwrap().then_with(|| b.ids.cmp(&a.ids))
            })
            .expect("no active beams and no finalized hypotheses");
        let hyp = finalize(model, &best.ids, best.step_logprobs, best.trace, true);
        return Ok(vec![hyp]);
    }

    let gamma = cfg.ctc_rescore_weight;
    let ctc_lp: Option<NdArray> = if gamma > 0.0 {
        let node = model.ctc_log_probs(&mut tape, &leaves, keys);
        Some(tape.value(node).clone())
    } else {
        None
    };
    let ranking = |h: &Hypothesis, ctc_term: Option<f64>| -> f64 {
        match ctc_term {
            Some(c) => (1.0 - gamma) * h.decode_score + gamma * c,
            None => h.decode_score,
        }
    };
    let mut scored: Vec<(f64, Hypothesis)> = finalized
        .into_iter()
        .map(|h| {
            let ctc_term = match (&ctc_lp, h.text.is_empty()) {
                (Some(lp), false) => {
                    let labels = model.alphabet.encode(&h.text).expect("hyp text in alphabet");
                    match ctc_forward_backward(lp, &labels, model.alphabet.blank_id()) {
                        Ok((loss, _)) => Some(-loss / h.text.chars().count() as f64),
                        Err(_) => None,
                    }
                }
                _ => None,
            };
            let r = ranking(&h, ctc_term);
            (r, h)
        })
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.text.cmp(&b.1.text)));
    scored.truncate(cfg.nbest);
    Ok(scored
        .into_iter()
        .enumerate()
        .map(|(rank, (_, mut h))| {
            h.source = HypSource::Beam(rank);
            h
        })
        .collect())
}

/// Greedy decoding: beam_search with beam width 1, N = 1.
pub fn greedy_decode(model: &Model, features: &NdArray) -> Result<Hypothesis, ModelError> {
    let cfg = DecodeConfig { beam_width: 1, nbest: 1, ..DecodeConfig::default() };
    Ok(beam_search(model, features, &cfg)?.remove(0))
}

/// MC-dropout sampling: n greedy decodes with dropout active at inference,
/// sample k seeded by (base_seed, utt_id, k). Duplicate texts are collapsed
/// keeping the best decode_score; returns (hypotheses, collapsed_count).
pub fn mc_dropout_decode(
    model: &Model,
    features: &NdArray,
    utt_id: &str,
    n_samples: usize,
    dropout_rate: f64,
    base_seed: u64,
) -> Result<(Vec<Hypothesis>, usize), ModelError> {
    assert!((0.0..1.0).contains(&dropout_rate));
    let cfg = DecodeConfig { beam_width: 1, nbest: 1, ..DecodeConfig::default() };
    let mut kept: Vec<Hypothesis> = Vec::new();
    let mut collapsed = 0usize;
    for k in 0..n_samples {
        let spec = DropoutSpec {
            rate: dropout_rate,
            mode: DropoutMode::InferenceOn,
            mask_seed: seeding::mix_u64(seeding::mix(base_seed, &["mc-dropout", utt_id]), &[k as u64]),
        };
        let mut hyp = beam_search_with_dropout(model, features, &cfg, &spec)?.remove(0);
        hyp.source = HypSource::Dropout(k);
        match kept.iter_mut().find(|h| h.text == hyp.text) {
            Some(existing) => {
                collapsed += 1;
                if hyp.decode_score > existing.decode_score {
                    *existing = hyp;
                }
            }
            None => kept.push(hyp),
        }
    }
    Ok((kept, collapsed))
}

// ---- N-best file I/O -----------------------------------------------------

pub fn write_nbest(path: &Path, lists: &[NBestList]) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for list in lists {
        writeln!(w, "{}", serde_json::to_string(list)?)?;
    }
    w.flush()
}

pub fn read_nbest(path: &Path) -> std::io::Result<Vec<NBestList>> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
