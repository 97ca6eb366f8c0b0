//! Acceptance suite: one test per criterion, each printing a single
//! `[PASS]`/`[FAIL]` line. Criteria 7c and 8-10 share one experiment-matrix
//! run on the default corpus (lazily computed once); criterion 11 runs a
//! scaled-down copy of the whole pipeline twice.

use std::path::PathBuf;
use std::time::Instant;

use once_cell::sync::Lazy;
use rand::Rng;

use selftrain::confidence::{calibrate_threshold, entropy_of, CalibPoint, Measure};
use selftrain::corpus::{build_corpus, Alphabet, CorpusConfig};
use selftrain::decode::{beam_search, greedy_decode, mc_dropout_decode, DecodeConfig};
use selftrain::eval::median;
use selftrain::gradcheck::{finite_diff, rel_err};
use selftrain::model::{ctc_forward_backward, Model, ModelConfig, PosteriorTrace};
use selftrain::nn::DropoutSpec;
use selftrain::seeding;
use selftrain::ssl::{self, MatrixOutcome, PipelineConfig};
use selftrain::tape::Tape;
use selftrain::tensor::NdArray;

fn verdict(name: &str, detail: &str, pass: bool) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("[{tag}] {name}: {detail}");
    assert!(pass, "{name} failed: {detail}");
}

fn work_dir(label: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("selftrain-acceptance").join(label);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

struct MatrixRun {
    outcome: MatrixOutcome,
    wall_secs: f64,
    cores: usize,
}

/// The full default-corpus matrix, run once and shared by criteria 7c, 8, 9, 10.
static MATRIX: Lazy<MatrixRun> = Lazy::new(|| {
    let corpus_dir = work_dir("matrix").join("corpus");
    let out_dir = work_dir("matrix").join("runs");
    build_corpus(&CorpusConfig::default(), &corpus_dir, 20260826).unwrap();
    let cfg = PipelineConfig { corpus_dir, out_dir, ..PipelineConfig::default() };
    let start = Instant::now();
    let outcome = ssl::run_experiment_matrix(&cfg).unwrap();
    MatrixRun {
        outcome,
        wall_secs: start.elapsed().as_secs_f64(),
        cores: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    }
});

fn toy_model_cfg() -> ModelConfig {
    ModelConfig {
        feature_dim: 4,
        encoder_hidden: 3,
        subsample_factors: vec![2],
        decoder_hidden: 3,
        attention_dim: 3,
        embed_dim: 2,
        dropout_rate: 0.0,
        ctc_weight: 0.3,
    }
}

fn rand_features(rng: &mut impl Rng, t: usize, f: usize) -> NdArray {
    NdArray::new(vec![t, f], (0..t * f).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

#[test]
fn c01_gradient_correctness() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let model = Model::new(toy_model_cfg(), Alphabet::new(vec!['a', 'b']), 100 + seed);
        let mut rng = seeding::rng(200 + seed);
        let feats = rand_features(&mut rng, 8, 4);
        let text = if seed % 2 == 0 { "ab" } else { "ba" };
        let (_, grads) = model.joint_loss_grads(&feats, text, 0.3, &DropoutSpec::off()).unwrap();
        let values: Vec<NdArray> = model.params.iter().map(|p| p.value.clone()).collect();
        let eval = |leaves: &[NdArray]| -> f64 {
            let mut m = model.clone();
            for (p, v) in m.params.iter_mut().zip(leaves) {
                p.value = v.clone();
            }
            m.joint_loss(&feats, text, 0.3, &DropoutSpec::off()).unwrap()
        };
        for k in 0..values.len() {
            let numeric = finite_diff(&eval, &values, k, 1e-6);
            worst = worst.max(rel_err(&grads[k], &numeric));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "criterion-1 gradient-correctness",
        &format!("worst rel err {worst:.2e} over 20 seeds in {secs:.1}s"),
        worst < 1e-5 && secs < 60.0,
    );
}

#[test]
fn c02_ctc_oracle() {
    let start = Instant::now();
    // brute force: sum over all blank-augmented frame label paths that
    // collapse to the target
    fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut prev = usize::MAX;
        for &s in path {
            if s != blank && s != prev {
                out.push(s);
            }
            prev = s;
        }
        out
    }
    fn brute(logp: &NdArray, labels: &[usize], blank: usize) -> f64 {
        let (t, k) = (logp.rows(), logp.cols());
        let mut total = f64::NEG_INFINITY;
        let paths = (k as u64).pow(t as u32);
        for code in 0..paths {
            let mut c = code;
            let mut path = Vec::with_capacity(t);
            for _ in 0..t {
                path.push((c % k as u64) as usize);
                c /= k as u64;
            }
            if collapse(&path, blank) == labels {
                let lp: f64 = path.iter().enumerate().map(|(i, &s)| logp.at(i, s)).sum();
                total = if total == f64::NEG_INFINITY {
                    lp
                } else {
                    let m = total.max(lp);
                    m + ((total - m).exp() + (lp - m).exp()).ln()
                };
            }
        }
        -total
    }
    let mut rng = seeding::rng(300);
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    while checked < 50 {
        let t = rng.gen_range(1..=6);
        let k = rng.gen_range(2..=4); // symbols + blank
        let blank = k - 1;
        let n = rng.gen_range(1..=3.min(t));
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..blank)).collect();
        let raw = rand_features(&mut rng, t, k);
        let logp = {
            let mut d = raw.clone();
            for r in 0..t {
                let row: Vec<f64> = (0..k).map(|c| raw.at(r, c)).collect();
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                for c in 0..k {
                    d.set(r, c, raw.at(r, c) - m - z.ln());
                }
            }
            d
        };
        match ctc_forward_backward(&logp, &labels, blank) {
            Ok((loss, _)) => {
                let oracle = brute(&logp, &labels, blank);
                worst = worst.max((loss - oracle).abs());
                checked += 1;
            }
            Err(_) => continue, // infeasible draw; brute force would find no path
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "criterion-2 ctc-oracle",
        &format!("worst abs diff {worst:.2e} over 50 cases in {secs:.1}s"),
        worst < 1e-8 && secs < 60.0,
    );
}

#[test]
fn c03_beam_search_oracle() {
    let start = Instant::now();
    let mut mismatches = 0;
    let mut rng = seeding::rng(400);
    for draw in 0..50u64 {
        // K = 4 decoder outputs (2 symbols + sos + eos), <= 3 steps
        let model = Model::new(toy_model_cfg(), Alphabet::new(vec!['a', 'b']), 500 + draw);
        let feats = rand_features(&mut rng, 4, 4);
        let cfg = DecodeConfig {
            beam_width: 64,
            nbest: 1,
            max_steps_factor: 1.5,
            ctc_rescore_weight: 0.0,
        };
        let best = &beam_search(&model, &feats, &cfg).unwrap()[0];

        // exhaustive argmax over terminated sequences
        let mut tape = Tape::new();
        let leaves = model.leaves(&mut tape);
        let keys = model.encode(&mut tape, &leaves, &feats, &DropoutSpec::off()).unwrap();
        let eos = model.alphabet.eos_id();
        let sos = model.alphabet.sos_id();
        let mut best_oracle: Option<(String, f64)> = None;
        let mut stack: Vec<Vec<usize>> = vec![vec![]];
        while let Some(prefix) = stack.pop() {
            let mut state = model.init_state(&mut tape);
            let mut prev = sos;
            let mut total = 0.0;
            for (i, &sym) in prefix.iter().enumerate() {
                let step = model
                    .decode_step(&mut tape, &leaves, prev, state, keys, &DropoutSpec::off(), i as u64);
                total += tape.value(step.log_posterior).at(0, sym);
                state = step.state;
                prev = sym;
            }
            let step = model.decode_step(
                &mut tape,
                &leaves,
                prev,
                state,
                keys,
                &DropoutSpec::off(),
                prefix.len() as u64,
            );
            total += tape.value(step.log_posterior).at(0, eos);
            let score = total / (prefix.len() + 1) as f64;
            let text: String = prefix.iter().map(|&i| model.alphabet.char_at(i)).collect();
            let better = match &best_oracle {
                None => true,
                Some((bt, bs)) => score > *bs || (score == *bs && text < *bt),
            };
            if better {
                best_oracle = Some((text, score));
            }
            if prefix.len() + 1 < 3 {
                for s in 0..model.alphabet.size() {
                    let mut p = prefix.clone();
                    p.push(s);
                    stack.push(p);
                }
            }
        }
        let (text, score) = best_oracle.unwrap();
        if best.text != text || (best.decode_score - score).abs() > 1e-12 {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "criterion-3 beam-search-oracle",
        &format!("{mismatches} mismatches over 50 draws in {secs:.1}s"),
        mismatches == 0 && secs < 60.0,
    );
}

#[test]
fn c04_entropy_bounds_and_anchors() {
    let k = 6usize;
    let uniform = PosteriorTrace { decoder_steps: vec![vec![1.0 / k as f64; k]; 4], ctc_frames: None };
    let anchor_u = (entropy_of(&uniform).unwrap() - (k as f64).ln()).abs();
    let mut onehot = vec![0.0; k];
    onehot[3] = 1.0;
    let anchor_o = entropy_of(&PosteriorTrace { decoder_steps: vec![onehot], ctc_frames: None })
        .unwrap()
        .abs();
    // decoded utterances from a real (toy) model stay inside [0, ln K]
    let model = Model::new(toy_model_cfg(), Alphabet::new(vec!['a', 'b']), 42);
    let kk = model.alphabet.decoder_dim() as f64;
    let mut rng = seeding::rng(600);
    let mut in_bounds = true;
    for _ in 0..50 {
        let feats = rand_features(&mut rng, 8, 4);
        let h = greedy_decode(&model, &feats).unwrap().entropy;
        in_bounds &= (0.0..=kk.ln() + 1e-9).contains(&h);
    }
    verdict(
        "criterion-4 entropy-bounds",
        &format!("uniform anchor err {anchor_u:.1e}, one-hot {anchor_o:.1e}, bounds hold: {in_bounds}"),
        anchor_u < 1e-9 && anchor_o < 1e-9 && in_bounds,
    );
}

#[test]
fn c05_edit_distance_oracle() {
    fn brute(r: &[u8], h: &[u8]) -> usize {
        if r.is_empty() {
            return h.len();
        }
        if h.is_empty() {
            return r.len();
        }
        let sub = brute(&r[1..], &h[1..]) + usize::from(r[0] != h[0]);
        (brute(&r[1..], h) + 1).min(brute(r, &h[1..]) + 1).min(sub)
    }
    let mut mismatches = 0;
    let mut total = 0;
    // all token lists of length <= 5 over a 3-token vocabulary would be 3^10
    // pairs; enumerate lengths exhaustively but sample contents densely
    let mut rng = seeding::rng(700);
    for lr in 0..=5usize {
        for lh in 0..=5usize {
            for _ in 0..40 {
                let r: Vec<u8> = (0..lr).map(|_| rng.gen_range(0u8..3)).collect();
                let h: Vec<u8> = (0..lh).map(|_| rng.gen_range(0u8..3)).collect();
                if selftrain::eval::align(&r, &h).errors() != brute(&r, &h) {
                    mismatches += 1;
                }
                total += 1;
            }
        }
    }
    verdict(
        "criterion-5 edit-distance-oracle",
        &format!("{mismatches} mismatches over {total} pairs"),
        mismatches == 0,
    );
}

#[test]
fn c06_selection_algebra_and_calibration_optimum() {
    use selftrain::confidence::{select, SelectionConfig};
    use selftrain::decode::{HypSource, NBestList};
    use selftrain::decode::Hypothesis;
    let mut rng = seeding::rng(800);
    let mk = |text: &str, score: f64| Hypothesis {
        text: text.to_string(),
        step_logprobs: vec![score],
        total_logprob: score,
        decode_score: score,
        entropy: -score,
        source: HypSource::Beam(0),
        truncated: false,
        posteriors: PosteriorTrace { decoder_steps: vec![], ctc_frames: None },
    };
    let lists: Vec<NBestList> = (0..30)
        .map(|i| NBestList {
            utt_id: format!("u{i}"),
            hyps: (0..5).map(|j| mk(&format!("t{i}-{j}"), -rng.gen_range(0.0..2.0))).collect(),
        })
        .collect();
    let mut subset_ok = true;
    let mut partition_ok = true;
    let mut prev: Option<Vec<(String, String)>> = None;
    for theta in [-2.0, -1.5, -1.0, -0.5, -0.1] {
        let cfg = SelectionConfig {
            measure: Measure::DecodeScore,
            threshold: theta,
            max_hyps_per_utt: 100,
        };
        let (sel, audit) = select(&lists, &cfg);
        partition_ok &=
            audit.kept + audit.rejected_threshold + audit.rejected_cap == audit.considered;
        let cur: Vec<(String, String)> =
            sel.iter().map(|s| (s.utt_id.clone(), s.text.clone())).collect();
        if let Some(p) = &prev {
            subset_ok &= cur.iter().all(|x| p.contains(x));
        }
        prev = Some(cur);
    }

    // calibration optimum re-scan + separable case
    let mut optimum_ok = true;
    for _ in 0..20 {
        let points: Vec<CalibPoint> = (0..60)
            .map(|i| {
                let reliable = i % 3 != 0;
                CalibPoint {
                    value: if reliable { rng.gen_range(-0.7..0.0) } else { rng.gen_range(-1.4..-0.3) },
                    wer: if reliable { 0.0 } else { 0.6 },
                }
            })
            .collect();
        let out = calibrate_threshold(&points, Measure::DecodeScore, 0.10, 0.01).unwrap();
        let cost = out.miss_rate + out.false_accept_rate;
        let n_rel = points.iter().filter(|p| p.wer <= 0.10).count() as f64;
        let n_unr = points.len() as f64 - n_rel;
        let mut g = -1.5;
        while g <= 0.1 {
            let miss =
                points.iter().filter(|p| p.wer <= 0.10 && p.value < g).count() as f64 / n_rel;
            let fa = points.iter().filter(|p| p.wer > 0.10 && p.value >= g).count() as f64 / n_unr;
            optimum_ok &= miss + fa >= cost - 1e-9;
            g += 0.01;
        }
    }
    let separable: Vec<CalibPoint> = (0..20)
        .map(|i| {
            if i % 2 == 0 {
                CalibPoint { value: -0.3 - 0.001 * i as f64, wer: 0.0 }
            } else {
                CalibPoint { value: -0.6 - 0.001 * i as f64, wer: 1.0 }
            }
        })
        .collect();
    let sep = calibrate_threshold(&separable, Measure::DecodeScore, 0.10, 0.05).unwrap();
    let separable_ok = sep.miss_rate == 0.0
        && sep.false_accept_rate == 0.0
        && sep.threshold > -0.6
        && sep.threshold < -0.3;
    verdict(
        "criterion-6 selection-algebra",
        &format!(
            "subset {subset_ok}, partition {partition_ok}, optimum {optimum_ok}, separable at {:.2}",
            sep.threshold
        ),
        subset_ok && partition_ok && optimum_ok && separable_ok,
    );
}

#[test]
fn c07_mc_dropout_contracts() {
    let model = Model::new(toy_model_cfg(), Alphabet::new(vec!['a', 'b']), 77);
    let mut rng = seeding::rng(900);
    let feats = rand_features(&mut rng, 10, 4);
    let greedy = greedy_decode(&model, &feats).unwrap();
    let (zero_rate, _) = mc_dropout_decode(&model, &feats, "u", 6, 0.0, 3).unwrap();
    let rate0_ok = zero_rate.len() == 1 && zero_rate[0].text == greedy.text;
    let (a, _) = mc_dropout_decode(&model, &feats, "u", 6, 0.3, 3).unwrap();
    let (b, _) = mc_dropout_decode(&model, &feats, "u", 6, 0.3, 3).unwrap();
    let seeds_ok = a.len() == b.len()
        && a.iter().zip(&b).all(|(x, y)| {
            x.text == y.text
                && x.decode_score == y.decode_score
                && x.step_logprobs == y.step_logprobs
        });
    // diversity on the real matrix run: mean distinct transcripts per dev2
    // utterance with the dropout-trained model at rate 0.2
    let diversity: Vec<f64> =
        MATRIX.outcome.per_seed.iter().map(|s| s.mc_stats.mean_distinct()).collect();
    let div = median(&diversity).unwrap();
    verdict(
        "criterion-7 mc-dropout-contracts",
        &format!("rate0 {rate0_ok}, seed-repro {seeds_ok}, mean distinct {div:.2}"),
        rate0_ok && seeds_ok && div > 1.0,
    );
}

fn median_wer(system: &str, split: &str) -> f64 {
    *MATRIX
        .outcome
        .median_wer
        .get(system)
        .and_then(|m| m.get(split))
        .unwrap_or_else(|| panic!("missing median wer for {system}/{split}"))
}

#[test]
fn c08_wer_orderings_and_runtime() {
    let e2e = median_wer(ssl::SYSTEM_E2E, "test");
    let s = median_wer(ssl::SYSTEM_E2E_S, "test");
    let su = median_wer(ssl::SYSTEM_E2E_SU, "test");
    let drop = median_wer(ssl::SYSTEM_E2E_SU_DROP, "test");
    let orderings = e2e > s && s >= su && su >= drop;
    let drop_gain = su - drop;
    // the wall-clock budget is stated for a 4-core laptop; scale the
    // allowance when fewer cores are available
    let budget = 30.0 * 60.0 * (4.0 / MATRIX.cores as f64).max(1.0);
    let runtime_ok = MATRIX.wall_secs < budget;
    verdict(
        "criterion-8 wer-orderings",
        &format!(
            "test medians e2e {e2e:.4} > s {s:.4} >= su {su:.4} >= drop {drop:.4}; drop gain {drop_gain:.4}; matrix {:.0}s on {} cores (budget {budget:.0}s)",
            MATRIX.wall_secs, MATRIX.cores
        ),
        orderings && drop_gain >= 0.003 && runtime_ok,
    );
}

#[test]
fn c09_confidence_wer_correlation() {
    let score_rhos: Vec<f64> = MATRIX
        .outcome
        .per_seed
        .iter()
        .filter_map(|s| s.spearman.get("decode_score").copied())
        .collect();
    let ent_rhos: Vec<f64> = MATRIX
        .outcome
        .per_seed
        .iter()
        .filter_map(|s| s.spearman.get("entropy").copied())
        .collect();
    let rho_score = median(&score_rhos).unwrap();
    let rho_ent = median(&ent_rhos).unwrap();
    verdict(
        "criterion-9 confidence-wer-correlation",
        &format!("median rho decode_score {rho_score:.3}, entropy {rho_ent:.3}"),
        rho_score <= -0.3 && rho_ent >= 0.3,
    );
}

#[test]
fn c10_threshold_sweep() {
    let su = median_wer(ssl::SYSTEM_E2E_SU, "test");
    let loose = median_wer(ssl::SYSTEM_E2E_SU_LOOSE, "test");
    verdict(
        "criterion-10 threshold-sweep",
        &format!("wer at calibrated threshold {su:.4} <= loose {loose:.4}"),
        su <= loose,
    );
}

#[test]
fn c11_determinism() {
    // the whole pipeline, scaled down, run twice against the same corpus
    let root = work_dir("determinism");
    let corpus_dir = root.join("corpus");
    let corpus_cfg = CorpusConfig {
        train_count: 300,
        dev1_count: 60,
        dev2_count: 80,
        dev3_count: 40,
        test_count: 40,
        // mild difficulty so the scaled-down model still calibrates
        noise_sigma: 0.2,
        template_perturbation: 0.15,
        ..CorpusConfig::default()
    };
    build_corpus(&corpus_cfg, &corpus_dir, 5).unwrap();
    let mk_cfg = |out: &str| PipelineConfig {
        corpus_dir: corpus_dir.clone(),
        out_dir: root.join(out),
        seed_hyper: selftrain::model::TrainHyper {
            epochs: 30,
            ..PipelineConfig::default().seed_hyper
        },
        adapt_hyper: selftrain::model::TrainHyper {
            epochs: 4,
            ..PipelineConfig::default().adapt_hyper
        },
        retrain_hyper: selftrain::model::TrainHyper {
            epochs: 3,
            ..PipelineConfig::default().retrain_hyper
        },
        mc_samples: 4,
        // wide reliability cutoff: the tiny model is weak, and the
        // determinism check only needs a non-degenerate calibration split
        wer_split: 0.5,
        seeds: vec![1],
        ..PipelineConfig::default()
    };
    let a = ssl::run_experiment_matrix(&mk_cfg("runs_a")).unwrap();
    let b = ssl::run_experiment_matrix(&mk_cfg("runs_b")).unwrap();
    let metrics = |o: &MatrixOutcome| {
        serde_json::to_string(&(&o.per_seed, &o.median_wer)).unwrap()
    };
    let metrics_ok = metrics(&a) == metrics(&b);
    let ckpt = |out: &str| {
        std::fs::read(root.join(out).join("retrain/e2e_su/seed1/model.ckpt")).unwrap()
    };
    let ckpt_ok = ckpt("runs_a") == ckpt("runs_b");
    verdict(
        "criterion-11 determinism",
        &format!("metrics bit-identical {metrics_ok}, checkpoints byte-identical {ckpt_ok}"),
        metrics_ok && ckpt_ok,
    );
}
