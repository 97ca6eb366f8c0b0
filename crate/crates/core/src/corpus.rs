//! Synthetic character-transcribed corpus with a source domain and a shifted
//! target domain, partitioned into train / dev1 / dev2 / dev3 / test.
//!
//! Each utterance is a T×F feature matrix built by repeating a per-character
//! template vector for a jittered number of frames and adding Gaussian noise.
//! The target domain perturbs the templates, standing in for the acoustic
//! mismatch between source and target corpora.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::seeding;
use crate::tensor::NdArray;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("character `{0}` is not in the alphabet")]
    UnknownChar(char),
    #[error("empty word list")]
    EmptyWordList,
    #[error("empty text")]
    EmptyText,
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed record in {path} line {line}: {msg}")]
    BadRecord { path: PathBuf, line: usize, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.to_path_buf(), source }
}

/// Character inventory plus the reserved CTC / decoder indices.
///
/// Symbols occupy indices `0..size`. The CTC output space appends blank at
/// index `size`; the decoder output space appends sos at `size` and eos at
/// `size + 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alphabet {
    symbols: Vec<char>,
}

impl Default for Alphabet {
    fn default() -> Self {
        let mut symbols: Vec<char> = ('a'..='z').collect();
        symbols.push(' ');
        symbols.push('\'');
        Alphabet { symbols }
    }
}

impl Alphabet {
    pub fn new(symbols: Vec<char>) -> Self {
        let mut seen = std::collections::BTreeSet::new();
        for &s in &symbols {
            assert!(seen.insert(s), "duplicate symbol {s:?}");
        }
        Alphabet { symbols }
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn blank_id(&self) -> usize {
        self.symbols.len()
    }

    pub fn sos_id(&self) -> usize {
        self.symbols.len()
    }

    pub fn eos_id(&self) -> usize {
        self.symbols.len() + 1
    }

    /// CTC output dimension: symbols + blank.
    pub fn ctc_dim(&self) -> usize {
        self.symbols.len() + 1
    }

    /// Decoder output dimension: symbols + sos + eos.
    pub fn decoder_dim(&self) -> usize {
        self.symbols.len() + 2
    }

    pub fn index_of(&self, c: char) -> Result<usize, CorpusError> {
        self.symbols.iter().position(|&s| s == c).ok_or(CorpusError::UnknownChar(c))
    }

    pub fn char_at(&self, idx: usize) -> char {
        self.symbols[idx]
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>, CorpusError> {
        text.chars().map(|c| self.index_of(c)).collect()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev1,
    Dev2,
    Dev3,
    Test,
}

impl Split {
    pub const ALL: [Split; 5] = [Split::Train, Split::Dev1, Split::Dev2, Split::Dev3, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev1 => "dev1",
            Split::Dev2 => "dev2",
            Split::Dev3 => "dev3",
            Split::Test => "test",
        }
    }

    pub fn domain(self) -> Domain {
        match self {
            Split::Train => Domain::Source,
            _ => Domain::Target,
        }
    }

    /// dev2 is the unlabeled split: its reference is hidden on disk and never
    /// visible to training paths.
    pub fn unlabeled(self) -> bool {
        self == Split::Dev2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// One utterance flowing through the pipeline. `text` is `None` for the
/// unlabeled view of dev2.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    pub features: NdArray,
    pub text: Option<String>,
    pub split: Split,
    pub domain: Domain,
}

/// Knobs of one domain's synthesis.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DomainSpec {
    pub template_seed: u64,
    pub noise_sigma: f64,
    pub frames_per_char_range: (usize, usize),
    pub template_perturbation: f64,
}

impl DomainSpec {
    fn validate(&self) {
        assert!(self.frames_per_char_range.0 >= 1, "frames_per_char lo must be >= 1");
        assert!(self.frames_per_char_range.0 <= self.frames_per_char_range.1);
        assert!(self.noise_sigma >= 0.0);
        assert!(self.template_perturbation >= 0.0);
    }
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream simple and portable.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Per-character template vectors. Deterministic in (template_seed,
/// feature_dim); the target domain adds perturbation noise scaled by
/// `template_perturbation` on top of the source templates.
pub fn make_templates(
    alphabet: &Alphabet,
    spec: &DomainSpec,
    feature_dim: usize,
) -> BTreeMap<char, Vec<f64>> {
    assert!(feature_dim >= 4, "feature_dim must be >= 4");
    spec.validate();
    let mut out = BTreeMap::new();
    for (idx, &sym) in alphabet.symbols().iter().enumerate() {
        let mut base_rng =
            seeding::rng(seeding::mix_u64(spec.template_seed, &[0x7e3a, idx as u64, feature_dim as u64]));
        let mut tpl: Vec<f64> = (0..feature_dim).map(|_| standard_normal(&mut base_rng)).collect();
        if spec.template_perturbation > 0.0 {
            let mut drift_rng =
                seeding::rng(seeding::mix_u64(spec.template_seed, &[0xd21f, idx as u64, feature_dim as u64]));
            for v in &mut tpl {
                *v += spec.template_perturbation * standard_normal(&mut drift_rng);
            }
        }
        out.insert(sym, tpl);
    }
    out
}

/// Expand `text` into a feature matrix: d_i template copies per character
/// plus i.i.d. N(0, sigma²) noise, d_i uniform in the configured range.
pub fn synthesize_features(
    text: &str,
    templates: &BTreeMap<char, Vec<f64>>,
    spec: &DomainSpec,
    rng_seed: u64,
) -> Result<NdArray, CorpusError> {
    spec.validate();
    if text.is_empty() {
        return Err(CorpusError::EmptyText);
    }
    let feature_dim = templates.values().next().expect("no templates").len();
    let mut rng = seeding::rng(rng_seed);
    let (lo, hi) = spec.frames_per_char_range;
    let mut rows: Vec<f64> = Vec::new();
    let mut t = 0;
    for c in text.chars() {
        let tpl = templates.get(&c).ok_or(CorpusError::UnknownChar(c))?;
        let d = rng.gen_range(lo..=hi);
        for _ in 0..d {
            for &v in tpl {
                let noise =
                    if spec.noise_sigma > 0.0 { spec.noise_sigma * standard_normal(&mut rng) } else { 0.0 };
                rows.push(v + noise);
            }
            t += 1;
        }
    }
    Ok(NdArray::new(vec![t, feature_dim], rows))
}

/// Corpus generation configuration. Desk-scale defaults mirror the split
/// roles of the reference experiment: train is source-domain supervised data,
/// dev1 target-domain supervised, dev2 target unlabeled, dev3 target CV,
/// test target evaluation.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub train_count: usize,
    pub dev1_count: usize,
    pub dev2_count: usize,
    pub dev3_count: usize,
    pub test_count: usize,
    pub feature_dim: usize,
    pub frames_per_char: (usize, usize),
    pub noise_sigma: f64,
    pub template_perturbation: f64,
    pub words_per_utt: (usize, usize),
    /// `inline` stores features as JSON arrays in the record; `binary` writes
    /// a little-endian f32 matrix file per utterance and records its path.
    pub feature_storage: FeatureStorage,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            train_count: 2000,
            dev1_count: 300,
            dev2_count: 1000,
            dev3_count: 150,
            test_count: 150,
            feature_dim: 16,
            frames_per_char: (3, 6),
            noise_sigma: 1.2,
            template_perturbation: 0.6,
            words_per_utt: (2, 4),
            feature_storage: FeatureStorage::Binary,
        }
    }
}

impl CorpusConfig {
    pub fn count_for(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_count,
            Split::Dev1 => self.dev1_count,
            Split::Dev2 => self.dev2_count,
            Split::Dev3 => self.dev3_count,
            Split::Test => self.test_count,
        }
    }

    pub fn domain_spec(&self, domain: Domain, master_seed: u64) -> DomainSpec {
        DomainSpec {
            template_seed: seeding::mix(master_seed, &["templates"]),
            noise_sigma: self.noise_sigma,
            frames_per_char_range: self.frames_per_char,
            template_perturbation: match domain {
                Domain::Source => 0.0,
                Domain::Target => self.template_perturbation,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureStorage {
    Inline,
    Binary,
}

/// Fixed 200-word sampling vocabulary; gives transcripts word-level structure
/// so WER is meaningful.
pub const WORD_LIST: [&str; 200] = [
    "the", "be", "to", "of", "and", "a", "in", "that", "have", "it", "for", "not", "on", "with",
    "he", "as", "you", "do", "at", "this", "but", "his", "by", "from", "they", "we", "say", "her",
    "she", "or", "an", "will", "my", "one", "all", "would", "there", "their", "what", "so", "up",
    "out", "if", "about", "who", "get", "which", "go", "me", "when", "make", "can", "like", "time",
    "no", "just", "him", "know", "take", "people", "into", "year", "your", "good", "some", "could",
    "them", "see", "other", "than", "then", "now", "look", "only", "come", "its", "over", "think",
    "also", "back", "after", "use", "two", "how", "our", "work", "first", "well", "way", "even",
    "new", "want", "because", "any", "these", "give", "day", "most", "us", "water", "long", "find",
    "here", "thing", "great", "man", "world", "life", "still", "hand", "high", "old", "tell",
    "very", "call", "small", "woman", "place", "down", "own", "last", "night", "each", "right",
    "left", "house", "point", "story", "don't", "word", "while", "again", "off", "went", "need",
    "land", "home", "big", "air", "line", "set", "read", "never", "end", "few", "might", "city",
    "tree", "cross", "hard", "start", "begin", "grow", "river", "four", "state", "once", "book",
    "hear", "stop", "second", "late", "miss", "idea", "enough", "eat", "face", "watch", "far",
    "real", "open", "seem", "together", "next", "white", "children", "side", "feet", "car", "mile",
    "walk", "sea", "began", "song", "being", "leave", "family", "it's", "music", "color", "stand",
    "sun", "question", "fish", "area", "mark", "horse", "bird", "problem", "complete",
];

/// One line of a corpus record file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub domain: Domain,
    pub split: Split,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden_ref: Option<String>,
    pub features: Features,
}

/// Inline row-major feature matrix or a relative path to a binary f32 file
/// with a 2×u32 little-endian (T, F) header.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Features {
    Path(String),
    Inline(Vec<Vec<f64>>),
}

/// Which fields a loader is allowed to see.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoadView {
    /// Training/decoding view: dev2 references stay hidden.
    Training,
    /// Post-hoc oracle evaluation only: hidden references become `text`.
    OracleEval,
}

pub struct BuiltCorpus {
    pub dir: PathBuf,
    pub counts: BTreeMap<String, usize>,
    pub corpus_hash: String,
}

fn sample_text(cfg: &CorpusConfig, rng: &mut impl Rng) -> String {
    let (lo, hi) = cfg.words_per_utt;
    let n = rng.gen_range(lo..=hi);
    let mut words = Vec::with_capacity(n);
    for _ in 0..n {
        words.push(WORD_LIST[rng.gen_range(0..WORD_LIST.len())]);
    }
    words.join(" ")
}

fn write_binary_features(path: &Path, feats: &NdArray) -> Result<(), CorpusError> {
    let mut buf = Vec::with_capacity(8 + feats.len() * 4);
    buf.extend_from_slice(&(feats.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(feats.cols() as u32).to_le_bytes());
    for &v in feats.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(io_err(path))
}

fn read_binary_features(path: &Path) -> Result<NdArray, CorpusError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let bad = |msg: &str| CorpusError::BadRecord { path: path.to_path_buf(), line: 0, msg: msg.into() };
    if bytes.len() < 8 {
        return Err(bad("binary feature file shorter than header"));
    }
    let t = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let f = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + t * f * 4 {
        return Err(bad("binary feature file length does not match header"));
    }
    let mut data = Vec::with_capacity(t * f);
    for chunk in bytes[8..].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    Ok(NdArray::new(vec![t, f], data))
}

/// Generate and persist the five split files (plus binary feature files when
/// configured). Pure function of (config, master_seed): regeneration is
/// byte-identical.
pub fn build_corpus(
    cfg: &CorpusConfig,
    out_dir: &Path,
    master_seed: u64,
) -> Result<BuiltCorpus, CorpusError> {
    if WORD_LIST.is_empty() {
        return Err(CorpusError::EmptyWordList);
    }
    let alphabet = Alphabet::default();
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let feat_dir = out_dir.join("feats");
    if cfg.feature_storage == FeatureStorage::Binary {
        fs::create_dir_all(&feat_dir).map_err(io_err(&feat_dir))?;
    }

    let mut counts = BTreeMap::new();
    let mut hasher = Sha256::new();
    for split in Split::ALL {
        let spec = cfg.domain_spec(split.domain(), master_seed);
        let templates = make_templates(&alphabet, &spec, cfg.feature_dim);
        let split_seed = seeding::mix(master_seed, &["corpus", split.name()]);
        let mut text_rng = seeding::rng(seeding::mix_u64(split_seed, &[1]));
        let path = out_dir.join(format!("{}.jsonl", split.name()));
        let file = fs::File::create(&path).map_err(io_err(&path))?;
        let mut w = BufWriter::new(file);
        let n = cfg.count_for(split);
        for i in 0..n {
            let id = format!("{}-{:05}", split.name(), i);
            let text = sample_text(cfg, &mut text_rng);
            let feats =
                synthesize_features(&text, &templates, &spec, seeding::mix(split_seed, &["utt", &id]))?;
            let features = match cfg.feature_storage {
                FeatureStorage::Inline => Features::Inline(
                    (0..feats.rows()).map(|r| feats.row(r).to_vec()).collect(),
                ),
                FeatureStorage::Binary => {
                    let rel = format!("feats/{id}.f32");
                    write_binary_features(&out_dir.join(&rel), &feats)?;
                    Features::Path(rel)
                }
            };
            let (text_field, hidden) =
                if split.unlabeled() { (None, Some(text)) } else { (Some(text), None) };
            let rec = CorpusRecord {
                id,
                domain: split.domain(),
                split,
                text: text_field,
                hidden_ref: hidden,
                features,
            };
            let line = serde_json::to_string(&rec).expect("serialize record");
            writeln!(w, "{line}").map_err(io_err(&path))?;
        }
        w.flush().map_err(io_err(&path))?;
        counts.insert(split.name().to_string(), n);
        hasher.update(fs::read(&path).map_err(io_err(&path))?);
    }
    let corpus_hash = format!("{:x}", hasher.finalize());
    let manifest = serde_json::json!({
        "config": cfg,
        "master_seed": master_seed,
        "counts": counts,
        "corpus_hash": corpus_hash,
    });
    let mpath = out_dir.join("manifest.json");
    fs::write(&mpath, serde_json::to_string_pretty(&manifest).unwrap()).map_err(io_err(&mpath))?;
    Ok(BuiltCorpus { dir: out_dir.to_path_buf(), counts, corpus_hash })
}

pub fn corpus_hash(dir: &Path) -> Result<String, CorpusError> {
    let mpath = dir.join("manifest.json");
    let bytes = fs::read(&mpath).map_err(io_err(&mpath))?;
    let v: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| CorpusError::BadRecord {
        path: mpath.clone(),
        line: 0,
        msg: e.to_string(),
    })?;
    Ok(v["corpus_hash"].as_str().unwrap_or_default().to_string())
}

/// Load one split. `LoadView::Training` never exposes dev2 references.
pub fn load_split(dir: &Path, split: Split, view: LoadView) -> Result<Vec<Utterance>, CorpusError> {
    let path = dir.join(format!("{}.jsonl", split.name()));
    let file = fs::File::open(&path).map_err(io_err(&path))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(&path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&line).map_err(|e| CorpusError::BadRecord {
            path: path.clone(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        let features = match &rec.features {
            Features::Inline(rows) => NdArray::from_rows(rows.clone()),
            Features::Path(rel) => read_binary_features(&dir.join(rel))?,
        };
        let text = match view {
            LoadView::Training => rec.text,
            LoadView::OracleEval => rec.text.or(rec.hidden_ref),
        };
        out.push(Utterance { id: rec.id, features, text, split: rec.split, domain: rec.domain });
    }
    Ok(out)
}
