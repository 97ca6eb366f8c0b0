//! Scoring: edit-distance alignment, corpus-level WER/CER, rank correlation
//! between confidence values and per-utterance error, and CSV report output.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignCounts {
    pub hits: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl AlignCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn ref_len(&self) -> usize {
        self.hits + self.substitutions + self.deletions
    }

    pub fn add(&mut self, other: &AlignCounts) {
        self.hits += other.hits;
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
    }
}

/// Levenshtein alignment with unit costs. When scores tie during backtrace the
/// preference order is substitution/match, then insertion, then deletion.
pub fn align<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> AlignCounts {
    let n = reference.len();
    let m = hypothesis.len();
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for i in 0..=n {
        d[i][0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let ins = d[i][j - 1] + 1;
            let del = d[i - 1][j] + 1;
            d[i][j] = sub.min(ins).min(del);
        }
    }
    let mut counts = AlignCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let matched = reference[i - 1] == hypothesis[j - 1];
            let sub_cost = d[i - 1][j - 1] + usize::from(!matched);
            if d[i][j] == sub_cost {
                if matched {
                    counts.hits += 1;
                } else {
                    counts.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
            if d[i][j] == d[i][j - 1] + 1 {
                counts.insertions += 1;
                j -= 1;
                continue;
            }
            counts.deletions += 1;
            i -= 1;
        } else if j > 0 {
            counts.insertions += 1;
            j -= 1;
        } else {
            counts.deletions += 1;
            i -= 1;
        }
    }
    counts
}

pub fn word_align(reference: &str, hypothesis: &str) -> AlignCounts {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    align(&r, &h)
}

pub fn char_align(reference: &str, hypothesis: &str) -> AlignCounts {
    let r: Vec<char> = reference.chars().collect();
    let h: Vec<char> = hypothesis.chars().collect();
    align(&r, &h)
}

/// errors / reference length; an empty reference scores 0.0 against an empty
/// hypothesis and insertions-only otherwise (rate over hypothesis length = 1.0
/// per inserted token against a floor length of 1).
fn rate(counts: &AlignCounts) -> f64 {
    counts.errors() as f64 / counts.ref_len().max(1) as f64
}

pub fn wer(reference: &str, hypothesis: &str) -> f64 {
    rate(&word_align(reference, hypothesis))
}

pub fn cer(reference: &str, hypothesis: &str) -> f64 {
    rate(&char_align(reference, hypothesis))
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct CorpusScore {
    pub wer: f64,
    pub cer: f64,
    pub utterances: usize,
    pub ref_words: usize,
    pub word_errors: usize,
}

/// Corpus-level rates aggregate error and reference counts across utterances
/// (not a mean of per-utterance rates).
pub fn score_corpus<'a, I>(pairs: I) -> CorpusScore
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let mut words = AlignCounts::default();
    let mut chars = AlignCounts::default();
    let mut utterances = 0usize;
    for (r, h) in pairs {
        words.add(&word_align(r, h));
        chars.add(&char_align(r, h));
        utterances += 1;
    }
    CorpusScore {
        wer: rate(&words),
        cer: rate(&chars),
        utterances,
        ref_words: words.ref_len(),
        word_errors: words.errors(),
    }
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. None when fewer
/// than two points or either variable is constant.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 2 {
        return None;
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let mean = (n as f64 + 1.0) / 2.0;
    let mut num = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for k in 0..n {
        let dx = rx[k] - mean;
        let dy = ry[k] - mean;
        num += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(num / (vx * vy).sqrt())
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub values: Vec<Option<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Report {
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn new(columns: Vec<String>) -> Self {
        Report { columns, rows: Vec::new() }
    }

    pub fn push(&mut self, label: impl Into<String>, values: Vec<Option<f64>>) {
        let values = {
            let mut v = values;
            v.resize(self.columns.len(), None);
            v
        };
        self.rows.push(ReportRow { label: label.into(), values });
    }

    /// CSV with a label column, "-" for missing cells, and a trailing
    /// per-column median row over the present values.
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "system,{}", self.columns.join(","))?;
        let fmt = |v: &Option<f64>| match v {
            Some(x) => format!("{x:.4}"),
            None => "-".to_string(),
        };
        for row in &self.rows {
            let cells: Vec<String> = row.values.iter().map(fmt).collect();
            writeln!(w, "{},{}", row.label, cells.join(","))?;
        }
        let medians: Vec<Option<f64>> = (0..self.columns.len())
            .map(|c| {
                let col: Vec<f64> =
                    self.rows.iter().filter_map(|r| r.values[c]).collect();
                median(&col)
            })
            .collect();
        let cells: Vec<String> = medians.iter().map(fmt).collect();
        writeln!(w, "median,{}", cells.join(","))?;
        w.flush()
    }
}
