//! Corpus caption metrics: BLEU-1..4, ROUGE-L, CIDEr and an exact-match
//! METEOR variant. Every score is reported on a ×100 scale.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::BufRead;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::threads;
use crate::vocab::tokenize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("CIDEr needs at least two images, got {0}")]
    SingleImage(usize),
    #[error("BLEU order {0} outside 1..=4")]
    Order(usize),
    #[error("image {0:?} has no references")]
    NoReferences(String),
    #[error("line {line}: {message}")]
    Json { line: usize, message: String },
    #[error("no references for image {0:?}")]
    MissingReferences(String),
    #[error("image {0:?} listed twice")]
    DuplicateId(String),
}

/// One candidate with its references, all tokenized by [`tokenize`].
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedPair {
    pub image_id: String,
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl TokenizedPair {
    pub fn new(image_id: impl Into<String>, candidate: &str, references: &[&str]) -> Self {
        Self {
            image_id: image_id.into(),
            candidate: tokenize(candidate),
            references: references.iter().map(|r| tokenize(r)).collect(),
        }
    }
}

fn check(pairs: &[TokenizedPair]) -> Result<(), MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    match pairs.iter().find(|p| p.references.is_empty()) {
        Some(p) => Err(MetricError::NoReferences(p.image_id.clone())),
        None => Ok(()),
    }
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Per-pair BLEU sufficient statistics: clipped matches and totals for
/// orders 1..=4, candidate length, closest reference length.
fn bleu_stats(p: &TokenizedPair) -> ([usize; 4], [usize; 4], usize, usize) {
    let mut matched = [0; 4];
    let mut total = [0; 4];
    for n in 1..=4 {
        let cand = ngrams(&p.candidate, n);
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in &p.references {
            for (g, c) in ngrams(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        total[n - 1] = p.candidate.len().saturating_sub(n - 1);
        matched[n - 1] = cand.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
    }
    let c = p.candidate.len();
    let r = p
        .references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("checked non-empty");
    (matched, total, c, r)
}

/// Corpus BLEU-n: clipped n-gram precisions pooled over the corpus,
/// geometric mean over orders 1..=n, brevity penalty from the closest
/// reference length (shorter wins ties).
pub fn corpus_bleu(pairs: &[TokenizedPair], n: usize) -> Result<f64, MetricError> {
    Ok(bleu_all(pairs, n)?[n - 1])
}

fn bleu_all(pairs: &[TokenizedPair], n: usize) -> Result<[f64; 4], MetricError> {
    if !(1..=4).contains(&n) {
        return Err(MetricError::Order(n));
    }
    check(pairs)?;
    let stats: Vec<_> = threads::install(|| pairs.par_iter().map(bleu_stats).collect());
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (m, t, cl, rl) in stats {
        for k in 0..4 {
            matched[k] += m[k];
            total[k] += t[k];
        }
        c += cl;
        r += rl;
    }
    let bp = if c == 0 {
        0.0
    } else if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    let mut out = [0.0; 4];
    let mut log_sum = 0.0;
    for k in 0..4 {
        if matched[k] == 0 || total[k] == 0 {
            break;
        }
        log_sum += (matched[k] as f64 / total[k] as f64).ln();
        out[k] = 100.0 * bp * (log_sum / (k + 1) as f64).exp();
    }
    Ok(out)
}

/// Mean of BLEU-1..4.
pub fn avg_bleu(pairs: &[TokenizedPair]) -> Result<f64, MetricError> {
    Ok(bleu_all(pairs, 4)?.iter().sum::<f64>() / 4.0)
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

fn rouge_pair(p: &TokenizedPair) -> f64 {
    p.references
        .iter()
        .map(|r| {
            let l = lcs(&p.candidate, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let prec = l / p.candidate.len() as f64;
            let rec = l / r.len() as f64;
            let b2 = ROUGE_BETA * ROUGE_BETA;
            (1.0 + b2) * prec * rec / (rec + b2 * prec)
        })
        .fold(0.0, f64::max)
}

/// Mean over images of the best LCS F-score against any reference.
pub fn rouge_l(pairs: &[TokenizedPair]) -> Result<f64, MetricError> {
    check(pairs)?;
    Ok(mean_of(pairs, rouge_pair) * 100.0)
}

fn mean_of(pairs: &[TokenizedPair], f: fn(&TokenizedPair) -> f64) -> f64 {
    let scores: Vec<f64> = threads::install(|| pairs.par_iter().map(f).collect());
    scores.iter().sum::<f64>() / scores.len() as f64
}

/// Matches, chunks for a leftmost-greedy exact alignment of `cand` to `reference`.
fn align(cand: &[String], reference: &[String]) -> (usize, usize) {
    let mut used = vec![false; reference.len()];
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (i, w) in cand.iter().enumerate() {
        if let Some(j) = (0..reference.len()).find(|&j| !used[j] && reference[j] == *w) {
            used[j] = true;
            pairs.push((i, j));
        }
    }
    let chunks = pairs
        .iter()
        .enumerate()
        .filter(|(k, &(i, j))| *k == 0 || pairs[k - 1] != (i - 1, j.wrapping_sub(1)))
        .count();
    (pairs.len(), chunks)
}

fn meteor_pair(p: &TokenizedPair) -> f64 {
    p.references
        .iter()
        .map(|r| {
            let (m, chunks) = align(&p.candidate, r);
            if m == 0 {
                return 0.0;
            }
            let prec = m as f64 / p.candidate.len() as f64;
            let rec = m as f64 / r.len() as f64;
            let fmean = prec * rec / (0.9 * prec + 0.1 * rec);
            let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
            fmean * (1.0 - penalty)
        })
        .fold(0.0, f64::max)
}

/// METEOR with exact unigram matching only (no stems or synonyms).
pub fn meteor_lite(pairs: &[TokenizedPair]) -> Result<f64, MetricError> {
    check(pairs)?;
    Ok(mean_of(pairs, meteor_pair) * 100.0)
}

type Vector<'a> = HashMap<&'a [String], f64>;

fn tfidf<'a>(tokens: &'a [String], n: usize, df: &HashMap<&[String], usize>, log_images: f64) -> Vector<'a> {
    ngrams(tokens, n)
        .into_iter()
        .map(|(g, c)| {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            (g, c as f64 * (log_images - d.ln()))
        })
        .collect()
}

fn cosine(a: &Vector, b: &Vector) -> f64 {
    let na = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().map(|(g, v)| v * b.get(g).copied().unwrap_or(0.0)).sum();
    dot / (na * nb)
}

/// Raw CIDEr in [0, 10]: for n = 1..4, tf-idf vectors with document
/// frequency counted over each image's reference set (floored at 1),
/// cosine to each reference averaged, then 10 × mean over n, averaged over
/// images.
pub fn cider_raw(pairs: &[TokenizedPair]) -> Result<f64, MetricError> {
    check(pairs)?;
    if pairs.len() < 2 {
        return Err(MetricError::SingleImage(pairs.len()));
    }
    let log_images = (pairs.len() as f64).ln();
    let dfs: Vec<HashMap<&[String], usize>> = (1..=4)
        .map(|n| {
            let mut df = HashMap::new();
            for p in pairs {
                let seen: HashSet<&[String]> = p.references.iter().flat_map(|r| ngrams(r, n).into_keys()).collect();
                for g in seen {
                    *df.entry(g).or_insert(0) += 1;
                }
            }
            df
        })
        .collect();
    let per_image: Vec<f64> = threads::install(|| {
        pairs
            .par_iter()
            .map(|p| {
                let mut sum = 0.0;
                for (k, df) in dfs.iter().enumerate() {
                    let c = tfidf(&p.candidate, k + 1, df, log_images);
                    let sims: f64 = p
                        .references
                        .iter()
                        .map(|r| cosine(&c, &tfidf(r, k + 1, df, log_images)))
                        .sum();
                    sum += sims / p.references.len() as f64;
                }
                10.0 * sum / 4.0
            })
            .collect()
    });
    Ok(per_image.iter().sum::<f64>() / pairs.len() as f64)
}

/// CIDEr on the conventional table scale (raw × 100).
pub fn cider(pairs: &[TokenizedPair]) -> Result<f64, MetricError> {
    Ok(cider_raw(pairs)? * 100.0)
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub images: usize,
    pub bleu: [f64; 4],
    pub avg_bleu: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub meteor_lite: f64,
}

pub fn evaluate_corpus(pairs: &[TokenizedPair]) -> Result<EvalReport, MetricError> {
    let bleu = bleu_all(pairs, 4)?;
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        images: pairs.len(),
        avg_bleu: bleu.iter().sum::<f64>() / 4.0,
        bleu,
        rouge_l: rouge_l(pairs)?,
        cider: cider(pairs)?,
        meteor_lite: meteor_lite(pairs)?,
    })
}

pub const TABLE_FOOTNOTE: &str =
    "SPICE is not implemented. METEOR uses exact unigram matching only (no stems or synonyms).";

/// Aligned text table of named reports in the column order avg_BLEU,
/// CIDEr, METEOR, ROUGE.
pub fn format_table(rows: &[(&str, &EvalReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    let mut out = format!(
        "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}\n",
        "model", "avg_BLEU", "CIDEr", "METEOR", "ROUGE"
    );
    for (name, r) in rows {
        out.push_str(&format!(
            "{:<width$}  {:>8.2}  {:>8.2}  {:>8.2}  {:>8.2}\n",
            name, r.avg_bleu, r.cider, r.meteor_lite, r.rouge_l
        ));
    }
    out.push_str(&format!("* {TABLE_FOOTNOTE}\n"));
    out
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_table(&[("model", self)]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateLine {
    pub image_id: String,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceLine {
    pub image_id: String,
    pub refs: Vec<String>,
}

/// Parses one JSON object per non-blank line.
pub fn read_json_lines<T: serde::de::DeserializeOwned>(reader: impl BufRead) -> Result<Vec<T>, MetricError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| MetricError::Json {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| MetricError::Json {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Joins candidates with references by image id, in candidate order.
pub fn pair_up(cands: &[CandidateLine], refs: &[ReferenceLine]) -> Result<Vec<TokenizedPair>, MetricError> {
    let mut by_id: BTreeMap<&str, &ReferenceLine> = BTreeMap::new();
    for r in refs {
        if by_id.insert(&r.image_id, r).is_some() {
            return Err(MetricError::DuplicateId(r.image_id.clone()));
        }
    }
    let mut seen = HashSet::new();
    cands
        .iter()
        .map(|c| {
            if !seen.insert(c.image_id.as_str()) {
                return Err(MetricError::DuplicateId(c.image_id.clone()));
            }
            let r = by_id
                .get(c.image_id.as_str())
                .ok_or_else(|| MetricError::MissingReferences(c.image_id.clone()))?;
            let refs: Vec<&str> = r.refs.iter().map(String::as_str).collect();
            Ok(TokenizedPair::new(c.image_id.clone(), &c.caption, &refs))
        })
        .collect()
}
