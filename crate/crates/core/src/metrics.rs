//! Evaluation metrics: corpus BLEU-1..4, ROUGE-L, an exact-match METEOR
//! variant ("meteor-exact": no stemming or synonym tables), and clinical
//! efficacy precision/recall/F1 over 14-category label vectors.
//!
//! All functions are pure; corpus scores are deterministic reductions in
//! input order.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// One candidate report against its single reference.
#[derive(Clone, Debug)]
pub struct TokenizedPair {
    pub candidate: Vec<String>,
    pub reference: Vec<String>,
}

impl TokenizedPair {
    pub fn new(candidate: Vec<String>, reference: Vec<String>) -> Self {
        TokenizedPair { candidate, reference }
    }
}

/// Binary indicators over the 14 thoracic disease categories.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LabelVector(pub [bool; 14]);

impl LabelVector {
    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        if bits.len() != 14 || bits.iter().any(|&b| b > 1) {
            return Err(Error::Contract(format!(
                "label vector must be 14 binary digits, got {bits:?}"
            )));
        }
        let mut out = [false; 14];
        for (o, &b) in out.iter_mut().zip(bits) {
            *o = b == 1;
        }
        Ok(LabelVector(out))
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Modified n-gram precision pooled over the corpus: clipped matches and
/// totals summed across pairs before dividing.
fn pooled_precision(corpus: &[TokenizedPair], n: usize) -> (u64, u64) {
    let mut matched = 0u64;
    let mut total = 0u64;
    for pair in corpus {
        let cand = ngram_counts(&pair.candidate, n);
        let refs = ngram_counts(&pair.reference, n);
        for (gram, &count) in &cand {
            let clip = refs.get(gram).copied().unwrap_or(0);
            matched += count.min(clip) as u64;
        }
        total += pair.candidate.len().saturating_sub(n - 1) as u64;
    }
    (matched, total)
}

/// Corpus BLEU-1..max_n with uniform weights and the brevity penalty
/// `exp(1 - r/c)` when the candidate total is shorter. A zero pooled
/// precision at any order zeroes that BLEU-n.
pub fn bleu(corpus: &[TokenizedPair], max_n: usize) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::Contract("bleu: empty corpus".into()));
    }
    let c: u64 = corpus.iter().map(|p| p.candidate.len() as u64).sum();
    let r: u64 = corpus.iter().map(|p| p.reference.len() as u64).sum();
    let bp = if c == 0 {
        0.0
    } else if c >= r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let precisions: Vec<f64> = (1..=max_n)
        .map(|n| {
            let (matched, total) = pooled_precision(corpus, n);
            if total == 0 {
                0.0
            } else {
                matched as f64 / total as f64
            }
        })
        .collect();
    let mut scores = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let slice = &precisions[..n];
        if slice.iter().any(|&p| p == 0.0) {
            scores.push(0.0);
        } else {
            let log_mean: f64 = slice.iter().map(|p| p.ln()).sum::<f64>() / n as f64;
            scores.push(bp * log_mean.exp());
        }
    }
    Ok(scores)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            cur[j + 1] = if ai == bj { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Sentence-level LCS F-score with beta = 1.2, averaged over the corpus.
pub fn rouge_l(corpus: &[TokenizedPair]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Contract("rouge_l: empty corpus".into()));
    }
    const BETA: f64 = 1.2;
    let mut total = 0.0;
    for pair in corpus {
        if pair.candidate.is_empty() || pair.reference.is_empty() {
            continue;
        }
        let lcs = lcs_len(&pair.candidate, &pair.reference) as f64;
        if lcs == 0.0 {
            continue;
        }
        let p = lcs / pair.candidate.len() as f64;
        let r = lcs / pair.reference.len() as f64;
        total += ((1.0 + BETA * BETA) * p * r) / (r + BETA * BETA * p);
    }
    Ok(total / corpus.len() as f64)
}

/// One-to-one exact-token alignment chosen greedily in candidate order,
/// preferring the reference position that continues the current chunk.
/// Returns matched pairs as (candidate index, reference index).
fn align_exact(candidate: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let mut used = vec![false; reference.len()];
    let mut pairs = Vec::new();
    let mut prev_ref: Option<usize> = None;
    for (ci, token) in candidate.iter().enumerate() {
        let next = prev_ref.map(|r| r + 1);
        let continuing = next
            .filter(|&r| r < reference.len() && !used[r] && &reference[r] == token);
        let chosen = continuing.or_else(|| {
            reference
                .iter()
                .enumerate()
                .position(|(ri, t)| !used[ri] && t == token)
        });
        if let Some(ri) = chosen {
            used[ri] = true;
            pairs.push((ci, ri));
            prev_ref = Some(ri);
        }
    }
    pairs
}

fn chunk_count(pairs: &[(usize, usize)]) -> usize {
    if pairs.is_empty() {
        return 0;
    }
    let mut chunks = 1;
    for w in pairs.windows(2) {
        if w[1].0 != w[0].0 + 1 || w[1].1 != w[0].1 + 1 {
            chunks += 1;
        }
    }
    chunks
}

/// Exact-match METEOR with alpha = 0.9, beta = 3, gamma = 0.5: harmonic
/// mean weighted toward recall times a fragmentation penalty, averaged over
/// the corpus. Pairs with no matches score 0.
pub fn meteor(corpus: &[TokenizedPair]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Contract("meteor: empty corpus".into()));
    }
    const ALPHA: f64 = 0.9;
    const BETA: f64 = 3.0;
    const GAMMA: f64 = 0.5;
    let mut total = 0.0;
    for pair in corpus {
        let pairs = align_exact(&pair.candidate, &pair.reference);
        let m = pairs.len() as f64;
        if m == 0.0 {
            continue;
        }
        let p = m / pair.candidate.len() as f64;
        let r = m / pair.reference.len() as f64;
        let f_mean = p * r / (ALPHA * p + (1.0 - ALPHA) * r);
        let chunks = chunk_count(&pairs) as f64;
        let penalty = GAMMA * (chunks / m).powf(BETA);
        total += f_mean * (1.0 - penalty);
    }
    Ok(total / corpus.len() as f64)
}

/// Micro-averaged precision/recall/F1 over all (report, category) cells.
/// Zero denominators yield 0.
pub fn ce_metrics(pred: &[LabelVector], truth: &[LabelVector]) -> Result<(f64, f64, f64)> {
    if pred.len() != truth.len() {
        return Err(Error::Contract(format!(
            "ce_metrics: {} predictions vs {} references",
            pred.len(),
            truth.len()
        )));
    }
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    for (p, t) in pred.iter().zip(truth) {
        for c in 0..14 {
            match (p.0[c], t.0[c]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(prf(tp, fp, fn_))
}

/// Macro average: per-category precision/recall/F1, then the mean over the
/// 14 categories.
pub fn ce_metrics_macro(pred: &[LabelVector], truth: &[LabelVector]) -> Result<(f64, f64, f64)> {
    if pred.len() != truth.len() {
        return Err(Error::Contract(format!(
            "ce_metrics: {} predictions vs {} references",
            pred.len(),
            truth.len()
        )));
    }
    let mut sums = (0.0, 0.0, 0.0);
    for c in 0..14 {
        let mut tp = 0u64;
        let mut fp = 0u64;
        let mut fn_ = 0u64;
        for (p, t) in pred.iter().zip(truth) {
            match (p.0[c], t.0[c]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        let (p, r, f) = prf(tp, fp, fn_);
        sums = (sums.0 + p, sums.1 + r, sums.2 + f);
    }
    Ok((sums.0 / 14.0, sums.1 / 14.0, sums.2 / 14.0))
}

fn prf(tp: u64, fp: u64, fn_: u64) -> (f64, f64, f64) {
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

/// Everything the evaluate workflow reports. Values are in [0, 1]; CE
/// entries are present only when label files were supplied.
#[derive(Clone, Debug, Default)]
pub struct MetricReport {
    pub bleu: Vec<f64>,
    pub meteor: f64,
    pub rouge_l: f64,
    pub ce_micro: Option<(f64, f64, f64)>,
    pub ce_macro: Option<(f64, f64, f64)>,
}

pub fn evaluate_corpus(
    corpus: &[TokenizedPair],
    labels: Option<(&[LabelVector], &[LabelVector])>,
) -> Result<MetricReport> {
    let mut report = MetricReport {
        bleu: bleu(corpus, 4)?,
        meteor: meteor(corpus)?,
        rouge_l: rouge_l(corpus)?,
        ..Default::default()
    };
    if let Some((pred, truth)) = labels {
        report.ce_micro = Some(ce_metrics(pred, truth)?);
        report.ce_macro = Some(ce_metrics_macro(pred, truth)?);
    }
    Ok(report)
}
