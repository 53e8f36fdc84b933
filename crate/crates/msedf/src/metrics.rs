//! Caption evaluation metrics: corpus BLEU-1..4, sentence ROUGE-L and
//! METEOR (exact-match variant), corpus CIDEr, and the comparison score used
//! to rerank beam hypotheses.
//!
//! Pinned parameters: BLEU uses uniform 1/n weights and the `exp(1 - r/c)`
//! brevity penalty with per-sentence closest reference lengths; ROUGE-L uses
//! beta = 1.2; METEOR here is the exact-match variant (no stemming or
//! synonymy) with the classic 0.9/0.1 F-mean, gamma = 0.5 and cubed chunk
//! penalty; CIDEr is the plain TF-IDF consensus form (not CIDEr-D), scaled
//! by 10.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The seven-metric record reported by evaluation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

impl MetricReport {
    pub fn in_range(&self) -> bool {
        let unit = [self.bleu1, self.bleu2, self.bleu3, self.bleu4, self.meteor, self.rouge_l];
        unit.iter().all(|v| (0.0..=1.0).contains(v)) && (0.0..=10.0).contains(&self.cider)
    }
}

/// Multiset of n-grams of one order.
pub fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<Vec<String>, u64> {
    let mut counts = BTreeMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for window in tokens.windows(n) {
        *counts.entry(window.to_vec()).or_insert(0) += 1;
    }
    counts
}

fn closest_ref_len(cand_len: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(|r| r.len())
        .min_by_key(|&len| {
            let diff = (len as i64 - cand_len as i64).unsigned_abs();
            (diff, len)
        })
        .unwrap_or(0)
}

/// Corpus BLEU-n: clipped n-gram precisions pooled over the corpus, geometric
/// mean with uniform weights, brevity penalty `exp(1 - r/c)` when the
/// candidate corpus is not longer than the closest-reference corpus. Any zero
/// precision gives 0.
pub fn bleu_n(candidates: &[Vec<String>], references: &[Vec<Vec<String>>], n: usize) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput("bleu candidates"));
    }
    if candidates.len() != references.len() {
        return Err(Error::Dataset(format!(
            "bleu: {} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if !(1..=4).contains(&n) {
        return Err(Error::InvalidConfig(format!("bleu order must be 1..=4, got {n}")));
    }
    let mut matched = vec![0u64; n];
    let mut total = vec![0u64; n];
    let mut cand_len = 0u64;
    let mut ref_len = 0u64;
    for (cand, refs) in candidates.iter().zip(references.iter()) {
        cand_len += cand.len() as u64;
        ref_len += closest_ref_len(cand.len(), refs) as u64;
        for k in 1..=n {
            let counts = ngram_counts(cand, k);
            total[k - 1] += counts.values().sum::<u64>();
            let ref_counts: Vec<BTreeMap<Vec<String>, u64>> =
                refs.iter().map(|r| ngram_counts(r, k)).collect();
            for (gram, &count) in &counts {
                let clip = ref_counts
                    .iter()
                    .map(|rc| rc.get(gram).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                matched[k - 1] += count.min(clip);
            }
        }
    }
    let mut log_sum = 0.0;
    for k in 0..n {
        if matched[k] == 0 {
            return Ok(0.0);
        }
        log_sum += (matched[k] as f64 / total[k] as f64).ln();
    }
    if cand_len == 0 {
        return Ok(0.0);
    }
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * (log_sum / n as f64).exp())
}

/// Sentence-level BLEU-n against one reference set.
pub fn sentence_bleu_n(candidate: &[String], references: &[Vec<String>], n: usize) -> Result<f64> {
    let cand = [candidate.to_vec()];
    let refs = [references.to_vec()];
    bleu_n(&cand, &refs, n)
}

/// Longest common subsequence length, by dynamic programming.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

const ROUGE_BETA: f64 = 1.2;

/// Sentence ROUGE-L: the LCS F-measure with beta = 1.2, maximized over the
/// reference set. Empty inputs score 0.
pub fn rouge_l(candidate: &[String], references: &[Vec<String>]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    references
        .iter()
        .filter(|r| !r.is_empty())
        .map(|r| {
            let lcs = lcs_len(candidate, r) as f64;
            if lcs == 0.0 {
                return 0.0;
            }
            let p = lcs / candidate.len() as f64;
            let rec = lcs / r.len() as f64;
            ((1.0 + b2) * p * rec) / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}

/// Exact-match METEOR: unigram alignment maximizing matches then minimizing
/// chunks; `F = PR / (0.9P + 0.1R)`, penalty `0.5 (chunks/m)^3`, score
/// `F (1 - penalty)`, maximized over the reference set.
pub fn meteor_lite(candidate: &[String], references: &[Vec<String>]) -> f64 {
    references
        .iter()
        .map(|r| meteor_single(candidate, r))
        .fold(0.0, f64::max)
}

fn meteor_single(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let (m, chunks) = align(candidate, reference);
    if m == 0 {
        return 0.0;
    }
    let m_f = m as f64;
    let p = m_f / candidate.len() as f64;
    let r = m_f / reference.len() as f64;
    let f_mean = (p * r) / (0.9 * p + 0.1 * r);
    let penalty = 0.5 * (chunks as f64 / m_f).powi(3);
    f_mean * (1.0 - penalty)
}

/// Maximum number of matched unigrams and, among all maximum matchings, the
/// minimum number of chunks (runs contiguous in both sentences).
fn align(candidate: &[String], reference: &[String]) -> (usize, usize) {
    let mut ref_budget: BTreeMap<&String, u64> = BTreeMap::new();
    for tok in reference {
        *ref_budget.entry(tok).or_insert(0) += 1;
    }
    let mut cand_counts: BTreeMap<&String, u64> = BTreeMap::new();
    for tok in candidate {
        *cand_counts.entry(tok).or_insert(0) += 1;
    }
    let m: u64 = cand_counts
        .iter()
        .map(|(tok, &c)| c.min(ref_budget.get(tok).copied().unwrap_or(0)))
        .sum();
    let m = m as usize;
    if m == 0 {
        return (0, 0);
    }

    let options: Vec<Vec<usize>> = candidate
        .iter()
        .map(|tok| {
            reference
                .iter()
                .enumerate()
                .filter(|(_, r)| *r == tok)
                .map(|(j, _)| j)
                .collect()
        })
        .collect();

    let greedy = greedy_chunks(&options, m);
    if reference.len() > 64 {
        return (m, greedy);
    }
    let mut search = ChunkSearch {
        options: &options,
        m,
        best: greedy,
        nodes: 0,
    };
    search.dfs(0, 0, None, 0, 0);
    (m, search.best)
}

/// Deterministic greedy alignment (prefer continuing the current chunk, else
/// lowest unused reference position); used as the initial bound and as the
/// fallback for oversized inputs.
fn greedy_chunks(options: &[Vec<usize>], m: usize) -> usize {
    let mut used = vec![false; options.iter().flatten().copied().max().unwrap_or(0) + 1];
    let mut matched = 0usize;
    let mut chunks = 0usize;
    let mut prev: Option<usize> = None;
    for opts in options {
        if matched == m {
            break;
        }
        let cont = prev
            .and_then(|p| opts.iter().find(|&&j| j == p + 1 && !used[j]))
            .copied();
        let pick = cont.or_else(|| opts.iter().find(|&&j| !used[j]).copied());
        match pick {
            Some(j) => {
                if prev != Some(j.wrapping_sub(1)) {
                    chunks += 1;
                }
                used[j] = true;
                matched += 1;
                prev = Some(j);
            }
            None => prev = None,
        }
    }
    chunks.max(1)
}

struct ChunkSearch<'a> {
    options: &'a [Vec<usize>],
    m: usize,
    best: usize,
    nodes: u64,
}

impl<'a> ChunkSearch<'a> {
    /// `prev` is the reference index matched at the previous candidate
    /// position, or `None` if that position was unmatched.
    fn dfs(&mut self, pos: usize, used: u64, prev: Option<usize>, matched: usize, chunks: usize) {
        self.nodes += 1;
        if self.best == 1 || self.nodes > 500_000 || chunks >= self.best {
            return;
        }
        let remaining = self.options.len() - pos;
        if matched + remaining < self.m {
            return;
        }
        if pos == self.options.len() {
            if matched == self.m {
                self.best = chunks;
            }
            return;
        }
        // continuation first so tight alignments are found early
        let cont = prev.map(|p| p + 1);
        for &j in &self.options[pos] {
            if Some(j) == cont && used & (1 << j) == 0 {
                self.dfs(pos + 1, used | (1 << j), Some(j), matched + 1, chunks);
            }
        }
        for &j in &self.options[pos] {
            if Some(j) != cont && used & (1 << j) == 0 {
                self.dfs(pos + 1, used | (1 << j), Some(j), matched + 1, chunks + 1);
            }
        }
        self.dfs(pos + 1, used, None, matched, chunks);
    }
}

/// Plain corpus CIDEr: for n = 1..4, TF-IDF n-gram vectors (document
/// frequency counted once per image over `corpus_refs`), per-image score is
/// the mean cosine against each reference, averaged over n and scaled by 10;
/// the corpus value is the mean over images.
pub fn cider(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
    corpus_refs: &[Vec<Vec<String>>],
) -> Result<f64> {
    if corpus_refs.is_empty() {
        return Err(Error::EmptyInput("cider corpus"));
    }
    if candidates.len() != references.len() {
        return Err(Error::Dataset(format!(
            "cider: {} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    let n_images = corpus_refs.len() as f64;
    // document frequency per order: how many images' reference sets contain
    // the gram at least once
    let mut df: Vec<BTreeMap<Vec<String>, u64>> = vec![BTreeMap::new(); 4];
    for image_refs in corpus_refs {
        for (k, dfk) in df.iter_mut().enumerate() {
            let mut seen: BTreeMap<Vec<String>, ()> = BTreeMap::new();
            for r in image_refs {
                for gram in ngram_counts(r, k + 1).into_keys() {
                    seen.entry(gram).or_insert(());
                }
            }
            for gram in seen.into_keys() {
                *dfk.entry(gram).or_insert(0) += 1;
            }
        }
    }
    let tfidf = |tokens: &[String], k: usize| -> BTreeMap<Vec<String>, f64> {
        ngram_counts(tokens, k + 1)
            .into_iter()
            .map(|(gram, count)| {
                let d = df[k].get(&gram).copied().unwrap_or(0).max(1) as f64;
                let idf = (n_images / d).ln();
                (gram, count as f64 * idf)
            })
            .collect()
    };

    let mut corpus_sum = 0.0;
    for (cand, refs) in candidates.iter().zip(references.iter()) {
        if refs.is_empty() {
            return Err(Error::EmptyInput("cider references"));
        }
        let mut order_sum = 0.0;
        for k in 0..4 {
            let cv = tfidf(cand, k);
            let mut ref_sum = 0.0;
            for r in refs {
                let rv = tfidf(r, k);
                ref_sum += tfidf_cosine(&cv, &rv);
            }
            order_sum += ref_sum / refs.len() as f64;
        }
        corpus_sum += 10.0 * order_sum / 4.0;
    }
    Ok(corpus_sum / candidates.len() as f64)
}

fn tfidf_cosine(a: &BTreeMap<Vec<String>, f64>, b: &BTreeMap<Vec<String>, f64>) -> f64 {
    let na: f64 = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a
        .iter()
        .filter_map(|(gram, &va)| b.get(gram).map(|&vb| va * vb))
        .sum();
    dot / (na * nb)
}

/// Sentence-level rerank score: the arithmetic mean of BLEU-2, METEOR and
/// ROUGE-L against the given reference set.
pub fn comparison_score(candidate: &[String], references: &[Vec<String>]) -> Result<f64> {
    let b2 = sentence_bleu_n(candidate, references, 2)?;
    let met = meteor_lite(candidate, references);
    let rl = rouge_l(candidate, references);
    Ok((b2 + met + rl) / 3.0)
}

/// Fill the full report for one generated caption per image.
pub fn corpus_evaluate(
    outputs: &[Vec<String>],
    references: &[Vec<Vec<String>>],
) -> Result<MetricReport> {
    if outputs.is_empty() {
        return Err(Error::EmptyInput("corpus_evaluate outputs"));
    }
    if outputs.len() != references.len() {
        return Err(Error::Dataset(format!(
            "corpus_evaluate: {} outputs but {} reference sets",
            outputs.len(),
            references.len()
        )));
    }
    let n = outputs.len() as f64;
    let meteor = outputs
        .iter()
        .zip(references.iter())
        .map(|(c, r)| meteor_lite(c, r))
        .sum::<f64>()
        / n;
    let rouge = outputs
        .iter()
        .zip(references.iter())
        .map(|(c, r)| rouge_l(c, r))
        .sum::<f64>()
        / n;
    Ok(MetricReport {
        bleu1: bleu_n(outputs, references, 1)?,
        bleu2: bleu_n(outputs, references, 2)?,
        bleu3: bleu_n(outputs, references, 3)?,
        bleu4: bleu_n(outputs, references, 4)?,
        meteor,
        rouge_l: rouge,
        cider: cider(outputs, references, references)?,
    })
}
