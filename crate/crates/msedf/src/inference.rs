//! Decoding: greedy, length-unnormalized beam search, and comparison-based
//! reranking against the captions of similar training images.

use std::collections::BTreeMap;

use crate::data::{Vocabulary, END_ID, PAD_ID, START_ID};
use crate::error::{Error, Result};
use crate::fusion::{fuse, nearest_neighbors, FeatureStore, FusedFeature};
use crate::layers::Mode;
use crate::metrics::comparison_score;
use crate::model::ModelParams;
use crate::tensor::{Tape, Tensor};

/// One beam entry. `finished` is set exactly when the last token is the end
/// id; `log_prob_sum` is the sum of the chosen tokens' log probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    pub token_ids: Vec<usize>,
    pub log_prob_sum: f64,
    pub finished: bool,
}

#[derive(Clone, Debug)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub max_len: usize,
    pub k_similar: usize,
    pub rerank: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_width: 5,
            max_len: 20,
            k_similar: 4,
            rerank: true,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::InvalidConfig("beam_width must be at least 1".to_string()));
        }
        if self.rerank && self.k_similar == 0 {
            return Err(Error::InvalidConfig(
                "k_similar must be at least 1 when reranking".to_string(),
            ));
        }
        Ok(())
    }
}

/// Strip start/end/pad from a decoded id sequence.
pub fn strip_specials(ids: &[usize]) -> Vec<usize> {
    ids.iter()
        .copied()
        .filter(|&id| id != PAD_ID && id != START_ID && id != END_ID)
        .collect()
}

/// Greedy decoding: at each step take the most probable non-pad token (ties
/// to the lowest id), stopping at the end token or after `max_len` tokens.
/// Returns the sequence with specials stripped.
pub fn greedy_decode(params: &ModelParams, fused: &Tensor, cfg: &DecodeConfig) -> Result<Vec<usize>> {
    let tape = Tape::new();
    let mut hidden = params.zero_hidden();
    let mut last = START_ID;
    let mut out = Vec::new();
    for _ in 0..cfg.max_len {
        let (probs, new_hidden) = params.forward_step(&tape, fused, last, &hidden, Mode::Eval)?;
        hidden = new_hidden;
        let pv = probs.to_vec();
        let pick = argmax_skipping_pad(&pv);
        if pick == END_ID {
            break;
        }
        out.push(pick);
        last = pick;
    }
    Ok(strip_specials(&out))
}

fn argmax_skipping_pad(probs: &[f64]) -> usize {
    let mut best = usize::MAX;
    let mut best_p = f64::NEG_INFINITY;
    for (id, &p) in probs.iter().enumerate() {
        if id == PAD_ID {
            continue;
        }
        if p > best_p {
            best_p = p;
            best = id;
        }
    }
    best
}

struct AliveBeam {
    tokens: Vec<usize>,
    log_prob_sum: f64,
    hidden: Vec<Tensor>,
    last: usize,
}

struct Candidate {
    tokens: Vec<usize>,
    log_prob_sum: f64,
    finished: bool,
    state: Option<(Vec<Tensor>, usize)>,
}

/// Length-unnormalized beam search. Finished hypotheses are frozen and keep
/// competing for beam slots; the pad id is never expanded. Returns up to
/// `beam_width` finished (or max_len-truncated) hypotheses sorted by
/// `log_prob_sum` descending, ties by lexicographic token ids.
pub fn beam_search(
    params: &ModelParams,
    fused: &Tensor,
    cfg: &DecodeConfig,
) -> Result<Vec<BeamHypothesis>> {
    cfg.validate()?;
    let tape = Tape::new();
    let mut alive = vec![AliveBeam {
        tokens: Vec::new(),
        log_prob_sum: 0.0,
        hidden: params.zero_hidden(),
        last: START_ID,
    }];
    let mut finished: Vec<Candidate> = Vec::new();

    for _ in 0..cfg.max_len {
        if alive.is_empty() {
            break;
        }
        let mut candidates: Vec<Candidate> = std::mem::take(&mut finished);
        for hyp in alive.drain(..) {
            let (probs, new_hidden) =
                params.forward_step(&tape, fused, hyp.last, &hyp.hidden, Mode::Eval)?;
            let pv = probs.to_vec();
            for (id, &p) in pv.iter().enumerate() {
                if id == PAD_ID {
                    continue;
                }
                let mut tokens = hyp.tokens.clone();
                tokens.push(id);
                candidates.push(Candidate {
                    tokens,
                    log_prob_sum: hyp.log_prob_sum + p.ln(),
                    finished: id == END_ID,
                    state: Some((new_hidden.clone(), id)),
                });
            }
        }
        sort_candidates(&mut candidates);
        candidates.truncate(cfg.beam_width);
        for cand in candidates {
            if cand.finished {
                finished.push(cand);
            } else {
                let (hidden, last) = cand.state.expect("unfinished candidates carry state");
                alive.push(AliveBeam {
                    tokens: cand.tokens,
                    log_prob_sum: cand.log_prob_sum,
                    hidden,
                    last,
                });
            }
        }
    }

    let mut results: Vec<BeamHypothesis> = finished
        .into_iter()
        .map(|c| BeamHypothesis {
            token_ids: c.tokens,
            log_prob_sum: c.log_prob_sum,
            finished: true,
        })
        .chain(alive.into_iter().map(|h| BeamHypothesis {
            token_ids: h.tokens,
            log_prob_sum: h.log_prob_sum,
            finished: false,
        }))
        .collect();
    results.sort_by(|a, b| {
        b.log_prob_sum
            .partial_cmp(&a.log_prob_sum)
            .expect("log probs are never NaN")
            .then_with(|| a.token_ids.cmp(&b.token_ids))
    });
    results.truncate(cfg.beam_width);
    Ok(results)
}

fn sort_candidates(candidates: &mut [Candidate]) {
    candidates.sort_by(|a, b| {
        b.log_prob_sum
            .partial_cmp(&a.log_prob_sum)
            .expect("log probs are never NaN")
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
}

/// Rerank beam hypotheses by the comparison score against the pooled
/// reference captions of the query's `k` nearest training images. The final
/// score of a hypothesis is the mean over pooled references of the
/// sentence-level comparison score; ties go to the higher beam log
/// probability.
pub fn comparison_rerank(
    hypotheses: &[BeamHypothesis],
    query: &FusedFeature,
    pool: &[FusedFeature],
    refs_by_id: &BTreeMap<String, Vec<Vec<String>>>,
    k: usize,
    vocab: &Vocabulary,
) -> Result<BeamHypothesis> {
    if hypotheses.is_empty() {
        return Err(Error::EmptyInput("comparison_rerank hypotheses"));
    }
    let neighbor_ids = nearest_neighbors(query, pool, k)?;
    let mut pooled: Vec<Vec<String>> = Vec::new();
    for id in &neighbor_ids {
        let refs = refs_by_id.get(id).ok_or_else(|| Error::Dataset(format!(
            "neighbor `{id}` has no reference captions"
        )))?;
        pooled.extend(refs.iter().cloned());
    }
    if pooled.is_empty() {
        return Err(Error::EmptyInput("comparison_rerank pooled references"));
    }

    let mut best: Option<(f64, &BeamHypothesis)> = None;
    for hyp in hypotheses {
        let words = vocab.decode(&hyp.token_ids);
        let mut total = 0.0;
        for reference in &pooled {
            total += comparison_score(&words, std::slice::from_ref(reference))?;
        }
        let score = total / pooled.len() as f64;
        let better = match best {
            None => true,
            Some((best_score, best_hyp)) => {
                score > best_score
                    || (score == best_score && hyp.log_prob_sum > best_hyp.log_prob_sum)
            }
        };
        if better {
            best = Some((score, hyp));
        }
    }
    Ok(best.expect("hypotheses is non-empty").1.clone())
}

/// End-to-end captioning: fuse the image's features, run beam search,
/// optionally rerank against similar training images, and render the winning
/// hypothesis as a space-joined string.
#[allow(clippy::too_many_arguments)]
pub fn caption_image(
    params: &ModelParams,
    vocab: &Vocabulary,
    store_a: &FeatureStore,
    store_b: &FeatureStore,
    train_refs: &[(String, Vec<Vec<String>>)],
    image_id: &str,
    cfg: &DecodeConfig,
) -> Result<String> {
    let tape = Tape::new();
    let query = fuse(&tape, store_a, store_b, &params.l1, Mode::Eval, image_id)?;
    let hypotheses = beam_search(params, &query.projected, cfg)?;
    let winner = if cfg.rerank {
        let mut refs_by_id = BTreeMap::new();
        let mut pool = Vec::new();
        for (id, refs) in train_refs {
            if id == image_id {
                continue;
            }
            let entry = fuse(&tape, store_a, store_b, &params.l1, Mode::Eval, id)?;
            pool.push(entry);
            refs_by_id.insert(id.clone(), refs.clone());
        }
        comparison_rerank(&hypotheses, &query, &pool, &refs_by_id, cfg.k_similar, vocab)?
    } else {
        hypotheses
            .first()
            .cloned()
            .ok_or(Error::EmptyInput("beam results"))?
    };
    Ok(vocab.decode(&winner.token_ids).join(" "))
}
