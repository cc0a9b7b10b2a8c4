//! Held-out evaluation and training diagnostics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::env::Dataset;
use crate::policy::PolicyParams;
use crate::rng::substream;
use crate::verifier::{format_reward, outcome_reward};
use crate::vocab::{Vocab, REFLECTION_WORDS};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Samples per prompt.
    pub k: usize,
    /// Zero means greedy decoding.
    pub temperature: f64,
    pub max_response_len: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k: 8, temperature: 0.6, max_response_len: 8, seed: 0 }
    }
}

/// What the `k` samples for one prompt looked like.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptOutcome {
    pub category: String,
    pub responses: Vec<String>,
    pub lengths: Vec<usize>,
    pub correct: Vec<bool>,
    pub boxed: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub prompts: usize,
    pub pass1_avg_k: f64,
    pub pass_n: f64,
    pub boxed_ratio: f64,
    pub mean_response_length: f64,
    pub reflection_counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub temperature: f64,
    pub seed: u64,
    pub overall: EvalStats,
    pub per_category: BTreeMap<String, EvalStats>,
}

/// Samples `k` responses per prompt and scores them against the labels.
pub fn evaluate(params: &PolicyParams, dataset: &Dataset, vocab: &Vocab, cfg: &EvalConfig) -> Result<EvalReport> {
    if cfg.k == 0 {
        return Err(Error::InvalidInput("k must be >= 1".into()));
    }
    if !(cfg.temperature >= 0.0 && cfg.temperature.is_finite()) {
        return Err(Error::InvalidInput(format!("temperature must be >= 0, got {}", cfg.temperature)));
    }
    let outcomes = dataset
        .examples()
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = substream(cfg.seed, "eval", &[i as u64]);
            let mut out = PromptOutcome {
                category: ex.category.clone(),
                responses: Vec::with_capacity(cfg.k),
                lengths: Vec::with_capacity(cfg.k),
                correct: Vec::with_capacity(cfg.k),
                boxed: Vec::with_capacity(cfg.k),
            };
            for _ in 0..cfg.k {
                let seq = if cfg.temperature == 0.0 {
                    params.greedy_response(&ex.prompt, cfg.max_response_len, vocab.eos())?
                } else {
                    params.sample_response(&ex.prompt, cfg.temperature, cfg.max_response_len, vocab.eos(), &mut rng)?
                };
                let text = vocab.render_response(&seq.ids);
                out.lengths.push(seq.len());
                out.correct.push(outcome_reward(&text, &ex.label) == 1.0);
                out.boxed.push(format_reward(&text) == 1.0);
                out.responses.push(text);
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut by_cat: BTreeMap<String, Vec<PromptOutcome>> = BTreeMap::new();
    for o in &outcomes {
        by_cat.entry(o.category.clone()).or_default().push(o.clone());
    }
    Ok(EvalReport {
        k: cfg.k,
        temperature: cfg.temperature,
        seed: cfg.seed,
        overall: summarize(&outcomes),
        per_category: by_cat.into_iter().map(|(c, os)| (c, summarize(&os))).collect(),
    })
}

/// Aggregates per-prompt outcomes. Empty input gives all-zero stats.
pub fn summarize(outcomes: &[PromptOutcome]) -> EvalStats {
    let prompts = outcomes.len();
    let mut pass1 = 0.0;
    let mut pass_n = 0.0;
    let mut boxed = 0usize;
    let mut samples = 0usize;
    let mut length = 0usize;
    for o in outcomes {
        let k = o.correct.len();
        if k > 0 {
            pass1 += o.correct.iter().filter(|&&c| c).count() as f64 / k as f64;
        }
        if o.correct.iter().any(|&c| c) {
            pass_n += 1.0;
        }
        boxed += o.boxed.iter().filter(|&&b| b).count();
        samples += k;
        length += o.lengths.iter().sum::<usize>();
    }
    let per = |x: f64, n: usize| if n == 0 { 0.0 } else { x / n as f64 };
    let all: Vec<&str> = outcomes.iter().flat_map(|o| o.responses.iter().map(String::as_str)).collect();
    EvalStats {
        prompts,
        pass1_avg_k: per(pass1, prompts),
        pass_n: per(pass_n, prompts),
        boxed_ratio: per(boxed as f64, samples),
        mean_response_length: per(length as f64, samples),
        reflection_counts: count_reflection_words(&all, &REFLECTION_WORDS),
    }
}

/// Number of responses containing each word at least once, ignoring case.
pub fn count_reflection_words<S: AsRef<str>>(responses: &[S], words: &[&str]) -> BTreeMap<String, usize> {
    let lowered: Vec<String> = responses.iter().map(|r| r.as_ref().to_lowercase()).collect();
    words
        .iter()
        .map(|w| {
            let w_lower = w.to_lowercase();
            (w.to_string(), lowered.iter().filter(|r| r.contains(&w_lower)).count())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Saturation {
    /// Index of the first step whose trailing mean reaches the threshold.
    pub saturation_step: usize,
    /// Index of the best held-out accuracy at or after saturation.
    pub best_heldout_step: usize,
    pub post_sat_gain: f64,
}

/// Finds where training accuracy saturates and how much held-out accuracy
/// rose afterwards. The trailing window is truncated at the start of the series.
pub fn detect_post_saturation(train: &[f64], heldout: &[f64], threshold: f64, window: usize) -> Result<Option<Saturation>> {
    if train.len() != heldout.len() {
        return Err(Error::InvalidInput(format!(
            "series lengths differ: {} train vs {} held-out",
            train.len(),
            heldout.len()
        )));
    }
    if window == 0 {
        return Err(Error::InvalidInput("window must be >= 1".into()));
    }
    let saturation_step = (0..train.len()).find(|&t| {
        let lo = (t + 1).saturating_sub(window);
        let w = &train[lo..=t];
        w.iter().sum::<f64>() / w.len() as f64 >= threshold
    });
    Ok(saturation_step.map(|s| {
        let mut best = s;
        for t in s..heldout.len() {
            if heldout[t] > heldout[best] {
                best = t;
            }
        }
        Saturation { saturation_step: s, best_heldout_step: best, post_sat_gain: heldout[best] - heldout[s] }
    }))
}
