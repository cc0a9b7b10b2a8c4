//! Warm start: a small supervised phase that turns a random policy into a
//! "base model" with latent task skill but unreliable output format.
//!
//! Targets are sampled per prompt from a style mix. `plain` states an answer
//! the verifier cannot extract. `loop` repeats a reflection word a geometric
//! number of times before answering, so sampling at low temperature often
//! runs out of tokens first.
//!
//! | style     | tokens                         |
//! |-----------|--------------------------------|
//! | `boxed`   | `\boxed{ c } <eos>`            |
//! | `plain`   | `c <eos>`                      |
//! | `loop`    | `rethink ... \boxed{ c } <eos>` |
//! | `junk`    | one to three random digits     |
//!
//! `c` is the true label with probability `correct_prob`, else another label
//! from the dataset.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::Dataset;
use crate::policy::PolicyParams;
use crate::rng::{substream, Stream};
use crate::trainer::{optimizer_step, AdamW};
use crate::vocab::{TokenId, Vocab, BOX_CLOSE, BOX_OPEN, EOS};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Sampled targets per prompt and epoch.
    pub samples_per_prompt: usize,
    /// Prompts per optimizer update.
    pub batch_prompts: usize,
    pub learning_rate: f64,
    pub correct_prob: f64,
    /// Relative weights of the boxed, plain, loop and junk styles.
    pub style_weights: [f64; 4],
    /// Probability of another reflection word in the loop style.
    pub loop_continue: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 600,
            samples_per_prompt: 4,
            batch_prompts: 10,
            learning_rate: 1e-2,
            correct_prob: 0.85,
            style_weights: [0.15, 0.45, 0.3, 0.1],
            loop_continue: 0.75,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.samples_per_prompt == 0 || self.batch_prompts == 0 {
            return Err(Error::Config("pretraining epochs, samples and batch must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("pretraining learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.loop_continue) {
            return Err(Error::Config("loop_continue must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.correct_prob) {
            return Err(Error::Config("correct_prob must lie in [0, 1]".into()));
        }
        if self.style_weights.iter().any(|w| !(*w >= 0.0)) || self.style_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("style weights must be >= 0 with a positive sum".into()));
        }
        Ok(())
    }
}

/// One target response for a prompt labeled `label`.
pub fn synthesize_target(label: &str, others: &[String], cfg: &PretrainConfig, rng: &mut Stream) -> Vec<String> {
    let answer = if others.is_empty() || rng.gen_bool(cfg.correct_prob) {
        label.to_string()
    } else {
        others.choose(rng).unwrap().clone()
    };
    let digits = |s: &str| s.chars().map(String::from).collect::<Vec<_>>();
    let total: f64 = cfg.style_weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    let mut style = 3;
    for (i, w) in cfg.style_weights.iter().enumerate() {
        if u < *w {
            style = i;
            break;
        }
        u -= w;
    }
    let mut out = Vec::new();
    match style {
        0 => {
            out.push(BOX_OPEN.to_string());
            out.extend(digits(&answer));
            out.push(BOX_CLOSE.to_string());
        }
        1 => out.extend(digits(&answer)),
        2 => {
            out.push("rethink".to_string());
            while rng.gen_bool(cfg.loop_continue) {
                out.push("rethink".to_string());
            }
            out.push(BOX_OPEN.to_string());
            out.extend(digits(&answer));
            out.push(BOX_CLOSE.to_string());
        }
        _ => {
            for _ in 0..rng.gen_range(1..=3) {
                out.push(rng.gen_range(0..10).to_string());
            }
        }
    }
    out.push(EOS.to_string());
    out
}

/// Teacher-forced maximum likelihood on synthesized targets.
pub fn pretrain(initial: &PolicyParams, dataset: &Dataset, vocab: &Vocab, cfg: &PretrainConfig) -> Result<PolicyParams> {
    cfg.validate()?;
    let mut labels: Vec<String> = dataset.examples().iter().map(|e| e.label.clone()).collect();
    labels.sort();
    labels.dedup();

    let mut params = initial.clone();
    let mut opt = AdamW::new(params.len());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = substream(cfg.seed, "pretrain", &[epoch as u64]);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_prompts) {
            let mut grad = PolicyParams::zeros(params.dims());
            let mut count = 0usize;
            for &i in chunk {
                let ex = &dataset.examples()[i];
                let others: Vec<String> = labels.iter().filter(|l| **l != ex.label).cloned().collect();
                for _ in 0..cfg.samples_per_prompt {
                    let target: Vec<TokenId> = vocab.ids_of(&synthesize_target(&ex.label, &others, cfg, &mut rng))?;
                    params.nll_gradient(&ex.prompt, &target, &mut grad)?;
                    count += 1;
                }
            }
            let scale = 1.0 / count as f64;
            for g in grad.as_mut_slice() {
                *g *= scale;
            }
            optimizer_step(&mut params, &grad, cfg.learning_rate, 0.0, false, &mut opt)?;
        }
    }
    Ok(params)
}
