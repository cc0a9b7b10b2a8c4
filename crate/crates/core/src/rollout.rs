//! Batch construction and grouped sampling from the rollout snapshot.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Dataset, PromptExample};
use crate::loss::RolloutGroup;
use crate::policy::PolicyParams;
use crate::rng::substream;
use crate::verifier::{format_reward, outcome_reward};
use crate::vocab::Vocab;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// 1 iff the boxed answer matches the label.
    #[default]
    Outcome,
    /// 1 iff any boxed answer can be parsed.
    Format,
}

impl RewardMode {
    pub fn score(self, response: &str, label: &str) -> f64 {
        match self {
            RewardMode::Outcome => outcome_reward(response, label),
            RewardMode::Format => format_reward(response),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    /// Prompts per rollout step.
    pub batch_size: usize,
    /// Responses sampled per prompt.
    pub group_size: usize,
    pub temperature: f64,
    pub max_response_len: usize,
    pub reward_mode: RewardMode,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            group_size: 8,
            temperature: 0.6,
            max_response_len: 8,
            reward_mode: RewardMode::Outcome,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be >= 2".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if self.max_response_len == 0 {
            return Err(Error::Config("max_response_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// `batch_size` prompts: a shuffled draw without replacement when the dataset
/// is large enough, otherwise the dataset repeated cyclically.
pub fn build_batch<R: Rng + ?Sized>(dataset: &Dataset, batch_size: usize, rng: &mut R) -> Vec<PromptExample> {
    let examples = dataset.examples();
    if examples.len() >= batch_size {
        examples.choose_multiple(rng, batch_size).cloned().collect()
    } else {
        examples.iter().cycle().take(batch_size).cloned().collect()
    }
}

/// Deep copy used as the rollout snapshot or the frozen reference.
pub fn snapshot_policy(params: &PolicyParams) -> PolicyParams {
    params.clone()
}

/// Samples a group per prompt from `old_params`, scores it and normalizes advantages.
///
/// Prompt `i` of step `step` always draws from the same substream, so the
/// result does not depend on evaluation order.
pub fn rollout_step(
    old_params: &PolicyParams,
    batch: &[PromptExample],
    cfg: &RolloutConfig,
    vocab: &Vocab,
    seed: u64,
    step: u64,
) -> Result<Vec<RolloutGroup>> {
    cfg.validate()?;
    batch
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = substream(seed, "rollout", &[step, i as u64]);
            let mut responses = Vec::with_capacity(cfg.group_size);
            let mut rewards = Vec::with_capacity(cfg.group_size);
            for _ in 0..cfg.group_size {
                let r = old_params.sample_response(&ex.prompt, cfg.temperature, cfg.max_response_len, vocab.eos(), &mut rng)?;
                rewards.push(cfg.reward_mode.score(&vocab.render_response(&r.ids), &ex.label));
                responses.push(r);
            }
            RolloutGroup::new(ex.id.clone(), ex.prompt.clone(), responses, rewards)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_tasks, Family};
    use crate::policy::PolicyDims;
    use crate::vocab::{BOX_CLOSE, BOX_OPEN, BOX_REQUEST, EOS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn one_example() -> Dataset {
        generate_tasks(Family::ModAdd, 1, 3).unwrap()
    }

    #[test]
    fn single_example_fills_batch() {
        let d = one_example();
        let b = build_batch(&d, 128, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(b.len(), 128);
        assert!(b.iter().all(|e| e == &d.examples()[0]));
    }

    #[test]
    fn small_dataset_cycles() {
        let d = generate_tasks(Family::ModAdd, 2, 3).unwrap();
        let b = build_batch(&d, 5, &mut ChaCha8Rng::seed_from_u64(0));
        let ids: Vec<&str> = b.iter().map(|e| e.id.as_str()).collect();
        let (a, c) = (d.examples()[0].id.as_str(), d.examples()[1].id.as_str());
        assert_eq!(ids, vec![a, c, a, c, a]);
    }

    #[test]
    fn large_dataset_draws_without_replacement() {
        let d = generate_tasks(Family::DigitSum, 200, 3).unwrap();
        let b = build_batch(&d, 128, &mut ChaCha8Rng::seed_from_u64(0));
        let ids: HashSet<_> = b.iter().map(|e| e.id.clone()).collect();
        assert_eq!(ids.len(), 128);
    }

    /// A policy that emits `tokens` in order after a prompt ending in `box:`.
    fn scripted(vocab: &Vocab, tokens: &[&str]) -> PolicyParams {
        // With W = 1 the next token depends only on the previous one.
        let v = vocab.len();
        let dims = PolicyDims::new(v, v, 1).unwrap();
        let mut data = vec![0.0; dims.num_params()];
        for i in 0..v {
            data[i * v + i] = 1.0;
            data[v * v + i * v + i] = 3.0;
        }
        let out = 2 * v * v;
        let mut ids = vec![vocab.id(BOX_REQUEST).unwrap()];
        ids.extend(vocab.ids_of(tokens).unwrap());
        for w in ids.windows(2) {
            data[out + w[0] * v + w[1]] = 40.0;
        }
        PolicyParams::from_raw(dims, data).unwrap()
    }

    #[test]
    fn saturated_group_has_zero_advantages() {
        let vocab = Vocab::standard();
        let d = one_example();
        let label = d.examples()[0].label.clone();
        let policy = scripted(&vocab, &[BOX_OPEN, &label, BOX_CLOSE, EOS]);
        let cfg = RolloutConfig { batch_size: 2, ..Default::default() };
        let batch = build_batch(&d, 2, &mut ChaCha8Rng::seed_from_u64(0));
        let groups = rollout_step(&policy, &batch, &cfg, &vocab, 1, 0).unwrap();
        for g in &groups {
            assert_eq!(g.rewards, vec![1.0; 8]);
            assert_eq!(g.advantages, vec![0.0; 8]);
        }
    }

    #[test]
    fn unparseable_group_has_zero_reward() {
        let vocab = Vocab::standard();
        let d = one_example();
        let policy = scripted(&vocab, &["7", EOS]);
        let cfg = RolloutConfig { batch_size: 1, ..Default::default() };
        let groups = rollout_step(&policy, &d.examples()[..1], &cfg, &vocab, 1, 0).unwrap();
        assert_eq!(groups[0].rewards, vec![0.0; 8]);
        assert_eq!(groups[0].advantages, vec![0.0; 8]);
    }

    #[test]
    fn mixed_group_rewards_match_verifier() {
        let vocab = Vocab::standard();
        let d = generate_tasks(Family::ModAdd, 4, 9).unwrap();
        let policy = PolicyParams::init(PolicyDims::new(vocab.len(), 8, 8).unwrap(), 0);
        let cfg = RolloutConfig { batch_size: 4, temperature: 1.0, ..Default::default() };
        let groups = rollout_step(&policy, d.examples(), &cfg, &vocab, 5, 2).unwrap();
        for (g, ex) in groups.iter().zip(d.examples()) {
            let k = g
                .responses
                .iter()
                .filter(|r| outcome_reward(&vocab.render_response(&r.ids), &ex.label) == 1.0)
                .count();
            assert_eq!(g.rewards.iter().filter(|&&r| r == 1.0).count(), k);
            assert!((g.accuracy() - k as f64 / 8.0).abs() < 1e-15);
            for r in &g.responses {
                assert_eq!(r.logprobs.as_ref().unwrap(), &policy.logprob_response(&ex.prompt, &r.ids).unwrap());
            }
        }
        // reproducible
        assert_eq!(groups, rollout_step(&policy, d.examples(), &cfg, &vocab, 5, 2).unwrap());
    }

    #[test]
    fn snapshot_is_isolated() {
        let p = PolicyParams::init(PolicyDims::new(6, 3, 2).unwrap(), 1);
        let snap = snapshot_policy(&p);
        assert_eq!(snap, p);
        let before = snap.forward_logits(&[1, 2]).unwrap();
        let mut p = p;
        p.as_mut_slice()[0] += 1.0;
        p.bias_mut()[0] += 1.0;
        assert_eq!(snap.forward_logits(&[1, 2]).unwrap(), before);
        assert_ne!(p.forward_logits(&[1, 2]).unwrap(), before);
    }
}
