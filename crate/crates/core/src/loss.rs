//! GRPO objective: group-normalized advantages, the clipped policy-gradient
//! term, the k3 KL estimator against a frozen reference, and masked entropy.
//!
//! ```text
//! L = L_pg + kl_coef * L_kl + entropy_coef * L_ent
//! ```
//!
//! `entropy_coef` is normally negative, so minimizing `L` raises entropy.
//! Every function here is pure; the analytic gradients in [`crate::policy`]
//! differentiate exactly these definitions.

use serde::{Deserialize, Serialize};

use crate::policy::{token_entropy, TokenSequence};
use crate::vocab::TokenId;
use crate::{Error, Result};

/// Added to the group standard deviation before dividing.
pub const ADVANTAGE_STD_GUARD: f64 = 1e-6;

/// How importance ratios are formed in the policy-gradient term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// One ratio per token, sequence advantage broadcast to every token,
    /// masked mean within a response and then mean over responses.
    #[default]
    PerToken,
    /// One ratio per response from summed log-probs.
    PerSequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub clip_eps: f64,
    pub kl_coef: f64,
    pub entropy_coef: f64,
    pub enable_pg: bool,
    pub enable_kl: bool,
    pub enable_entropy: bool,
    pub aggregation: Aggregation,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            kl_coef: 0.001,
            entropy_coef: -0.001,
            enable_pg: true,
            enable_kl: true,
            enable_entropy: true,
            aggregation: Aggregation::PerToken,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::Config(format!(
                "clip_eps must lie in (0, 1), got {}",
                self.clip_eps
            )));
        }
        if !(self.kl_coef >= 0.0 && self.kl_coef.is_finite()) {
            return Err(Error::Config(format!(
                "kl_coef must be finite and >= 0, got {}",
                self.kl_coef
            )));
        }
        if !self.entropy_coef.is_finite() {
            return Err(Error::Config("entropy_coef must be finite".into()));
        }
        Ok(())
    }

    /// True when no loss term is active.
    pub fn is_empty(&self) -> bool {
        !self.enable_pg && !self.enable_kl && !self.enable_entropy
    }
}

/// Unweighted loss components.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub pg: f64,
    pub kl: f64,
    pub entropy: f64,
}

/// G sampled responses to one prompt, scored and normalized.
///
/// Each response carries the log-probs it had under the rollout snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub prompt_id: String,
    pub prompt: Vec<TokenId>,
    pub responses: Vec<TokenSequence>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    /// True where a response token enters the loss.
    pub masks: Vec<Vec<bool>>,
}

impl RolloutGroup {
    /// Scores a set of responses and fills in advantages and full response masks.
    pub fn new(
        prompt_id: impl Into<String>,
        prompt: Vec<TokenId>,
        responses: Vec<TokenSequence>,
        rewards: Vec<f64>,
    ) -> Result<Self> {
        if responses.len() != rewards.len() {
            return Err(Error::InvalidInput(format!(
                "{} responses but {} rewards",
                responses.len(),
                rewards.len()
            )));
        }
        let advantages = compute_advantages(&rewards)?;
        let masks = responses.iter().map(|r| vec![true; r.len()]).collect();
        Ok(Self {
            prompt_id: prompt_id.into(),
            prompt,
            responses,
            rewards,
            advantages,
            masks,
        })
    }

    pub fn group_size(&self) -> usize {
        self.responses.len()
    }

    /// Mean reward of the group.
    pub fn accuracy(&self) -> f64 {
        self.rewards.iter().sum::<f64>() / self.rewards.len().max(1) as f64
    }

    pub fn old_logprobs(&self) -> Result<Vec<Vec<f64>>> {
        self.responses
            .iter()
            .map(|r| {
                r.logprobs.clone().ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "response in group {} has no rollout log-probs",
                        self.prompt_id
                    ))
                })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.responses.len();
        if self.rewards.len() != g || self.advantages.len() != g || self.masks.len() != g {
            return Err(Error::InvalidInput(format!(
                "group {} has inconsistent lengths",
                self.prompt_id
            )));
        }
        for (r, m) in self.responses.iter().zip(&self.masks) {
            if m.len() != r.len() {
                return Err(Error::InvalidInput(format!(
                    "group {}: mask length {} != response length {}",
                    self.prompt_id,
                    m.len(),
                    r.len()
                )));
            }
            match &r.logprobs {
                Some(lp) if lp.len() == r.len() => {}
                _ => {
                    return Err(Error::InvalidInput(format!(
                        "group {}: response without rollout log-probs",
                        self.prompt_id
                    )))
                }
            }
        }
        Ok(())
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub(crate) fn population_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// `A_i = (r_i - mean(r)) / (std(r) + 1e-6)`; all zeros for a constant group.
pub fn compute_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "advantages need a group of at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let m = mean(rewards);
    let std = population_std(rewards);
    if std == 0.0 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards
        .iter()
        .map(|r| (r - m) / (std + ADVANTAGE_STD_GUARD))
        .collect())
}

pub(crate) fn clip(ratio: f64, eps: f64) -> f64 {
    ratio.clamp(1.0 - eps, 1.0 + eps)
}

/// `-min(ratio * A, clip(ratio, 1-eps, 1+eps) * A)`.
pub fn clipped_term(ratio: f64, advantage: f64, eps: f64) -> f64 {
    -(ratio * advantage).min(clip(ratio, eps) * advantage)
}

/// Derivative of [`clipped_term`] with respect to the log-ratio.
/// Zero whenever the clipped branch is the active minimum.
pub(crate) fn clipped_term_dlogratio(ratio: f64, advantage: f64, eps: f64) -> f64 {
    if ratio * advantage <= clip(ratio, eps) * advantage {
        -ratio * advantage
    } else {
        0.0
    }
}

fn check_shapes(name: &str, a: &[Vec<f64>], b: &[Vec<f64>], masks: &[Vec<bool>]) -> Result<()> {
    if a.len() != b.len() || a.len() != masks.len() {
        return Err(Error::InvalidInput(format!(
            "{name}: {} / {} / {} responses",
            a.len(),
            b.len(),
            masks.len()
        )));
    }
    for (i, ((x, y), m)) in a.iter().zip(b).zip(masks).enumerate() {
        if x.len() != y.len() || x.len() != m.len() {
            return Err(Error::InvalidInput(format!(
                "{name}: response {i} has lengths {} / {} / {}",
                x.len(),
                y.len(),
                m.len()
            )));
        }
    }
    Ok(())
}

/// Clipped surrogate policy-gradient loss.
pub fn pg_loss(
    new_logprobs: &[Vec<f64>],
    old_logprobs: &[Vec<f64>],
    advantages: &[f64],
    masks: &[Vec<bool>],
    clip_eps: f64,
    aggregation: Aggregation,
) -> Result<f64> {
    check_shapes("pg_loss", new_logprobs, old_logprobs, masks)?;
    if advantages.len() != new_logprobs.len() {
        return Err(Error::InvalidInput(format!(
            "pg_loss: {} advantages for {} responses",
            advantages.len(),
            new_logprobs.len()
        )));
    }
    if new_logprobs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (((new, old), &a), mask) in new_logprobs.iter().zip(old_logprobs).zip(advantages).zip(masks) {
        let active = new.iter().zip(old).zip(mask).filter(|(_, &m)| m).map(|(p, _)| p);
        match aggregation {
            Aggregation::PerToken => {
                let mut sum = 0.0;
                let mut n = 0usize;
                for (lp, olp) in active {
                    sum += clipped_term((lp - olp).exp(), a, clip_eps);
                    n += 1;
                }
                if n > 0 {
                    total += sum / n as f64;
                }
            }
            Aggregation::PerSequence => {
                let log_ratio: f64 = active.map(|(lp, olp)| lp - olp).sum();
                total += clipped_term(log_ratio.exp(), a, clip_eps);
            }
        }
    }
    Ok(total / new_logprobs.len() as f64)
}

/// Per-token k3 estimator `r - ln r - 1` with `r = pi_ref / pi`.
pub fn kl_term(new_logprob: f64, ref_logprob: f64) -> f64 {
    let d = ref_logprob - new_logprob;
    // exp_m1 keeps the estimator non-negative in floating point near d = 0.
    d.exp_m1() - d
}

/// Masked mean of [`kl_term`] over every token of every response.
pub fn kl_loss(new_logprobs: &[Vec<f64>], ref_logprobs: &[Vec<f64>], masks: &[Vec<bool>]) -> Result<f64> {
    check_shapes("kl_loss", new_logprobs, ref_logprobs, masks)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((new, rf), mask) in new_logprobs.iter().zip(ref_logprobs).zip(masks) {
        for ((&lp, &rlp), &m) in new.iter().zip(rf).zip(mask) {
            if m {
                sum += kl_term(lp, rlp);
                n += 1;
            }
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Masked mean of per-token entropies, given precomputed entropies.
pub fn masked_mean_entropy(entropies: &[Vec<f64>], masks: &[Vec<bool>]) -> Result<f64> {
    if entropies.len() != masks.len() {
        return Err(Error::InvalidInput("entropy_loss: mask count mismatch".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (h, mask) in entropies.iter().zip(masks) {
        if h.len() != mask.len() {
            return Err(Error::InvalidInput("entropy_loss: mask length mismatch".into()));
        }
        for (&e, &m) in h.iter().zip(mask) {
            if m {
                sum += e;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::InvalidInput("entropy_loss: no masked tokens".into()));
    }
    Ok(sum / n as f64)
}

/// Masked mean token entropy; `logits[i][t]` is the logit vector at position `t` of response `i`.
pub fn entropy_loss(logits: &[Vec<Vec<f64>>], masks: &[Vec<bool>]) -> Result<f64> {
    let entropies: Vec<Vec<f64>> = logits
        .iter()
        .map(|resp| resp.iter().map(|l| token_entropy(l)).collect())
        .collect();
    masked_mean_entropy(&entropies, masks)
}

/// Weighted sum of the enabled terms.
pub fn total_loss(parts: &LossParts, cfg: &LossConfig) -> f64 {
    let mut total = 0.0;
    if cfg.enable_pg {
        total += parts.pg;
    }
    if cfg.enable_kl {
        total += cfg.kl_coef * parts.kl;
    }
    if cfg.enable_entropy {
        total += cfg.entropy_coef * parts.entropy;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn advantages_alternating() {
        let a = compute_advantages(&[1.0, 0.0, 1.0, 0.0]).unwrap();
        let expect = 0.5 / (0.5 + ADVANTAGE_STD_GUARD);
        for (x, sign) in a.iter().zip([1.0, -1.0, 1.0, -1.0]) {
            assert!(close(*x, sign * expect, 1e-15));
            assert!(close(*x, sign, 3e-6));
        }
    }

    #[test]
    fn advantages_constant_group_is_zero() {
        assert_eq!(compute_advantages(&[1.0; 4]).unwrap(), vec![0.0; 4]);
        assert_eq!(compute_advantages(&[0.0; 8]).unwrap(), vec![0.0; 8]);
    }

    #[test]
    fn advantages_single_success_in_eight() {
        let mut r = vec![0.0; 8];
        r[0] = 1.0;
        let a = compute_advantages(&r).unwrap();
        // mean 1/8, population std sqrt(7/64)
        let std = (7.0f64 / 64.0).sqrt();
        assert!(close(std, 0.330_719, 1e-6));
        assert!(close(a[0], 0.875 / (std + ADVANTAGE_STD_GUARD), 1e-12));
        assert!(close(a[0], 7.0 / 7f64.sqrt(), 2e-5));
        for x in &a[1..] {
            assert!(close(*x, -1.0 / 7f64.sqrt(), 2e-5));
        }
    }

    #[test]
    fn advantages_need_two_rewards() {
        assert!(compute_advantages(&[1.0]).is_err());
        assert!(compute_advantages(&[]).is_err());
    }

    #[test]
    fn clip_rule_examples() {
        assert!(close(clipped_term(1.5, 1.0, 0.2), -1.2, 1e-15));
        assert!(close(clipped_term(0.5, -1.0, 0.2), 0.8, 1e-15));
        assert_eq!(clipped_term_dlogratio(1.5, 1.0, 0.2), 0.0);
        assert_eq!(clipped_term_dlogratio(0.5, -1.0, 0.2), 0.0);
        assert!(close(clipped_term_dlogratio(1.1, 1.0, 0.2), -1.1, 1e-15));
        // below the band with positive advantage the unclipped branch is the min
        assert!(close(clipped_term_dlogratio(0.5, 1.0, 0.2), -0.5, 1e-15));
    }

    #[test]
    fn pg_single_token_matches_clip_rule() {
        let new = vec![vec![1.5f64.ln()]];
        let old = vec![vec![0.0]];
        let masks = vec![vec![true]];
        let l = pg_loss(&new, &old, &[1.0], &masks, 0.2, Aggregation::PerToken).unwrap();
        assert!(close(l, -1.2, 1e-12));
        let new = vec![vec![0.5f64.ln()]];
        let l = pg_loss(&new, &old, &[-1.0], &masks, 0.2, Aggregation::PerSequence).unwrap();
        assert!(close(l, 0.8, 1e-12));
    }

    #[test]
    fn pg_on_policy_is_minus_mean_advantage() {
        let lp = vec![vec![-0.3, -1.2, -0.7], vec![-2.0], vec![-0.1, -0.4]];
        let masks = vec![vec![true, true, false], vec![true], vec![true, true]];
        let adv = [0.5, -1.5, 1.0];
        let expect = -(0.5 - 1.5 + 1.0) / 3.0;
        for mode in [Aggregation::PerToken, Aggregation::PerSequence] {
            let l = pg_loss(&lp, &lp, &adv, &masks, 0.2, mode).unwrap();
            assert!(close(l, expect, 1e-15), "{mode:?}: {l}");
        }
    }

    #[test]
    fn pg_shape_mismatch() {
        let err = pg_loss(&[vec![0.0]], &[vec![0.0, 0.0]], &[1.0], &[vec![true]], 0.2, Aggregation::PerToken);
        assert!(err.is_err());
    }

    #[test]
    fn kl_examples() {
        let masks = vec![vec![true]];
        assert_eq!(kl_loss(&[vec![-0.7]], &[vec![-0.7]], &masks).unwrap(), 0.0);
        let l = kl_loss(&[vec![0.0]], &[vec![2f64.ln()]], &masks).unwrap();
        assert!(close(l, 2.0 - 2f64.ln() - 1.0, 1e-15));
        assert!(close(l, 0.306_853, 1e-6));
        let l = kl_loss(&[vec![0.0]], &[vec![-(2f64.ln())]], &masks).unwrap();
        assert!(close(l, 0.193_147, 1e-6));
    }

    #[test]
    fn entropy_examples() {
        let uniform = vec![vec![vec![0.0; 4]; 3]; 2];
        let masks = vec![vec![true; 3]; 2];
        assert!(close(entropy_loss(&uniform, &masks).unwrap(), 4f64.ln(), 1e-12));

        let h = vec![vec![0.3, 0.5]];
        assert!(close(masked_mean_entropy(&h, &[vec![true, true]]).unwrap(), 0.4, 1e-15));
        assert!(masked_mean_entropy(&h, &[vec![false, false]]).is_err());
    }

    #[test]
    fn entropy_masking_half_matches_brute_force() {
        let h = vec![vec![0.1, 0.9, 0.4, 0.2], vec![1.3, 0.6, 0.0, 0.8]];
        let masks = vec![vec![true, false, true, false], vec![false, true, false, true]];
        let mut kept = Vec::new();
        for (row, m) in h.iter().zip(&masks) {
            for (x, keep) in row.iter().zip(m) {
                if *keep {
                    kept.push(*x);
                }
            }
        }
        let brute = kept.iter().sum::<f64>() / kept.len() as f64;
        assert!(close(masked_mean_entropy(&h, &masks).unwrap(), brute, 1e-15));
    }

    #[test]
    fn total_loss_examples() {
        let parts = LossParts { pg: 1.0, kl: 0.2, entropy: 1.3 };
        let cfg = LossConfig::default();
        assert!(close(total_loss(&parts, &cfg), 0.9989, 1e-12));
        let only_pg = LossConfig { enable_kl: false, enable_entropy: false, ..cfg.clone() };
        assert_eq!(total_loss(&parts, &only_pg), 1.0);
        let none = LossConfig { enable_pg: false, enable_kl: false, enable_entropy: false, ..cfg };
        assert_eq!(total_loss(&parts, &none), 0.0);
    }

    #[test]
    fn total_loss_linear_in_coefficients() {
        let parts = LossParts { pg: 0.7, kl: 0.3, entropy: 2.1 };
        let at = |t: f64| {
            let cfg = LossConfig { kl_coef: 0.001 + t * 0.01, entropy_coef: -0.001 - t * 0.002, ..Default::default() };
            total_loss(&parts, &cfg)
        };
        let (a, b, c) = (at(0.0), at(1.0), at(2.0));
        assert!(close(b - a, c - b, 1e-15));
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { clip_eps: 1.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { kl_coef: -1.0, ..Default::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn advantages_are_shift_invariant(
            r in proptest::collection::vec(0.0f64..1.0, 2..16),
            shift in -5.0f64..5.0,
        ) {
            let a = compute_advantages(&r).unwrap();
            let shifted: Vec<f64> = r.iter().map(|x| x + shift).collect();
            let b = compute_advantages(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn kl_term_is_non_negative(a in -30.0f64..30.0, b in -30.0f64..30.0) {
            prop_assert!(kl_term(a, b) >= 0.0);
        }

        #[test]
        fn inserting_masked_out_tokens_keeps_entropy(
            h in proptest::collection::vec(0.0f64..3.0, 1..10),
            extra in proptest::collection::vec(0.0f64..3.0, 0..10),
        ) {
            let base = masked_mean_entropy(&[h.clone()], &[vec![true; h.len()]]).unwrap();
            let mut padded = h.clone();
            padded.extend(&extra);
            let mut mask = vec![true; h.len()];
            mask.extend(vec![false; extra.len()]);
            let with = masked_mean_entropy(&[padded], &[mask]).unwrap();
            prop_assert!((base - with).abs() < 1e-12);
        }
    }
}
