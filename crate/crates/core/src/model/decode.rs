//! Beam search and greedy decoding over any next-token scorer.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::{TokenId, EOS_ID as EOS};

pub const DEFAULT_BEAM_WIDTH: usize = 3;
pub const DEFAULT_MAX_NEW: usize = 8;

/// Source of next-token log-probabilities given the tokens generated so far.
pub trait LanguageModel {
    fn vocab_size(&self) -> usize;
    fn next_log_probs(&mut self, generated: &[TokenId]) -> Result<Vec<f64>>;
}

/// Restriction on the tokens a decoder may emit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    /// Any token, any length up to `max_new`.
    #[default]
    Free,
    /// Exactly one token drawn from the list, then end-of-sequence.
    OneOf(Vec<TokenId>),
}

impl Constraint {
    fn allowed(&self, step: usize) -> Option<Vec<TokenId>> {
        match self {
            Constraint::Free => None,
            Constraint::OneOf(c) if step == 0 => Some(c.clone()),
            Constraint::OneOf(_) => Some(vec![EOS]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub max_new: usize,
    pub constraint: Constraint,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_width: DEFAULT_BEAM_WIDTH,
            max_new: DEFAULT_MAX_NEW,
            constraint: Constraint::Free,
        }
    }
}

impl DecodeConfig {
    fn validate(&self) -> Result<()> {
        if self.beam_width == 0 || self.max_new == 0 {
            return Err(Error::config("beam width and max_new must be positive"));
        }
        if let Constraint::OneOf(c) = &self.constraint {
            if c.is_empty() {
                return Err(Error::config("empty candidate list"));
            }
        }
        Ok(())
    }
}

/// Log-probabilities for the next step, renormalized over allowed tokens.
fn step_scores<M: LanguageModel>(
    model: &mut M,
    prefix: &[TokenId],
    constraint: &Constraint,
) -> Result<Vec<(TokenId, f64)>> {
    match constraint.allowed(prefix.len()) {
        Some(allowed) if allowed.len() == 1 => Ok(vec![(allowed[0], 0.0)]),
        Some(allowed) => {
            let lp = model.next_log_probs(prefix)?;
            let mut out = Vec::with_capacity(allowed.len());
            for &t in &allowed {
                let v = *lp
                    .get(t as usize)
                    .ok_or_else(|| Error::config(format!("candidate token {t} outside vocabulary")))?;
                out.push((t, v));
            }
            let max = out.iter().fold(f64::NEG_INFINITY, |m, (_, v)| m.max(*v));
            let lse = out.iter().map(|(_, v)| (v - max).exp()).sum::<f64>().ln() + max;
            for (_, v) in out.iter_mut() {
                *v -= lse;
            }
            Ok(out)
        }
        None => {
            let lp = model.next_log_probs(prefix)?;
            Ok(lp.into_iter().enumerate().map(|(i, v)| (i as TokenId, v)).collect())
        }
    }
}

fn by_score_then_id(a: &(TokenId, f64), b: &(TokenId, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Token-by-token argmax; ties go to the lower token id. The trailing
/// end-of-sequence token is not included in the output.
pub fn greedy_rollout<M: LanguageModel>(
    model: &mut M,
    max_new: usize,
    constraint: &Constraint,
) -> Result<Vec<TokenId>> {
    let mut out = Vec::new();
    for _ in 0..max_new {
        let mut scores = step_scores(model, &out, constraint)?;
        scores.sort_by(by_score_then_id);
        let next = scores[0].0;
        if next == EOS {
            break;
        }
        out.push(next);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct Hyp {
    tokens: Vec<TokenId>,
    sum: f64,
}

impl Hyp {
    fn score(&self) -> f64 {
        self.sum / self.tokens.len().max(1) as f64
    }
}

fn rank(a: &Hyp, b: &Hyp, key: fn(&Hyp) -> f64) -> Ordering {
    key(b).total_cmp(&key(a)).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search with length-normalized scores (mean log-probability per
/// emitted token, end-of-sequence included). Ties resolve to the
/// lexicographically smaller token sequence, so width 1 equals greedy.
pub fn beam_search<M: LanguageModel>(model: &mut M, cfg: &DecodeConfig) -> Result<Vec<TokenId>> {
    cfg.validate()?;
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        sum: 0.0,
    }];
    let mut finished: Vec<Hyp> = Vec::new();
    for _ in 0..cfg.max_new {
        let mut cands = Vec::new();
        for h in &live {
            let mut scores = step_scores(model, &h.tokens, &cfg.constraint)?;
            scores.sort_by(by_score_then_id);
            for &(t, lp) in scores.iter().take(cfg.beam_width) {
                let mut tokens = h.tokens.clone();
                tokens.push(t);
                cands.push(Hyp {
                    tokens,
                    sum: h.sum + lp,
                });
            }
        }
        cands.sort_by(|a, b| rank(a, b, |h| h.sum));
        cands.truncate(cfg.beam_width);
        live.clear();
        for c in cands {
            if c.tokens.last() == Some(&EOS) {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
        if live.is_empty() {
            break;
        }
    }
    finished.extend(live);
    finished.sort_by(|a, b| rank(a, b, Hyp::score));
    let mut best = finished.swap_remove(0).tokens;
    if best.last() == Some(&EOS) {
        best.pop();
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed table of log-probs indexed by the number of generated tokens and
    /// the last token.
    struct Table {
        vocab: usize,
        f: fn(&[TokenId]) -> Vec<f64>,
        calls: usize,
    }

    impl LanguageModel for Table {
        fn vocab_size(&self) -> usize {
            self.vocab
        }
        fn next_log_probs(&mut self, g: &[TokenId]) -> Result<Vec<f64>> {
            self.calls += 1;
            Ok((self.f)(g))
        }
    }

    fn norm(p: &[f64]) -> Vec<f64> {
        let s: f64 = p.iter().sum();
        p.iter().map(|v| (v / s).ln()).collect()
    }

    // vocab: 0 pad, 1 eos, 2..5 words
    fn lm(g: &[TokenId]) -> Vec<f64> {
        match g {
            [] => norm(&[0.0001, 0.0001, 0.5, 0.4, 0.0998, 0.0]),
            [2] => norm(&[0.0001, 0.3, 0.0, 0.0, 0.35, 0.35]),
            [3] => norm(&[0.0001, 0.95, 0.05, 0.0, 0.0, 0.0]),
            _ => norm(&[0.0001, 0.9, 0.1, 0.0, 0.0, 0.0]),
        }
    }

    #[test]
    fn beam_one_equals_greedy() {
        let mut m = Table {
            vocab: 6,
            f: lm,
            calls: 0,
        };
        let g = greedy_rollout(&mut m, 8, &Constraint::Free).unwrap();
        let cfg = DecodeConfig {
            beam_width: 1,
            ..Default::default()
        };
        let b = beam_search(&mut m, &cfg).unwrap();
        assert_eq!(g, b);
        assert_eq!(g, vec![2, 4]);
    }

    #[test]
    fn wider_beam_finds_better_normalized_sequence() {
        let mut m = Table {
            vocab: 6,
            f: lm,
            calls: 0,
        };
        let b = beam_search(&mut m, &DecodeConfig::default()).unwrap();
        // "3 EOS": (ln .4 + ln .95)/2 beats any continuation of 2
        assert_eq!(b, vec![3]);
    }

    #[test]
    fn one_of_picks_best_candidate_and_stops() {
        let mut m = Table {
            vocab: 6,
            f: lm,
            calls: 0,
        };
        let cfg = DecodeConfig {
            constraint: Constraint::OneOf(vec![4, 3]),
            ..Default::default()
        };
        assert_eq!(beam_search(&mut m, &cfg).unwrap(), vec![3]);
        // forced end-of-sequence needs no model call
        assert_eq!(m.calls, 1);
        assert_eq!(greedy_rollout(&mut m, 8, &cfg.constraint).unwrap(), vec![3]);
    }

    #[test]
    fn ties_prefer_lower_ids() {
        let mut m = Table {
            vocab: 4,
            f: |_| vec![(0.25f64).ln(); 4],
            calls: 0,
        };
        let cfg = DecodeConfig {
            constraint: Constraint::OneOf(vec![3, 2]),
            ..Default::default()
        };
        assert_eq!(beam_search(&mut m, &cfg).unwrap(), vec![2]);
    }

    #[test]
    fn max_new_bounds_length() {
        let mut m = Table {
            vocab: 4,
            f: |_| norm(&[0.0, 0.0, 1.0, 0.0]),
            calls: 0,
        };
        let cfg = DecodeConfig {
            max_new: 3,
            ..Default::default()
        };
        assert_eq!(beam_search(&mut m, &cfg).unwrap(), vec![2, 2, 2]);
    }
}
