//! Captioning pretraining and self-context adaptation.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::{
    caption_name, mixed_batch, mixed_episodes, render_sequence, render_sequence_with, Difficulty, Episode,
    EpisodeSource, ModelInput, RenderOptions, Shot, TaskMode, ADAPT_WAYS,
};
use crate::embed_store::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::lexicon::{normalize_text, Lexicon, TokenId, CAP_ID, DEFAULT_TEMPLATE};
use crate::model::{backward, forward_loss, AdamW, AdamWConfig, ModelConfig, TinyVlm, TrainableSet};
use crate::names::{render_caption, VocabKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Adapt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub stage: Stage,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub difficulty: Difficulty,
    pub task_mode: TaskMode,
    pub vocab: VocabKind,
    pub k: usize,
    pub model: ModelConfig,
    /// Whether adaptation updates the token-embedding table.
    pub train_token_embeddings: bool,
    pub weight_decay: f64,
    /// Reserved token slots for names bound at evaluation time.
    pub dynamic_slots: usize,
    /// Probability that an adaptation episode shows its names through
    /// reserved slots drawn afresh every step instead of the cluster names.
    pub alias_prob: f64,
}

/// Share of desk adaptation episodes rendered through reserved slots.
pub const DESK_ALIAS_PROB: f64 = 0.5;

/// Learning rate used by the original large-scale adaptation runs.
pub const REFERENCE_ADAPT_LR: f64 = 5e-6;

impl RunConfig {
    pub fn desk_pretrain(embed_dim: usize, seed: u64) -> Self {
        Self {
            stage: Stage::Pretrain,
            lr_peak: 3e-3,
            warmup_steps: 200,
            total_steps: 3000,
            batch_size: 16,
            seed,
            difficulty: Difficulty::Unrestricted,
            task_mode: TaskMode::Single,
            vocab: VocabKind::Base,
            k: 32,
            model: ModelConfig::desk(embed_dim),
            train_token_embeddings: true,
            weight_decay: 0.01,
            dynamic_slots: 8,
            alias_prob: 0.0,
        }
    }

    pub fn desk_adapt(embed_dim: usize, seed: u64) -> Self {
        Self {
            stage: Stage::Adapt,
            lr_peak: 1e-3,
            warmup_steps: 250,
            total_steps: 5000,
            batch_size: 16,
            seed,
            difficulty: Difficulty::Varying,
            task_mode: TaskMode::Mixed,
            vocab: VocabKind::Nouns,
            k: 32,
            model: ModelConfig::desk(embed_dim),
            train_token_embeddings: true,
            weight_decay: 0.01,
            dynamic_slots: 8,
            alias_prob: DESK_ALIAS_PROB,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.lr_peak >= 0.0 && self.lr_peak.is_finite()) {
            return Err(Error::config("lr_peak must be finite and nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.alias_prob) {
            return Err(Error::config("alias_prob must lie in [0, 1]"));
        }
        if self.k == 0 {
            return Err(Error::config("k must be at least 1"));
        }
        self.model.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then linear decay to
/// 0 at `total`.
pub fn lr_schedule(step: usize, peak: f64, warmup: usize, total: usize) -> f64 {
    let step = step.min(total);
    if step < warmup {
        peak * step as f64 / warmup as f64
    } else if total == warmup {
        peak
    } else {
        peak * (total - step) as f64 / (total - warmup) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config: RunConfig,
    pub steps: Vec<StepRecord>,
}

impl TrainLog {
    /// Config snapshot on the first line, then one record per step.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = serde_json::to_string(&serde_json::json!({ "config": self.config }))?;
        s.push('\n');
        s.push_str(&crate::jsonl::to_jsonl_string(&self.steps)?);
        Ok(s)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    /// Mean loss over the first and last `window` steps.
    pub fn loss_ends(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.steps.len();
        if n == 0 {
            return None;
        }
        let w = window.clamp(1, n);
        let mean = |s: &[StepRecord]| s.iter().map(|r| r.loss).sum::<f64>() / s.len() as f64;
        Some((mean(&self.steps[..w]), mean(&self.steps[n - w..])))
    }
}

/// Mean loss and gradient of a batch. Per-example gradients are summed in
/// batch order, so the result does not depend on the executor.
pub fn batch_gradient(
    model: &TinyVlm,
    batch: &[ModelInput],
    embeddings: &EmbeddingMatrix,
    exec: Executor,
) -> Result<(f64, Vec<f32>)> {
    let cfg = model.config();
    let layout = model.layout();
    let per: Vec<Result<(f64, Vec<f32>)>> = exec.map(batch, |input| {
        let (loss, trace) = forward_loss::<f32>(cfg, &layout, model.params(), input, embeddings)?;
        Ok((loss, backward(cfg, &layout, model.params(), &trace)))
    });
    let inv = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0f32; layout.total()];
    let mut loss = 0.0;
    for r in per {
        let (l, g) = r?;
        loss += l * inv;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += *b * inv as f32;
        }
    }
    Ok((loss, grad))
}

fn run_steps<F>(
    model: &mut TinyVlm,
    config: &RunConfig,
    trainable: TrainableSet,
    embeddings: &EmbeddingMatrix,
    exec: Executor,
    mut make_batch: F,
) -> Result<TrainLog>
where
    F: FnMut(&mut TinyVlm, u64) -> Result<Vec<ModelInput>>,
{
    config.validate()?;
    let layout = model.layout();
    let mut decays = vec![false; layout.total()];
    for t in layout.tensors() {
        if t.decays() {
            decays[t.range()].fill(true);
        }
    }
    let mut opt = AdamW::new(config.optimizer(), model.trainable_mask(trainable), decays);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let start = Instant::now();
    let mut steps = Vec::with_capacity(config.total_steps);
    for step in 0..config.total_steps {
        let batch = make_batch(&mut *model, rng.random())?;
        let (loss, grad) = batch_gradient(model, &batch, embeddings, exec)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("{:?} loss {loss}", config.stage),
            });
        }
        let lr = lr_schedule(step + 1, config.lr_peak, config.warmup_steps, config.total_steps);
        let grad_norm = opt.step(model.params_mut(), &grad, lr).map_err(|e| match e {
            Error::NonFinite { detail, .. } => Error::NonFinite { step, detail },
            other => other,
        })?;
        steps.push(StepRecord {
            stage: config.stage,
            step,
            loss,
            lr,
            grad_norm,
            elapsed_ms: start.elapsed().as_millis() as u64,
        });
    }
    if !model.all_finite() {
        return Err(Error::NonFinite {
            step: config.total_steps,
            detail: "parameters".into(),
        });
    }
    Ok(TrainLog {
        config: config.clone(),
        steps,
    })
}

/// Ordinary word tokens: no specials, no reserved slots.
pub fn word_ids(lexicon: &Lexicon) -> Vec<TokenId> {
    (CAP_ID as usize + 1..lexicon.len())
        .filter(|i| !lexicon.dynamic_range().contains(i))
        .map(|i| i as TokenId)
        .collect()
}

/// Input for one captioned image: `<IMG> prefix <CAP> stem`, target name.
pub fn caption_input(
    row: u32,
    caption: &str,
    stem: &str,
    lexicon: &Lexicon,
    opts: &RenderOptions,
) -> Result<ModelInput> {
    let ep = Episode {
        way: 1,
        shot: 0,
        classes: vec![0],
        query_way: 0,
        support: Vec::<Shot>::new(),
        query: row,
        target: caption.to_string(),
        stem: stem.to_string(),
        difficulty: Difficulty::Unrestricted,
        seed: 0,
    };
    render_sequence(&ep, lexicon, opts)
}

/// Labelled rows for captioning pretraining.
#[derive(Debug, Clone)]
pub struct CaptionData<'a> {
    pub embeddings: &'a EmbeddingMatrix,
    /// Rows used for training.
    pub rows: Vec<usize>,
    /// Per-row label into `class_names` (indexed by matrix row).
    pub labels: &'a [u32],
    pub class_names: &'a [String],
}

/// Trains a fresh captioner on `"this is a <name>"` for single images.
pub fn pretrain_captioner(config: &RunConfig, data: &CaptionData<'_>, exec: Executor) -> Result<(TinyVlm, TrainLog)> {
    config.validate()?;
    if data.rows.is_empty() {
        return Err(Error::Data("no pretraining rows".into()));
    }
    let lexicon = Lexicon::new(data.class_names, config.dynamic_slots)?;
    let mut model = TinyVlm::new(config.model.clone(), lexicon, config.seed)?;
    let opts = RenderOptions::new(config.model.prefix_len, config.model.max_len);
    let stem = crate::context::template_stem(DEFAULT_TEMPLATE)?;
    let all = TrainableSet {
        mapping_net: true,
        token_embeddings: true,
    };
    let log = run_steps(&mut model, config, all, data.embeddings, exec, |m, seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..config.batch_size)
            .map(|_| {
                let row = data.rows[rng.random_range(0..data.rows.len())];
                let name = &data.class_names[data.labels[row] as usize];
                caption_input(
                    row as u32,
                    &render_caption(DEFAULT_TEMPLATE, name),
                    &stem,
                    m.lexicon(),
                    &opts,
                )
            })
            .collect()
    })?;
    Ok((model, log))
}

/// Fine-tunes on self-context episodes. The mapping network stays frozen;
/// every caption word must already be in the checkpoint's lexicon.
pub fn secat_adapt(
    config: &RunConfig,
    checkpoint: &TinyVlm,
    source: &EpisodeSource,
    embeddings: &EmbeddingMatrix,
    exec: Executor,
) -> Result<(TinyVlm, TrainLog)> {
    config.validate()?;
    if checkpoint.config() != &config.model {
        return Err(Error::config("checkpoint architecture differs from the run config"));
    }
    let mut model = checkpoint.clone();
    let opts = RenderOptions::new(config.model.prefix_len, config.model.max_len);
    let set = TrainableSet {
        mapping_net: false,
        token_embeddings: config.train_token_embeddings,
    };
    let slots = model.lexicon().dynamic_range().len();
    if config.alias_prob > 0.0 && slots < ADAPT_WAYS {
        return Err(Error::config(format!(
            "aliasing needs {ADAPT_WAYS} reserved slots, lexicon has {slots}"
        )));
    }
    let binding_std = model.token_rms(&word_ids(model.lexicon()));
    let log = run_steps(&mut model, config, set, embeddings, exec, |m, seed| {
        if config.alias_prob == 0.0 {
            return mixed_batch(
                source,
                config.task_mode,
                config.difficulty,
                config.batch_size,
                seed,
                m.lexicon(),
                &opts,
            );
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slot_ids = m.bind_dynamic_slots(slots, binding_std, rng.random())?;
        mixed_episodes(
            source,
            config.task_mode,
            config.difficulty,
            config.batch_size,
            rng.random(),
        )?
        .iter()
        .map(|ep| {
            let mut aliases = HashMap::new();
            if rng.random_bool(config.alias_prob) {
                let picked: Vec<TokenId> = slot_ids.choose_multiple(&mut rng, ep.way).copied().collect();
                for (&c, id) in ep.classes.iter().zip(picked) {
                    let name = caption_name(&source.captions[c as usize], &source.stem);
                    aliases.insert(normalize_text(name), id);
                }
            }
            render_sequence_with(ep, m.lexicon(), &aliases, &opts)
        })
        .collect()
    })?;
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        assert_eq!(lr_schedule(0, 1.0, 100, 300), 0.0);
        assert_eq!(lr_schedule(100, 1.0, 100, 300), 1.0);
        assert_eq!(lr_schedule(200, 1.0, 100, 300), 0.5);
        assert_eq!(lr_schedule(300, 1.0, 100, 300), 0.0);
        assert_eq!(lr_schedule(50, 2.0, 100, 300), 1.0);
        assert_eq!(lr_schedule(0, 1.0, 0, 0), 1.0);
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_warmup() {
        let c = RunConfig::desk_adapt(16, 1);
        let mut v = serde_json::to_value(&c).unwrap();
        assert_eq!(RunConfig::from_json(&v.to_string()).unwrap(), c);
        v["surprise"] = serde_json::json!(1);
        assert!(RunConfig::from_json(&v.to_string()).is_err());
        let mut bad = c;
        bad.warmup_steps = bad.total_steps + 1;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn reference_adapt_lr_is_recorded() {
        assert_eq!(REFERENCE_ADAPT_LR, 5e-6);
    }
}
