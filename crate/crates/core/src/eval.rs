//! Few-shot benchmarks, open-ended scoring and report serialization.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterModel;
use crate::context::{
    render_sequence_with, sample_episode, template_stem, Difficulty, Episode, EpisodeSource, ModelInput, RenderOptions,
    Shot,
};
use crate::embed_store::{EmbeddingMatrix, GroundTruth};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::lexicon::{normalize_text, normalize_words, Lexicon, TokenId};
use crate::model::{
    beam_search, forward_with_logits, kernels::log_softmax, Constraint, DecodeConfig, LanguageModel, TinyVlm,
};
use crate::names::{fresh_nonsense, render_caption, NameAssignment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamingMode {
    RealName,
    OpenEnded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Standard,
    Easy,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotTask {
    pub episode: Episode,
    pub naming_mode: NamingMode,
    pub split: Split,
    /// Name of each way, aligned with `episode.classes`.
    pub names: Vec<String>,
}

impl FewShotTask {
    pub fn target_name(&self) -> &str {
        &self.names[self.episode.query_way]
    }
}

/// Rewrites an episode's captions so way `w` is called `names[w]`.
fn rename_episode(ep: &mut Episode, template: &str, old: &[String], names: &[String]) -> Result<()> {
    let map: HashMap<String, String> = old
        .iter()
        .zip(names)
        .map(|(o, n)| (render_caption(template, o), render_caption(template, n)))
        .collect();
    for s in &mut ep.support {
        s.caption = map
            .get(&s.caption)
            .ok_or_else(|| Error::Data(format!("caption {:?} matches no way", s.caption)))?
            .clone();
    }
    ep.target = render_caption(template, &names[ep.query_way]);
    Ok(())
}

/// Tasks over the given evaluation classes. Open-ended tasks get fresh
/// nonsense names, disjoint from `avoid`, for every task.
#[allow(clippy::too_many_arguments)]
pub fn build_benchmark(
    ground_truth: &GroundTruth,
    eval_classes: &[u32],
    n: usize,
    j: usize,
    mode: NamingMode,
    count: usize,
    seed: u64,
    template: &str,
    avoid: &HashSet<String>,
) -> Result<Vec<FewShotTask>> {
    let stem = template_stem(template)?;
    let members = ground_truth.members();
    let groups: Vec<Vec<usize>> = eval_classes
        .iter()
        .map(|&c| {
            members
                .get(c as usize)
                .cloned()
                .ok_or_else(|| Error::Data(format!("class {c} not in ground truth")))
        })
        .collect::<Result<_>>()?;
    let base: Vec<String> = eval_classes
        .iter()
        .map(|&c| ground_truth.class_names[c as usize].clone())
        .collect();
    let captions = base.iter().map(|b| render_caption(template, b)).collect();
    let src = EpisodeSource::new(groups, captions, stem)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut ep = sample_episode(&src, n, j, Difficulty::Unrestricted, rng.random())?;
            for c in ep.classes.iter_mut() {
                *c = eval_classes[*c as usize];
            }
            let real: Vec<String> = ep
                .classes
                .iter()
                .map(|&c| ground_truth.class_names[c as usize].clone())
                .collect();
            let names = match mode {
                NamingMode::RealName => real.clone(),
                NamingMode::OpenEnded => {
                    let fresh = fresh_nonsense(n, avoid, &mut rng)?;
                    rename_episode(&mut ep, template, &real, &fresh)?;
                    fresh
                }
            };
            Ok(FewShotTask {
                episode: ep,
                naming_mode: mode,
                split: Split::Standard,
                names,
            })
        })
        .collect()
}

/// Several independently generated datasets stacked into one matrix.
#[derive(Debug, Clone)]
pub struct MultiDataset {
    pub embeddings: EmbeddingMatrix,
    /// Row ids of each (dataset, class) group.
    pub groups: Vec<Vec<usize>>,
    pub group_dataset: Vec<usize>,
    pub group_names: Vec<String>,
    pub n_datasets: usize,
}

impl MultiDataset {
    pub fn new(datasets: &[(EmbeddingMatrix, GroundTruth)]) -> Result<Self> {
        let dim = datasets
            .first()
            .map(|d| d.0.dim())
            .ok_or_else(|| Error::Data("no datasets".into()))?;
        let mut data = Vec::new();
        let mut groups = Vec::new();
        let mut group_dataset = Vec::new();
        let mut group_names = Vec::new();
        let mut offset = 0;
        for (di, (m, gt)) in datasets.iter().enumerate() {
            if m.dim() != dim {
                return Err(Error::Data("datasets differ in dimension".into()));
            }
            data.extend_from_slice(m.data());
            for (c, rows) in gt.members().into_iter().enumerate() {
                groups.push(rows.into_iter().map(|r| r + offset).collect());
                group_dataset.push(di);
                group_names.push(gt.class_names[c].clone());
            }
            offset += m.n_rows();
        }
        Ok(Self {
            embeddings: EmbeddingMatrix::new(offset, dim, data)?,
            groups,
            group_dataset,
            group_names,
            n_datasets: datasets.len(),
        })
    }
}

/// Easy tasks take each way from a different dataset; hard tasks take all
/// ways from one dataset. Support items are interleaved way by way.
#[allow(clippy::too_many_arguments)]
pub fn build_easy_hard(
    data: &MultiDataset,
    n: usize,
    j: usize,
    split: Split,
    mode: NamingMode,
    count: usize,
    seed: u64,
    template: &str,
    avoid: &HashSet<String>,
) -> Result<Vec<FewShotTask>> {
    let stem = template_stem(template)?;
    let eligible = |g: &usize| data.groups[*g].len() > j;
    let by_dataset: Vec<Vec<usize>> = (0..data.n_datasets)
        .map(|d| {
            (0..data.groups.len())
                .filter(|g| data.group_dataset[*g] == d)
                .filter(eligible)
                .collect()
        })
        .collect();
    match split {
        Split::Easy if by_dataset.iter().filter(|g| !g.is_empty()).count() < n => {
            return Err(Error::sampling(format!(
                "easy {n}-way tasks need {n} datasets with usable classes"
            )));
        }
        Split::Hard if !by_dataset.iter().any(|g| g.len() >= n) => {
            return Err(Error::sampling(format!(
                "hard {n}-way tasks need a dataset with {n} usable classes"
            )));
        }
        Split::Standard => return Err(Error::validation("build_easy_hard needs the easy or hard split")),
        _ => {}
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = Vec::with_capacity(count);
    for _ in 0..count {
        let task_seed: u64 = rng.random();
        let mut trng = ChaCha8Rng::seed_from_u64(task_seed);
        let groups: Vec<usize> = match split {
            Split::Easy => {
                let ds: Vec<usize> = (0..data.n_datasets).filter(|&d| !by_dataset[d].is_empty()).collect();
                ds.choose_multiple(&mut trng, n)
                    .map(|&d| *by_dataset[d].choose(&mut trng).expect("nonempty"))
                    .collect()
            }
            _ => {
                let ds: Vec<usize> = (0..data.n_datasets).filter(|&d| by_dataset[d].len() >= n).collect();
                let d = *ds.choose(&mut trng).expect("checked above");
                by_dataset[d].choose_multiple(&mut trng, n).copied().collect()
            }
        };
        let mut groups = groups;
        groups.shuffle(&mut trng);
        let query_way = trng.random_range(0..n);
        let real: Vec<String> = groups.iter().map(|&g| data.group_names[g].clone()).collect();
        let names = match mode {
            NamingMode::RealName => real,
            NamingMode::OpenEnded => fresh_nonsense(n, avoid, &mut trng)?,
        };
        let mut picks: Vec<Vec<usize>> = Vec::with_capacity(n);
        for (w, &g) in groups.iter().enumerate() {
            let take = if w == query_way { j + 1 } else { j };
            picks.push(data.groups[g].choose_multiple(&mut trng, take).copied().collect());
        }
        let mut support = Vec::with_capacity(n * j);
        for s in 0..j {
            for (w, p) in picks.iter().enumerate() {
                support.push(Shot {
                    row_id: p[s] as u32,
                    caption: render_caption(template, &names[w]),
                });
            }
        }
        let episode = Episode {
            way: n,
            shot: j,
            classes: groups.iter().map(|&g| g as u32).collect(),
            query_way,
            support,
            query: picks[query_way][j] as u32,
            target: render_caption(template, &names[query_way]),
            stem: stem.clone(),
            difficulty: if split == Split::Easy {
                Difficulty::Easy
            } else {
                Difficulty::Hard
            },
            seed: task_seed,
        };
        tasks.push(FewShotTask {
            episode,
            naming_mode: mode,
            split,
            names,
        });
    }
    Ok(tasks)
}

/// Which tokens the decoder may produce for the name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecodeScope {
    /// One of the names present in the support set, then end-of-sequence.
    #[default]
    SupportNames,
    /// Anything in the lexicon, up to `max_new` tokens.
    Free,
}

/// Adaptation clusters, their names, and where their rows live in the
/// evaluation matrix.
#[derive(Debug, Clone)]
pub struct ClusterPool<'a> {
    pub model: &'a ClusterModel,
    pub names: &'a NameAssignment,
    /// `row_index[r]` is the evaluation-matrix row of clustered row `r`.
    pub row_index: &'a [usize],
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions<'a> {
    pub decode: DecodeConfig,
    pub scope: DecodeScope,
    /// Relabel support and target with the name of the nearest adaptation cluster.
    pub pseudo_labels: bool,
    /// Extra same-cluster support items per way.
    pub augment_shots: usize,
    pub clusters: Option<ClusterPool<'a>>,
    /// Seed for the per-task draws of the reserved name embeddings.
    pub binding_seed: u64,
}

/// A task ready for decoding.
#[derive(Debug, Clone)]
pub struct RenderedTask {
    pub prompt: ModelInput,
    pub target: String,
    pub candidates: Vec<TokenId>,
    pub aliases: HashMap<String, TokenId>,
    /// Reserved slots that must be bound before decoding.
    pub bind_slots: usize,
    pub binding_seed: u64,
}

impl RenderedTask {
    /// Decoded tokens as normalized text.
    pub fn text(&self, lexicon: &Lexicon, tokens: &[TokenId]) -> String {
        let reverse: HashMap<TokenId, &str> = self.aliases.iter().map(|(w, &t)| (t, w.as_str())).collect();
        let words: Vec<&str> = tokens
            .iter()
            .map(|t| reverse.get(t).copied().unwrap_or_else(|| lexicon.word(*t)))
            .collect();
        normalize_text(&words.join(" "))
    }

    pub fn constraint(&self, scope: DecodeScope) -> Constraint {
        match scope {
            DecodeScope::SupportNames => Constraint::OneOf(self.candidates.clone()),
            DecodeScope::Free => Constraint::Free,
        }
    }
}

fn nearest_cluster_name(pool: &ClusterPool<'_>, embeddings: &EmbeddingMatrix, row: u32) -> String {
    pool.names.mapping[pool.model.nearest(embeddings.row(row as usize))].clone()
}

/// Applies options to a task and renders its prompt.
pub fn render_task(
    task: &FewShotTask,
    index: usize,
    lexicon: &Lexicon,
    embeddings: &EmbeddingMatrix,
    render: &RenderOptions,
    opts: &EvalOptions<'_>,
) -> Result<RenderedTask> {
    let mut ep = task.episode.clone();
    let mut names = task.names.clone();
    let template = format!("{} {{}}", ep.stem);
    let need_pool = || {
        opts.clusters
            .as_ref()
            .ok_or_else(|| Error::config("pseudo labels and shot augmentation need the adaptation clusters"))
    };
    let way_of: HashMap<String, usize> = names
        .iter()
        .enumerate()
        .map(|(w, n)| (render_caption(&template, n), w))
        .collect();
    let support_way: Vec<usize> = ep
        .support
        .iter()
        .map(|s| {
            way_of
                .get(&s.caption)
                .copied()
                .ok_or_else(|| Error::Data(format!("support caption {:?} matches no way", s.caption)))
        })
        .collect::<Result<_>>()?;

    if opts.augment_shots > 0 {
        let pool = need_pool()?;
        let mut rng = ChaCha8Rng::seed_from_u64(ep.seed ^ 0x5eed_a11c);
        let members = pool.model.members();
        let in_episode: HashSet<u32> = ep.support.iter().map(|s| s.row_id).chain([ep.query]).collect();
        for (w, name) in names.iter().enumerate().take(ep.way) {
            let first = ep.support[support_way.iter().position(|&x| x == w).expect("every way has support")].row_id;
            let c = pool.model.nearest(embeddings.row(first as usize));
            let cands: Vec<u32> = members[c]
                .iter()
                .map(|&r| pool.row_index[r] as u32)
                .filter(|r| !in_episode.contains(r))
                .collect();
            for &r in cands.choose_multiple(&mut rng, opts.augment_shots) {
                ep.support.push(Shot {
                    row_id: r,
                    caption: render_caption(&template, name),
                });
            }
        }
        ep.support.shuffle(&mut rng);
    }

    let mut target = names[ep.query_way].clone();
    if opts.pseudo_labels {
        let pool = need_pool()?;
        for s in &mut ep.support {
            s.caption = render_caption(&template, &nearest_cluster_name(pool, embeddings, s.row_id));
        }
        target = nearest_cluster_name(pool, embeddings, ep.query);
        ep.target = render_caption(&template, &target);
        names.clear();
    }

    let mut aliases = HashMap::new();
    let mut bind_slots = 0;
    if task.naming_mode == NamingMode::OpenEnded && !opts.pseudo_labels {
        for (w, n) in names.iter().enumerate() {
            let id = lexicon.dynamic_id(w).ok_or_else(|| {
                Error::config(format!("lexicon reserves too few name slots for {} ways", names.len()))
            })?;
            aliases.insert(normalize_text(n), id);
        }
        bind_slots = names.len();
    }
    let input = render_sequence_with(&ep, lexicon, &aliases, render)?;
    let mut candidates = Vec::new();
    for s in &ep.support {
        let words = normalize_words(crate::context::caption_name(&s.caption, &ep.stem));
        if words.len() != 1 {
            return Err(Error::validation(format!(
                "support name {:?} is not a single token",
                s.caption
            )));
        }
        let id = aliases
            .get(&words[0])
            .copied()
            .or_else(|| lexicon.id(&words[0]))
            .expect("rendered above");
        if !candidates.contains(&id) {
            candidates.push(id);
        }
    }
    candidates.sort_unstable();
    Ok(RenderedTask {
        prompt: input.prompt(),
        target: normalize_text(&target),
        candidates,
        aliases,
        bind_slots,
        binding_seed: opts
            .binding_seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(index as u64),
    })
}

/// Greedy/beam decoding driver over a frozen model and one prompt.
pub struct VlmLm<'a> {
    pub model: &'a TinyVlm,
    pub prompt: &'a ModelInput,
    pub embeddings: &'a EmbeddingMatrix,
}

impl LanguageModel for VlmLm<'_> {
    fn vocab_size(&self) -> usize {
        self.model.lexicon().len()
    }

    fn next_log_probs(&mut self, generated: &[TokenId]) -> Result<Vec<f64>> {
        let mut input = self.prompt.clone();
        input.token_ids.extend_from_slice(generated);
        input.loss_mask.resize(input.token_ids.len(), false);
        let last = input.token_ids.len() - 1;
        let layout = self.model.layout();
        let trace = forward_with_logits::<f32>(
            self.model.config(),
            &layout,
            self.model.params(),
            &input,
            self.embeddings,
            vec![last],
        )?;
        Ok(log_softmax(trace.logit_row(0)))
    }
}

/// Anything that produces a name for a rendered task.
pub trait Predictor: Sync {
    fn lexicon(&self) -> &Lexicon;
    fn predict(&self, task: &RenderedTask) -> Result<String>;
}

/// Beam-search decoding with the tiny model; reserved name slots are drawn
/// afresh for every task.
pub struct VlmPredictor<'a> {
    pub model: &'a TinyVlm,
    pub embeddings: &'a EmbeddingMatrix,
    pub decode: DecodeConfig,
    pub scope: DecodeScope,
    binding_std: f64,
}

impl<'a> VlmPredictor<'a> {
    pub fn new(model: &'a TinyVlm, embeddings: &'a EmbeddingMatrix, decode: DecodeConfig, scope: DecodeScope) -> Self {
        let binding_std = model.token_rms(&crate::train::word_ids(model.lexicon()));
        Self {
            model,
            embeddings,
            decode,
            scope,
            binding_std,
        }
    }
}

impl Predictor for VlmPredictor<'_> {
    fn lexicon(&self) -> &Lexicon {
        self.model.lexicon()
    }

    fn predict(&self, task: &RenderedTask) -> Result<String> {
        let bound;
        let model = if task.bind_slots > 0 {
            let mut m = self.model.clone();
            m.bind_dynamic_slots(task.bind_slots, self.binding_std, task.binding_seed)?;
            bound = m;
            &bound
        } else {
            self.model
        };
        let mut lm = VlmLm {
            model,
            prompt: &task.prompt,
            embeddings: self.embeddings,
        };
        let cfg = DecodeConfig {
            constraint: task.constraint(self.scope),
            ..self.decode.clone()
        };
        let tokens = beam_search(&mut lm, &cfg)?;
        Ok(task.text(model.lexicon(), &tokens))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Experiment family ("main", "difficulty", "k_sweep", ...).
    pub kind: String,
    /// Cell label within the family ("hard", "nouns", ...).
    pub setting: String,
    pub n: usize,
    pub j: usize,
    pub mode: NamingMode,
    pub split: Split,
    pub k: usize,
    pub accuracy: f64,
    pub ci: f64,
    pub seed: u64,
    pub tasks: usize,
    pub pseudo_labels: bool,
    pub augment_shots: usize,
}

/// Normal-approximation 95% half-width.
pub fn confidence_half_width(p: f64, count: usize) -> f64 {
    1.96 * (p * (1.0 - p) / count as f64).sqrt()
}

/// Exact-match outcome of every task, in task order.
pub fn score_tasks<P: Predictor>(
    predictor: &P,
    tasks: &[FewShotTask],
    embeddings: &EmbeddingMatrix,
    render: &RenderOptions,
    opts: &EvalOptions<'_>,
    exec: Executor,
) -> Result<Vec<bool>> {
    if tasks.is_empty() {
        return Err(Error::validation("no tasks to evaluate"));
    }
    let results = exec.map_range(tasks.len(), |i| {
        let rt = render_task(&tasks[i], i, predictor.lexicon(), embeddings, render, opts)?;
        Ok(predictor.predict(&rt)? == rt.target)
    });
    results.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub kind: String,
    pub setting: String,
    pub k: usize,
    pub seed: u64,
}

pub fn evaluate_with<P: Predictor>(
    predictor: &P,
    tasks: &[FewShotTask],
    embeddings: &EmbeddingMatrix,
    render: &RenderOptions,
    opts: &EvalOptions<'_>,
    meta: &ReportMeta,
    exec: Executor,
) -> Result<EvalReport> {
    let outcomes = score_tasks(predictor, tasks, embeddings, render, opts, exec)?;
    let correct = outcomes.iter().filter(|&&c| c).count();
    let p = correct as f64 / outcomes.len() as f64;
    let first = &tasks[0];
    Ok(EvalReport {
        kind: meta.kind.clone(),
        setting: meta.setting.clone(),
        n: first.episode.way,
        j: first.episode.shot,
        mode: first.naming_mode,
        split: first.split,
        k: meta.k,
        accuracy: p,
        ci: confidence_half_width(p, outcomes.len()),
        seed: meta.seed,
        tasks: outcomes.len(),
        pseudo_labels: opts.pseudo_labels,
        augment_shots: opts.augment_shots,
    })
}

/// Scores the model on `tasks` with beam-search decoding.
pub fn evaluate_open_ended(
    model: &TinyVlm,
    tasks: &[FewShotTask],
    embeddings: &EmbeddingMatrix,
    opts: &EvalOptions<'_>,
    meta: &ReportMeta,
    exec: Executor,
) -> Result<EvalReport> {
    let predictor = VlmPredictor::new(model, embeddings, opts.decode.clone(), opts.scope);
    let render = RenderOptions::new(model.config().prefix_len, model.config().max_len);
    evaluate_with(&predictor, tasks, embeddings, &render, opts, meta, exec)
}

/// Fraction of rows whose free greedy caption name equals the label.
pub fn caption_accuracy(
    model: &TinyVlm,
    embeddings: &EmbeddingMatrix,
    rows: &[usize],
    labels: &[u32],
    class_names: &[String],
    template: &str,
    exec: Executor,
) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::validation("no rows to caption"));
    }
    let stem = template_stem(template)?;
    let render = RenderOptions::new(model.config().prefix_len, model.config().max_len);
    let hits = exec.map(rows, |&r| -> Result<bool> {
        let name = &class_names[labels[r] as usize];
        let input = crate::train::caption_input(
            r as u32,
            &render_caption(template, name),
            &stem,
            model.lexicon(),
            &render,
        )?;
        let prompt = input.prompt();
        let mut lm = VlmLm {
            model,
            prompt: &prompt,
            embeddings,
        };
        let out = crate::model::greedy_rollout(&mut lm, crate::model::DEFAULT_MAX_NEW, &Constraint::Free)?;
        Ok(normalize_text(&model.lexicon().decode(&out)) == normalize_text(name))
    });
    let mut correct = 0usize;
    for h in hits {
        correct += usize::from(h?);
    }
    Ok(correct as f64 / rows.len() as f64)
}

pub const CSV_HEADER: &str = "kind,n,j,mode,split,K,accuracy,ci,seed,tasks";

fn enum_name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in reports {
        writeln!(
            s,
            "{},{},{},{},{},{},{:.4},{:.4},{},{}",
            r.kind,
            r.n,
            r.j,
            enum_name(&r.mode),
            enum_name(&r.split),
            r.k,
            r.accuracy,
            r.ci,
            r.seed,
            r.tasks
        )
        .expect("write to string");
    }
    s
}

/// `(K, accuracy)` pairs of the K-sweep rows, sorted by K.
pub fn k_sweep_plot_data(reports: &[EvalReport]) -> Vec<(usize, f64)> {
    let mut pts: Vec<(usize, f64)> = reports
        .iter()
        .filter(|r| r.kind == "k_sweep")
        .map(|r| (r.k, r.accuracy))
        .collect();
    pts.sort_by_key(|p| p.0);
    pts
}

/// Aligned text table with one row per setting and one column per
/// (ways, shots) cell.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut rows: Vec<String> = Vec::new();
    let mut cols: Vec<(usize, usize)> = Vec::new();
    let mut cells: HashMap<(String, (usize, usize)), f64> = HashMap::new();
    for r in reports {
        let row = if r.setting.is_empty() {
            r.kind.clone()
        } else {
            format!("{}/{}", r.kind, r.setting)
        };
        if !rows.contains(&row) {
            rows.push(row.clone());
        }
        if !cols.contains(&(r.n, r.j)) {
            cols.push((r.n, r.j));
        }
        cells.insert((row, (r.n, r.j)), r.accuracy);
    }
    cols.sort();
    let width = rows.iter().map(|r| r.len()).max().unwrap_or(0).max(7);
    let mut s = format!("{:<width$}", "setting");
    for (n, j) in &cols {
        write!(s, "  {:>12}", format!("{n}-way {j}-shot")).expect("write to string");
    }
    s.push('\n');
    for row in &rows {
        write!(s, "{row:<width$}").expect("write to string");
        for c in &cols {
            match cells.get(&(row.clone(), *c)) {
                Some(a) => write!(s, "  {:>12.1}", 100.0 * a),
                None => write!(s, "  {:>12}", "-"),
            }
            .expect("write to string");
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_width() {
        assert!((confidence_half_width(0.5, 1000) - 0.030990).abs() < 1e-5);
        assert_eq!(confidence_half_width(1.0, 10), 0.0);
    }

    #[test]
    fn csv_layout() {
        let r = EvalReport {
            kind: "k_sweep".into(),
            setting: "25".into(),
            n: 2,
            j: 1,
            mode: NamingMode::OpenEnded,
            split: Split::Standard,
            k: 25,
            accuracy: 0.5,
            ci: 0.031,
            seed: 7,
            tasks: 1000,
            pseudo_labels: false,
            augment_shots: 0,
        };
        let csv = reports_to_csv(std::slice::from_ref(&r));
        assert_eq!(
            csv,
            "kind,n,j,mode,split,K,accuracy,ci,seed,tasks\nk_sweep,2,1,open_ended,standard,25,0.5000,0.0310,7,1000\n"
        );
        assert_eq!(k_sweep_plot_data(&[r]), vec![(25, 0.5)]);
    }

    #[test]
    fn open_ended_benchmark_renames_every_caption() {
        use crate::embed_store::{generate_synthetic, SyntheticSpec};
        use crate::lexicon::DEFAULT_TEMPLATE;
        let (_, gt) = generate_synthetic(&SyntheticSpec {
            n_classes: 6,
            per_class: 4,
            dim: 8,
            separation: 5.0,
            seed: 1,
        })
        .unwrap();
        let avoid: HashSet<String> = gt.class_names.iter().cloned().collect();
        let tasks = build_benchmark(
            &gt,
            &[1, 3, 4, 5],
            2,
            2,
            NamingMode::OpenEnded,
            20,
            9,
            DEFAULT_TEMPLATE,
            &avoid,
        )
        .unwrap();
        for t in &tasks {
            assert!(t.names.iter().all(|n| !avoid.contains(n)));
            assert_eq!(t.episode.target, render_caption(DEFAULT_TEMPLATE, t.target_name()));
            for s in &t.episode.support {
                let label = gt.labels[s.row_id as usize];
                let way = t.episode.classes.iter().position(|&c| c == label).unwrap();
                assert_eq!(s.caption, render_caption(DEFAULT_TEMPLATE, &t.names[way]));
            }
        }
        let real = build_benchmark(
            &gt,
            &[1, 3, 4, 5],
            2,
            1,
            NamingMode::RealName,
            5,
            9,
            DEFAULT_TEMPLATE,
            &avoid,
        )
        .unwrap();
        for t in &real {
            assert_eq!(
                t.target_name(),
                gt.class_names[t.episode.classes[t.episode.query_way] as usize]
            );
        }
    }
}
