//! End-to-end experiment: data, clustering, pretraining, naming, adaptation,
//! evaluation and ablations, either in memory or through a [`Workspace`].

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cluster::{
    centroid_distance_matrix, difficulty_pools, kmeans_with, ClusterModel, DifficultyPools, KMeansOptions,
};
use crate::context::{template_stem, Difficulty, EpisodeSource, TaskMode};
use crate::embed_store::{generate_synthetic, l2_normalize, EmbeddingMatrix, GroundTruth, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{
    build_benchmark, caption_accuracy, evaluate_open_ended, ClusterPool, DecodeScope, EvalOptions, EvalReport,
    NamingMode, ReportMeta,
};
use crate::exec::Executor;
use crate::lexicon::{DEFAULT_TEMPLATE, TEMPLATES};
use crate::model::{DecodeConfig, ModelConfig, TinyVlm, DEFAULT_BEAM_WIDTH, DEFAULT_MAX_NEW};
use crate::names::{assign_names, build_vocabulary, MatchMethod, NameAssignment, VocabKind, Vocabulary};
use crate::train::{pretrain_captioner, secat_adapt, CaptionData, RunConfig, TrainLog};
use crate::workspace::Workspace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Minimum distance between class centres of one group.
    pub separation: f64,
    /// Classes are split evenly over this many groups, each shifted by a
    /// random offset of length `group_radius`.
    pub groups: usize,
    pub group_radius: f64,
    pub normalize: bool,
    pub adapt_classes: usize,
    /// Fraction of each adaptation class held out from pretraining.
    pub holdout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamingConfig {
    pub vocab: VocabKind,
    pub method: MatchMethod,
    pub template: String,
    /// Words drawn for matching; raised to K when smaller.
    pub vocab_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// `(n, j)` settings to evaluate.
    pub settings: Vec<(usize, usize)>,
    pub tasks: usize,
    pub mode: NamingMode,
    pub scope: DecodeScope,
    pub beam_width: usize,
    pub max_new: usize,
    pub pseudo_labels: bool,
    pub augment_shots: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub kmeans_iters: usize,
    pub pool_fraction: f64,
    pub naming: NamingConfig,
    pub pretrain: RunConfig,
    pub adapt: RunConfig,
    pub eval: EvalConfig,
    /// The K sweep runs K in {25, 50, 75, 100, 200} divided by this.
    pub k_sweep_divisor: usize,
}

/// K values of the cluster-count sweep before scaling.
pub const K_SWEEP: [usize; 5] = [25, 50, 75, 100, 200];

impl PipelineConfig {
    pub fn desk(seed: u64) -> Self {
        let dim = 64;
        Self {
            seed,
            data: DataConfig {
                n_classes: 64,
                per_class: 50,
                dim,
                separation: 10.0,
                groups: 1,
                group_radius: 0.0,
                normalize: true,
                adapt_classes: 32,
                holdout: 0.2,
            },
            kmeans_iters: crate::cluster::DEFAULT_KMEANS_ITERS,
            pool_fraction: crate::cluster::DEFAULT_POOL_FRACTION,
            naming: NamingConfig {
                vocab: VocabKind::Nouns,
                method: MatchMethod::CostBased,
                template: DEFAULT_TEMPLATE.to_string(),
                vocab_size: 64,
            },
            pretrain: RunConfig::desk_pretrain(dim, sub_seed(seed, "pretrain")),
            adapt: RunConfig::desk_adapt(dim, sub_seed(seed, "adapt")),
            eval: EvalConfig {
                settings: vec![(2, 1)],
                tasks: 1000,
                mode: NamingMode::OpenEnded,
                scope: DecodeScope::SupportNames,
                beam_width: DEFAULT_BEAM_WIDTH,
                max_new: DEFAULT_MAX_NEW,
                pseudo_labels: false,
                augment_shots: 0,
            },
            k_sweep_divisor: 2,
        }
    }

    /// A seconds-scale preset for smoke tests; results are meaningless.
    pub fn smoke(seed: u64) -> Self {
        let mut c = Self::desk(seed);
        c.data.n_classes = 8;
        c.data.per_class = 30;
        c.data.dim = 16;
        c.data.adapt_classes = 4;
        c.naming.vocab_size = 8;
        c.eval.tasks = 20;
        c.eval.beam_width = 2;
        c.k_sweep_divisor = 8;
        c.adapt.task_mode = TaskMode::Single;
        for run in [&mut c.pretrain, &mut c.adapt] {
            run.total_steps = 12;
            run.warmup_steps = 2;
            run.batch_size = 4;
            run.k = 4;
            run.model = ModelConfig {
                d_model: 16,
                n_heads: 2,
                d_ff: 32,
                map_hidden: 16,
                ..ModelConfig::desk(16)
            };
        }
        c
    }

    /// The same configuration under another run seed; stage seeds follow.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.pretrain.seed = sub_seed(seed, "pretrain");
        self.adapt.seed = sub_seed(seed, "adapt");
        self
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.adapt_classes == 0 || d.adapt_classes >= d.n_classes {
            return Err(Error::config("adapt_classes must leave at least one evaluation class"));
        }
        if d.groups == 0 || !d.n_classes.is_multiple_of(d.groups) {
            return Err(Error::config("n_classes must split evenly into groups"));
        }
        if !(0.0..1.0).contains(&d.holdout) {
            return Err(Error::config("holdout must lie in [0, 1)"));
        }
        if self.pretrain.model != self.adapt.model {
            return Err(Error::config("pretrain and adapt use different architectures"));
        }
        if self.pretrain.model.embed_dim != d.dim {
            return Err(Error::config("model embed_dim differs from data dim"));
        }
        if self.k_sweep_divisor == 0 {
            return Err(Error::config("k_sweep_divisor must be at least 1"));
        }
        if self.eval.tasks == 0 || self.eval.settings.is_empty() {
            return Err(Error::config("evaluation needs tasks and settings"));
        }
        template_stem(&self.naming.template)?;
        self.pretrain.validate()?;
        self.adapt.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn k(&self) -> usize {
        self.adapt.k
    }
}

/// Deterministic per-purpose seed derived from the run seed.
pub fn sub_seed(seed: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, mixed with the seed by splitmix64
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub class_names: Vec<String>,
    pub adapt_classes: Vec<u32>,
    pub eval_classes: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub embeddings: EmbeddingMatrix,
    pub truth: GroundTruth,
    pub info: DatasetInfo,
}

impl Dataset {
    fn rows_of(&self, classes: &[u32]) -> Vec<usize> {
        let set: HashSet<u32> = classes.iter().copied().collect();
        (0..self.embeddings.n_rows())
            .filter(|&r| set.contains(&self.truth.labels[r]))
            .collect()
    }

    pub fn adapt_rows(&self) -> Vec<usize> {
        self.rows_of(&self.info.adapt_classes)
    }

    pub fn eval_rows(&self) -> Vec<usize> {
        self.rows_of(&self.info.eval_classes)
    }

    /// Pretraining rows and held-out rows of the adaptation classes.
    pub fn pretrain_split(&self, holdout: f64) -> (Vec<usize>, Vec<usize>) {
        let members = self.truth.members();
        let (mut train, mut held) = (Vec::new(), Vec::new());
        for &c in &self.info.adapt_classes {
            let m = &members[c as usize];
            let h = ((m.len() as f64) * holdout).round() as usize;
            train.extend_from_slice(&m[..m.len() - h]);
            held.extend_from_slice(&m[m.len() - h..]);
        }
        (train, held)
    }
}

pub fn generate_dataset(cfg: &PipelineConfig) -> Result<Dataset> {
    let d = &cfg.data;
    let per_group = d.n_classes / d.groups;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "groups"));
    let mut data = Vec::with_capacity(d.n_classes * d.per_class * d.dim);
    let mut labels = Vec::with_capacity(d.n_classes * d.per_class);
    let mut names = Vec::with_capacity(d.n_classes);
    for g in 0..d.groups {
        let spec = SyntheticSpec {
            n_classes: per_group,
            per_class: d.per_class,
            dim: d.dim,
            separation: d.separation,
            seed: sub_seed(cfg.seed, &format!("data{g}")),
        };
        let (m, gt) = generate_synthetic(&spec)?;
        let gt = gt.with_name_offset(g * per_group)?;
        let offset: Vec<f64> = if d.groups > 1 {
            let v: Vec<f64> = (0..d.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x * d.group_radius / norm).collect()
        } else {
            vec![0.0; d.dim]
        };
        for row in m.data().chunks(d.dim) {
            data.extend(row.iter().zip(&offset).map(|(&x, &o)| (f64::from(x) + o) as f32));
        }
        labels.extend(gt.labels.iter().map(|&l| l + (g * per_group) as u32));
        names.extend(gt.class_names);
    }
    let mut embeddings = EmbeddingMatrix::new(labels.len(), d.dim, data)?;
    if d.normalize {
        embeddings = l2_normalize(&embeddings)?;
    }
    let mut classes: Vec<u32> = (0..d.n_classes as u32).collect();
    classes.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "split")));
    let mut adapt_classes = classes[..d.adapt_classes].to_vec();
    let mut eval_classes = classes[d.adapt_classes..].to_vec();
    adapt_classes.sort_unstable();
    eval_classes.sort_unstable();
    Ok(Dataset {
        embeddings,
        truth: GroundTruth {
            labels,
            class_names: names.clone(),
        },
        info: DatasetInfo {
            class_names: names,
            adapt_classes,
            eval_classes,
        },
    })
}

/// Clusters of the adaptation rows, with rows mapped back to the full matrix.
#[derive(Debug, Clone)]
pub struct Clustering {
    pub model: ClusterModel,
    pub rows: Vec<usize>,
    pub pools: DifficultyPools,
}

impl Clustering {
    /// Members of each cluster as rows of the full matrix.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        self.model
            .members()
            .into_iter()
            .map(|m| m.into_iter().map(|r| self.rows[r]).collect())
            .collect()
    }

    pub fn source(&self, names: &NameAssignment) -> Result<EpisodeSource> {
        EpisodeSource::new(self.groups(), names.captions(), names.stem())?
            .with_pools(self.pools.clone(), centroid_distance_matrix(&self.model))
    }
}

pub fn cluster_dataset(cfg: &PipelineConfig, data: &Dataset, k: usize, exec: Executor) -> Result<Clustering> {
    let rows = data.adapt_rows();
    let sub = data.embeddings.select_rows(&rows)?;
    let mut opts = KMeansOptions::new(k, sub_seed(cfg.seed, &format!("kmeans{k}")));
    opts.iters = cfg.kmeans_iters;
    let model = kmeans_with(&sub, &opts, exec)?;
    let pools = difficulty_pools(&centroid_distance_matrix(&model), cfg.pool_fraction)?;
    Ok(Clustering { model, rows, pools })
}

pub fn pretrain(cfg: &PipelineConfig, data: &Dataset, exec: Executor) -> Result<(TinyVlm, TrainLog)> {
    let (train, _) = data.pretrain_split(cfg.data.holdout);
    let cd = CaptionData {
        embeddings: &data.embeddings,
        rows: train,
        labels: &data.truth.labels,
        class_names: &data.truth.class_names,
    };
    pretrain_captioner(&cfg.pretrain, &cd, exec)
}

/// Held-out captioning accuracy of a pretrained model.
pub fn pretrain_holdout_accuracy(cfg: &PipelineConfig, data: &Dataset, model: &TinyVlm, exec: Executor) -> Result<f64> {
    let (_, held) = data.pretrain_split(cfg.data.holdout);
    caption_accuracy(
        model,
        &data.embeddings,
        &held,
        &data.truth.labels,
        &data.truth.class_names,
        DEFAULT_TEMPLATE,
        exec,
    )
}

pub fn vocabulary(cfg: &PipelineConfig, naming: &NamingConfig, k: usize) -> Result<Vocabulary> {
    build_vocabulary(naming.vocab, naming.vocab_size.max(k), sub_seed(cfg.seed, "vocab"))
}

/// The pretrained model with the vocabulary appended to its lexicon.
pub fn extend_for_vocabulary(cfg: &PipelineConfig, pretrained: &TinyVlm, vocab: &Vocabulary) -> Result<TinyVlm> {
    let lex = pretrained.lexicon().extended(&vocab.words)?;
    pretrained.with_lexicon(lex, sub_seed(cfg.seed, "extend"))
}

pub fn name_clusters(
    cfg: &PipelineConfig,
    naming: &NamingConfig,
    clustering: &Clustering,
    extended: &TinyVlm,
    vocab: &Vocabulary,
) -> Result<NameAssignment> {
    assign_names(
        &clustering.model,
        vocab,
        extended,
        naming.method,
        &naming.template,
        sub_seed(cfg.seed, "names"),
    )
}

pub fn adapt(
    run: &RunConfig,
    extended: &TinyVlm,
    clustering: &Clustering,
    names: &NameAssignment,
    data: &Dataset,
    exec: Executor,
) -> Result<(TinyVlm, TrainLog)> {
    let source = clustering.source(names)?;
    secat_adapt(run, extended, &source, &data.embeddings, exec)
}

/// Words an open-ended task must never use as a name.
pub fn seen_words(model: &TinyVlm, names: Option<&NameAssignment>) -> HashSet<String> {
    let mut s: HashSet<String> = model.lexicon().tokens().iter().cloned().collect();
    if let Some(n) = names {
        s.extend(n.mapping.iter().cloned());
    }
    s
}

/// Evaluates `model` on every configured `(n, j)` setting.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    cfg: &PipelineConfig,
    model: &TinyVlm,
    data: &Dataset,
    clustering: Option<&Clustering>,
    names: Option<&NameAssignment>,
    meta: &ReportMeta,
    exec: Executor,
) -> Result<Vec<EvalReport>> {
    let avoid = seen_words(model, names);
    let pool = match (clustering, names) {
        (Some(c), Some(n)) => Some(ClusterPool {
            model: &c.model,
            names: n,
            row_index: &c.rows,
        }),
        _ => None,
    };
    let opts = EvalOptions {
        decode: DecodeConfig {
            beam_width: cfg.eval.beam_width,
            max_new: cfg.eval.max_new,
            ..DecodeConfig::default()
        },
        scope: cfg.eval.scope,
        pseudo_labels: cfg.eval.pseudo_labels,
        augment_shots: cfg.eval.augment_shots,
        clusters: pool,
        binding_seed: sub_seed(cfg.seed, "binding"),
    };
    let mut out = Vec::new();
    for &(n, j) in &cfg.eval.settings {
        let tasks = build_benchmark(
            &data.truth,
            &data.info.eval_classes,
            n,
            j,
            cfg.eval.mode,
            cfg.eval.tasks,
            sub_seed(cfg.seed, &format!("bench{n}x{j}")),
            DEFAULT_TEMPLATE,
            &avoid,
        )?;
        out.push(evaluate_open_ended(model, &tasks, &data.embeddings, &opts, meta, exec)?);
    }
    Ok(out)
}

/// Everything produced by one full run.
pub struct RunOutputs {
    pub data: Dataset,
    pub clustering: Clustering,
    pub pretrained: TinyVlm,
    pub pretrain_log: TrainLog,
    pub vocab: Vocabulary,
    pub names: NameAssignment,
    pub adapted: TinyVlm,
    pub adapt_log: TrainLog,
}

pub fn run_pipeline(cfg: &PipelineConfig, exec: Executor) -> Result<RunOutputs> {
    cfg.validate()?;
    let data = generate_dataset(cfg)?;
    let clustering = cluster_dataset(cfg, &data, cfg.k(), exec)?;
    let (pretrained, pretrain_log) = pretrain(cfg, &data, exec)?;
    let vocab = vocabulary(cfg, &cfg.naming, cfg.k())?;
    let extended = extend_for_vocabulary(cfg, &pretrained, &vocab)?;
    let names = name_clusters(cfg, &cfg.naming, &clustering, &extended, &vocab)?;
    let (adapted, adapt_log) = adapt(&cfg.adapt, &extended, &clustering, &names, &data, exec)?;
    Ok(RunOutputs {
        data,
        clustering,
        pretrained,
        pretrain_log,
        vocab,
        names,
        adapted,
        adapt_log,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    Difficulty,
    Vocabulary,
    Matching,
    TaskMode,
    ModelSize,
    Template,
    KSweep,
}

impl AblationKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Difficulty => "difficulty",
            Self::Vocabulary => "vocabulary",
            Self::Matching => "matching",
            Self::TaskMode => "task_mode",
            Self::ModelSize => "model_size",
            Self::Template => "template",
            Self::KSweep => "k_sweep",
        }
    }
}

impl std::str::FromStr for AblationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [
            Self::Difficulty,
            Self::Vocabulary,
            Self::Matching,
            Self::TaskMode,
            Self::ModelSize,
            Self::Template,
            Self::KSweep,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| Error::validation(format!("unknown ablation kind {s:?}")))
    }
}

/// One adaptation variant of the base configuration.
#[derive(Debug, Clone)]
struct Cell {
    label: String,
    cfg: PipelineConfig,
}

fn cells(kind: AblationKind, base: &PipelineConfig) -> Vec<Cell> {
    let with = |label: String, f: &dyn Fn(&mut PipelineConfig)| {
        let mut cfg = base.clone();
        f(&mut cfg);
        Cell { label, cfg }
    };
    match kind {
        AblationKind::Difficulty => [Difficulty::Hard, Difficulty::Easy, Difficulty::Varying]
            .into_iter()
            .map(|d| with(format!("{d:?}").to_lowercase(), &|c| c.adapt.difficulty = d))
            .collect(),
        AblationKind::Vocabulary => [VocabKind::Nonsense, VocabKind::Numbers, VocabKind::Nouns]
            .into_iter()
            .map(|v| with(format!("{v:?}").to_lowercase(), &|c| c.naming.vocab = v))
            .collect(),
        AblationKind::Matching => [MatchMethod::Random, MatchMethod::CostBased]
            .into_iter()
            .map(|m| {
                let label = if m == MatchMethod::Random {
                    "random"
                } else {
                    "cost_based"
                };
                with(label.into(), &|c| c.naming.method = m)
            })
            .collect(),
        AblationKind::TaskMode => [TaskMode::Single, TaskMode::Mixed]
            .into_iter()
            .map(|t| with(format!("{t:?}").to_lowercase(), &|c| c.adapt.task_mode = t))
            .collect(),
        AblationKind::ModelSize => [32usize, 64, 128]
            .into_iter()
            .map(|d| {
                with(format!("d{d}"), &|c| {
                    c.pretrain.model.d_model = d;
                    c.adapt.model.d_model = d;
                    c.pretrain.model.d_ff = 4 * d;
                    c.adapt.model.d_ff = 4 * d;
                })
            })
            .collect(),
        AblationKind::Template => TEMPLATES
            .iter()
            .map(|t| with(t.to_string(), &|c| c.naming.template = t.to_string()))
            .collect(),
        AblationKind::KSweep => K_SWEEP
            .into_iter()
            .map(|k| {
                let k = (k / base.k_sweep_divisor).max(2);
                with(k.to_string(), &|c| c.adapt.k = k)
            })
            .collect(),
    }
}

/// Re-runs adaptation and evaluation once per value of one factor. Data,
/// clusters and the pretrained model are shared when the factor leaves them
/// unchanged.
pub fn run_ablation(kind: AblationKind, base: &PipelineConfig, exec: Executor) -> Result<Vec<EvalReport>> {
    base.validate()?;
    let data = generate_dataset(base)?;
    let shared_pretrain = if kind == AblationKind::ModelSize {
        None
    } else {
        Some(pretrain(base, &data, exec)?.0)
    };
    let shared_clusters = if kind == AblationKind::KSweep {
        None
    } else {
        Some(cluster_dataset(base, &data, base.k(), exec)?)
    };
    let mut reports = Vec::new();
    for cell in cells(kind, base) {
        let cfg = &cell.cfg;
        cfg.validate()?;
        let pretrained = match &shared_pretrain {
            Some(p) => p.clone(),
            None => pretrain(cfg, &data, exec)?.0,
        };
        let clustering = match &shared_clusters {
            Some(c) => c.clone(),
            None => cluster_dataset(cfg, &data, cfg.k(), exec)?,
        };
        let vocab = vocabulary(cfg, &cfg.naming, cfg.k())?;
        let extended = extend_for_vocabulary(cfg, &pretrained, &vocab)?;
        let names = name_clusters(cfg, &cfg.naming, &clustering, &extended, &vocab)?;
        let (adapted, _) = adapt(&cfg.adapt, &extended, &clustering, &names, &data, exec)?;
        let meta = ReportMeta {
            kind: kind.name().into(),
            setting: cell.label.clone(),
            k: cfg.k(),
            seed: cfg.seed,
        };
        reports.extend(evaluate(
            cfg,
            &adapted,
            &data,
            Some(&clustering),
            Some(&names),
            &meta,
            exec,
        )?);
    }
    Ok(reports)
}

/// Artifact paths inside a workspace.
pub mod paths {
    pub const CONFIG: &str = "config.json";
    pub const EMBEDDINGS: &str = "data/embeddings.bin";
    pub const DATASET: &str = "data/dataset.json";
    pub const CENTROIDS: &str = "clusters/centroids.bin";
    pub const ASSIGNMENTS: &str = "clusters/assignments.bin";
    pub const POOLS: &str = "clusters/pools.json";
    pub const PRETRAIN_CKPT: &str = "checkpoints/pretrain.ckpt";
    pub const VOCAB: &str = "names/vocabulary.json";
    pub const NAMES: &str = "names/names.tsv";
    pub const ADAPT_CKPT: &str = "checkpoints/adapt.ckpt";
    pub const REPORTS_JSONL: &str = "reports/eval.jsonl";
    pub const REPORTS_CSV: &str = "reports/eval.csv";
    pub const PRETRAIN_LOG: &str = "logs/pretrain.jsonl";
    pub const ADAPT_LOG: &str = "logs/adapt.jsonl";

    pub fn ablation_jsonl(kind: &str) -> String {
        format!("reports/ablation_{kind}.jsonl")
    }

    pub fn ablation_csv(kind: &str) -> String {
        format!("reports/ablation_{kind}.csv")
    }
}

/// Workspace-backed stages; each reads its inputs through hash-verified
/// artifacts and records its outputs in the manifest.
pub mod stages {
    use super::*;
    use crate::eval::reports_to_csv;
    use crate::jsonl::to_jsonl_string;

    pub fn load_config(ws: &Workspace) -> Result<PipelineConfig> {
        let bytes = ws.read(paths::CONFIG, "config")?;
        PipelineConfig::from_json(std::str::from_utf8(&bytes).map_err(|e| Error::config(e.to_string()))?)
    }

    pub fn save_config(ws: &mut Workspace, cfg: &PipelineConfig) -> Result<()> {
        cfg.validate()?;
        ws.write(paths::CONFIG, cfg.to_json()?.as_bytes(), "config")
    }

    pub fn load_dataset(ws: &Workspace) -> Result<Dataset> {
        let (embeddings, labels) = EmbeddingMatrix::from_bytes(&ws.read(paths::EMBEDDINGS, "embeddings")?)?;
        let info: DatasetInfo = serde_json::from_slice(&ws.read(paths::DATASET, "dataset description")?)?;
        let labels = labels.ok_or_else(|| Error::Data("embedding file has no labels".into()))?;
        Ok(Dataset {
            embeddings,
            truth: GroundTruth {
                labels,
                class_names: info.class_names.clone(),
            },
            info,
        })
    }

    pub fn load_clustering(ws: &Workspace, data: &Dataset) -> Result<Clustering> {
        let rows = data.adapt_rows();
        let sub = data.embeddings.select_rows(&rows)?;
        let model = ClusterModel::from_bytes(
            &ws.read(paths::CENTROIDS, "cluster centroids")?,
            &ws.read(paths::ASSIGNMENTS, "cluster assignments")?,
            &sub,
        )?;
        let pools = serde_json::from_slice(&ws.read(paths::POOLS, "difficulty pools")?)?;
        Ok(Clustering { model, rows, pools })
    }

    pub fn load_checkpoint(ws: &Workspace, rel: &str) -> Result<TinyVlm> {
        TinyVlm::from_checkpoint_bytes(&ws.read(rel, "checkpoint")?)
    }

    pub fn load_names(ws: &Workspace, cfg: &PipelineConfig) -> Result<(Vocabulary, NameAssignment)> {
        let vocab: Vocabulary = serde_json::from_slice(&ws.read(paths::VOCAB, "vocabulary")?)?;
        let text = String::from_utf8(ws.read(paths::NAMES, "name table")?).map_err(|e| Error::Data(e.to_string()))?;
        Ok((vocab, NameAssignment::from_tsv(&text, cfg.naming.method)?))
    }

    pub fn gen_data(ws: &mut Workspace, cfg: &PipelineConfig) -> Result<()> {
        let data = generate_dataset(cfg)?;
        let bytes = data.embeddings.to_bytes(Some(&data.truth.labels))?;
        ws.write(paths::EMBEDDINGS, &bytes, "gen-data")?;
        ws.write(paths::DATASET, &serde_json::to_vec_pretty(&data.info)?, "gen-data")
    }

    pub fn cluster(ws: &mut Workspace, cfg: &PipelineConfig, exec: Executor) -> Result<()> {
        let data = load_dataset(ws)?;
        let c = cluster_dataset(cfg, &data, cfg.k(), exec)?;
        let (cent, side) = c.model.to_bytes()?;
        ws.write(paths::CENTROIDS, &cent, "cluster")?;
        ws.write(paths::ASSIGNMENTS, &side, "cluster")?;
        ws.write(paths::POOLS, &serde_json::to_vec_pretty(&c.pools)?, "cluster")
    }

    pub fn pretrain(ws: &mut Workspace, cfg: &PipelineConfig, exec: Executor) -> Result<()> {
        let data = load_dataset(ws)?;
        let (model, log) = super::pretrain(cfg, &data, exec)?;
        ws.write(paths::PRETRAIN_CKPT, &model.to_checkpoint_bytes()?, "pretrain")?;
        ws.write_untracked(paths::PRETRAIN_LOG, log.to_jsonl()?.as_bytes())
    }

    pub fn assign_names(ws: &mut Workspace, cfg: &PipelineConfig) -> Result<()> {
        let data = load_dataset(ws)?;
        let clustering = load_clustering(ws, &data)?;
        let pretrained = load_checkpoint(ws, paths::PRETRAIN_CKPT)?;
        let vocab = vocabulary(cfg, &cfg.naming, cfg.k())?;
        let extended = extend_for_vocabulary(cfg, &pretrained, &vocab)?;
        let names = name_clusters(cfg, &cfg.naming, &clustering, &extended, &vocab)?;
        ws.write(paths::VOCAB, &serde_json::to_vec_pretty(&vocab)?, "assign-names")?;
        ws.write(paths::NAMES, names.to_tsv().as_bytes(), "assign-names")
    }

    pub fn adapt(ws: &mut Workspace, cfg: &PipelineConfig, exec: Executor) -> Result<()> {
        let data = load_dataset(ws)?;
        let clustering = load_clustering(ws, &data)?;
        let pretrained = load_checkpoint(ws, paths::PRETRAIN_CKPT)?;
        let (vocab, names) = load_names(ws, cfg)?;
        let extended = extend_for_vocabulary(cfg, &pretrained, &vocab)?;
        let (model, log) = super::adapt(&cfg.adapt, &extended, &clustering, &names, &data, exec)?;
        ws.write(paths::ADAPT_CKPT, &model.to_checkpoint_bytes()?, "adapt")?;
        ws.write_untracked(paths::ADAPT_LOG, log.to_jsonl()?.as_bytes())
    }

    /// Evaluates the adapted model and, for reference, the pretrained one.
    pub fn eval(ws: &mut Workspace, cfg: &PipelineConfig, exec: Executor) -> Result<Vec<EvalReport>> {
        let adapted = load_checkpoint(ws, paths::ADAPT_CKPT)?;
        let pretrained = load_checkpoint(ws, paths::PRETRAIN_CKPT)?;
        let data = load_dataset(ws)?;
        let clustering = load_clustering(ws, &data)?;
        let (_, names) = load_names(ws, cfg)?;
        let meta = |setting: &str| ReportMeta {
            kind: "main".into(),
            setting: setting.into(),
            k: cfg.k(),
            seed: cfg.seed,
        };
        let mut reports = evaluate(
            cfg,
            &adapted,
            &data,
            Some(&clustering),
            Some(&names),
            &meta("secat"),
            exec,
        )?;
        reports.extend(evaluate(
            cfg,
            &pretrained,
            &data,
            None,
            None,
            &meta("pretrained_only"),
            exec,
        )?);
        ws.write(paths::REPORTS_JSONL, to_jsonl_string(&reports)?.as_bytes(), "eval")?;
        ws.write(paths::REPORTS_CSV, reports_to_csv(&reports).as_bytes(), "eval")?;
        Ok(reports)
    }

    pub fn ablate(
        ws: &mut Workspace,
        cfg: &PipelineConfig,
        kind: AblationKind,
        exec: Executor,
    ) -> Result<Vec<EvalReport>> {
        let reports = run_ablation(kind, cfg, exec)?;
        let cmd = format!("ablate {}", kind.name());
        ws.write(
            &paths::ablation_jsonl(kind.name()),
            to_jsonl_string(&reports)?.as_bytes(),
            &cmd,
        )?;
        ws.write(
            &paths::ablation_csv(kind.name()),
            reports_to_csv(&reports).as_bytes(),
            &cmd,
        )?;
        Ok(reports)
    }

    /// Every report recorded in the workspace, main evaluation first.
    pub fn collect_reports(ws: &Workspace) -> Result<Vec<EvalReport>> {
        let mut files: Vec<String> = ws
            .manifest()
            .artifacts
            .keys()
            .filter(|k| k.starts_with("reports/") && k.ends_with(".jsonl"))
            .cloned()
            .collect();
        files.sort_by_key(|f| (f != paths::REPORTS_JSONL, f.clone()));
        let mut out = Vec::new();
        for f in files {
            let bytes = ws.read(&f, "report")?;
            for line in std::str::from_utf8(&bytes)
                .map_err(|e| Error::Data(e.to_string()))?
                .lines()
            {
                if !line.trim().is_empty() {
                    out.push(serde_json::from_str(line)?);
                }
            }
        }
        Ok(out)
    }

    /// Runs every stage in order.
    pub fn run_all(ws: &mut Workspace, cfg: &PipelineConfig, exec: Executor) -> Result<Vec<EvalReport>> {
        save_config(ws, cfg)?;
        gen_data(ws, cfg)?;
        cluster(ws, cfg, exec)?;
        pretrain(ws, cfg, exec)?;
        assign_names(ws, cfg)?;
        adapt(ws, cfg, exec)?;
        eval(ws, cfg, exec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sub_seeds_differ_by_tag_and_seed() {
        assert_ne!(sub_seed(1, "a"), sub_seed(1, "b"));
        assert_ne!(sub_seed(1, "a"), sub_seed(2, "a"));
        assert_eq!(sub_seed(7, "x"), sub_seed(7, "x"));
    }

    #[test]
    fn desk_config_roundtrips_and_validates() {
        let c = PipelineConfig::desk(3);
        c.validate().unwrap();
        let back = PipelineConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
        let mut v: serde_json::Value = serde_json::from_str(&c.to_json().unwrap()).unwrap();
        v["data"]["extra"] = serde_json::json!(true);
        assert!(PipelineConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn smoke_pipeline_runs() {
        let cfg = PipelineConfig::smoke(1);
        cfg.validate().unwrap();
        let out = run_pipeline(&cfg, Executor::Sequential).unwrap();
        assert_eq!(out.names.mapping.len(), 4);
        assert_eq!(out.adapt_log.steps.len(), 12);
        let meta = ReportMeta {
            kind: "main".into(),
            setting: "smoke".into(),
            k: 4,
            seed: 1,
        };
        let r = evaluate(
            &cfg,
            &out.adapted,
            &out.data,
            Some(&out.clustering),
            Some(&out.names),
            &meta,
            Executor::Sequential,
        )
        .unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].tasks, 20);
    }

    #[test]
    fn k_sweep_cells() {
        let base = PipelineConfig::desk(0);
        let ks: Vec<usize> = cells(AblationKind::KSweep, &base).iter().map(|c| c.cfg.k()).collect();
        assert_eq!(ks, vec![12, 25, 37, 50, 100]);
        assert!("bogus".parse::<AblationKind>().is_err());
        assert_eq!("k_sweep".parse::<AblationKind>().unwrap(), AblationKind::KSweep);
    }

    #[test]
    fn class_split_is_disjoint() {
        let mut c = PipelineConfig::desk(5);
        c.data.n_classes = 8;
        c.data.adapt_classes = 4;
        c.data.per_class = 5;
        c.data.groups = 2;
        c.data.group_radius = 20.0;
        let d = generate_dataset(&c).unwrap();
        let a: HashSet<u32> = d.info.adapt_classes.iter().copied().collect();
        assert!(d.info.eval_classes.iter().all(|e| !a.contains(e)));
        assert_eq!(a.len() + d.info.eval_classes.len(), 8);
        assert_eq!(d.embeddings.n_rows(), 40);
        let (train, held) = d.pretrain_split(0.2);
        assert_eq!(train.len() + held.len(), 20);
    }
}
