//! Sequential vs rayon execution of the three data-parallel hot loops:
//! k-means assignment, batch gradients and evaluation fan-out.

use std::collections::HashSet;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use secat_core::cluster::{kmeans_with, KMeansOptions};
use secat_core::context::{mixed_batch, template_stem, Difficulty, EpisodeSource, RenderOptions, TaskMode};
use secat_core::embed_store::{generate_synthetic, l2_normalize, SyntheticSpec};
use secat_core::eval::{build_benchmark, score_tasks, DecodeScope, EvalOptions, NamingMode, VlmPredictor};
use secat_core::lexicon::{Lexicon, DEFAULT_TEMPLATE};
use secat_core::model::{ModelConfig, TinyVlm};
use secat_core::names::render_caption;
use secat_core::train::batch_gradient;
use secat_core::Executor;

fn executors() -> Vec<(&'static str, Executor)> {
    let v = vec![("sequential", Executor::Sequential)];
    #[cfg(feature = "parallel")]
    let v = [v, vec![("rayon", Executor::Rayon)]].concat();
    v
}

fn bench(c: &mut Criterion) {
    let spec = SyntheticSpec {
        n_classes: 32,
        per_class: 50,
        dim: 64,
        separation: 10.0,
        seed: 1,
    };
    let (raw, truth) = generate_synthetic(&spec).unwrap();
    let data = l2_normalize(&raw).unwrap();
    let lexicon = Lexicon::new(&truth.class_names, 8).unwrap();
    let model = TinyVlm::new(ModelConfig::desk(64), lexicon.clone(), 3).unwrap();
    let render = RenderOptions::new(model.config().prefix_len, model.config().max_len);

    let mut group = c.benchmark_group("parallel_vs_sequential");
    group.sample_size(10);
    for (name, exec) in executors() {
        let opts = KMeansOptions::new(32, 7);
        group.bench_with_input(BenchmarkId::new("kmeans", name), &exec, |b, &e| {
            b.iter(|| kmeans_with(&data, &opts, e).unwrap())
        });

        let captions = truth
            .class_names
            .iter()
            .map(|n| render_caption(DEFAULT_TEMPLATE, n))
            .collect();
        let src = EpisodeSource::new(truth.members(), captions, template_stem(DEFAULT_TEMPLATE).unwrap()).unwrap();
        let batch = mixed_batch(
            &src,
            TaskMode::Mixed,
            Difficulty::Unrestricted,
            16,
            5,
            &lexicon,
            &render,
        )
        .unwrap();
        group.bench_with_input(BenchmarkId::new("batch_gradient", name), &exec, |b, &e| {
            b.iter(|| batch_gradient(&model, &batch, &data, e).unwrap())
        });

        let classes: Vec<u32> = (0..32).collect();
        let tasks = build_benchmark(
            &truth,
            &classes,
            2,
            1,
            NamingMode::OpenEnded,
            64,
            9,
            DEFAULT_TEMPLATE,
            &HashSet::new(),
        )
        .unwrap();
        let eval_opts = EvalOptions::default();
        let predictor = VlmPredictor::new(&model, &data, eval_opts.decode.clone(), DecodeScope::SupportNames);
        group.bench_with_input(BenchmarkId::new("eval_fanout", name), &exec, |b, &e| {
            b.iter(|| score_tasks(&predictor, &tasks, &data, &render, &eval_opts, e).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
