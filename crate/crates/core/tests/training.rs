//! Training-loop behavior on small pipeline configurations.

use secat_core::context::TaskMode;
use secat_core::model::TinyVlm;
use secat_core::pipeline::{
    adapt, cluster_dataset, extend_for_vocabulary, generate_dataset, name_clusters, pretrain,
    pretrain_holdout_accuracy, vocabulary, PipelineConfig,
};
use secat_core::train::{pretrain_captioner, CaptionData};
use secat_core::Executor;

const EXEC: Executor = Executor::Sequential;

fn bytes(m: &TinyVlm) -> Vec<u8> {
    m.to_checkpoint_bytes().unwrap()
}

#[test]
fn pretraining_is_deterministic_per_seed() {
    let cfg = PipelineConfig::smoke(3);
    let data = generate_dataset(&cfg).unwrap();
    let (a, la) = pretrain(&cfg, &data, EXEC).unwrap();
    let (b, lb) = pretrain(&cfg, &data, EXEC).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    let losses = |l: &secat_core::train::TrainLog| l.steps.iter().map(|s| s.loss).collect::<Vec<_>>();
    assert_eq!(losses(&la), losses(&lb));
    assert_eq!(la.steps.len(), cfg.pretrain.total_steps);
}

#[test]
fn zero_steps_returns_the_initialization() {
    let mut cfg = PipelineConfig::smoke(4);
    cfg.pretrain.total_steps = 0;
    cfg.pretrain.warmup_steps = 0;
    let data = generate_dataset(&cfg).unwrap();
    let (train_rows, _) = data.pretrain_split(cfg.data.holdout);
    let caption = CaptionData {
        embeddings: &data.embeddings,
        rows: train_rows,
        labels: &data.truth.labels,
        class_names: &data.info.class_names,
    };
    let (m, log) = pretrain_captioner(&cfg.pretrain, &caption, EXEC).unwrap();
    assert!(log.steps.is_empty());
    let fresh = TinyVlm::new(cfg.pretrain.model.clone(), m.lexicon().clone(), cfg.pretrain.seed).unwrap();
    assert_eq!(bytes(&m), bytes(&fresh));
}

#[test]
fn pretraining_lowers_the_loss() {
    let mut cfg = PipelineConfig::smoke(5);
    cfg.pretrain.total_steps = 150;
    cfg.pretrain.warmup_steps = 15;
    let data = generate_dataset(&cfg).unwrap();
    let (_, log) = pretrain(&cfg, &data, EXEC).unwrap();
    let (first, last) = log.loss_ends(20).unwrap();
    assert!(last < first, "loss went from {first} to {last}");
}

#[test]
fn desk_pretraining_reaches_held_out_caption_accuracy() {
    let cfg = PipelineConfig::desk(0);
    let data = generate_dataset(&cfg).unwrap();
    let (model, _) = pretrain(&cfg, &data, Executor::default()).unwrap();
    let acc = pretrain_holdout_accuracy(&cfg, &data, &model, Executor::default()).unwrap();
    assert!(acc >= 0.95, "held-out caption accuracy {acc}");
}

struct Adapted {
    extended: TinyVlm,
    single: TinyVlm,
    mixed: TinyVlm,
    single_again: TinyVlm,
}

fn adapt_both() -> Adapted {
    let cfg = PipelineConfig::smoke(6);
    let data = generate_dataset(&cfg).unwrap();
    let clustering = cluster_dataset(&cfg, &data, cfg.k(), EXEC).unwrap();
    let (pre, _) = pretrain(&cfg, &data, EXEC).unwrap();
    let vocab = vocabulary(&cfg, &cfg.naming, cfg.k()).unwrap();
    let extended = extend_for_vocabulary(&cfg, &pre, &vocab).unwrap();
    let names = name_clusters(&cfg, &cfg.naming, &clustering, &extended, &vocab).unwrap();
    let mut run = cfg.adapt.clone();
    run.task_mode = TaskMode::Single;
    let single = adapt(&run, &extended, &clustering, &names, &data, EXEC).unwrap().0;
    let single_again = adapt(&run, &extended, &clustering, &names, &data, EXEC).unwrap().0;
    run.task_mode = TaskMode::Mixed;
    let mixed = adapt(&run, &extended, &clustering, &names, &data, EXEC).unwrap().0;
    Adapted {
        extended,
        single,
        mixed,
        single_again,
    }
}

#[test]
fn adaptation_freezes_mapping_net_and_depends_on_task_mode() {
    let a = adapt_both();
    for name in ["map.w1", "map.b1", "map.w2", "map.b2"] {
        assert_eq!(a.single.tensor(name), a.extended.tensor(name), "{name} changed");
        assert_eq!(a.mixed.tensor(name), a.extended.tensor(name), "{name} changed");
    }
    assert_ne!(a.single.params(), a.extended.params());
    assert_eq!(bytes(&a.single), bytes(&a.single_again));
    assert_ne!(bytes(&a.single), bytes(&a.mixed));
}
