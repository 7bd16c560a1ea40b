//! Model-level checks: tied head, loss extremes, decoding oracle,
//! checkpoint roundtrip and naming-cost bounds.

use proptest::prelude::*;
use secat_core::cluster::kmeans;
use secat_core::context::{render_sequence, sample_episode, Difficulty, EpisodeSource, ModelInput, RenderOptions};
use secat_core::embed_store::EmbeddingMatrix;
use secat_core::lexicon::{Lexicon, TokenId, DEFAULT_TEMPLATE, EOS_ID};
use secat_core::model::{
    backward, beam_search, forward_loss, forward_with_logits, greedy_rollout, Constraint, DecodeConfig, LanguageModel,
    ModelConfig, TinyVlm,
};
use secat_core::names::{build_vocabulary, name_cost_matrix, render_caption, VocabKind};
use secat_core::Result;

fn config(init_std: f64) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        prefix_len: 2,
        embed_dim: 4,
        map_hidden: 6,
        max_len: 64,
        init_std,
        map_gain: 1.0,
    }
}

fn words(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("thing{i}")).collect()
}

fn embeddings() -> EmbeddingMatrix {
    EmbeddingMatrix::new(8, 4, (0..32).map(|i| (i as f32 * 0.61).cos()).collect()).unwrap()
}

fn episode_input(lex: &Lexicon, seed: u64) -> ModelInput {
    let captions = words(2).iter().map(|w| render_caption(DEFAULT_TEMPLATE, w)).collect();
    let src = EpisodeSource::new(vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]], captions, "this is a").unwrap();
    let ep = sample_episode(&src, 2, 1, Difficulty::Unrestricted, seed).unwrap();
    render_sequence(&ep, lex, &RenderOptions::new(2, 64)).unwrap()
}

fn tensor_offset(m: &TinyVlm, name: &str) -> usize {
    m.layout().tensor(name).unwrap().offset
}

#[test]
fn head_is_tied_to_token_embeddings() {
    let lex = Lexicon::new(&words(4), 1).unwrap();
    let mut m = TinyVlm::new(config(0.3), lex, 5).unwrap();
    let input = episode_input(m.lexicon(), 2);
    let unused = m.lexicon().id("thing3").unwrap();
    assert!(!input.token_ids.contains(&unused));

    // the unused token only reaches the loss through the output head
    let (_, trace) = forward_loss::<f64>(
        m.config(),
        &m.layout(),
        &m.params().iter().map(|&v| f64::from(v)).collect::<Vec<_>>(),
        &input,
        &embeddings(),
    )
    .unwrap();
    let grad = backward(
        m.config(),
        &m.layout(),
        &m.params().iter().map(|&v| f64::from(v)).collect::<Vec<_>>(),
        &trace,
    );
    let d = m.config().d_model;
    let row = tensor_offset(&m, "tok_emb") + unused as usize * d;
    assert!(grad[row..row + d].iter().any(|g| g.abs() > 1e-9));

    // zero embedding row and bias give an exactly zero logit everywhere
    m.token_row_mut(unused).fill(0.0);
    let bias = tensor_offset(&m, "head.bias") + unused as usize;
    m.params_mut()[bias] = 0.0;
    let positions: Vec<usize> = (0..input.token_ids.len()).collect();
    let t = forward_with_logits::<f32>(m.config(), &m.layout(), m.params(), &input, &embeddings(), positions).unwrap();
    for i in 0..t.positions.len() {
        assert_eq!(t.logit_row(i)[unused as usize], 0.0);
    }
}

#[test]
fn near_zero_init_gives_uniform_loss() {
    let lex = Lexicon::new(&words(6), 2).unwrap();
    let m = TinyVlm::new(config(1e-4), lex, 1).unwrap();
    let input = episode_input(m.lexicon(), 3);
    let (loss, _) = forward_loss::<f32>(m.config(), &m.layout(), m.params(), &input, &embeddings()).unwrap();
    let uniform = (m.lexicon().len() as f64).ln();
    assert!((loss - uniform).abs() < 0.05, "loss {loss} vs ln V {uniform}");
}

#[test]
fn confident_correct_prediction_has_vanishing_loss() {
    let lex = Lexicon::new(&words(2), 0).unwrap();
    let mut m = TinyVlm::new(config(1e-3), lex, 1).unwrap();
    let mut input = episode_input(m.lexicon(), 4);
    // score only the final end-of-sequence token and make it overwhelmingly likely
    input.loss_mask.fill(false);
    *input.loss_mask.last_mut().unwrap() = true;
    let bias = tensor_offset(&m, "head.bias") + EOS_ID as usize;
    m.params_mut()[bias] = 40.0;
    let (loss, _) = forward_loss::<f64>(
        m.config(),
        &m.layout(),
        &m.params().iter().map(|&v| f64::from(v)).collect::<Vec<_>>(),
        &input,
        &embeddings(),
    )
    .unwrap();
    assert!(loss < 1e-5, "loss {loss}");
}

/// Three tokens; id 1 is end-of-sequence. Greedy takes 0 then stops, while
/// the best length-normalized sequence is `2 <EOS>`.
struct Chain;

impl Chain {
    fn probs(generated: &[TokenId]) -> [f64; 3] {
        match generated.last() {
            None => [0.5, 0.1, 0.4],
            Some(0) => [0.3, 0.4, 0.3],
            Some(_) => [0.05, 0.9, 0.05],
        }
    }
}

impl LanguageModel for Chain {
    fn vocab_size(&self) -> usize {
        3
    }
    fn next_log_probs(&mut self, generated: &[TokenId]) -> Result<Vec<f64>> {
        Ok(Self::probs(generated).iter().map(|p| p.ln()).collect())
    }
}

fn exhaustive(max_new: usize) -> Vec<TokenId> {
    fn rec(prefix: &mut Vec<TokenId>, sum: f64, max_new: usize, best: &mut (f64, Vec<TokenId>)) {
        if prefix.len() == max_new || prefix.last() == Some(&EOS_ID) {
            let score = sum / prefix.len() as f64;
            if score > best.0 {
                *best = (score, prefix.clone());
            }
            return;
        }
        let p = Chain::probs(prefix);
        for t in 0..3u32 {
            prefix.push(t);
            rec(prefix, sum + p[t as usize].ln(), max_new, best);
            prefix.pop();
        }
    }
    let mut best = (f64::NEG_INFINITY, Vec::new());
    rec(&mut Vec::new(), 0.0, max_new, &mut best);
    let mut seq = best.1;
    if seq.last() == Some(&EOS_ID) {
        seq.pop();
    }
    seq
}

#[test]
fn beam_three_matches_exhaustive_search() {
    let cfg = DecodeConfig {
        beam_width: 3,
        max_new: 2,
        constraint: Constraint::Free,
    };
    let beam = beam_search(&mut Chain, &cfg).unwrap();
    assert_eq!(beam, exhaustive(2));
    assert_eq!(beam, vec![2]);
    assert_eq!(greedy_rollout(&mut Chain, 2, &Constraint::Free).unwrap(), vec![0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoint_bytes_roundtrip(seed in any::<u64>(), vocab in 1usize..6, slots in 0usize..4) {
        let lex = Lexicon::new(&words(vocab), slots).unwrap();
        let m = TinyVlm::new(config(0.2), lex, seed).unwrap();
        let back = TinyVlm::from_checkpoint_bytes(&m.to_checkpoint_bytes().unwrap()).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn naming_costs_lie_in_zero_two(seed in any::<u64>(), k in 2usize..6) {
        let data = EmbeddingMatrix::new(24, 4, (0..96).map(|i| (((i as u64 * 2654435761) ^ seed) % 1000) as f32 / 500.0 - 1.0).collect()).unwrap();
        let model = kmeans(&data, k, 5, seed).unwrap();
        let vocab = build_vocabulary(VocabKind::Nouns, k + 2, seed).unwrap();
        let base = Lexicon::new(&words(2), 0).unwrap();
        let vlm = TinyVlm::new(config(0.3), base.extended(&vocab.words).unwrap(), seed).unwrap();
        let cost = name_cost_matrix(&model, &vocab, &vlm).unwrap();
        for r in 0..cost.rows() {
            for c in 0..cost.cols() {
                let v = cost.get(r, c);
                prop_assert!((0.0..=2.0).contains(&v), "cost {v}");
            }
        }
    }
}
