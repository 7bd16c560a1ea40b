//! n-way j-shot episodes sampled from named groups of embeddings, and their
//! interleaved `<IMG> prefix <CAP> caption <EOS>` token rendering.

use std::collections::HashMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterPair, DifficultyPools, DistanceMatrix};
use crate::error::{Error, Result};
use crate::lexicon::{Lexicon, TokenId, CAP_ID, EOS_ID, IMG_ID, PAD_ID};

pub const DEFAULT_CAPTION_CAP: usize = 10;
/// Shot counts drawn per batch element in mixed mode.
pub const MIXED_SHOTS: [usize; 3] = [1, 3, 5];
/// Way count of every adaptation episode.
pub const ADAPT_WAYS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Hard,
    /// Uniform over the union of the easy and hard pools.
    Varying,
    /// Any groups, no pool restriction.
    Unrestricted,
}

impl std::str::FromStr for Difficulty {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Self::Easy),
            "hard" => Ok(Self::Hard),
            "varying" => Ok(Self::Varying),
            "unrestricted" => Ok(Self::Unrestricted),
            _ => Err(Error::validation(format!("unknown difficulty {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    /// Each episode draws j from {1, 3, 5} with n = 2.
    Mixed,
    /// Every episode is 2-way 1-shot.
    Single,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shot {
    pub row_id: u32,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    /// Group ids of the n ways; `classes[query_way]` is the query's group.
    pub classes: Vec<u32>,
    pub query_way: usize,
    pub support: Vec<Shot>,
    pub query: u32,
    pub target: String,
    /// Caption text preceding the name; the query prompt ends here.
    pub stem: String,
    pub difficulty: Difficulty,
    pub seed: u64,
}

impl Episode {
    /// The name word(s) the query must be completed with.
    pub fn target_name(&self) -> &str {
        caption_name(&self.target, &self.stem)
    }
}

/// Name part of a caption built from `stem`.
pub fn caption_name<'a>(caption: &'a str, stem: &str) -> &'a str {
    caption.strip_prefix(stem).unwrap_or(caption).trim()
}

/// Splits a one-placeholder template into the stem before it. The
/// placeholder must be the last thing in the template.
pub fn template_stem(template: &str) -> Result<String> {
    if template.matches("{}").count() != 1 || !template.trim_end().ends_with("{}") {
        return Err(Error::validation(format!(
            "template {template:?} must end with a single {{}} placeholder"
        )));
    }
    Ok(template.trim_end().trim_end_matches("{}").trim().to_string())
}

/// Pool pairs with the distance band each was drawn from.
type PoolPairs = (Vec<ClusterPair>, Vec<(f64, f64)>);

/// Groups of row ids with one caption each, plus optional difficulty pools.
#[derive(Debug, Clone)]
pub struct EpisodeSource {
    pub groups: Vec<Vec<usize>>,
    pub captions: Vec<String>,
    pub stem: String,
    pub pools: Option<DifficultyPools>,
    pub distances: Option<DistanceMatrix>,
}

impl EpisodeSource {
    pub fn new(groups: Vec<Vec<usize>>, captions: Vec<String>, stem: impl Into<String>) -> Result<Self> {
        if groups.len() != captions.len() {
            return Err(Error::validation(format!(
                "{} groups but {} captions",
                groups.len(),
                captions.len()
            )));
        }
        Ok(Self {
            groups,
            captions,
            stem: stem.into(),
            pools: None,
            distances: None,
        })
    }

    pub fn with_pools(mut self, pools: DifficultyPools, distances: DistanceMatrix) -> Result<Self> {
        if distances.k() != self.groups.len() {
            return Err(Error::validation("distance matrix does not match group count"));
        }
        self.pools = Some(pools);
        self.distances = Some(distances);
        Ok(self)
    }

    fn pool_pairs(&self, difficulty: Difficulty) -> Result<PoolPairs> {
        let pools = self
            .pools
            .as_ref()
            .ok_or_else(|| Error::sampling(format!("{difficulty:?} episodes need difficulty pools")))?;
        Ok(match difficulty {
            Difficulty::Hard => (pools.hard_pairs.clone(), vec![pools.hard_band]),
            Difficulty::Easy => (pools.easy_pairs.clone(), vec![pools.easy_band]),
            Difficulty::Varying => {
                let mut all = pools.hard_pairs.clone();
                all.extend(&pools.easy_pairs);
                (all, vec![pools.hard_band, pools.easy_band])
            }
            Difficulty::Unrestricted => unreachable!("unrestricted has no pool"),
        })
    }

    fn choose_groups(&self, n: usize, j: usize, difficulty: Difficulty, rng: &mut ChaCha8Rng) -> Result<Vec<u32>> {
        let big_enough = |g: u32| self.groups[g as usize].len() > j;
        if difficulty == Difficulty::Unrestricted {
            let eligible: Vec<u32> = (0..self.groups.len() as u32).filter(|&g| big_enough(g)).collect();
            if eligible.len() < n {
                return Err(Error::sampling(format!(
                    "{n}-way {j}-shot needs {n} groups with at least {} members, found {}",
                    j + 1,
                    eligible.len()
                )));
            }
            return Ok(eligible.choose_multiple(rng, n).copied().collect());
        }
        let (pairs, bands) = self.pool_pairs(difficulty)?;
        let eligible: Vec<ClusterPair> = pairs
            .into_iter()
            .filter(|&(a, b)| big_enough(a) && big_enough(b))
            .collect();
        let &(a, b) = eligible.choose(rng).ok_or_else(|| {
            Error::sampling(format!(
                "{difficulty:?} pool has no pair whose groups both hold at least {} members",
                j + 1
            ))
        })?;
        let mut chosen = vec![a, b];
        if n > 2 {
            let dist = self.distances.as_ref().expect("pools come with distances");
            let in_band = |d: f64| bands.iter().any(|&(lo, hi)| d >= lo && d <= hi);
            // every band-compatible addition must stay in the band of the seed pair
            let seed_band: Vec<(f64, f64)> = bands
                .iter()
                .copied()
                .filter(|&(lo, hi)| {
                    let d = dist.get(a as usize, b as usize);
                    d >= lo && d <= hi
                })
                .collect();
            let in_seed_band = |d: f64| seed_band.iter().any(|&(lo, hi)| d >= lo && d <= hi);
            while chosen.len() < n {
                let cands: Vec<u32> = (0..self.groups.len() as u32)
                    .filter(|g| !chosen.contains(g) && big_enough(*g))
                    .filter(|&g| {
                        chosen.iter().all(|&c| {
                            let d = dist.get(c as usize, g as usize);
                            in_band(d) && in_seed_band(d)
                        })
                    })
                    .collect();
                let &g = cands.choose(rng).ok_or_else(|| {
                    Error::sampling(format!(
                        "{difficulty:?} pool cannot be extended to {n} ways inside its distance band"
                    ))
                })?;
                chosen.push(g);
            }
        }
        chosen.shuffle(rng);
        Ok(chosen)
    }
}

/// Samples one episode. Every way gets `j` support items; the query comes
/// from a uniformly chosen way and is distinct from the support.
pub fn sample_episode(src: &EpisodeSource, n: usize, j: usize, difficulty: Difficulty, seed: u64) -> Result<Episode> {
    if n < 2 || j < 1 {
        return Err(Error::sampling(format!(
            "{n}-way {j}-shot is not a valid episode shape"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = src.choose_groups(n, j, difficulty, &mut rng)?;
    let query_way = rng.random_range(0..n);
    let mut support = Vec::with_capacity(n * j);
    let mut query = 0u32;
    for (w, &g) in classes.iter().enumerate() {
        let members = &src.groups[g as usize];
        let take = if w == query_way { j + 1 } else { j };
        if members.len() < take {
            return Err(Error::sampling(format!(
                "group {g} has {} members, needs {take}",
                members.len()
            )));
        }
        let picked: Vec<usize> = members.choose_multiple(&mut rng, take).copied().collect();
        for &r in &picked[..j] {
            support.push(Shot {
                row_id: r as u32,
                caption: src.captions[g as usize].clone(),
            });
        }
        if w == query_way {
            query = picked[j] as u32;
        }
    }
    support.shuffle(&mut rng);
    Ok(Episode {
        way: n,
        shot: j,
        target: src.captions[classes[query_way] as usize].clone(),
        classes,
        query_way,
        support,
        query,
        stem: src.stem.clone(),
        difficulty,
        seed,
    })
}

/// Draws `batch_size` episodes with independently derived seeds. In mixed
/// mode each element is 2-way j-shot with j uniform over {1, 3, 5}.
pub fn mixed_episodes(
    src: &EpisodeSource,
    mode: TaskMode,
    difficulty: Difficulty,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    if batch_size == 0 {
        return Err(Error::validation("batch size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch_size)
        .map(|_| {
            let j = match mode {
                TaskMode::Mixed => MIXED_SHOTS[rng.random_range(0..MIXED_SHOTS.len())],
                TaskMode::Single => 1,
            };
            sample_episode(src, ADAPT_WAYS, j, difficulty, rng.random())
        })
        .collect()
}

/// Renders a batch from [`mixed_episodes`].
pub fn mixed_batch(
    src: &EpisodeSource,
    mode: TaskMode,
    difficulty: Difficulty,
    batch_size: usize,
    seed: u64,
    lexicon: &Lexicon,
    opts: &RenderOptions,
) -> Result<Vec<ModelInput>> {
    mixed_episodes(src, mode, difficulty, batch_size, seed)?
        .iter()
        .map(|e| render_sequence(e, lexicon, opts))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub prefix_len: usize,
    /// Caption tokens kept per support item; longer captions are truncated.
    pub caption_cap: usize,
    pub max_len: usize,
}

impl RenderOptions {
    pub fn new(prefix_len: usize, max_len: usize) -> Self {
        Self {
            prefix_len,
            caption_cap: DEFAULT_CAPTION_CAP,
            max_len,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSlot {
    /// First of the `prefix_len` positions taken by the visual prefix.
    pub position: usize,
    pub row_id: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelInput {
    pub token_ids: Vec<TokenId>,
    pub image_slots: Vec<ImageSlot>,
    pub loss_mask: Vec<bool>,
    /// Length of the prompt, which ends right after the query stem; the
    /// remaining positions hold the target name and `<EOS>`.
    pub prompt_len: usize,
}

impl ModelInput {
    /// The prompt alone, as used for generation.
    pub fn prompt(&self) -> ModelInput {
        ModelInput {
            token_ids: self.token_ids[..self.prompt_len].to_vec(),
            image_slots: self.image_slots.clone(),
            loss_mask: vec![false; self.prompt_len],
            prompt_len: self.prompt_len,
        }
    }

    /// Target tokens (name and `<EOS>`).
    pub fn target(&self) -> &[TokenId] {
        &self.token_ids[self.prompt_len..]
    }
}

fn encode_with(text: &str, lexicon: &Lexicon, aliases: &HashMap<String, TokenId>) -> Result<Vec<TokenId>> {
    crate::lexicon::normalize_words(text)
        .iter()
        .map(|w| {
            aliases
                .get(w)
                .copied()
                .or_else(|| lexicon.id(w))
                .ok_or_else(|| Error::validation(format!("word {w:?} not in lexicon")))
        })
        .collect()
}

pub fn render_sequence(episode: &Episode, lexicon: &Lexicon, opts: &RenderOptions) -> Result<ModelInput> {
    render_sequence_with(episode, lexicon, &HashMap::new(), opts)
}

/// Like [`render_sequence`], resolving words through `aliases` before the
/// lexicon (used to bind fresh names to reserved token slots).
pub fn render_sequence_with(
    episode: &Episode,
    lexicon: &Lexicon,
    aliases: &HashMap<String, TokenId>,
    opts: &RenderOptions,
) -> Result<ModelInput> {
    let p = opts.prefix_len;
    let mut tokens = Vec::new();
    let mut slots = Vec::with_capacity(episode.support.len() + 1);
    let mut push_image = |tokens: &mut Vec<TokenId>, row_id: u32| {
        tokens.push(IMG_ID);
        slots.push(ImageSlot {
            position: tokens.len(),
            row_id,
        });
        tokens.extend(std::iter::repeat_n(PAD_ID, p));
        tokens.push(CAP_ID);
    };
    for s in &episode.support {
        push_image(&mut tokens, s.row_id);
        let mut cap = encode_with(&s.caption, lexicon, aliases)?;
        cap.truncate(opts.caption_cap);
        tokens.extend(cap);
        tokens.push(EOS_ID);
    }
    push_image(&mut tokens, episode.query);
    tokens.extend(encode_with(&episode.stem, lexicon, aliases)?);
    let prompt_len = tokens.len();
    let name = encode_with(episode.target_name(), lexicon, aliases)?;
    if name.is_empty() {
        return Err(Error::EmptyTarget);
    }
    tokens.extend(name);
    tokens.push(EOS_ID);
    if tokens.len() > opts.max_len {
        return Err(Error::Length(format!(
            "{}-way {}-shot episode renders to {} positions, max_len is {}",
            episode.way,
            episode.shot,
            tokens.len(),
            opts.max_len
        )));
    }
    let mut loss_mask = vec![false; tokens.len()];
    loss_mask[prompt_len..].fill(true);
    Ok(ModelInput {
        token_ids: tokens,
        image_slots: slots,
        loss_mask,
        prompt_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::difficulty_pools;

    fn lexicon() -> Lexicon {
        let names: Vec<String> = ["dax", "wug", "blicket", "fep"].iter().map(|s| s.to_string()).collect();
        Lexicon::new(&names, 2).unwrap()
    }

    fn source(sizes: &[usize]) -> EpisodeSource {
        let mut groups = Vec::new();
        let mut next = 0;
        for &s in sizes {
            groups.push((next..next + s).collect());
            next += s;
        }
        let names = ["dax", "wug", "blicket", "fep"];
        let captions = (0..sizes.len())
            .map(|i| format!("This is a {}", names[i % 4]))
            .collect();
        EpisodeSource::new(groups, captions, "This is a").unwrap()
    }

    #[test]
    fn two_way_one_shot_layout() {
        let src = source(&[4, 4]);
        let ep = sample_episode(&src, 2, 1, Difficulty::Unrestricted, 3).unwrap();
        assert_eq!(ep.support.len(), 2);
        let input = render_sequence(&ep, &lexicon(), &RenderOptions::new(5, 160)).unwrap();
        // 2 x (1 + 5 + 1 + 4 + 1) + (1 + 5 + 1 + 3)
        assert_eq!(input.prompt_len, 34);
        assert_eq!(input.token_ids.len(), 36);
        assert_eq!(input.image_slots.len(), 3);
        assert_eq!(input.target().last(), Some(&EOS_ID));
        assert!(input.loss_mask[..34].iter().all(|&m| !m));
        assert!(input.loss_mask[34..].iter().all(|&m| m));
        assert_eq!(input.token_ids[input.prompt_len - 4], CAP_ID);
    }

    #[test]
    fn query_class_needs_extra_member() {
        let src = source(&[5, 5]);
        let err = sample_episode(&src, 2, 5, Difficulty::Unrestricted, 0).unwrap_err();
        assert!(matches!(err, Error::Sampling(_)));
        assert!(err.to_string().contains("6"));
    }

    #[test]
    fn episode_invariants() {
        let src = source(&[7, 7, 7, 7]);
        for seed in 0..50 {
            let ep = sample_episode(&src, 3, 2, Difficulty::Unrestricted, seed).unwrap();
            assert_eq!(ep.support.len(), 6);
            assert!(ep.support.iter().all(|s| s.row_id != ep.query));
            assert!(ep.support.iter().any(|s| s.caption == ep.target));
            let q_group = ep.classes[ep.query_way] as usize;
            assert!(src.groups[q_group].contains(&(ep.query as usize)));
        }
    }

    #[test]
    fn hard_episodes_use_hard_pairs() {
        let pts: Vec<f32> = [0.0f32, 1.0, 5.0, 20.0].iter().flat_map(|&x| [x, 0.0]).collect();
        let dist = DistanceMatrix::from_points(&pts, 2);
        let pools = difficulty_pools(&dist, 0.2).unwrap();
        let src = source(&[3, 3, 3, 3]).with_pools(pools.clone(), dist).unwrap();
        for seed in 0..200 {
            let ep = sample_episode(&src, 2, 1, Difficulty::Hard, seed).unwrap();
            let mut c = [ep.classes[0], ep.classes[1]];
            c.sort();
            assert!(pools.hard_pairs.contains(&(c[0], c[1])));
        }
    }

    #[test]
    fn single_mode_is_two_way_one_shot() {
        let src = source(&[8, 8, 8]);
        for b in 0..100 {
            let eps = mixed_episodes(&src, TaskMode::Single, Difficulty::Unrestricted, 4, b).unwrap();
            assert!(eps.iter().all(|e| e.way == 2 && e.shot == 1));
        }
    }

    #[test]
    fn seeded_determinism() {
        let src = source(&[8, 8, 8]);
        let a = mixed_episodes(&src, TaskMode::Mixed, Difficulty::Unrestricted, 16, 9).unwrap();
        let b = mixed_episodes(&src, TaskMode::Mixed, Difficulty::Unrestricted, 16, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn long_episode_is_length_error() {
        let src = source(&[8, 8, 8, 8, 8]);
        let ep = sample_episode(&src, 5, 5, Difficulty::Unrestricted, 1).unwrap();
        let err = render_sequence(&ep, &lexicon(), &RenderOptions::new(5, 160)).unwrap_err();
        assert!(matches!(err, Error::Length(_)));
    }

    #[test]
    fn caption_truncation() {
        let lex = lexicon();
        let ep = Episode {
            way: 2,
            shot: 1,
            classes: vec![0, 1],
            query_way: 0,
            support: vec![
                Shot {
                    row_id: 0,
                    caption: "This is a dax".into(),
                },
                Shot {
                    row_id: 1,
                    caption: "This is a wug".into(),
                },
            ],
            query: 2,
            target: "This is a dax".into(),
            stem: "This is a".into(),
            difficulty: Difficulty::Unrestricted,
            seed: 0,
        };
        let opts = RenderOptions {
            caption_cap: 2,
            ..RenderOptions::new(1, 64)
        };
        let input = render_sequence(&ep, &lex, &opts).unwrap();
        // each support: IMG slot CAP + 2 caption tokens + EOS
        assert_eq!(input.prompt_len, 2 * 6 + 3 + 3);
    }

    #[test]
    fn template_stem_rules() {
        assert_eq!(template_stem("This is a {}").unwrap(), "This is a");
        assert!(template_stem("This {} is").is_err());
        assert!(template_stem("no placeholder").is_err());
        assert!(template_stem("{} and {}").is_err());
    }
}
