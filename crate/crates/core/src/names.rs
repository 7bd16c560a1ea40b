//! Unrelated-name vocabularies, centroid-to-word costs, optimal assignment
//! and the cluster caption table.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterModel;
use crate::context::template_stem;
use crate::error::{Error, Result};
use crate::lexicon::{normalize_words, BASE_NAMES, NOUNS, TEMPLATES};
use crate::model::TinyVlm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabKind {
    Nouns,
    Numbers,
    Nonsense,
    Base,
}

impl std::str::FromStr for VocabKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nouns" => Ok(Self::Nouns),
            "numbers" => Ok(Self::Numbers),
            "nonsense" => Ok(Self::Nonsense),
            "base" => Ok(Self::Base),
            _ => Err(Error::validation(format!("unknown vocabulary kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub kind: VocabKind,
    pub words: Vec<String>,
    pub seed: u64,
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

fn reserved_words() -> HashSet<String> {
    let mut set: HashSet<String> = BASE_NAMES.iter().chain(NOUNS).map(|s| s.to_string()).collect();
    for t in TEMPLATES {
        set.extend(normalize_words(&t.replace("{}", "")));
    }
    set
}

/// Pronounceable consonant-vowel strings of two or three syllables.
pub fn nonsense_word(rng: &mut impl Rng) -> String {
    let syllables = rng.random_range(2..=3);
    let mut w = String::with_capacity(2 * syllables);
    for _ in 0..syllables {
        w.push(*CONSONANTS.choose(rng).expect("nonempty") as char);
        w.push(*VOWELS.choose(rng).expect("nonempty") as char);
    }
    w
}

/// Draws `count` distinct nonsense words avoiding bundled words and `avoid`.
pub fn fresh_nonsense(count: usize, avoid: &HashSet<String>, rng: &mut impl Rng) -> Result<Vec<String>> {
    let reserved = reserved_words();
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > 1000 * (count + 10) {
            return Err(Error::validation(format!(
                "could not draw {count} distinct nonsense words"
            )));
        }
        let w = nonsense_word(rng);
        if reserved.contains(&w) || avoid.contains(&w) || !seen.insert(w.clone()) {
            continue;
        }
        out.push(w);
    }
    Ok(out)
}

pub fn build_vocabulary(kind: VocabKind, size: usize, seed: u64) -> Result<Vocabulary> {
    if size == 0 {
        return Err(Error::validation("vocabulary size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<String> = match kind {
        VocabKind::Nouns => {
            if size > NOUNS.len() {
                return Err(Error::validation(format!(
                    "noun list holds {} words, {size} requested",
                    NOUNS.len()
                )));
            }
            NOUNS.choose_multiple(&mut rng, size).map(|s| s.to_string()).collect()
        }
        VocabKind::Base => {
            if size > BASE_NAMES.len() {
                return Err(Error::validation(format!(
                    "base lexicon holds {} words, {size} requested",
                    BASE_NAMES.len()
                )));
            }
            BASE_NAMES[..size].iter().map(|s| s.to_string()).collect()
        }
        VocabKind::Numbers => {
            let hi = (10 * size).max(1000) as u64;
            let mut seen = HashSet::new();
            let mut out = Vec::with_capacity(size);
            while out.len() < size {
                let v: u64 = rng.random_range(0..hi);
                if seen.insert(v) {
                    out.push(v.to_string());
                }
            }
            out
        }
        VocabKind::Nonsense => fresh_nonsense(size, &HashSet::new(), &mut rng)?,
    };
    Ok(Vocabulary { kind, words, seed })
}

/// Dense row-major matrix of assignment costs.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Length(format!(
                "{} costs for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("cost matrix holds non-finite entries"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Sum of `cost[r][assignment[r]]` in row order.
    pub fn total(&self, assignment: &[usize]) -> f64 {
        assignment.iter().enumerate().map(|(r, &c)| self.get(r, c)).sum()
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// `cost[i][j] = 1 - cos(pooled prefix of centroid i, embedding of word j)`.
pub fn name_cost_matrix(model: &ClusterModel, vocab: &Vocabulary, vlm: &TinyVlm) -> Result<CostMatrix> {
    if model.dim() != vlm.config().embed_dim {
        return Err(Error::config(format!(
            "centroids have {} dims, mapping network expects {}",
            model.dim(),
            vlm.config().embed_dim
        )));
    }
    if vocab.words.len() < model.k() {
        return Err(Error::Infeasible {
            rows: model.k(),
            cols: vocab.words.len(),
        });
    }
    let words: Vec<Vec<f64>> = vocab
        .words
        .iter()
        .map(|w| {
            let id = vlm
                .lexicon()
                .id(w)
                .ok_or_else(|| Error::config(format!("word {w:?} missing from the model lexicon")))?;
            Ok(vlm.token_row(id).iter().map(|&v| f64::from(v)).collect())
        })
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(model.k() * words.len());
    for c in 0..model.k() {
        let pooled = vlm.pooled_prefix(model.centroid(c))?;
        for w in &words {
            data.push(1.0 - cosine(&pooled, w));
        }
    }
    CostMatrix::new(model.k(), words.len(), data)
}

/// Minimum-cost assignment of the enabled rows to distinct enabled columns
/// (potentials-based shortest augmenting paths).
fn hungarian_raw(cost: &CostMatrix, row_ok: &[bool], col_ok: &[bool]) -> (f64, Vec<usize>) {
    let rows: Vec<usize> = (0..cost.rows).filter(|&r| row_ok[r]).collect();
    let cols: Vec<usize> = (0..cost.cols).filter(|&c| col_ok[c]).collect();
    let (n, m) = (rows.len(), cols.len());
    if n == 0 {
        return (0.0, Vec::new());
    }
    let a = |i: usize, j: usize| cost.get(rows[i - 1], cols[j - 1]);
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = cols[j - 1];
        }
    }
    let total = assign.iter().enumerate().map(|(i, &c)| cost.get(rows[i], c)).sum();
    (total, assign)
}

/// Optimal injective row-to-column assignment. Among optimal assignments the
/// lexicographically smallest column vector is returned.
pub fn hungarian_match(cost: &CostMatrix) -> Result<Vec<usize>> {
    let (k, m) = (cost.rows, cost.cols);
    if m < k {
        return Err(Error::Infeasible { rows: k, cols: m });
    }
    let mut row_ok = vec![true; k];
    let mut col_ok = vec![true; m];
    let (best, _) = hungarian_raw(cost, &row_ok, &col_ok);
    let scale: f64 = cost.data.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
    let tol = 1e-9 * scale * k as f64;
    let mut fixed = 0.0f64;
    let mut result = Vec::with_capacity(k);
    for r in 0..k {
        row_ok[r] = false;
        let mut chosen = None;
        for c in 0..m {
            if !col_ok[c] {
                continue;
            }
            col_ok[c] = false;
            let (rest, _) = hungarian_raw(cost, &row_ok, &col_ok);
            if fixed + cost.get(r, c) + rest <= best + tol {
                chosen = Some(c);
                break;
            }
            col_ok[c] = true;
        }
        let c = chosen.expect("some column attains the optimum");
        fixed += cost.get(r, c);
        result.push(c);
    }
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMethod {
    CostBased,
    Random,
}

impl std::str::FromStr for MatchMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cost_based" => Ok(Self::CostBased),
            "random" => Ok(Self::Random),
            _ => Err(Error::validation(format!("unknown matching method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NameAssignment {
    /// `mapping[cluster]` is the cluster's name.
    pub mapping: Vec<String>,
    pub method: MatchMethod,
    pub template: String,
}

/// Checks a caption template has exactly one trailing `{}` placeholder.
pub fn validate_template(template: &str) -> Result<()> {
    template_stem(template).map(|_| ())
}

pub fn render_caption(template: &str, word: &str) -> String {
    template.replacen("{}", word, 1)
}

impl NameAssignment {
    pub fn caption(&self, cluster: usize) -> String {
        render_caption(&self.template, &self.mapping[cluster])
    }

    pub fn captions(&self) -> Vec<String> {
        (0..self.mapping.len()).map(|c| self.caption(c)).collect()
    }

    pub fn stem(&self) -> String {
        template_stem(&self.template).expect("validated template")
    }

    /// `cluster_id<TAB>word<TAB>caption` rows, LF-terminated.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (c, w) in self.mapping.iter().enumerate() {
            writeln!(s, "{c}\t{w}\t{}", self.caption(c)).expect("write to string");
        }
        s
    }

    /// Parses a caption table. The template is recovered from the rows.
    pub fn from_tsv(text: &str, method: MatchMethod) -> Result<Self> {
        let fmt = |d: String| Error::Format {
            what: "name table",
            detail: d,
        };
        let mut mapping = Vec::new();
        let mut template: Option<String> = None;
        for (i, line) in text.lines().enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(fmt(format!("line {} has {} fields", i + 1, f.len())));
            }
            let id: usize = f[0].parse().map_err(|_| fmt(format!("bad cluster id {:?}", f[0])))?;
            if id != i {
                return Err(fmt(format!(
                    "cluster ids must be 0..K in order, found {id} at line {}",
                    i + 1
                )));
            }
            let t = f[2]
                .rfind(f[1])
                .map(|pos| format!("{}{{}}{}", &f[2][..pos], &f[2][pos + f[1].len()..]))
                .ok_or_else(|| fmt(format!("caption {:?} does not contain {:?}", f[2], f[1])))?;
            match &template {
                None => template = Some(t),
                Some(prev) if *prev != t => return Err(fmt("rows use different templates".into())),
                _ => {}
            }
            mapping.push(f[1].to_string());
        }
        let template = template.ok_or_else(|| fmt("empty table".into()))?;
        validate_template(&template)?;
        Ok(Self {
            mapping,
            method,
            template,
        })
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn read_tsv(path: &Path, method: MatchMethod) -> Result<Self> {
        Self::from_tsv(&fs::read_to_string(path)?, method)
    }
}

pub fn assign_names(
    model: &ClusterModel,
    vocab: &Vocabulary,
    vlm: &TinyVlm,
    method: MatchMethod,
    template: &str,
    seed: u64,
) -> Result<NameAssignment> {
    validate_template(template)?;
    let k = model.k();
    if vocab.words.len() < k {
        return Err(Error::Infeasible {
            rows: k,
            cols: vocab.words.len(),
        });
    }
    let mapping = match method {
        MatchMethod::CostBased => {
            let cost = name_cost_matrix(model, vocab, vlm)?;
            hungarian_match(&cost)?
                .into_iter()
                .map(|c| vocab.words[c].clone())
                .collect()
        }
        MatchMethod::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx: Vec<usize> = (0..vocab.words.len()).collect();
            idx.shuffle(&mut rng);
            idx[..k].iter().map(|&c| vocab.words[c].clone()).collect()
        }
    };
    Ok(NameAssignment {
        mapping,
        method,
        template: template.to_string(),
    })
}
