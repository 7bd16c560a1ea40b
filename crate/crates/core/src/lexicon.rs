//! Word-level lexicon with reserved special tokens and a dynamic-token block.
//!
//! Every name is a single atomic token. The dynamic block holds slots whose
//! embeddings are rewritten per evaluation task, so novel words can be bound
//! without growing the embedding table.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: &str = "<PAD>";
pub const EOS: &str = "<EOS>";
pub const IMG: &str = "<IMG>";
pub const CAP: &str = "<CAP>";

pub const PAD_ID: TokenId = 0;
pub const EOS_ID: TokenId = 1;
pub const IMG_ID: TokenId = 2;
pub const CAP_ID: TokenId = 3;

pub const DEFAULT_TEMPLATE: &str = "This is a {}";

/// Templates known to every lexicon; the first is the adaptation default.
pub const TEMPLATES: &[&str] = &["This is a {}", "A photo of a {}", "On this picture there is a {}"];

/// Lowercases, strips punctuation and splits on whitespace.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric() || *c == '<' || *c == '>' || *c == '_' || *c == '-')
                .collect::<String>()
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Normalized text form: lowercase, trimmed, whitespace collapsed.
pub fn normalize_text(text: &str) -> String {
    normalize_words(text).join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    tokens: Vec<String>,
    dynamic_start: usize,
    dynamic_len: usize,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl Lexicon {
    /// Specials, every template word, the given base names and a dynamic
    /// block of `dynamic_len` slots.
    pub fn new(base_names: &[String], dynamic_len: usize) -> Result<Self> {
        let mut tokens: Vec<String> = [PAD, EOS, IMG, CAP].iter().map(|s| s.to_string()).collect();
        for t in TEMPLATES {
            for w in normalize_words(&t.replace("{}", "")) {
                if !tokens.contains(&w) {
                    tokens.push(w);
                }
            }
        }
        for n in base_names {
            let w = normalize_text(n);
            if w.contains(' ') || w.is_empty() {
                return Err(Error::validation(format!("name {n:?} is not a single word")));
            }
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        let dynamic_start = tokens.len();
        tokens.extend((0..dynamic_len).map(|i| format!("<DYN{i}>")));
        let mut lex = Self {
            tokens,
            dynamic_start,
            dynamic_len,
            index: HashMap::new(),
        };
        lex.rebuild_index()?;
        Ok(lex)
    }

    /// Appends words not already present. Existing ids are unchanged.
    pub fn extended(&self, words: &[String]) -> Result<Self> {
        let mut lex = self.clone();
        for w in words {
            let w = normalize_text(w);
            if w.contains(' ') || w.is_empty() {
                return Err(Error::validation(format!("name {w:?} is not a single word")));
            }
            if !lex.index.contains_key(&w) {
                lex.index.insert(w.clone(), lex.tokens.len() as TokenId);
                lex.tokens.push(w);
            }
        }
        Ok(lex)
    }

    pub(crate) fn rebuild_index(&mut self) -> Result<()> {
        self.index.clear();
        for (i, t) in self.tokens.iter().enumerate() {
            if self.index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::validation(format!("duplicate token {t:?}")));
            }
        }
        Ok(())
    }

    pub fn from_tokens(tokens: Vec<String>, dynamic_start: usize, dynamic_len: usize) -> Result<Self> {
        if tokens.len() < 4 || tokens[..4] != [PAD, EOS, IMG, CAP] {
            return Err(Error::config("lexicon must start with the four special tokens"));
        }
        if dynamic_start + dynamic_len > tokens.len() {
            return Err(Error::config("dynamic block out of range"));
        }
        let mut lex = Self {
            tokens,
            dynamic_start,
            dynamic_len,
            index: HashMap::new(),
        };
        lex.rebuild_index()?;
        Ok(lex)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn dynamic_range(&self) -> std::ops::Range<usize> {
        self.dynamic_start..self.dynamic_start + self.dynamic_len
    }

    pub fn dynamic_id(&self, slot: usize) -> Option<TokenId> {
        (slot < self.dynamic_len).then(|| (self.dynamic_start + slot) as TokenId)
    }

    pub fn is_dynamic(&self, id: TokenId) -> bool {
        self.dynamic_range().contains(&(id as usize))
    }

    /// Tokenizes normalized text; every word must be in the lexicon.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        normalize_words(text)
            .iter()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::validation(format!("word {w:?} not in lexicon")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&i| self.word(i)).collect::<Vec<_>>().join(" ")
    }
}

/// Real-concept class names, used as ground-truth labels of synthetic classes.
pub const BASE_NAMES: &[&str] = &[
    "goldfish",
    "shark",
    "robin",
    "eagle",
    "owl",
    "frog",
    "turtle",
    "lizard",
    "snake",
    "scorpion",
    "spider",
    "peacock",
    "parrot",
    "hummingbird",
    "toucan",
    "goose",
    "flamingo",
    "pelican",
    "penguin",
    "whale",
    "dolphin",
    "seal",
    "dog",
    "wolf",
    "fox",
    "lion",
    "tiger",
    "leopard",
    "cheetah",
    "bear",
    "beetle",
    "ladybug",
    "butterfly",
    "dragonfly",
    "ant",
    "bee",
    "grasshopper",
    "cricket",
    "snail",
    "crab",
    "lobster",
    "jellyfish",
    "starfish",
    "rabbit",
    "hamster",
    "squirrel",
    "beaver",
    "zebra",
    "horse",
    "pig",
    "boar",
    "bison",
    "ram",
    "camel",
    "llama",
    "otter",
    "skunk",
    "badger",
    "armadillo",
    "gorilla",
    "chimpanzee",
    "baboon",
    "lemur",
    "elephant",
    "panda",
    "koala",
    "kangaroo",
    "raccoon",
    "hedgehog",
    "mole",
    "accordion",
    "airliner",
    "ambulance",
    "anvil",
    "backpack",
    "bagel",
    "balloon",
    "banjo",
    "barrel",
    "basketball",
    "bathtub",
    "beacon",
    "bicycle",
    "binoculars",
    "birdhouse",
    "bobsled",
    "bookcase",
    "bottlecap",
    "bow",
    "bucket",
    "cannon",
    "canoe",
    "carousel",
    "cassette",
    "castle",
    "catamaran",
    "cauldron",
    "cello",
    "chainsaw",
    "chime",
    "cloak",
    "cocktail",
    "crane",
    "croquet",
    "crutch",
    "dishrag",
    "dome",
    "drum",
    "dumbbell",
    "envelope",
    "fireboat",
    "flute",
    "forklift",
    "fountain",
    "gasmask",
    "gondola",
    "gong",
    "guitar",
    "hairspray",
    "hammer",
    "harmonica",
    "harp",
    "hourglass",
    "jeep",
    "jigsaw",
    "kimono",
    "ladle",
    "lampshade",
    "lawnmower",
    "limousine",
    "lipstick",
    "locomotive",
    "mailbox",
    "maraca",
    "marimba",
    "mitten",
    "moped",
    "mosque",
    "motorboat",
    "obelisk",
    "oboe",
    "organ",
    "padlock",
    "paddle",
    "parachute",
    "pinwheel",
    "planetarium",
    "plunger",
    "poncho",
    "pretzel",
    "printer",
    "projector",
    "puck",
    "radiator",
    "revolver",
    "rotisserie",
    "saxophone",
    "scoreboard",
    "shovel",
    "sombrero",
    "snorkel",
    "snowplow",
    "sundial",
    "sunglasses",
    "syringe",
    "teapot",
    "thimble",
    "tractor",
    "tricycle",
    "trombone",
    "tripod",
    "trolleybus",
    "tub",
    "typewriter",
    "umbrella",
    "unicycle",
    "vase",
    "violin",
    "waffle",
    "wardrobe",
    "whistle",
    "wok",
    "yawl",
    "yurt",
    "mushroom",
    "broccoli",
    "cauliflower",
    "zucchini",
    "artichoke",
    "pomegranate",
    "pineapple",
    "banana",
    "lemon",
    "fig",
    "strawberry",
    "burrito",
    "pizza",
    "hotdog",
    "cheeseburger",
    "carbonara",
];

/// Everyday nouns, disjoint from [`BASE_NAMES`], used as unrelated cluster names.
pub const NOUNS: &[&str] = &[
    "table",
    "window",
    "pencil",
    "garden",
    "river",
    "mountain",
    "letter",
    "ticket",
    "engine",
    "ladder",
    "mirror",
    "pillow",
    "carpet",
    "curtain",
    "basket",
    "candle",
    "blanket",
    "bottle",
    "button",
    "camera",
    "chair",
    "clock",
    "coin",
    "cookie",
    "corner",
    "cotton",
    "cup",
    "desk",
    "diamond",
    "dinner",
    "door",
    "dragon",
    "dress",
    "drawer",
    "feather",
    "fence",
    "field",
    "finger",
    "flag",
    "floor",
    "flower",
    "forest",
    "fork",
    "frame",
    "friend",
    "glove",
    "grape",
    "hat",
    "harbor",
    "helmet",
    "hill",
    "island",
    "jacket",
    "jar",
    "jelly",
    "jewel",
    "key",
    "kettle",
    "kitchen",
    "kite",
    "knife",
    "lake",
    "lamp",
    "leaf",
    "lens",
    "library",
    "magnet",
    "map",
    "marble",
    "market",
    "meadow",
    "medal",
    "melody",
    "metal",
    "needle",
    "nest",
    "net",
    "notebook",
    "ocean",
    "orchard",
    "oven",
    "palace",
    "paper",
    "parcel",
    "pearl",
    "pebble",
    "pepper",
    "piano",
    "picnic",
    "pipe",
    "planet",
    "plate",
    "pocket",
    "pond",
    "potato",
    "puzzle",
    "quilt",
    "radio",
    "rainbow",
    "ribbon",
    "ring",
    "rocket",
    "roof",
    "rope",
    "saddle",
    "sail",
    "salt",
    "sand",
    "scarf",
    "school",
    "shadow",
    "shelf",
    "shell",
    "shoe",
    "signal",
    "silver",
    "sink",
    "sky",
    "sled",
    "soap",
    "sock",
    "spoon",
    "spring",
    "stamp",
    "star",
    "station",
    "stone",
    "storm",
    "stove",
    "street",
    "sugar",
    "suitcase",
    "summer",
    "sweater",
    "swing",
    "tent",
    "thread",
    "throne",
    "thunder",
    "tile",
    "toast",
    "tower",
    "towel",
    "toy",
    "trail",
    "train",
    "tree",
    "trumpet",
    "tunnel",
    "valley",
    "velvet",
    "village",
    "wagon",
    "wall",
    "wallet",
    "wand",
    "water",
    "wheel",
    "wind",
    "wing",
    "winter",
    "wire",
    "wood",
    "wool",
    "yard",
    "anchor",
    "apron",
    "arrow",
    "attic",
    "badge",
    "bakery",
    "banner",
    "barn",
    "battery",
    "beach",
    "bell",
    "bench",
    "blade",
    "boat",
    "bolt",
    "book",
    "boot",
    "bowl",
    "box",
    "bracelet",
    "branch",
    "bread",
    "brick",
    "bridge",
    "brush",
    "cabin",
    "cable",
    "cage",
    "canyon",
    "cap",
    "card",
    "carriage",
    "cart",
    "cave",
    "chain",
    "chalk",
    "cheese",
    "cherry",
    "chest",
    "chimney",
    "circle",
    "cliff",
    "cloud",
    "coat",
    "collar",
    "comb",
    "compass",
    "crown",
    "crystal",
    "cushion",
    "daisy",
    "desert",
    "dust",
    "elbow",
    "fabric",
    "fountainpen",
    "glacier",
    "glass",
    "globe",
    "hammock",
    "hedge",
    "honey",
    "horn",
    "jungle",
    "lantern",
    "lever",
    "lid",
    "lock",
    "locket",
    "mast",
    "mask",
    "mat",
    "mill",
    "mug",
    "nail",
    "napkin",
    "orbit",
    "paint",
    "pan",
    "path",
    "pedal",
    "pillar",
    "pin",
    "plank",
    "plug",
];
