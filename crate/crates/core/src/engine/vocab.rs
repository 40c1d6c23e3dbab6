//! Built-in toy vocabulary, prompts and the category prompt templates.

use std::fmt;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_PROMPT_LEN: usize = 16;
pub const CONCEPTS_PER_CATEGORY: usize = 20;
pub const NUM_CATEGORIES: usize = 3;
pub const NUM_CONCEPTS: usize = CONCEPTS_PER_CATEGORY * NUM_CATEGORIES;

const STYLE_NAMES: [&str; 10] = [
    "andy_warhol",
    "auguste_renoir",
    "claude_monet",
    "frida_kahlo",
    "paul_cezanne",
    "pablo_picasso",
    "piet_mondrian",
    "roy_lichtenstein",
    "vincent_van_gogh",
    "edouard_manet",
];

const IP_NAMES: [&str; 10] = [
    "buzz_lightyear",
    "homer_simpson",
    "luigi",
    "mario",
    "mickey_mouse",
    "pikachu",
    "snoopy",
    "sonic",
    "spongebob",
    "stitch",
];

const CELEBRITY_NAMES: [&str; 10] = [
    "angelina_jolie",
    "ariana_grande",
    "brad_pitt",
    "david_beckham",
    "elon_musk",
    "emma_watson",
    "lady_gaga",
    "leonardo_dicaprio",
    "taylor_swift",
    "tom_cruise",
];

/// Words used by the anchor templates.
const TEMPLATE_WORDS: [&str; 13] = [
    "a",
    "an",
    "of",
    "by",
    "photo",
    "image",
    "portrait",
    "picture",
    "photograph",
    "painting",
    "art",
    "artwork",
    "style",
];

/// Scene words that never appear in anchor templates.
const CONTEXT_WORDS: [&str; 7] = ["the", "in", "on", "with", "mountain", "street", "sunset"];

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Style,
    Ip,
    Celebrity,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Style, Category::Ip, Category::Celebrity];

    pub fn index(self) -> usize {
        match self {
            Category::Style => 0,
            Category::Ip => 1,
            Category::Celebrity => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Style => "style",
            Category::Ip => "ip",
            Category::Celebrity => "celebrity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "style" => Ok(Category::Style),
            "ip" => Ok(Category::Ip),
            "celeb" | "celebrity" => Ok(Category::Celebrity),
            other => Err(Error::VocabError(format!("unknown category `{other}`"))),
        }
    }

    /// The six anchor templates; `{}` marks the concept slot.
    pub fn templates(self) -> [&'static str; 6] {
        match self {
            Category::Style => [
                "{}",
                "painting by {}",
                "art by {}",
                "artwork by {}",
                "picture by {}",
                "style of {}",
            ],
            Category::Ip | Category::Celebrity => [
                "{}",
                "a photo of {}",
                "an image of {}",
                "a portrait of {}",
                "a picture of {}",
                "a photograph of {}",
            ],
        }
    }

    /// Words of the vocabulary not used by this category's templates.
    fn held_out_words(self) -> Vec<&'static str> {
        let used: Vec<&str> = self
            .templates()
            .iter()
            .flat_map(|t| t.split_whitespace())
            .filter(|w| *w != "{}")
            .collect();
        TEMPLATE_WORDS
            .iter()
            .chain(CONTEXT_WORDS.iter())
            .copied()
            .filter(|w| !used.contains(w))
            .collect()
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The fixed 80-token vocabulary: 60 concept tokens (three categories of
/// twenty) followed by 13 template words and 7 context words.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    names: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::builtin()
    }
}

impl Vocabulary {
    pub fn builtin() -> Self {
        let mut names = Vec::with_capacity(NUM_CONCEPTS + TEMPLATE_WORDS.len() + CONTEXT_WORDS.len());
        for (cat, known) in Category::ALL.iter().zip([&STYLE_NAMES, &IP_NAMES, &CELEBRITY_NAMES]) {
            names.extend(known.iter().map(|s| s.to_string()));
            names.extend((known.len()..CONCEPTS_PER_CATEGORY).map(|i| format!("{}_{i:02}", cat.name())));
        }
        names.extend(TEMPLATE_WORDS.iter().map(|s| s.to_string()));
        names.extend(CONTEXT_WORDS.iter().map(|s| s.to_string()));
        Self { names }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: TokenId) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, name: &str) -> Result<TokenId> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| i as TokenId)
            .ok_or_else(|| Error::VocabError(format!("unknown token `{name}`")))
    }

    pub fn is_concept(&self, id: TokenId) -> bool {
        (id as usize) < NUM_CONCEPTS
    }

    pub fn concept(&self, name: &str) -> Result<Concept> {
        let id = self.id(name)?;
        Concept::from_id(id)
    }

    pub fn concepts_in(&self, category: Category) -> Vec<Concept> {
        (0..CONCEPTS_PER_CATEGORY)
            .map(|i| Concept {
                id: (category.index() * CONCEPTS_PER_CATEGORY + i) as TokenId,
                category,
            })
            .collect()
    }

    /// Parses a whitespace-separated prompt of token names.
    pub fn parse_prompt(&self, text: &str) -> Result<Prompt> {
        let tokens = text
            .split_whitespace()
            .map(|w| self.id(w))
            .collect::<Result<Vec<_>>>()?;
        Prompt::new(tokens, self.len())
    }

    pub fn render(&self, prompt: &Prompt) -> String {
        prompt
            .tokens()
            .iter()
            .map(|&t| self.name(t).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Fills every template of the concept's category with the concept.
    pub fn template_prompts(&self, concept: Concept, category: Category) -> Vec<Prompt> {
        let name = self.name(concept.id).unwrap_or_default().to_string();
        category
            .templates()
            .iter()
            .map(|t| {
                self.parse_prompt(&t.replace("{}", &name))
                    .expect("templates only use vocabulary words")
            })
            .collect()
    }

    /// Held-out "natural" prompts: the concept placed among two to four words
    /// that the category's templates never use. Deterministic in `seed`.
    pub fn natural_prompts(&self, concept: Concept, count: usize, seed: u64) -> Vec<Prompt> {
        let pool = concept.category.held_out_words();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(concept.id as u64 + 1)));
        (0..count)
            .map(|_| {
                let n_ctx = rng.random_range(2..=4);
                let mut words: Vec<&str> = pool.choose_multiple(&mut rng, n_ctx).copied().collect();
                let pos = rng.random_range(0..=words.len());
                let name = self.name(concept.id).unwrap_or_default();
                words.insert(pos, name);
                self.parse_prompt(&words.join(" "))
                    .expect("natural prompts only use vocabulary words")
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Concept {
    pub id: TokenId,
    pub category: Category,
}

impl Concept {
    pub fn from_id(id: TokenId) -> Result<Self> {
        let idx = id as usize;
        if idx >= NUM_CONCEPTS {
            return Err(Error::VocabError(format!("token {id} is not a concept")));
        }
        Ok(Self {
            id,
            category: Category::ALL[idx / CONCEPTS_PER_CATEGORY],
        })
    }

    /// Position within its category (0..20).
    pub fn rank_in_category(&self) -> usize {
        self.id as usize % CONCEPTS_PER_CATEGORY
    }
}

/// A tokenized prompt: 1..=16 vocabulary ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    tokens: Vec<TokenId>,
}

impl Prompt {
    pub fn new(tokens: Vec<TokenId>, vocab_size: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::VocabError("empty prompt".into()));
        }
        if tokens.len() > MAX_PROMPT_LEN {
            return Err(Error::VocabError(format!(
                "prompt has {} tokens, max {MAX_PROMPT_LEN}",
                tokens.len()
            )));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::VocabError(format!("token id {bad} outside vocabulary of {vocab_size}")));
        }
        Ok(Self { tokens })
    }

    /// Builds a prompt without validation. Callers in this crate use it for
    /// inputs the encoder must then reject.
    pub fn from_raw(tokens: Vec<TokenId>) -> Self {
        Self { tokens }
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_layout() {
        let v = Vocabulary::builtin();
        assert_eq!(v.len(), 80);
        assert_eq!(v.name(0), Some("andy_warhol"));
        assert_eq!(v.name(25), Some("pikachu"));
        assert_eq!(v.name(59), Some("celebrity_19"));
        assert_eq!(v.name(60), Some("a"));
        assert!(v.is_concept(59));
        assert!(!v.is_concept(60));
        assert_eq!(v.concept("pikachu").unwrap().category, Category::Ip);
        assert!(v.concept("photo").is_err());
    }

    #[test]
    fn templates_parse() {
        let v = Vocabulary::builtin();
        let c = v.concept("vincent_van_gogh").unwrap();
        let ps = v.template_prompts(c, Category::Style);
        assert_eq!(ps.len(), 6);
        assert_eq!(v.render(&ps[1]), "painting by vincent_van_gogh");
        assert_eq!(ps[0].len(), 1);
    }

    #[test]
    fn natural_prompts_avoid_template_words() {
        let v = Vocabulary::builtin();
        let c = v.concept("pikachu").unwrap();
        let ps = v.natural_prompts(c, 20, 3);
        assert_eq!(ps, v.natural_prompts(c, 20, 3));
        let template_words: Vec<TokenId> = v
            .template_prompts(c, Category::Ip)
            .iter()
            .flat_map(|p| p.tokens().to_vec())
            .filter(|&t| t != c.id)
            .collect();
        for p in &ps {
            assert!(p.tokens().contains(&c.id));
            assert!((3..=5).contains(&p.len()));
            assert!(p.tokens().iter().all(|t| !template_words.contains(t)));
        }
    }

    #[test]
    fn prompt_validation() {
        assert!(Prompt::new(vec![], 80).is_err());
        assert!(Prompt::new(vec![80], 80).is_err());
        assert!(Prompt::new(vec![0; 17], 80).is_err());
        assert!(Prompt::new(vec![0; 16], 80).is_ok());
        assert!(Vocabulary::builtin().parse_prompt("a photo of nobody").is_err());
    }
}
