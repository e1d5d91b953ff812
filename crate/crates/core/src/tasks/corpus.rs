//! Seeded subject-verb-object sentences used as pretraining text.

use super::tokenizer::Tokenizer;
use super::TaskError;
use crate::model::Token;
use crate::tensor::SeededRng;

const NOUNS: [&str; 70] = [
    "cat", "dog", "bird", "fish", "tree", "house", "river", "stone", "cloud", "road", "boat", "horse", "child",
    "king", "queen", "farmer", "baker", "doctor", "teacher", "pilot", "sailor", "garden", "forest", "city",
    "window", "door", "table", "chair", "lamp", "book", "letter", "song", "story", "apple", "bread", "cheese",
    "wheel", "hammer", "rope", "bridge", "tower", "castle", "valley", "hill", "lake", "field", "moon", "star",
    "storm", "wind", "fire", "candle", "mirror", "clock", "coin", "ring", "crown", "sword", "shield", "map",
    "ship", "train", "wagon", "fox", "wolf", "bear", "mouse", "owl", "frog", "goat",
];

const VERBS: [&str; 60] = [
    "sees", "finds", "takes", "builds", "paints", "carries", "follows", "watches", "likes", "hates", "calls",
    "helps", "chases", "feeds", "opens", "closes", "breaks", "fixes", "holds", "moves", "pulls", "pushes",
    "throws", "catches", "reads", "writes", "sings", "hears", "keeps", "sells", "buys", "cleans", "washes",
    "cooks", "bakes", "grows", "cuts", "draws", "guards", "hides", "joins", "leads", "lifts", "meets",
    "needs", "owns", "plants", "rides", "saves", "shares", "shows", "starts", "stops", "teaches", "trusts",
    "visits", "wakes", "wants", "wins", "loses",
];

const ADJECTIVES: [&str; 70] = [
    "big", "small", "old", "young", "red", "blue", "green", "dark", "bright", "quiet", "loud", "happy", "sad",
    "brave", "calm", "clever", "gentle", "proud", "quick", "slow", "tall", "short", "warm", "cold", "wet",
    "dry", "soft", "hard", "heavy", "light", "rich", "poor", "kind", "wild", "tame", "sharp", "dull", "clean",
    "dirty", "empty", "full", "fresh", "strong", "weak", "sweet", "bitter", "round", "flat", "golden",
    "silver", "wooden", "hidden", "lonely", "lucky", "busy", "lazy", "early", "late", "silent", "tiny",
    "giant", "ancient", "modern", "noble", "humble", "curious", "sleepy", "hungry", "thirsty", "friendly",
];

pub const LEXICON_SIZE: usize = NOUNS.len() + VERBS.len() + ADJECTIVES.len();

fn pick<'w>(rng: &mut SeededRng, words: &[&'w str]) -> &'w str {
    words[rng.index(words.len())]
}

/// One sentence: `"the <adj> <noun> <verb> the <noun>. "`.
pub fn sentence(rng: &mut SeededRng) -> String {
    format!(
        "the {} {} {} the {}. ",
        pick(rng, &ADJECTIVES),
        pick(rng, &NOUNS),
        pick(rng, &VERBS),
        pick(rng, &NOUNS)
    )
}

/// A `window_len`-token slice of freshly generated sentences, starting at a
/// random character offset inside the first sentence.
pub fn corpus_window(rng: &mut SeededRng, window_len: usize) -> Result<Vec<Token>, TaskError> {
    if window_len == 0 {
        return Err(TaskError::Degenerate("window length must be positive".into()));
    }
    let first = sentence(rng);
    let start = rng.index(first.len());
    let mut text = first;
    while text.len() < start + window_len {
        text.push_str(&sentence(rng));
    }
    Tokenizer.encode(&text[start..start + window_len])
}
