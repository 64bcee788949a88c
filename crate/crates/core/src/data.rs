//! Deterministic synthetic corpus generation for smoke runs and tests.
//!
//! The generator produces ASCII prose with sentence/word structure and
//! recurring within-paragraph entity names, so byte-level models have both
//! local and longer-range regularities to learn.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const WORDS: &[&str] = &[
    "the", "a", "of", "and", "to", "in", "was", "with", "near", "under", "over", "old", "new",
    "small", "great", "quiet", "bright", "dark", "long", "early", "late", "stone", "river",
    "harbor", "road", "tower", "garden", "market", "bridge", "forest", "valley", "window",
    "letter", "winter", "summer", "morning", "evening", "journey", "story", "answer", "question",
    "works", "walks", "returns", "remembers", "watches", "builds", "carries", "writes", "reads",
    "speaks", "listens", "waits", "travels", "arrives", "leaves", "begins", "ends", "keeps",
    "finds", "loses", "every", "some", "many", "few", "other", "same", "first", "last", "next",
    "north", "south", "east", "west", "house", "ship", "lamp", "clock", "paper", "field", "hill",
    "rain", "snow", "wind", "light", "shadow", "voice", "sound", "silence", "between", "beyond",
    "through", "again", "often", "never", "always", "soon", "slowly", "quickly", "carefully",
];

const SYLLABLES: &[&str] = &[
    "bar", "dan", "mor", "el", "ina", "tov", "ras", "mi", "ka", "lun", "ver", "os", "tan", "dra",
    "fen", "gal", "hem", "ir", "jor", "kel",
];

fn make_entity(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(2..=3);
    let mut s = String::new();
    for _ in 0..n {
        s.push_str(SYLLABLES[rng.gen_range(0..SYLLABLES.len())]);
    }
    let mut chars = s.chars();
    let first = chars.next().expect("nonempty").to_ascii_uppercase();
    format!("{first}{}", chars.as_str())
}

/// At least `min_bytes` of seeded synthetic prose.
pub fn synth_corpus(min_bytes: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entities: Vec<String> = (0..48).map(|_| make_entity(&mut rng)).collect();
    let mut out = String::with_capacity(min_bytes + 1024);
    while out.len() < min_bytes {
        // Each paragraph re-mentions a small cast of names.
        let cast: Vec<&str> = (0..rng.gen_range(2..=3))
            .map(|_| entities[rng.gen_range(0..entities.len())].as_str())
            .collect();
        let sentences = rng.gen_range(4..=8);
        for s in 0..sentences {
            let words = rng.gen_range(6..=14);
            for w in 0..words {
                let token = if rng.gen_bool(0.15) {
                    cast[rng.gen_range(0..cast.len())]
                } else {
                    WORDS[rng.gen_range(0..WORDS.len())]
                };
                if w == 0 {
                    let mut chars = token.chars();
                    let first = chars.next().expect("nonempty").to_ascii_uppercase();
                    out.push(first);
                    out.push_str(chars.as_str());
                } else {
                    out.push_str(token);
                }
                if w + 1 < words {
                    if rng.gen_bool(0.06) {
                        out.push(',');
                    }
                    out.push(' ');
                }
            }
            out.push('.');
            if s + 1 < sentences {
                out.push(' ');
            }
        }
        out.push_str("\n\n");
    }
    out
}
