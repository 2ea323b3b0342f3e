//! Seeded generator of English-like text in several registers.
//!
//! Registers differ in lexicon size, Zipf exponent and phrase depth, so
//! sentences from larger registers are longer and use rarer words. Used for
//! the bundled demo corpus and for tests that need a corpus with realistic
//! length and frequency structure.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Zipf};

#[derive(Debug, Clone, PartialEq)]
pub struct Register {
    pub name: String,
    pub nouns: usize,
    pub verbs: usize,
    pub adjectives: usize,
    /// Zipf exponent for content-word draws.
    pub zipf: f64,
    /// Mean number of optional phrases (adjectives, prepositional phrases,
    /// coordinated clauses) per sentence.
    pub depth: f64,
    /// Probability that an utterance is a stock phrase.
    pub formulaic: f64,
    /// Size of the register's stock-phrase inventory.
    pub stock: usize,
}

impl Register {
    pub fn new(name: &str, nouns: usize, verbs: usize, adjectives: usize, zipf: f64, depth: f64) -> Self {
        Register {
            name: name.to_owned(),
            nouns,
            verbs,
            adjectives,
            zipf,
            depth,
            formulaic: 0.0,
            stock: 0,
        }
    }

    pub fn with_stock(mut self, formulaic: f64, stock: usize) -> Self {
        self.formulaic = formulaic;
        self.stock = stock;
        self
    }

    pub fn child_directed() -> Self {
        Register::new("childes", 120, 50, 25, 1.3, 0.4).with_stock(0.65, 80)
    }

    pub fn subtitles() -> Self {
        Register::new("subtitles", 900, 250, 150, 1.1, 1.2).with_stock(0.45, 400)
    }

    pub fn encyclopedic() -> Self {
        Register::new("wiki", 6000, 900, 900, 0.9, 3.0)
    }

    pub fn literary() -> Self {
        Register::new("gutenberg", 9000, 1400, 1400, 0.85, 4.0)
    }

    /// The four-register mix used for the demo corpus.
    pub fn standard_mix() -> Vec<(Register, f64)> {
        vec![
            (Register::child_directed(), 0.3),
            (Register::subtitles(), 0.3),
            (Register::encyclopedic(), 0.2),
            (Register::literary(), 0.2),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub sentences: usize,
    pub seed: u64,
    /// Registers with their relative weights.
    pub registers: Vec<(Register, f64)>,
    /// Fraction of sentences stretched into very long run-ons.
    pub long_fraction: f64,
    /// Minimum word count of a stretched sentence.
    pub long_words: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sentences: 10_000,
            seed: 0,
            registers: Register::standard_mix(),
            long_fraction: 0.01,
            long_words: 120,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthSentence {
    pub source: String,
    pub text: String,
}

const DETERMINERS: &[&str] = &["the", "a", "this", "that", "every", "some", "my", "our"];
const PREPOSITIONS: &[&str] = &[
    "in", "on", "with", "near", "under", "from", "behind", "for", "about", "over",
];
const INTERJECTIONS: &[&str] = &[
    "yeah", "okay", "oh", "no", "look", "hey", "what", "here", "there", "now", "well", "please",
];
const CONJUNCTIONS: &[&str] = &["and", "but", "while", "because", "so"];
const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z", "br", "cl", "dr", "gr", "pl", "st",
    "tr", "sh", "ch", "th",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou", "ee"];
const CODAS: &[&str] = &["", "", "n", "r", "s", "t", "l", "m", "nd", "st"];

/// Pseudo-words in rank order; frequent ranks get shorter forms.
fn lexicon(rng: &mut ChaCha12Rng, size: usize, suffix: &str, taken: &mut HashSet<String>) -> Vec<String> {
    let mut words = Vec::with_capacity(size);
    while words.len() < size {
        let rank = words.len() + 1;
        let syllables = 1 + (rank as f64).log10() as usize / 2 + rng.random_range(0..2);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
            w.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
            w.push_str(CODAS[rng.random_range(0..CODAS.len())]);
        }
        w.push_str(suffix);
        if taken.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

struct Lexicon {
    nouns: Vec<String>,
    verbs: Vec<String>,
    adjectives: Vec<String>,
}

/// One shared vocabulary; registers draw from prefixes of it.
fn shared_lexicon(seed: u64, registers: &[(Register, f64)]) -> Lexicon {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x6c65_7869_636f_6e00);
    let mut taken: HashSet<String> = DETERMINERS
        .iter()
        .chain(PREPOSITIONS)
        .chain(CONJUNCTIONS)
        .chain(INTERJECTIONS)
        .map(|s| s.to_string())
        .collect();
    let max = |f: fn(&Register) -> usize| registers.iter().map(|(r, _)| f(r)).max().unwrap_or(1).max(1);
    Lexicon {
        nouns: lexicon(&mut rng, max(|r| r.nouns), "", &mut taken),
        verbs: lexicon(&mut rng, max(|r| r.verbs), "s", &mut taken),
        adjectives: lexicon(&mut rng, max(|r| r.adjectives), "y", &mut taken),
    }
}

struct Speaker<'a> {
    lex: &'a Lexicon,
    reg: &'a Register,
    phrases: Vec<String>,
    phrase_rank: Option<Zipf<f64>>,
    nouns: Zipf<f64>,
    verbs: Zipf<f64>,
    adjectives: Zipf<f64>,
}

impl<'a> Speaker<'a> {
    fn new(lex: &'a Lexicon, reg: &'a Register, seed: u64) -> Self {
        let z = |n: usize| Zipf::new(n.max(1) as f64, reg.zipf).expect("valid zipf parameters");
        let mut sp = Speaker {
            lex,
            reg,
            phrases: Vec::new(),
            phrase_rank: (reg.stock > 0).then(|| Zipf::new(reg.stock as f64, 1.1).expect("valid zipf parameters")),
            nouns: z(reg.nouns),
            verbs: z(reg.verbs),
            adjectives: z(reg.adjectives),
        };
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        sp.phrases = (0..reg.stock).map(|_| sp.stock_phrase(&mut rng)).collect();
        sp
    }

    /// A one-to-four word formula built from interjections and frequent words.
    fn stock_phrase(&self, rng: &mut ChaCha12Rng) -> String {
        let len = rng.random_range(1..=4);
        let words: Vec<&str> = (0..len)
            .map(|_| match rng.random_range(0..4) {
                0 => INTERJECTIONS[rng.random_range(0..INTERJECTIONS.len())],
                1 => DETERMINERS[rng.random_range(0..DETERMINERS.len())],
                2 => Self::pick(rng, &self.lex.nouns, &self.nouns),
                _ => Self::pick(rng, &self.lex.verbs, &self.verbs),
            })
            .collect();
        finish(words.join(" "), rng)
    }

    fn pick<'w>(rng: &mut ChaCha12Rng, words: &'w [String], z: &Zipf<f64>) -> &'w str {
        &words[z.sample(rng) as usize - 1]
    }

    /// Geometric count with the register's mean, scaled.
    fn count(&self, rng: &mut ChaCha12Rng, scale: f64) -> usize {
        let mean = self.reg.depth * scale;
        let p = 1.0 / (1.0 + mean);
        let mut k = 0;
        while k < 12 && rng.random::<f64>() >= p {
            k += 1;
        }
        k
    }

    fn noun_phrase(&self, rng: &mut ChaCha12Rng, out: &mut Vec<String>, nested: bool) {
        out.push(DETERMINERS[rng.random_range(0..DETERMINERS.len())].to_owned());
        for _ in 0..self.count(rng, 0.3) {
            out.push(Self::pick(rng, &self.lex.adjectives, &self.adjectives).to_owned());
        }
        out.push(Self::pick(rng, &self.lex.nouns, &self.nouns).to_owned());
        if !nested {
            for _ in 0..self.count(rng, 0.25) {
                out.push(PREPOSITIONS[rng.random_range(0..PREPOSITIONS.len())].to_owned());
                self.noun_phrase(rng, out, true);
            }
        }
    }

    fn clause(&self, rng: &mut ChaCha12Rng, out: &mut Vec<String>) {
        self.noun_phrase(rng, out, false);
        out.push(Self::pick(rng, &self.lex.verbs, &self.verbs).to_owned());
        if rng.random_bool(0.7) {
            self.noun_phrase(rng, out, false);
        }
    }

    fn sentence(&self, rng: &mut ChaCha12Rng, min_words: usize) -> String {
        if let Some(z) = &self.phrase_rank {
            if min_words == 0 && rng.random_bool(self.reg.formulaic) {
                return self.phrases[z.sample(rng) as usize - 1].clone();
            }
        }
        let mut words = Vec::new();
        self.clause(rng, &mut words);
        let extra = self.count(rng, 0.3);
        let mut k = 0;
        while k < extra || words.len() < min_words {
            words.push(CONJUNCTIONS[rng.random_range(0..CONJUNCTIONS.len())].to_owned());
            self.clause(rng, &mut words);
            k += 1;
        }
        finish(words.join(" "), rng)
    }
}

/// Adds final punctuation and capitalizes the first letter.
fn finish(mut text: String, rng: &mut ChaCha12Rng) -> String {
    text.push_str(match rng.random_range(0..20) {
        0..=2 => " ?",
        3 => " !",
        _ => " .",
    });
    let mut chars = text.chars();
    let first = chars.next().map(|c| c.to_ascii_uppercase()).unwrap_or_default();
    std::iter::once(first).chain(chars).collect()
}

/// Generates `cfg.sentences` sentences; output depends only on `cfg`.
pub fn generate(cfg: &SynthConfig) -> Vec<SynthSentence> {
    let lex = shared_lexicon(cfg.seed, &cfg.registers);
    let speakers: Vec<Speaker> = cfg
        .registers
        .iter()
        .enumerate()
        .map(|(i, (r, _))| Speaker::new(&lex, r, cfg.seed.wrapping_add(i as u64 + 1)))
        .collect();
    let total: f64 = cfg.registers.iter().map(|(_, w)| w).sum();
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    (0..cfg.sentences)
        .map(|_| {
            let mut u = rng.random::<f64>() * total;
            let mut idx = speakers.len() - 1;
            for (i, (_, w)) in cfg.registers.iter().enumerate() {
                if u < *w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            let min_words = if rng.random_bool(cfg.long_fraction) {
                cfg.long_words
            } else {
                0
            };
            SynthSentence {
                source: speakers[idx].reg.name.clone(),
                text: speakers[idx].sentence(&mut rng, min_words),
            }
        })
        .collect()
}
