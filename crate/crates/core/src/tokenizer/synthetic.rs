//! Synthetic corpora and merge lists for tests and benchmarks.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::for_each_piece;
use super::Backend;

const SYLLABLES: &[&str] = &[
    "th", "e", "an", "in", "er", "on", "re", "at", "st", "en", "or", "es", "ing", "ed", "a", "o", "i", "qu",
    "ly", "tion", "ou", "al", "is", "it", "ar", "le", "nd", "ch", "sh", "w", "b", "k", "z", "x",
];
const PUNCT: &[&str] = &[".", ",", "!", "?", "'", "-", "(", ")", ":", ";", "\n", "  ", "\t"];

/// Word-like text: syllable words, numbers, punctuation and whitespace.
pub fn text(rng: &mut impl Rng, words: usize) -> String {
    let mut out = String::new();
    for i in 0..words {
        if i > 0 {
            out.push(' ');
        }
        match rng.random_range(0..10) {
            0 => out.push_str(&rng.random_range(0..10_000u32).to_string()),
            1 => out.push_str(PUNCT[rng.random_range(0..PUNCT.len())]),
            2 => out.push_str("é"),
            _ => {
                for _ in 0..rng.random_range(1..4) {
                    out.push_str(SYLLABLES[rng.random_range(0..SYLLABLES.len())]);
                }
                if rng.random_bool(0.1) {
                    out.push_str(PUNCT[rng.random_range(0..PUNCT.len())]);
                }
            }
        }
    }
    out
}

/// Greedy most-frequent-pair merges learned from `corpus`, ties broken by
/// the smaller byte strings.
pub fn train(corpus: &[u8], n_merges: usize) -> Vec<(Vec<u8>, Vec<u8>)> {
    let mut words: HashMap<Vec<Vec<u8>>, usize> = HashMap::new();
    for_each_piece(corpus, Backend::Scalar, |r| {
        let symbols = corpus[r].iter().map(|&b| vec![b]).collect();
        *words.entry(symbols).or_default() += 1;
    });
    let mut words: Vec<(Vec<Vec<u8>>, usize)> = words.into_iter().collect();
    words.sort();
    let mut merges = Vec::with_capacity(n_merges);
    while merges.len() < n_merges {
        let mut counts: HashMap<(&[u8], &[u8]), usize> = HashMap::new();
        for (w, n) in &words {
            for p in w.windows(2) {
                *counts.entry((&p[0], &p[1])).or_default() += n;
            }
        }
        let Some(((l, r), _)) = counts
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
        else {
            break;
        };
        let (l, r) = (l.to_vec(), r.to_vec());
        for (w, _) in &mut words {
            let mut i = 0;
            while i + 1 < w.len() {
                if w[i] == l && w[i + 1] == r {
                    let right = w.remove(i + 1);
                    w[i].extend_from_slice(&right);
                }
                i += 1;
            }
        }
        merges.push((l, r));
    }
    merges
}

/// Merge list of `n` entries learned from a seeded synthetic corpus.
pub fn merges(seed: u64, n: usize) -> Vec<(Vec<u8>, Vec<u8>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corpus = text(&mut rng, 6_000);
    train(corpus.as_bytes(), n)
}
