//! Deterministic synthetic paraphrase corpora for desk-scale experiments
//! and tests.
//!
//! Each record pairs a target sentence with its word-reversed source;
//! parse trees are delexicalized constituency skeletons built over the
//! words, with chunking and labels derived from a hash of the words so
//! distinct sentences get distinct trees. Sources are unique (as text and
//! as trees), which keeps both model tasks functional: one input, one
//! correct output.

use super::ParaphraseRecord;
use crate::rng::Rng;
use crate::tree::{self, ParseTree};
use std::collections::HashSet;

const WORDS: [&str; 24] = [
    "alice", "bob", "carol", "dave", "erin", "frank", "likes", "sees", "helps", "greets",
    "follows", "meets", "red", "blue", "green", "small", "big", "old", "dog", "cat", "bird",
    "fish", "fox", "owl",
];

const TAGS: [&str; 8] = ["NN", "VB", "DT", "JJ", "RB", "PRP", "IN", "CD"];
const PHRASES: [&str; 5] = ["NP", "VP", "PP", "ADJP", "ADVP"];

fn hash_words(words: &[&str]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for w in words {
        for b in w.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn word_tag(word: &str) -> &'static str {
    TAGS[(hash_words(&[word]) % TAGS.len() as u64) as usize]
}

fn preterminals(words: &[&str]) -> Vec<ParseTree> {
    words.iter().map(|w| ParseTree::leaf(word_tag(w))).collect()
}

/// Build a depth-4-to-5 constituency skeleton over `words`. `n_groups`
/// fixes the top-level chunk count; `style` drives labels and nesting.
fn build_tree_grouped(words: &[&str], style: u64, n_groups: usize) -> ParseTree {
    let n_groups = n_groups.clamp(1, words.len());
    let base = words.len() / n_groups;
    let rem = words.len() % n_groups;

    let mut groups: Vec<&[&str]> = Vec::with_capacity(n_groups);
    let mut start = 0;
    for i in 0..n_groups {
        let size = base + usize::from(i < rem);
        groups.push(&words[start..start + size]);
        start += size;
    }

    let mut nest = vec![false; n_groups];
    for (i, g) in groups.iter().enumerate() {
        nest[i] = g.len() >= 2 && (style >> (3 + i)) & 1 == 1;
    }
    if !nest.iter().any(|&b| b) {
        if let Some(i) = groups.iter().position(|g| g.len() >= 2) {
            nest[i] = true;
        }
    }

    let children = groups
        .iter()
        .enumerate()
        .map(|(i, gwords)| {
            let label = PHRASES[((style >> 2) as usize + i) % PHRASES.len()];
            let kids = if nest[i] {
                let sub_label = PHRASES[((style >> 7) as usize + i + 1) % PHRASES.len()];
                let rest = &gwords[1..];
                let sub_kids = if rest.len() >= 3 && (style >> (9 + i)) & 1 == 1 {
                    let deep_label = PHRASES[((style >> 13) as usize + i + 2) % PHRASES.len()];
                    let mut k = preterminals(&rest[..1]);
                    k.push(ParseTree::node(deep_label, preterminals(&rest[1..])));
                    k
                } else {
                    preterminals(rest)
                };
                vec![
                    ParseTree::leaf(word_tag(gwords[0])),
                    ParseTree::node(sub_label, sub_kids),
                ]
            } else {
                preterminals(gwords)
            };
            ParseTree::node(label, kids)
        })
        .collect();
    ParseTree::node("S", children)
}

fn build_tree(words: &[&str], style: u64) -> ParseTree {
    build_tree_grouped(words, style, 2 + (style as usize) % 2)
}

fn record_from(tgt_words: &[&str], src_words: &[&str], tgt_tree: &ParseTree, src_tree: &ParseTree) -> ParaphraseRecord {
    ParaphraseRecord {
        src: src_words.join(" "),
        tgt: tgt_words.join(" "),
        src_parse: tree::to_bracketed(src_tree),
        tgt_parse: tree::to_bracketed(tgt_tree),
    }
}

/// A corpus of `pairs` records with unique sources. Sentences are 4-8
/// words over a 24-word pool; trees are at most 5 levels deep.
pub fn corpus(pairs: usize, seed: u64) -> Vec<ParaphraseRecord> {
    let mut rng = Rng::new(seed);
    let mut seen_src_text = HashSet::new();
    let mut seen_src_tree = HashSet::new();
    let mut records = Vec::with_capacity(pairs);
    while records.len() < pairs {
        let k = 4 + rng.below(5);
        let tgt_words: Vec<&str> = (0..k).map(|_| WORDS[rng.below(WORDS.len())]).collect();
        let src_words: Vec<&str> = tgt_words.iter().rev().copied().collect();
        let src_text = src_words.join(" ");
        if !seen_src_text.insert(src_text) {
            continue;
        }
        let src_tree = build_tree(&src_words, hash_words(&src_words));
        if !seen_src_tree.insert(tree::to_bracketed(&src_tree)) {
            continue;
        }
        let tgt_tree = build_tree(&tgt_words, hash_words(&tgt_words));
        records.push(record_from(&tgt_words, &src_words, &tgt_tree, &src_tree));
    }
    records
}

/// A corpus with exactly two records per source sentence, whose targets
/// differ both as text and in their parse trees down to the top levels.
/// Only the syntactic guidance can tell the two apart.
pub fn corpus_two_templates(sources: usize, seed: u64) -> Vec<ParaphraseRecord> {
    let mut rng = Rng::new(seed ^ 0x74e6_1a94_0cb4_d2f1);
    let mut seen_src_text = HashSet::new();
    let mut records = Vec::with_capacity(sources * 2);
    let mut made = 0;
    while made < sources {
        let k = 4 + rng.below(5);
        let src_words: Vec<&str> = (0..k).map(|_| WORDS[rng.below(WORDS.len())]).collect();
        let src_text = src_words.join(" ");
        if !seen_src_text.insert(src_text) {
            continue;
        }
        let tgt_a: Vec<&str> = src_words.iter().rev().copied().collect();
        let mut tgt_b: Vec<&str> = src_words[1..].to_vec();
        tgt_b.push(src_words[0]);
        if tgt_a == tgt_b {
            continue;
        }
        let style = hash_words(&src_words);
        let src_tree = build_tree(&src_words, style);
        // two groups versus three forces distinct top-level templates
        let tree_a = build_tree_grouped(&tgt_a, hash_words(&tgt_a), 2);
        let tree_b = build_tree_grouped(&tgt_b, hash_words(&tgt_b), 3);
        if tree::to_bracketed(&tree_a) == tree::to_bracketed(&tree_b) {
            continue;
        }
        records.push(record_from(&tgt_a, &src_words, &tree_a, &src_tree));
        records.push(record_from(&tgt_b, &src_words, &tree_b, &src_tree));
        made += 1;
    }
    records
}
