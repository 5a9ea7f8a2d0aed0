//! Byte pair encoding: greedy highest-frequency pair merging over a word
//! corpus, with an explicit end-of-word marker symbol.

use super::DataError;
use std::collections::HashMap;
use std::fmt::Write as _;

/// End-of-word marker appended to every word's symbol sequence.
pub const END_OF_WORD: &str = "</w>";

const FILE_HEADER: &str = "syngen-bpe v1";

/// Learned merge list plus the base symbol inventory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    /// Merges in learned order; each joins two adjacent symbols.
    pub merges: Vec<(String, String)>,
    /// Symbols present before any merge (characters and the marker).
    pub base_symbols: Vec<String>,
}

fn word_symbols(word: &str) -> Vec<String> {
    let mut syms: Vec<String> = word.chars().map(|c| c.to_string()).collect();
    syms.push(END_OF_WORD.to_string());
    syms
}

impl BpeModel {
    /// Learn merges from whitespace-tokenized texts until the vocabulary
    /// (base inventory plus merges) reaches `target_vocab_size` or no
    /// adjacent pair occurs twice. Ties break on the lexicographically
    /// smallest pair, so training is deterministic.
    pub fn train(texts: &[String], target_vocab_size: usize) -> Result<Self, DataError> {
        let mut word_freq: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for word in text.split_whitespace() {
                *word_freq.entry(word.to_string()).or_insert(0) += 1;
            }
        }
        if word_freq.is_empty() {
            return Err(DataError::EmptyCorpus);
        }

        let mut words: Vec<(Vec<String>, usize)> = {
            let mut ws: Vec<_> = word_freq.into_iter().collect();
            ws.sort();
            ws.into_iter()
                .map(|(w, f)| (word_symbols(&w), f))
                .collect()
        };

        let mut base_symbols: Vec<String> = words
            .iter()
            .flat_map(|(syms, _)| syms.iter().cloned())
            .collect();
        base_symbols.sort();
        base_symbols.dedup();

        if target_vocab_size < base_symbols.len() {
            return Err(DataError::BpeTarget {
                target: target_vocab_size,
                base: base_symbols.len(),
            });
        }

        let mut merges = Vec::new();
        let mut vocab_size = base_symbols.len();
        while vocab_size < target_vocab_size {
            let mut pair_freq: HashMap<(String, String), usize> = HashMap::new();
            for (syms, f) in &words {
                for pair in syms.windows(2) {
                    *pair_freq
                        .entry((pair[0].clone(), pair[1].clone()))
                        .or_insert(0) += f;
                }
            }
            let best = pair_freq
                .into_iter()
                .filter(|(_, f)| *f >= 2)
                .min_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            let Some((pair, _)) = best else {
                break; // no pair repeats
            };
            for (syms, _) in &mut words {
                apply_merge(syms, &pair);
            }
            merges.push(pair);
            vocab_size += 1;
        }

        Ok(BpeModel {
            merges,
            base_symbols,
        })
    }

    /// Split one word into subword symbols by replaying the merges.
    pub fn encode_word(&self, word: &str) -> Vec<String> {
        let mut syms = word_symbols(word);
        for merge in &self.merges {
            apply_merge(&mut syms, merge);
        }
        syms
    }

    /// Tokenize whitespace-separated text into subword symbols.
    pub fn encode_text(&self, text: &str) -> Vec<String> {
        text.split_whitespace()
            .flat_map(|w| self.encode_word(w))
            .collect()
    }

    /// Invert [`encode_text`]: concatenate symbols, turning each
    /// end-of-word marker into a space.
    pub fn decode(tokens: &[String]) -> String {
        let mut out = String::new();
        for tok in tokens {
            if let Some(stem) = tok.strip_suffix(END_OF_WORD) {
                out.push_str(stem);
                out.push(' ');
            } else {
                out.push_str(tok);
            }
        }
        out.trim_end().to_string()
    }

    /// Final vocabulary size: base inventory plus one symbol per merge.
    pub fn vocab_size(&self) -> usize {
        self.base_symbols.len() + self.merges.len()
    }

    /// Plain-text serialization: header, base symbols, blank line, then
    /// merges in learned order.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{FILE_HEADER}");
        let _ = writeln!(out, "#symbols {}", self.base_symbols.len());
        for s in &self.base_symbols {
            let _ = writeln!(out, "{s}");
        }
        let _ = writeln!(out, "#merges {}", self.merges.len());
        for (a, b) in &self.merges {
            let _ = writeln!(out, "{a} {b}");
        }
        out
    }

    pub fn from_file_string(text: &str) -> Result<Self, DataError> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header != FILE_HEADER {
            return Err(DataError::Format(format!(
                "expected `{FILE_HEADER}` header, got `{header}`"
            )));
        }
        let count = |line: Option<&str>, tag: &str| -> Result<usize, DataError> {
            let line = line.unwrap_or_default();
            line.strip_prefix(tag)
                .and_then(|rest| rest.trim().parse().ok())
                .ok_or_else(|| DataError::Format(format!("expected `{tag} N`, got `{line}`")))
        };
        let n_sym = count(lines.next(), "#symbols")?;
        let mut base_symbols = Vec::with_capacity(n_sym);
        for _ in 0..n_sym {
            base_symbols.push(
                lines
                    .next()
                    .ok_or_else(|| DataError::Format("truncated symbol list".into()))?
                    .to_string(),
            );
        }
        let n_merge = count(lines.next(), "#merges")?;
        let mut merges = Vec::with_capacity(n_merge);
        for _ in 0..n_merge {
            let line = lines
                .next()
                .ok_or_else(|| DataError::Format("truncated merge list".into()))?;
            let (a, b) = line
                .split_once(' ')
                .ok_or_else(|| DataError::Format(format!("bad merge line `{line}`")))?;
            merges.push((a.to_string(), b.to_string()));
        }
        Ok(BpeModel {
            merges,
            base_symbols,
        })
    }
}

fn apply_merge(syms: &mut Vec<String>, pair: &(String, String)) {
    let mut i = 0;
    while i + 1 < syms.len() {
        if syms[i] == pair.0 && syms[i + 1] == pair.1 {
            let merged = format!("{}{}", syms[i], syms[i + 1]);
            syms[i] = merged;
            syms.remove(i + 1);
        } else {
            i += 1;
        }
    }
}
