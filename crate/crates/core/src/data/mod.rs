//! Corpus ingestion, filtering, tokenization, vocabularies, templates,
//! and batching.
//!
//! The corpus format is line-delimited JSON; every line is a flat object
//! with keys `src`, `tgt`, `src_parse`, `tgt_parse`, the parses in
//! bracketed notation. Loading truncates all trees to the configured
//! depth (default 8) and then drops pairs whose text or node-level syntax
//! sequences exceed the length limit (default 50) or contain non-ASCII
//! characters; everything dropped is counted per reason in the filter
//! report.
//!
//! Note: with depth-8 trees a level vocabulary derived from data holds at
//! most 11 tokens (eight depths plus three specials); its size is always
//! taken from the data, never hard-coded.

mod bpe;
pub mod synthetic;

pub use bpe::{BpeModel, END_OF_WORD};

use crate::rng::Rng;
use crate::tree::{self, LinearParse, ParseTree, TreeError};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("corpus is empty after filtering")]
    EmptyCorpus,
    #[error("unknown {kind} token `{token}`")]
    UnknownToken { kind: &'static str, token: String },
    #[error("bpe: target vocab {target} is smaller than the base inventory {base}")]
    BpeTarget { target: usize, base: usize },
    #[error("vocabulary is frozen; cannot add `{0}`")]
    FrozenVocab(String),
    #[error("bad file format: {0}")]
    Format(String),
}

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;

const VOCAB_HEADER: &str = "syngen-vocab v1";

/// Frozen token↔id bijection with special tokens at the lowest ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    n_special: usize,
    has_unk: bool,
}

impl Vocab {
    /// Build from token counts: specials first, then tokens ordered by
    /// descending frequency, ties broken lexicographically.
    pub fn build(counts: &HashMap<String, usize>, with_unk: bool) -> Self {
        let mut tokens: Vec<String> = vec![PAD.into(), BOS.into(), EOS.into()];
        if with_unk {
            tokens.push(UNK.into());
        }
        let n_special = tokens.len();
        let mut ordered: Vec<(&String, &usize)> = counts.iter().collect();
        ordered.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        tokens.extend(ordered.into_iter().map(|(t, _)| t.clone()));
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab {
            tokens,
            index,
            n_special,
            has_unk: with_unk,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Lookup with UNK fallback; errors when the vocabulary is closed.
    pub fn id_or_unk(&self, token: &str, kind: &'static str) -> Result<usize, DataError> {
        match self.id(token) {
            Some(i) => Ok(i),
            None if self.has_unk => Ok(3),
            None => Err(DataError::UnknownToken {
                kind,
                token: token.to_string(),
            }),
        }
    }

    pub fn unk_id(&self) -> Option<usize> {
        self.has_unk.then_some(3)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn n_special(&self) -> usize {
        self.n_special
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < self.n_special
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{VOCAB_HEADER} specials={}", self.n_special);
        for t in &self.tokens {
            let _ = writeln!(out, "{t}");
        }
        out
    }

    pub fn from_file_string(text: &str) -> Result<Self, DataError> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let n_special: usize = header
            .strip_prefix(VOCAB_HEADER)
            .and_then(|rest| rest.trim().strip_prefix("specials=")?.parse().ok())
            .ok_or_else(|| DataError::Format(format!("bad vocab header `{header}`")))?;
        let tokens: Vec<String> = lines.map(str::to_string).collect();
        if tokens.len() < n_special {
            return Err(DataError::Format("vocab shorter than special count".into()));
        }
        let has_unk = n_special == 4;
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab {
            tokens,
            index,
            n_special,
            has_unk,
        })
    }
}

/// The three vocabularies a model pair needs.
#[derive(Debug, Clone)]
pub struct Vocabs {
    pub text: Vocab,
    pub node: Vocab,
    pub level: Vocab,
}

/// Tokenization mode for text.
#[derive(Debug, Clone)]
pub enum Tokenizer {
    Whitespace,
    Bpe(BpeModel),
}

impl Tokenizer {
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        match self {
            Tokenizer::Whitespace => text.split_whitespace().map(str::to_string).collect(),
            Tokenizer::Bpe(model) => model.encode_text(text),
        }
    }

    pub fn detokenize(&self, tokens: &[String]) -> String {
        match self {
            Tokenizer::Whitespace => tokens.join(" "),
            Tokenizer::Bpe(_) => BpeModel::decode(tokens),
        }
    }
}

/// One corpus line: a sentence pair with both parses.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ParaphraseRecord {
    pub src: String,
    pub tgt: String,
    pub src_parse: String,
    pub tgt_parse: String,
}

/// A record that survived filtering, with its derived products.
#[derive(Debug, Clone)]
pub struct LoadedRecord {
    pub src_text: String,
    pub tgt_text: String,
    pub src_tokens: Vec<String>,
    pub tgt_tokens: Vec<String>,
    /// Trees already truncated to the configured depth.
    pub src_tree: ParseTree,
    pub tgt_tree: ParseTree,
    pub src_lp: LinearParse,
    pub tgt_lp: LinearParse,
}

impl LoadedRecord {
    /// Re-serialize in the normalized form loading produces (canonical
    /// brackets, depth-truncated trees), so reloading rejects nothing.
    pub fn to_record(&self) -> ParaphraseRecord {
        ParaphraseRecord {
            src: self.src_text.clone(),
            tgt: self.tgt_text.clone(),
            src_parse: tree::to_bracketed(&self.src_tree),
            tgt_parse: tree::to_bracketed(&self.tgt_tree),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    Malformed,
    BadParse,
    NonAscii,
    TooLong,
}

impl RejectReason {
    pub fn label(self) -> &'static str {
        match self {
            RejectReason::Malformed => "malformed",
            RejectReason::BadParse => "bad-parse",
            RejectReason::NonAscii => "non-ascii",
            RejectReason::TooLong => "length",
        }
    }
}

/// Per-reason rejection counts plus per-line diagnostics.
#[derive(Debug, Clone, Default)]
pub struct FilterReport {
    pub total: usize,
    pub kept: usize,
    pub malformed: usize,
    pub bad_parse: usize,
    pub non_ascii: usize,
    pub too_long: usize,
    /// (1-based line number, reason, detail)
    pub rejections: Vec<(usize, RejectReason, String)>,
}

impl FilterReport {
    fn reject(&mut self, line: usize, reason: RejectReason, detail: String) {
        match reason {
            RejectReason::Malformed => self.malformed += 1,
            RejectReason::BadParse => self.bad_parse += 1,
            RejectReason::NonAscii => self.non_ascii += 1,
            RejectReason::TooLong => self.too_long += 1,
        }
        self.rejections.push((line, reason, detail));
    }

    pub fn to_report_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "syngen-filter v1");
        let _ = writeln!(out, "total: {}", self.total);
        let _ = writeln!(out, "kept: {}", self.kept);
        let _ = writeln!(out, "rejected malformed: {}", self.malformed);
        let _ = writeln!(out, "rejected bad-parse: {}", self.bad_parse);
        let _ = writeln!(out, "rejected non-ascii: {}", self.non_ascii);
        let _ = writeln!(out, "rejected length: {}", self.too_long);
        for (line, reason, detail) in &self.rejections {
            let _ = writeln!(out, "line {line}: {} ({detail})", reason.label());
        }
        out
    }
}

/// Knobs for [`load_corpus`]; defaults match the standard filters.
#[derive(Debug, Clone)]
pub struct LoadConfig {
    pub max_len: usize,
    pub max_tree_depth: u32,
    pub tokenizer: Tokenizer,
}

impl Default for LoadConfig {
    fn default() -> Self {
        LoadConfig {
            max_len: 50,
            max_tree_depth: 8,
            tokenizer: Tokenizer::Whitespace,
        }
    }
}

/// Load a JSONL corpus file. Bad lines are reported, not fatal.
pub fn load_corpus(
    path: impl AsRef<Path>,
    config: &LoadConfig,
) -> Result<(Vec<LoadedRecord>, FilterReport), DataError> {
    let text = std::fs::read_to_string(path)?;
    Ok(load_corpus_str(&text, config))
}

/// [`load_corpus`] over in-memory text.
pub fn load_corpus_str(text: &str, config: &LoadConfig) -> (Vec<LoadedRecord>, FilterReport) {
    let mut report = FilterReport::default();
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        report.total += 1;
        let parsed: Result<ParaphraseRecord, _> = serde_json::from_str(line);
        let record = match parsed {
            Ok(r) => r,
            Err(e) => {
                report.reject(line_no, RejectReason::Malformed, e.to_string());
                continue;
            }
        };
        match load_record(&record, config) {
            Ok(loaded) => {
                records.push(loaded);
                report.kept += 1;
            }
            Err((reason, detail)) => report.reject(line_no, reason, detail),
        }
    }
    (records, report)
}

fn load_record(
    record: &ParaphraseRecord,
    config: &LoadConfig,
) -> Result<LoadedRecord, (RejectReason, String)> {
    for (field, value) in [
        ("src", &record.src),
        ("tgt", &record.tgt),
        ("src_parse", &record.src_parse),
        ("tgt_parse", &record.tgt_parse),
    ] {
        if !value.is_ascii() {
            return Err((RejectReason::NonAscii, format!("field {field}")));
        }
        if field.ends_with("parse") {
            continue;
        }
        if value.trim().is_empty() {
            return Err((RejectReason::Malformed, format!("empty {field}")));
        }
    }
    let parse_field = |name: &str, text: &str| {
        tree::parse_bracketed(text)
            .map(|t| tree::truncate(&t, config.max_tree_depth))
            .map_err(|e| (RejectReason::BadParse, format!("{name}: {e}")))
    };
    let src_tree = parse_field("src_parse", &record.src_parse)?;
    let tgt_tree = parse_field("tgt_parse", &record.tgt_parse)?;
    let src_tokens = config.tokenizer.tokenize(&record.src);
    let tgt_tokens = config.tokenizer.tokenize(&record.tgt);
    let src_lp = tree::linearize(&src_tree);
    let tgt_lp = tree::linearize(&tgt_tree);
    for (what, len) in [
        ("src text", src_tokens.len()),
        ("tgt text", tgt_tokens.len()),
        ("src syntax", src_lp.len()),
        ("tgt syntax", tgt_lp.len()),
    ] {
        if len > config.max_len {
            return Err((
                RejectReason::TooLong,
                format!("{what} has {len} tokens (limit {})", config.max_len),
            ));
        }
    }
    Ok(LoadedRecord {
        src_text: record.src.clone(),
        tgt_text: record.tgt.clone(),
        src_tokens,
        tgt_tokens,
        src_tree,
        tgt_tree,
        src_lp,
        tgt_lp,
    })
}

/// Build the text/node/level vocabularies from loaded records. The text
/// vocabulary carries UNK; the syntax vocabularies are closed.
pub fn build_vocabs(records: &[LoadedRecord]) -> Vocabs {
    let mut text_counts = HashMap::new();
    let mut node_counts = HashMap::new();
    let mut level_counts = HashMap::new();
    for r in records {
        for t in r.src_tokens.iter().chain(r.tgt_tokens.iter()) {
            *text_counts.entry(t.clone()).or_insert(0) += 1;
        }
        for lp in [&r.src_lp, &r.tgt_lp] {
            for n in &lp.nodes {
                *node_counts.entry(n.clone()).or_insert(0) += 1;
            }
            for l in &lp.levels {
                *level_counts.entry(l.to_string()).or_insert(0) += 1;
            }
        }
    }
    Vocabs {
        text: Vocab::build(&text_counts, true),
        node: Vocab::build(&node_counts, false),
        level: Vocab::build(&level_counts, false),
    }
}

/// The template parse: top `depth` levels of the target parse, linearized.
pub fn make_template(tgt_tree: &ParseTree, depth: u32) -> LinearParse {
    tree::linearize(&tree::truncate(tgt_tree, depth))
}

/// A parse with node and level token ids plus the raw level values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedParse {
    pub node_ids: Vec<usize>,
    pub level_ids: Vec<usize>,
    pub levels: Vec<u32>,
}

impl EncodedParse {
    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }
}

/// Encode a linear parse against closed syntax vocabularies.
pub fn encode_parse(lp: &LinearParse, vocabs: &Vocabs) -> Result<EncodedParse, DataError> {
    let node_ids = lp
        .nodes
        .iter()
        .map(|n| {
            vocabs.node.id(n).ok_or(DataError::UnknownToken {
                kind: "parse node",
                token: n.clone(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let level_ids = lp
        .levels
        .iter()
        .map(|l| {
            vocabs.level.id(&l.to_string()).ok_or(DataError::UnknownToken {
                kind: "level",
                token: l.to_string(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EncodedParse {
        node_ids,
        level_ids,
        levels: lp.levels.clone(),
    })
}

/// Encode text tokens with UNK fallback.
pub fn encode_text(tokens: &[String], vocab: &Vocab) -> Vec<usize> {
    tokens
        .iter()
        .map(|t| vocab.id(t).or(vocab.unk_id()).expect("text vocab has UNK"))
        .collect()
}

/// Rebuild the symbol-level parse from an encoded one.
pub fn lp_of_encoded(p: &EncodedParse, vocabs: &Vocabs) -> LinearParse {
    LinearParse {
        nodes: p
            .node_ids
            .iter()
            .map(|&i| vocabs.node.token(i).to_string())
            .collect(),
        levels: p.levels.clone(),
    }
}

/// A record encoded to ids, ready for batching.
#[derive(Debug, Clone)]
pub struct EncodedRecord {
    pub src_text: Vec<usize>,
    pub tgt_text: Vec<usize>,
    pub src_parse: EncodedParse,
    pub tgt_parse: EncodedParse,
    pub template: EncodedParse,
    /// Target linear parse (symbols), kept for decoding comparisons.
    pub tgt_lp: LinearParse,
    pub tgt_tokens: Vec<String>,
}

pub fn encode_records(
    records: &[LoadedRecord],
    vocabs: &Vocabs,
    template_depth: u32,
) -> Result<Vec<EncodedRecord>, DataError> {
    records
        .iter()
        .map(|r| {
            Ok(EncodedRecord {
                src_text: encode_text(&r.src_tokens, &vocabs.text),
                tgt_text: encode_text(&r.tgt_tokens, &vocabs.text),
                src_parse: encode_parse(&r.src_lp, vocabs)?,
                tgt_parse: encode_parse(&r.tgt_lp, vocabs)?,
                template: encode_parse(&make_template(&r.tgt_tree, template_depth), vocabs)?,
                tgt_lp: r.tgt_lp.clone(),
                tgt_tokens: r.tgt_tokens.clone(),
            })
        })
        .collect()
}

/// Replace every record's guidance parse (its target parse) with a bare
/// root: the "no syntactic information" ablation.
pub fn replace_guides_with_root(records: &mut [EncodedRecord]) {
    for r in records {
        let root_node = r.tgt_parse.node_ids[0];
        let root_level = r.tgt_parse.level_ids[0];
        r.tgt_parse = EncodedParse {
            node_ids: vec![root_node],
            level_ids: vec![root_level],
            levels: vec![1],
        };
    }
}

/// A sequence padded to its batch maximum; `real[i]` is false exactly at
/// padded positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Padded {
    pub ids: Vec<usize>,
    pub real: Vec<bool>,
}

fn pad_to(ids: &[usize], width: usize) -> Padded {
    let mut out = ids.to_vec();
    let mut real = vec![true; ids.len()];
    out.resize(width, PAD_ID);
    real.resize(width, false);
    Padded { ids: out, real }
}

/// Teacher-forcing frame: decoder input `BOS + y` and target `y + EOS`,
/// both padded to the batch maximum.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Framed {
    pub input: Padded,
    pub target: Padded,
}

fn frame_to(ids: &[usize], width: usize) -> Framed {
    let mut input = Vec::with_capacity(ids.len() + 1);
    input.push(BOS_ID);
    input.extend_from_slice(ids);
    let mut target = ids.to_vec();
    target.push(EOS_ID);
    Framed {
        input: pad_to(&input, width),
        target: pad_to(&target, width),
    }
}

/// One record of an expander batch, padded to the batch maxima.
#[derive(Debug, Clone)]
pub struct ExpanderItem {
    pub record: usize,
    pub src_nodes: Padded,
    pub src_levels: Padded,
    pub tmpl_nodes: Padded,
    pub tmpl_levels: Padded,
    pub dec_nodes: Framed,
    pub dec_levels: Framed,
}

/// One record of a generator batch, padded to the batch maxima.
#[derive(Debug, Clone)]
pub struct GeneratorItem {
    pub record: usize,
    pub guide_nodes: Padded,
    pub guide_levels: Padded,
    /// Raw level values of the unpadded guide, for path computation.
    pub guide_level_values: Vec<u32>,
    pub src_text: Padded,
    pub dec_text: Framed,
}

/// Shuffle record indices for one epoch, deterministically in
/// `(seed, epoch)`, and cut them into batches.
pub fn epoch_order(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Rng::new(seed ^ (epoch as u64).wrapping_mul(0x517c_c1b7_2722_0a95));
    rng.shuffle(&mut order);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Padded expander batches for one epoch.
pub fn make_expander_batches(
    records: &[EncodedRecord],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<Vec<ExpanderItem>> {
    epoch_order(records.len(), batch_size, seed, epoch)
        .into_iter()
        .map(|batch| {
            let w_src = batch.iter().map(|&i| records[i].src_parse.len()).max().unwrap_or(0);
            let w_tmpl = batch.iter().map(|&i| records[i].template.len()).max().unwrap_or(0);
            let w_dec = batch.iter().map(|&i| records[i].tgt_parse.len() + 1).max().unwrap_or(1);
            batch
                .into_iter()
                .map(|i| {
                    let r = &records[i];
                    ExpanderItem {
                        record: i,
                        src_nodes: pad_to(&r.src_parse.node_ids, w_src),
                        src_levels: pad_to(&r.src_parse.level_ids, w_src),
                        tmpl_nodes: pad_to(&r.template.node_ids, w_tmpl),
                        tmpl_levels: pad_to(&r.template.level_ids, w_tmpl),
                        dec_nodes: frame_to(&r.tgt_parse.node_ids, w_dec),
                        dec_levels: frame_to(&r.tgt_parse.level_ids, w_dec),
                    }
                })
                .collect()
        })
        .collect()
}

/// Padded generator batches for one epoch. The guide is the full target
/// parse (training-time guidance).
pub fn make_generator_batches(
    records: &[EncodedRecord],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<Vec<GeneratorItem>> {
    epoch_order(records.len(), batch_size, seed, epoch)
        .into_iter()
        .map(|batch| {
            let w_guide = batch.iter().map(|&i| records[i].tgt_parse.len()).max().unwrap_or(0);
            let w_src = batch.iter().map(|&i| records[i].src_text.len()).max().unwrap_or(0);
            let w_dec = batch.iter().map(|&i| records[i].tgt_text.len() + 1).max().unwrap_or(1);
            batch
                .into_iter()
                .map(|i| {
                    let r = &records[i];
                    GeneratorItem {
                        record: i,
                        guide_nodes: pad_to(&r.tgt_parse.node_ids, w_guide),
                        guide_levels: pad_to(&r.tgt_parse.level_ids, w_guide),
                        guide_level_values: r.tgt_parse.levels.clone(),
                        src_text: pad_to(&r.src_text, w_src),
                        dec_text: frame_to(&r.tgt_text, w_dec),
                    }
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(src: &str, tgt: &str, sp: &str, tp: &str) -> String {
        serde_json::to_string(&ParaphraseRecord {
            src: src.into(),
            tgt: tgt.into(),
            src_parse: sp.into(),
            tgt_parse: tp.into(),
        })
        .unwrap()
    }

    #[test]
    fn drops_overlong_target() {
        let many = vec!["w"; 51].join(" ");
        let text = [
            line("a b", &many, "(S(A)(B))", "(S(A))"),
            line("a b", "c d", "(S(A)(B))", "(S(C)(D))"),
        ]
        .join("\n");
        let (records, report) = load_corpus_str(&text, &LoadConfig::default());
        assert_eq!(records.len(), 1);
        assert_eq!(report.too_long, 1);
        assert_eq!(report.rejections[0].1, RejectReason::TooLong);
    }

    #[test]
    fn drops_non_ascii() {
        let text = line("caf\u{e9} au lait", "coffee", "(S(A))", "(S(B))");
        let (records, report) = load_corpus_str(&text, &LoadConfig::default());
        assert!(records.is_empty());
        assert_eq!(report.non_ascii, 1);
    }

    #[test]
    fn truncates_deep_parse_to_depth_limit() {
        // a 9-level chain: levels 9 nodes removed
        let deep = "(L1(L2(L3(L4(L5(L6(L7(L8(L9)))))))))";
        let text = line("a", "b", deep, deep);
        let (records, report) = load_corpus_str(&text, &LoadConfig::default());
        assert_eq!(report.kept, 1);
        assert_eq!(records[0].src_tree.depth(), 8);
        assert_eq!(records[0].src_lp.len(), 8);
    }

    #[test]
    fn malformed_lines_are_reported_with_numbers() {
        let good = line("a", "b", "(S(A))", "(S(B))");
        let text = format!("not json\n{good}\n(S", );
        let (records, report) = load_corpus_str(&text, &LoadConfig::default());
        assert_eq!(records.len(), 1);
        assert_eq!(report.malformed, 2);
        assert_eq!(report.rejections[0].0, 1);
        assert_eq!(report.rejections[1].0, 3);
    }

    #[test]
    fn filtering_is_idempotent() {
        let corpus = synthetic::corpus(16, 99);
        let text: String = corpus
            .iter()
            .map(|r| serde_json::to_string(r).unwrap() + "\n")
            .collect();
        let (records, report1) = load_corpus_str(&text, &LoadConfig::default());
        assert_eq!(report1.kept, 16);
        let round: String = records
            .iter()
            .map(|r| serde_json::to_string(&r.to_record()).unwrap() + "\n")
            .collect();
        let (_, report2) = load_corpus_str(&round, &LoadConfig::default());
        assert_eq!(report2.kept, 16);
        assert_eq!(report2.total - report2.kept, 0);
    }

    #[test]
    fn vocab_ordering_is_deterministic_and_round_trips() {
        let mut counts = HashMap::new();
        for (t, c) in [("b", 3), ("a", 3), ("z", 9)] {
            counts.insert(t.to_string(), c);
        }
        let v = Vocab::build(&counts, true);
        assert_eq!(v.token(0), PAD);
        assert_eq!(v.token(3), UNK);
        assert_eq!(v.token(4), "z");
        assert_eq!(v.token(5), "a"); // freq tie broken lexicographically
        assert_eq!(v.token(6), "b");
        let reloaded = Vocab::from_file_string(&v.to_file_string()).unwrap();
        assert_eq!(v, reloaded);
        for id in 0..v.len() {
            assert_eq!(v.id(v.token(id)), Some(id));
        }
    }

    #[test]
    fn unknown_text_maps_to_unk_but_nodes_error() {
        let mut counts = HashMap::new();
        counts.insert("hello".to_string(), 1);
        let text = Vocab::build(&counts, true);
        let node = Vocab::build(&counts, false);
        assert_eq!(text.id_or_unk("world", "text").unwrap(), 3);
        assert!(matches!(
            node.id_or_unk("world", "parse node"),
            Err(DataError::UnknownToken { .. })
        ));
    }

    #[test]
    fn level_vocab_stays_within_eleven_for_depth_eight() {
        let corpus = synthetic::corpus(32, 5);
        let text: String = corpus
            .iter()
            .map(|r| serde_json::to_string(r).unwrap() + "\n")
            .collect();
        let (records, _) = load_corpus_str(&text, &LoadConfig::default());
        let vocabs = build_vocabs(&records);
        assert!(vocabs.level.len() <= 11, "{}", vocabs.level.len());
    }

    #[test]
    fn template_of_depth_three() {
        let t = tree::parse_bracketed("(S(NP(PRP))(VP(VBD)(NP(DT)(NN))))").unwrap();
        let tmpl = make_template(&t, 3);
        assert_eq!(tmpl.nodes, ["S", "NP", "PRP", "VP", "VBD", "NP"]);
        assert_eq!(tmpl.levels, [1, 2, 3, 2, 3, 3]);
        let root = make_template(&t, 1);
        assert_eq!(root.nodes, ["S"]);
    }

    #[test]
    fn tokenize_round_trip() {
        let tok = Tokenizer::Whitespace;
        let s = "i ate an apple";
        assert_eq!(tok.tokenize(s), ["i", "ate", "an", "apple"]);
        assert_eq!(tok.detokenize(&tok.tokenize(s)), s);

        let model = BpeModel::train(&[s.to_string()], 30).unwrap();
        let tok = Tokenizer::Bpe(model);
        assert_eq!(tok.detokenize(&tok.tokenize(s)), s);
    }

    #[test]
    fn batches_pad_and_frame() {
        let corpus = synthetic::corpus(8, 3);
        let text: String = corpus
            .iter()
            .map(|r| serde_json::to_string(r).unwrap() + "\n")
            .collect();
        let (records, _) = load_corpus_str(&text, &LoadConfig::default());
        let vocabs = build_vocabs(&records);
        let encoded = encode_records(&records, &vocabs, 3).unwrap();

        // batch of one has no padding
        let single = make_expander_batches(&encoded[..1], 4, 7, 0);
        let item = &single[0][0];
        assert!(item.src_nodes.real.iter().all(|&b| b));

        let batches = make_generator_batches(&encoded, 4, 7, 0);
        for batch in &batches {
            for item in batch {
                // mask false exactly at padded positions
                for (j, &real) in item.src_text.real.iter().enumerate() {
                    assert_eq!(real, j < item.src_text.real.iter().filter(|&&b| b).count());
                    if !real {
                        assert_eq!(item.src_text.ids[j], PAD_ID);
                    }
                }
                // framing: input starts with BOS, target ends with EOS
                assert_eq!(item.dec_text.input.ids[0], BOS_ID);
                let n_real = item.dec_text.target.real.iter().filter(|&&b| b).count();
                assert_eq!(item.dec_text.target.ids[n_real - 1], EOS_ID);
            }
        }

        // identical seed, identical order
        let a = epoch_order(8, 3, 42, 1);
        let b = epoch_order(8, 3, 42, 1);
        assert_eq!(a, b);
        let c = epoch_order(8, 3, 42, 2);
        assert_ne!(a, c);
    }
}
