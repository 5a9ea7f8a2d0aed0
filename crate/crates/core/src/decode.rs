//! Greedy autoregressive inference for both models and the two-stage
//! paraphrase pipeline.
//!
//! The expander decodes a (node, level) pair per step by taking each
//! head's argmax independently. Level logits are masked so only values
//! in `1..=min(prev_level + 1, max_tree_depth)` are eligible (just 1 at
//! the first step), which makes every emitted sequence a valid preorder
//! level sequence by construction: the output always delinearizes.
//! Special tokens are never emitted; decoding ends at the EOS node or at
//! the length cap, whichever comes first.

use crate::data::{Vocabs, BOS_ID, EOS_ID, PAD_ID};
use crate::model::{ExpanderModel, GeneratorModel, ParseInput, Result, SeqInput};
use crate::tensor::Graph;
use crate::tree::LinearParse;

/// Argmax over an explicit candidate id set; ties go to the lowest id.
fn argmax_over(row: &[f64], candidates: impl Iterator<Item = usize>) -> Option<usize> {
    let mut best: Option<usize> = None;
    for id in candidates {
        match best {
            None => best = Some(id),
            Some(b) if row[id] > row[b] => best = Some(id),
            _ => {}
        }
    }
    best
}

fn expand_from_prefix(
    model: &ExpanderModel,
    x_src: &LinearParse,
    x_tmpl: &LinearParse,
    vocabs: &Vocabs,
    max_len: usize,
    forced: &LinearParse,
) -> Result<LinearParse> {
    for lp in [x_src, x_tmpl] {
        if !crate::tree::validate_levels(&lp.levels) {
            return Err(crate::tree::TreeError::InvalidLevels {
                position: 0,
                message: "input parse has an invalid level sequence".into(),
            }
            .into());
        }
    }
    let src = crate::data::encode_parse(x_src, vocabs)?;
    let tmpl = crate::data::encode_parse(x_tmpl, vocabs)?;
    let forced_enc = crate::data::encode_parse(forced, vocabs)?;
    let max_len = max_len.min(model.config.max_len);

    let mut g = Graph::new();
    let (src_enc, tmpl_enc) = model.encode(
        &mut g,
        ParseInput::unpadded(&src),
        ParseInput::unpadded(&tmpl),
    )?;

    let mut node_ids = vec![BOS_ID];
    let mut level_ids = vec![BOS_ID];
    let mut out = LinearParse {
        nodes: forced.nodes.clone(),
        levels: forced.levels.clone(),
    };
    node_ids.extend_from_slice(&forced_enc.node_ids);
    level_ids.extend_from_slice(&forced_enc.level_ids);

    while out.len() < max_len {
        let (node_logits, level_logits) = model.decode_prefix(
            &mut g,
            src_enc,
            tmpl_enc,
            None,
            None,
            ParseInput {
                node_ids: &node_ids,
                level_ids: &level_ids,
                real: None,
            },
        )?;
        let t = node_ids.len() - 1;
        let nv = model.config.node_vocab_size;
        let lv = model.config.level_vocab_size;
        let node_row = &g.value(node_logits)[t * nv..(t + 1) * nv];
        let level_row = &g.value(level_logits)[t * lv..(t + 1) * lv];

        // PAD and BOS are never emitted; EOS only once something exists
        let first = out.is_empty();
        let node_pick = argmax_over(
            node_row,
            (0..nv).filter(|&id| id != PAD_ID && id != BOS_ID && !(first && id == EOS_ID)),
        )
        .expect("node vocabulary has non-special tokens");
        if node_pick == EOS_ID {
            break;
        }

        // level 1 is the root alone; later steps range over 2..=prev+1
        let (min_level, max_level) = if first {
            (1, 1)
        } else {
            let prev = *out.levels.last().expect("non-empty after first step");
            (2, (prev + 1).min(model.config.max_tree_depth))
        };
        // a vocabulary may lack deeper levels entirely; then the tree
        // cannot grow further and the (valid) prefix is final
        let Some(level_pick) = argmax_over(
            level_row,
            (min_level..=max_level).filter_map(|v| vocabs.level.id(&v.to_string())),
        ) else {
            break;
        };
        let level_value: u32 = vocabs
            .level
            .token(level_pick)
            .parse()
            .expect("level tokens are numerals");

        out.nodes.push(vocabs.node.token(node_pick).to_string());
        out.levels.push(level_value);
        node_ids.push(node_pick);
        level_ids.push(level_pick);
    }
    Ok(out)
}

/// Greedily expand a template parse into a full parse, guided by the
/// source parse. The result always satisfies the level-validity
/// invariant and is never empty.
pub fn expand_syntax(
    model: &ExpanderModel,
    x_src: &LinearParse,
    x_tmpl: &LinearParse,
    vocabs: &Vocabs,
    max_len: usize,
) -> Result<LinearParse> {
    let empty = LinearParse {
        nodes: vec![],
        levels: vec![],
    };
    expand_from_prefix(model, x_src, x_tmpl, vocabs, max_len, &empty)
}

fn generate_from_prefix(
    model: &GeneratorModel,
    x_guide: &LinearParse,
    s_src: &[String],
    vocabs: &Vocabs,
    max_len: usize,
    forced: &[String],
) -> Result<Vec<String>> {
    let guide = crate::data::encode_parse(x_guide, vocabs)?;
    let src_ids = crate::data::encode_text(s_src, &vocabs.text);
    let max_len = max_len.min(model.config.max_len);

    let mut g = Graph::new();
    let (syn_enc, txt_enc) = model.encode(
        &mut g,
        ParseInput::unpadded(&guide),
        &guide.levels,
        SeqInput::unpadded(&src_ids),
    )?;

    let mut prefix = vec![BOS_ID];
    prefix.extend(crate::data::encode_text(forced, &vocabs.text));
    let mut out: Vec<String> = forced.to_vec();

    while out.len() < max_len {
        let logits = model.decode_prefix(
            &mut g,
            syn_enc,
            txt_enc,
            None,
            None,
            SeqInput {
                ids: &prefix,
                real: None,
            },
        )?;
        let t = prefix.len() - 1;
        let v = model.config.text_vocab_size;
        let row = &g.value(logits)[t * v..(t + 1) * v];
        let pick = argmax_over(row, (0..v).filter(|&id| id != PAD_ID && id != BOS_ID))
            .expect("text vocabulary has non-special tokens");
        if pick == EOS_ID {
            break;
        }
        out.push(vocabs.text.token(pick).to_string());
        prefix.push(pick);
    }
    Ok(out)
}

/// Greedily generate target text from syntax guidance and source text.
/// The output excludes BOS/EOS and never exceeds `max_len` tokens.
pub fn generate_text(
    model: &GeneratorModel,
    x_guide: &LinearParse,
    s_src: &[String],
    vocabs: &Vocabs,
    max_len: usize,
) -> Result<Vec<String>> {
    generate_from_prefix(model, x_guide, s_src, vocabs, max_len, &[])
}

/// The full two-stage pipeline: expand the template to a full parse,
/// then generate text under its guidance. Returns both the sentence and
/// the intermediate expanded parse.
pub fn pipeline_paraphrase(
    expander: &ExpanderModel,
    generator: &GeneratorModel,
    s_src: &[String],
    x_src: &LinearParse,
    x_tmpl: &LinearParse,
    vocabs: &Vocabs,
    max_len: usize,
) -> Result<(Vec<String>, LinearParse)> {
    let expanded = expand_syntax(expander, x_src, x_tmpl, vocabs, max_len)?;
    let text = generate_text(generator, &expanded, s_src, vocabs, max_len)?;
    Ok((text, expanded))
}

/// Guidance used by evaluation and ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceMode {
    /// Ground-truth target parse.
    Target,
    /// Parse expanded from the template by the expander model.
    Expanded,
    /// The bare template, fed directly without expansion.
    TemplateDirect,
    /// A single-root stub: no syntactic information.
    NoneSyntax,
    /// Source text replaced by an empty sequence.
    NoneText,
}

impl GuidanceMode {
    pub fn parse(name: &str) -> std::result::Result<Self, String> {
        match name {
            "target" => Ok(GuidanceMode::Target),
            "expanded" => Ok(GuidanceMode::Expanded),
            "template-direct" => Ok(GuidanceMode::TemplateDirect),
            "none-syntax" => Ok(GuidanceMode::NoneSyntax),
            "none-text" => Ok(GuidanceMode::NoneText),
            other => Err(format!(
                "unknown guidance mode `{other}` (expected target, expanded, template-direct, none-syntax, none-text)"
            )),
        }
    }
}

/// The stand-in guide for `none-syntax`: the root alone.
pub fn root_stub(x: &LinearParse) -> LinearParse {
    LinearParse {
        nodes: vec![x.nodes.first().cloned().unwrap_or_else(|| "S".to_string())],
        levels: vec![1],
    }
}

/// The stand-in source for `none-text`: a bare EOS token, carrying no
/// content but keeping the encoder non-empty.
pub fn empty_source() -> Vec<String> {
    vec![crate::data::EOS.to_string()]
}

impl std::fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            GuidanceMode::Target => "target",
            GuidanceMode::Expanded => "expanded",
            GuidanceMode::TemplateDirect => "template-direct",
            GuidanceMode::NoneSyntax => "none-syntax",
            GuidanceMode::NoneText => "none-text",
        };
        f.write_str(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocabs, encode_records, load_corpus_str, synthetic, LoadConfig};
    use crate::model::ModelConfig;
    use crate::tree;

    fn setup(n: usize, seed: u64) -> (Vec<crate::data::EncodedRecord>, Vocabs, ModelConfig) {
        let corpus = synthetic::corpus(n, seed);
        let text: String = corpus
            .iter()
            .map(|r| serde_json::to_string(r).unwrap() + "\n")
            .collect();
        let (records, _) = load_corpus_str(&text, &LoadConfig::default());
        let vocabs = build_vocabs(&records);
        let cfg = ModelConfig {
            d_m: 16,
            d_k: 8,
            d_v: 8,
            h_enc: 2,
            h1: 1,
            h2: 1,
            n1: 1,
            n2: 1,
            d_ff: 32,
            node_vocab_size: vocabs.node.len(),
            level_vocab_size: vocabs.level.len(),
            text_vocab_size: vocabs.text.len(),
            ..ModelConfig::default()
        };
        let encoded = encode_records(&records, &vocabs, 3).unwrap();
        (encoded, vocabs, cfg)
    }

    fn lp(records: &[crate::data::EncodedRecord], i: usize) -> LinearParse {
        records[i].tgt_lp.clone()
    }

    #[test]
    fn untrained_expansions_are_always_valid_trees() {
        let (records, vocabs, cfg) = setup(12, 50);
        for seed in 0..4 {
            let model = ExpanderModel::new(cfg.clone(), seed).unwrap();
            for r in records.iter().take(6) {
                let src = lp_of(&r.src_parse, &vocabs);
                let tmpl = lp_of(&r.template, &vocabs);
                let out = expand_syntax(&model, &src, &tmpl, &vocabs, 50).unwrap();
                assert!(!out.is_empty());
                assert!(tree::validate_levels(&out.levels), "{:?}", out.levels);
                assert_eq!(out.levels[0], 1, "first level is forced to 1");
                tree::delinearize(&out).expect("decode-mask guarantees a tree");
            }
        }
    }

    fn lp_of(p: &crate::data::EncodedParse, vocabs: &Vocabs) -> LinearParse {
        LinearParse {
            nodes: p.node_ids.iter().map(|&i| vocabs.node.token(i).to_string()).collect(),
            levels: p.levels.clone(),
        }
    }

    #[test]
    fn decoding_is_deterministic_and_prefix_consistent() {
        let (records, vocabs, cfg) = setup(6, 51);
        let model = ExpanderModel::new(cfg.clone(), 9).unwrap();
        let src = lp_of(&records[0].src_parse, &vocabs);
        let tmpl = lp_of(&records[0].template, &vocabs);
        let a = expand_syntax(&model, &src, &tmpl, &vocabs, 50).unwrap();
        let b = expand_syntax(&model, &src, &tmpl, &vocabs, 50).unwrap();
        assert_eq!(a, b);

        // force the first half and re-decode: same continuation
        let k = a.len() / 2;
        let forced = LinearParse {
            nodes: a.nodes[..k].to_vec(),
            levels: a.levels[..k].to_vec(),
        };
        let c = expand_from_prefix(&model, &src, &tmpl, &vocabs, 50, &forced).unwrap();
        assert_eq!(a, c);

        let gen = GeneratorModel::new(cfg, 10).unwrap();
        let guide = lp(&records, 0);
        let src_text: Vec<String> = vec!["alice".into(), "sees".into(), "bob".into(), "dave".into()];
        let t1 = generate_text(&gen, &guide, &src_text, &vocabs, 50).unwrap();
        let t2 = generate_text(&gen, &guide, &src_text, &vocabs, 50).unwrap();
        assert_eq!(t1, t2);
        assert!(t1.len() <= 50);
        let j = t1.len() / 2;
        let t3 = generate_from_prefix(&gen, &guide, &src_text, &vocabs, 50, &t1[..j]).unwrap();
        assert_eq!(t1, t3);
    }

    #[test]
    fn max_len_caps_output() {
        let (records, vocabs, cfg) = setup(6, 52);
        let model = ExpanderModel::new(cfg, 11).unwrap();
        let src = lp_of(&records[1].src_parse, &vocabs);
        let tmpl = lp_of(&records[1].template, &vocabs);
        let out = expand_syntax(&model, &src, &tmpl, &vocabs, 5).unwrap();
        assert!(out.len() <= 5 && !out.is_empty());
        assert!(tree::validate_levels(&out.levels), "truncation keeps validity");
    }

    #[test]
    fn pipeline_returns_the_expansion_it_used() {
        let (records, vocabs, cfg) = setup(6, 53);
        let expander = ExpanderModel::new(cfg.clone(), 12).unwrap();
        let generator = GeneratorModel::new(cfg, 13).unwrap();
        let src_text: Vec<String> = vec!["bob".into(), "helps".into(), "carol".into(), "owl".into()];
        let src = lp_of(&records[2].src_parse, &vocabs);
        let tmpl = lp_of(&records[2].template, &vocabs);
        let (text, expanded) = pipeline_paraphrase(
            &expander, &generator, &src_text, &src, &tmpl, &vocabs, 50,
        )
        .unwrap();
        let solo = expand_syntax(&expander, &src, &tmpl, &vocabs, 50).unwrap();
        assert_eq!(expanded, solo);
        assert!(!text.iter().any(|t| t == crate::data::BOS || t == crate::data::EOS));
    }

    #[test]
    fn guidance_mode_parsing() {
        assert_eq!(GuidanceMode::parse("target").unwrap(), GuidanceMode::Target);
        assert_eq!(
            GuidanceMode::parse("none-syntax").unwrap(),
            GuidanceMode::NoneSyntax
        );
        assert!(GuidanceMode::parse("bogus").is_err());
        assert_eq!(GuidanceMode::Expanded.to_string(), "expanded");
    }

    #[test]
    fn root_stub_keeps_only_the_root() {
        let full = LinearParse {
            nodes: vec!["S".into(), "NP".into()],
            levels: vec![1, 2],
        };
        let stub = root_stub(&full);
        assert_eq!(stub.nodes, vec!["S"]);
        assert_eq!(stub.levels, vec![1]);
    }
}
