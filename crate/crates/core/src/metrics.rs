//! Evaluation metrics: the tree edit distance family and sentence BLEU.
//!
//! TED is the minimal number of unit-cost node insertions, deletions,
//! and relabelings turning one ordered labeled tree into another,
//! computed with the Zhang-Shasha dynamic program. N-TED divides by a
//! tree's node count — the reference tree by default, so the denominator
//! stays constant across compared systems — and N-TED-ℓ truncates both
//! trees to ℓ levels first. BLEU is sentence-level with epsilon-smoothed
//! modified n-gram precisions.

use crate::par;
use crate::tree::{self, LinearParse, ParseTree, TreeError};
use std::collections::HashMap;
use std::fmt::Write as _;

/// Zhang-Shasha preprocessing: postorder labels, leftmost leaf
/// descendants, and keyroots.
#[derive(Debug, Clone)]
pub struct PreparedTree {
    labels: Vec<String>,
    lmld: Vec<usize>,
    keyroots: Vec<usize>,
}

impl PreparedTree {
    pub fn new(tree: &ParseTree) -> Self {
        let mut labels = Vec::with_capacity(tree.node_count());
        let mut lmld = Vec::with_capacity(tree.node_count());
        fn walk(t: &ParseTree, labels: &mut Vec<String>, lmld: &mut Vec<usize>) -> usize {
            let mut first_leaf = None;
            for c in &t.children {
                let leaf = walk(c, labels, lmld);
                first_leaf.get_or_insert(leaf);
            }
            let idx = labels.len();
            labels.push(t.label.clone());
            let leaf = first_leaf.unwrap_or(idx);
            lmld.push(leaf);
            leaf
        }
        walk(tree, &mut labels, &mut lmld);
        // the largest postorder index for each distinct leftmost leaf
        let mut last: HashMap<usize, usize> = HashMap::new();
        for (i, &l) in lmld.iter().enumerate() {
            last.insert(l, i);
        }
        let mut keyroots: Vec<usize> = last.into_values().collect();
        keyroots.sort_unstable();
        PreparedTree {
            labels,
            lmld,
            keyroots,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Unit-cost tree edit distance between prepared trees.
pub fn zs_distance(a: &PreparedTree, b: &PreparedTree) -> usize {
    let (n, m) = (a.len(), b.len());
    let mut td = vec![0usize; n * m];
    let mut fd = vec![0usize; (n + 1) * (m + 1)];
    for &kr1 in &a.keyroots {
        for &kr2 in &b.keyroots {
            let li = a.lmld[kr1];
            let lj = b.lmld[kr2];
            let rows = kr1 - li + 2;
            let cols = kr2 - lj + 2;
            let at = |di: usize, dj: usize| di * cols + dj;
            fd[at(0, 0)] = 0;
            for di in 1..rows {
                fd[at(di, 0)] = fd[at(di - 1, 0)] + 1;
            }
            for dj in 1..cols {
                fd[at(0, dj)] = fd[at(0, dj - 1)] + 1;
            }
            for di in 1..rows {
                for dj in 1..cols {
                    let i1 = li + di - 1;
                    let j1 = lj + dj - 1;
                    let del = fd[at(di - 1, dj)] + 1;
                    let ins = fd[at(di, dj - 1)] + 1;
                    let best = if a.lmld[i1] == li && b.lmld[j1] == lj {
                        let relabel = usize::from(a.labels[i1] != b.labels[j1]);
                        let sub = fd[at(di - 1, dj - 1)] + relabel;
                        let v = del.min(ins).min(sub);
                        td[i1 * m + j1] = v;
                        v
                    } else {
                        let sub = fd[at(a.lmld[i1] - li, b.lmld[j1] - lj)] + td[i1 * m + j1];
                        del.min(ins).min(sub)
                    };
                    fd[at(di, dj)] = best;
                }
            }
        }
    }
    td[(n - 1) * m + (m - 1)]
}

/// Minimal insert/delete/relabel edit count between ordered labeled
/// trees. Symmetric; zero iff the trees are equal.
pub fn tree_edit_distance(t1: &ParseTree, t2: &ParseTree) -> usize {
    zs_distance(&PreparedTree::new(t1), &PreparedTree::new(t2))
}

/// Which node count normalizes N-TED.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NtedDenominator {
    /// The reference tree `t2` (constant across compared systems).
    #[default]
    Reference,
    /// The hypothesis tree `t1`.
    Hypothesis,
    /// Whichever tree is larger.
    Max,
}

impl NtedDenominator {
    pub fn parse(name: &str) -> Result<Self, String> {
        match name {
            "reference" => Ok(NtedDenominator::Reference),
            "hypothesis" => Ok(NtedDenominator::Hypothesis),
            "max" => Ok(NtedDenominator::Max),
            other => Err(format!(
                "unknown N-TED denominator `{other}` (expected reference, hypothesis, max)"
            )),
        }
    }
}

/// TED normalized by the chosen tree's node count.
pub fn n_ted_with(t1: &ParseTree, t2: &ParseTree, denom: NtedDenominator) -> f64 {
    let ted = tree_edit_distance(t1, t2) as f64;
    let d = match denom {
        NtedDenominator::Reference => t2.node_count(),
        NtedDenominator::Hypothesis => t1.node_count(),
        NtedDenominator::Max => t1.node_count().max(t2.node_count()),
    };
    ted / d as f64
}

/// TED divided by the reference tree's node count.
pub fn n_ted(t1: &ParseTree, t2: &ParseTree) -> f64 {
    n_ted_with(t1, t2, NtedDenominator::Reference)
}

/// TED and N-TED after truncating both trees to `level` levels.
pub fn ted_at_level(t1: &ParseTree, t2: &ParseTree, level: u32) -> (usize, f64) {
    assert!(level >= 1);
    let a = tree::truncate(t1, level);
    let b = tree::truncate(t2, level);
    (tree_edit_distance(&a, &b), n_ted(&a, &b))
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Modified n-gram precision: hypothesis n-gram counts clipped by their
/// reference counts. Returns `(clipped_matches, total)`.
pub fn clipped_ngram_counts(
    hypothesis: &[String],
    reference: &[String],
    n: usize,
) -> (usize, usize) {
    let hyp = ngram_counts(hypothesis, n);
    let rf = ngram_counts(reference, n);
    let mut matches = 0;
    let mut total = 0;
    for (gram, count) in hyp {
        total += count;
        if let Some(&r) = rf.get(gram) {
            matches += count.min(r);
        }
    }
    (matches, total)
}

const BLEU_EPS: f64 = 1e-9;

/// Sentence BLEU: geometric mean of modified n-gram precisions for
/// n = 1..=max_n with uniform weights, times the brevity penalty.
/// Zero-count precisions are floored at 1e-9; orders where neither side
/// has any n-gram are skipped, so an exact match scores 1.0 at any
/// length. An empty hypothesis scores 0.
pub fn bleu(hypothesis: &[String], reference: &[String], max_n: usize) -> f64 {
    assert!(max_n >= 1);
    if hypothesis.is_empty() {
        return 0.0;
    }
    let c = hypothesis.len() as f64;
    let r = reference.len() as f64;
    let brevity = if c >= r { 1.0 } else { (1.0 - r / c).exp() };

    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 1..=max_n {
        if hypothesis.len() < n && reference.len() < n {
            continue;
        }
        let (matches, total) = clipped_ngram_counts(hypothesis, reference, n);
        let p = if total == 0 || matches == 0 {
            BLEU_EPS
        } else {
            matches as f64 / total as f64
        };
        log_sum += p.ln();
        orders += 1;
    }
    if orders == 0 {
        return 0.0;
    }
    brevity * (log_sum / orders as f64).exp()
}

/// 1.0 iff the expansion's top `level` levels equal the template.
pub fn template_match(
    x_expanded: &LinearParse,
    x_tmpl: &LinearParse,
    level: u32,
) -> Result<f64, TreeError> {
    let expanded = tree::delinearize(x_expanded)?;
    let template = tree::delinearize(x_tmpl)?;
    Ok(f64::from(tree::truncate(&expanded, level) == template))
}

/// One evaluation pair: generated and reference text, the parse used as
/// guidance, the reference parse, and optionally the template it grew
/// from.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub hypothesis: Vec<String>,
    pub reference: Vec<String>,
    pub guide_tree: ParseTree,
    pub ref_tree: ParseTree,
    pub template: Option<ParseTree>,
}

/// Per-pair metric values.
#[derive(Debug, Clone)]
pub struct PairMetrics {
    pub bleu: f64,
    pub ted: usize,
    pub n_ted: f64,
    /// `(level, ted, n_ted)` for each reported truncation level.
    pub per_level: Vec<(u32, usize, f64)>,
    pub template_match: Option<f64>,
}

/// Corpus-level evaluation: per-pair values plus means.
#[derive(Debug, Clone)]
pub struct CorpusMetrics {
    pub guidance: String,
    pub pairs: Vec<PairMetrics>,
    pub mean_bleu: f64,
    pub mean_ted: f64,
    pub mean_n_ted: f64,
    pub mean_per_level: Vec<(u32, f64, f64)>,
    pub template_match_rate: Option<f64>,
}

/// Levels reported by N-TED-ℓ.
pub const REPORT_LEVELS: std::ops::RangeInclusive<u32> = 2..=8;

/// Evaluate every pair (BLEU over text, TED family over guide vs
/// reference trees, template preservation where a template is present)
/// and aggregate. Pairs are independent, so they run in parallel with a
/// deterministic, order-preserving reduction.
pub fn evaluate_pairs(
    pairs: &[EvalPair],
    denom: NtedDenominator,
    template_depth: u32,
    guidance: &str,
) -> CorpusMetrics {
    let per: Vec<PairMetrics> = par::map_slice(pairs, usize::MAX, |p| {
        let bleu = bleu(&p.hypothesis, &p.reference, 4);
        let ted = tree_edit_distance(&p.guide_tree, &p.ref_tree);
        let n_ted = n_ted_with(&p.guide_tree, &p.ref_tree, denom);
        let per_level = REPORT_LEVELS
            .map(|l| {
                let (t, nt) = ted_at_level(&p.guide_tree, &p.ref_tree, l);
                (l, t, nt)
            })
            .collect();
        let template_match = p.template.as_ref().map(|tmpl| {
            f64::from(tree::truncate(&p.guide_tree, template_depth) == *tmpl)
        });
        PairMetrics {
            bleu,
            ted,
            n_ted,
            per_level,
            template_match,
        }
    });

    let n = per.len().max(1) as f64;
    let mean_bleu = per.iter().map(|p| p.bleu).sum::<f64>() / n;
    let mean_ted = per.iter().map(|p| p.ted as f64).sum::<f64>() / n;
    let mean_n_ted = per.iter().map(|p| p.n_ted).sum::<f64>() / n;
    let mean_per_level = REPORT_LEVELS
        .enumerate()
        .map(|(k, l)| {
            let t = per.iter().map(|p| p.per_level[k].1 as f64).sum::<f64>() / n;
            let nt = per.iter().map(|p| p.per_level[k].2).sum::<f64>() / n;
            (l, t, nt)
        })
        .collect();
    let with_template: Vec<f64> = per.iter().filter_map(|p| p.template_match).collect();
    let template_match_rate = if with_template.is_empty() {
        None
    } else {
        Some(with_template.iter().sum::<f64>() / with_template.len() as f64)
    };
    CorpusMetrics {
        guidance: guidance.to_string(),
        pairs: per,
        mean_bleu,
        mean_ted,
        mean_n_ted,
        mean_per_level,
        template_match_rate,
    }
}

impl CorpusMetrics {
    /// The structured text report.
    pub fn to_report_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "syngen-eval v1");
        let _ = writeln!(out, "guidance: {}", self.guidance);
        let _ = writeln!(out, "pairs: {}", self.pairs.len());
        let _ = writeln!(out, "mean BLEU: {:.4}", self.mean_bleu);
        let _ = writeln!(out, "mean TED: {:.4}", self.mean_ted);
        let _ = writeln!(out, "mean N-TED: {:.4}", self.mean_n_ted);
        for (l, t, nt) in &self.mean_per_level {
            let _ = writeln!(out, "mean TED-{l}: {t:.4}");
            let _ = writeln!(out, "mean N-TED-{l}: {nt:.4}");
        }
        match self.template_match_rate {
            Some(rate) => {
                let _ = writeln!(out, "template-match-rate: {rate:.4}");
            }
            None => {
                let _ = writeln!(out, "template-match-rate: n/a");
            }
        }
        let _ = writeln!(out, "per-pair:");
        for (i, p) in self.pairs.iter().enumerate() {
            let tm = match p.template_match {
                Some(v) => format!("{v:.0}"),
                None => "-".to_string(),
            };
            let _ = writeln!(
                out,
                "#{i} bleu={:.4} ted={} nted={:.4} tmpl={tm}",
                p.bleu, p.ted, p.n_ted
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::parse_bracketed;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn identical_trees_have_zero_distance() {
        let t = parse_bracketed("(S(NP(PRP))(VP(VBD)(NP(DT)(NN))))").unwrap();
        assert_eq!(tree_edit_distance(&t, &t), 0);
    }

    #[test]
    fn single_forced_edits() {
        let s = parse_bracketed("(S)").unwrap();
        let s_np = parse_bracketed("(S(NP))").unwrap();
        let s_vp = parse_bracketed("(S(VP))").unwrap();
        assert_eq!(tree_edit_distance(&s_np, &s), 1);
        assert_eq!(tree_edit_distance(&s, &s_np), 1);
        assert_eq!(tree_edit_distance(&s_np, &s_vp), 1);
    }

    #[test]
    fn distance_is_symmetric_on_samples() {
        let a = parse_bracketed("(S(A)(B(C)(D))(E))").unwrap();
        let b = parse_bracketed("(S(B(D))(E(A)))").unwrap();
        assert_eq!(tree_edit_distance(&a, &b), tree_edit_distance(&b, &a));
    }

    #[test]
    fn truncation_deletions_count() {
        // full apple tree vs its 3-level truncation: the two level-4
        // nodes must be deleted
        let full = parse_bracketed("(S(NP(PRP))(VP(VBD)(NP(DT)(NN))))").unwrap();
        let trunc = crate::tree::truncate(&full, 3);
        assert_eq!(tree_edit_distance(&full, &trunc), 2);
        // normalized by the full (reference) tree's 8 nodes
        assert!((n_ted(&trunc, &full) - 2.0 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn n_ted_example() {
        let t1 = parse_bracketed("(S)").unwrap();
        let t2 = parse_bracketed("(S(NP))").unwrap();
        assert!((n_ted(&t1, &t2) - 0.5).abs() < 1e-12);
        assert_eq!(n_ted(&t1, &t1), 0.0);
        assert!((n_ted_with(&t2, &t1, NtedDenominator::Hypothesis) - 0.5).abs() < 1e-12);
        assert!((n_ted_with(&t1, &t2, NtedDenominator::Max) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ted_at_level_consistency() {
        let full = parse_bracketed("(S(NP(PRP))(VP(VBD)(NP(DT)(NN))))").unwrap();
        let trunc = crate::tree::truncate(&full, 3);
        // truncating both to 3 makes them equal
        assert_eq!(ted_at_level(&full, &trunc, 3), (0, 0.0));
        // deep enough levels reproduce the plain values
        let other = parse_bracketed("(S(NP(NN))(VP(VBD)))").unwrap();
        let (t, nt) = ted_at_level(&full, &other, 8);
        assert_eq!(t, tree_edit_distance(&full, &other));
        assert!((nt - n_ted(&full, &other)).abs() < 1e-12);
        // equal roots at level 1
        assert_eq!(ted_at_level(&full, &other, 1), (0, 0.0));
    }

    #[test]
    fn bleu_exact_match_is_one() {
        let s = toks("the cat sat on the mat");
        assert!((bleu(&s, &s, 4) - 1.0).abs() < 1e-12);
        let short = toks("hi there");
        assert!((bleu(&short, &short, 4) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_no_overlap_is_floored() {
        let h = toks("aa bb cc dd ee");
        let r = toks("vv ww xx yy zz");
        let score = bleu(&h, &r, 4);
        assert!(score <= 1e-2, "{score}");
        assert!(score > 0.0);
    }

    #[test]
    fn clipped_counts_cap_repeats() {
        let h = toks("the the the");
        let r = toks("the cat");
        let (matches, total) = clipped_ngram_counts(&h, &r, 1);
        assert_eq!((matches, total), (1, 3));
        // as a precision: 1/3
        assert!((matches as f64 / total as f64 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_empty_hypothesis_is_zero() {
        let r = toks("something");
        assert_eq!(bleu(&[], &r, 4), 0.0);
    }

    #[test]
    fn bleu_less_than_one_unless_exact() {
        let r = toks("a b c d e");
        let h = toks("a b c e d");
        assert!(bleu(&h, &r, 4) < 1.0);
        let h2 = toks("a b c d");
        assert!(bleu(&h2, &r, 4) < 1.0, "brevity penalty applies");
    }

    #[test]
    fn template_match_cases() {
        let full = crate::tree::linearize(
            &parse_bracketed("(S(NP(PRP))(VP(VBD)(NP(DT)(NN))))").unwrap(),
        );
        let tmpl = crate::tree::linearize(
            &parse_bracketed("(S(NP(PRP))(VP(VBD)(NP)))").unwrap(),
        );
        assert_eq!(template_match(&full, &tmpl, 3).unwrap(), 1.0);
        let wrong_root = crate::tree::linearize(&parse_bracketed("(X)").unwrap());
        assert_eq!(template_match(&full, &wrong_root, 3).unwrap(), 0.0);
    }

    #[test]
    fn corpus_report_contains_all_sections() {
        let t = parse_bracketed("(S(NP)(VP))").unwrap();
        let pair = EvalPair {
            hypothesis: toks("a b"),
            reference: toks("a b"),
            guide_tree: t.clone(),
            ref_tree: t.clone(),
            template: Some(crate::tree::truncate(&t, 3)),
        };
        let m = evaluate_pairs(&[pair], NtedDenominator::Reference, 3, "target");
        assert!((m.mean_bleu - 1.0).abs() < 1e-12);
        assert_eq!(m.mean_ted, 0.0);
        assert_eq!(m.template_match_rate, Some(1.0));
        let report = m.to_report_string();
        for needle in [
            "syngen-eval v1",
            "guidance: target",
            "mean BLEU",
            "mean N-TED-8",
            "template-match-rate",
            "per-pair:",
        ] {
            assert!(report.contains(needle), "missing {needle}\n{report}");
        }
    }
}
