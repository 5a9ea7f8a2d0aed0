//! Oracle-equivalence property suites.
//!
//! Each suite cross-checks an implementation against an independent
//! route: exhaustive enumeration, brute-force search, algebraic
//! reduction, or perturbation. The `selftest` subcommand runs them all;
//! the acceptance tests run them at their full parameters.

use crate::attention::{
    multi_encoder_attention, multi_head_attention, multi_head_self_attention, path_attention,
    HeadVars, MultiEncVars, PathAverage, PathMaskMode, SelfAttnVars,
};
use crate::metrics::{zs_distance, PreparedTree};
use crate::oracle;
use crate::par;
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor};
use crate::tree;

/// Outcome of one suite.
#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl SuiteResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        SuiteResult {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

/// `parse_bracketed ∘ to_bracketed` is the identity on random trees,
/// and the canonical eight-node example reproduces verbatim.
pub fn bracket_round_trip(n_trees: usize, seed: u64) -> SuiteResult {
    let mut rng = Rng::new(seed);
    let mut failures = 0;
    for _ in 0..n_trees {
        let t = oracle::random_tree(&mut rng, 8, 4, &oracle::TREE_LABELS);
        let printed = tree::to_bracketed(&t);
        match tree::parse_bracketed(&printed) {
            Ok(back) if back == t => {}
            _ => failures += 1,
        }
    }
    let example = tree::parse_bracketed("(S(NP(PRP))(VP(VBD)(NP(DT)(NN))))");
    let example_ok = matches!(&example, Ok(t) if tree::to_bracketed(t) == "(S(NP(PRP))(VP(VBD)(NP(DT)(NN))))");
    SuiteResult::new(
        "bracket-round-trip",
        failures == 0 && example_ok,
        format!("{n_trees} trees, {failures} failures"),
    )
}

/// `delinearize ∘ linearize` is the identity, the example linearization
/// reproduces verbatim, and the bracketed/node-level token ratio is
/// exactly 3.
pub fn linearize_bijection(n_trees: usize, seed: u64) -> SuiteResult {
    let mut rng = Rng::new(seed);
    let mut failures = 0;
    for _ in 0..n_trees {
        let t = oracle::random_tree(&mut rng, 8, 4, &oracle::TREE_LABELS);
        let lp = tree::linearize(&t);
        let ok = tree::validate_levels(&lp.levels)
            && tree::delinearize(&lp).map(|back| back == t).unwrap_or(false)
            && tree::bracketed_token_count(&t) == 3 * lp.len();
        if !ok {
            failures += 1;
        }
    }
    let apple = tree::parse_bracketed("(S(NP(PRP))(VP(VBD)(NP(DT)(NN))))").expect("parses");
    let lp = tree::linearize(&apple);
    let example_ok = lp.nodes == ["S", "NP", "PRP", "VP", "VBD", "NP", "DT", "NN"]
        && lp.levels == [1, 2, 3, 2, 3, 3, 4, 4];
    SuiteResult::new(
        "linearize-bijection",
        failures == 0 && example_ok,
        format!("{n_trees} trees, {failures} failures"),
    )
}

/// `validate_levels` agrees with exhaustive enumeration of tree shapes:
/// a sequence is valid iff some tree of at most `max_nodes` nodes
/// produces it (candidates range over `1..=max_level` entries up to
/// length `max_nodes`).
pub fn level_validity_oracle(max_nodes: usize, max_level: u32) -> SuiteResult {
    let valid = oracle::level_sequences(max_nodes);
    let candidates = oracle::all_level_candidates(max_nodes, max_level);
    let total = candidates.len();
    let mismatches = candidates
        .into_iter()
        .filter(|c| valid.contains(c) != tree::validate_levels(c))
        .count();
    SuiteResult::new(
        "level-validity-oracle",
        mismatches == 0,
        format!("{total} candidate sequences, {mismatches} mismatches"),
    )
}

/// Zhang-Shasha distance agrees with the brute-force mapping search on
/// every pair of labeled trees with at most `max_nodes` nodes over three
/// labels.
pub fn ted_oracle(max_nodes: usize) -> SuiteResult {
    let trees = oracle::all_labeled_trees(max_nodes, &["A", "B", "C"]);
    let prepared: Vec<PreparedTree> = trees.iter().map(PreparedTree::new).collect();
    let n = trees.len();
    let idx: Vec<usize> = (0..n).collect();
    let mismatches: usize = par::map_slice(&idx, usize::MAX, |&i| {
        let mut bad = 0;
        for j in i..n {
            let zs = zs_distance(&prepared[i], &prepared[j]);
            if zs != oracle::ted_mapping_search(&trees[i], &trees[j]) {
                bad += 1;
            }
        }
        bad
    })
    .into_iter()
    .sum();
    let pairs = n * (n + 1) / 2;
    SuiteResult::new(
        "ted-oracle",
        mismatches == 0,
        format!("{n} trees, {pairs} pairs, {mismatches} mismatches"),
    )
}

/// Metric axioms on random triples: identity, symmetry, triangle
/// inequality, plus the size upper bound.
pub fn ted_axioms(n_triples: usize, seed: u64) -> SuiteResult {
    let mut rng = Rng::new(seed);
    let triples: Vec<[tree::ParseTree; 3]> = (0..n_triples)
        .map(|_| {
            [
                oracle::random_tree(&mut rng, 5, 3, &oracle::TREE_LABELS),
                oracle::random_tree(&mut rng, 5, 3, &oracle::TREE_LABELS),
                oracle::random_tree(&mut rng, 5, 3, &oracle::TREE_LABELS),
            ]
        })
        .collect();
    let violations: usize = par::map_slice(&triples, usize::MAX, |[a, b, c]| {
        let pa = PreparedTree::new(a);
        let pb = PreparedTree::new(b);
        let pc = PreparedTree::new(c);
        let ab = zs_distance(&pa, &pb);
        let ba = zs_distance(&pb, &pa);
        let bc = zs_distance(&pb, &pc);
        let ac = zs_distance(&pa, &pc);
        let aa = zs_distance(&pa, &pa);
        let mut bad = 0;
        if aa != 0 {
            bad += 1;
        }
        if ab != ba {
            bad += 1;
        }
        if (ab == 0) != (a == b) {
            bad += 1;
        }
        if ac > ab + bc {
            bad += 1;
        }
        if ab > a.node_count() + b.node_count() {
            bad += 1;
        }
        bad
    })
    .into_iter()
    .sum();
    SuiteResult::new(
        "ted-axioms",
        violations == 0,
        format!("{n_triples} triples, {violations} violations"),
    )
}

fn rand_attn(g: &mut Graph, h: usize, d_m: usize, d_k: usize, rng: &mut Rng) -> SelfAttnVars {
    let heads = (0..h)
        .map(|_| HeadVars {
            w_q: g.leaf(&Tensor::uniform(vec![d_m, d_k], 1.0, rng)),
            w_k: g.leaf(&Tensor::uniform(vec![d_m, d_k], 1.0, rng)),
            w_v: g.leaf(&Tensor::uniform(vec![d_m, d_k], 1.0, rng)),
        })
        .collect();
    let w_o = g.leaf(&Tensor::uniform(vec![h * d_k, d_m], 1.0, rng));
    SelfAttnVars { heads, w_o }
}

/// One application of path attention moves no information between nodes
/// that share no path (difference exactly within 1e-12 under
/// perturbation), and on chain trees it equals plain self-attention.
pub fn path_locality(n_trees: usize, seed: u64) -> SuiteResult {
    let d_m = 8;
    let mut rng = Rng::new(seed);
    let mut specs = Vec::new();
    for k in 0..n_trees {
        // mix of bushy random trees and pure chains
        let t = if k % 5 == 4 {
            let depth = 1 + rng.below(6);
            let mut chain = tree::ParseTree::leaf("C0");
            for d in 1..depth {
                chain = tree::ParseTree::node(format!("C{d}"), vec![chain]);
            }
            chain
        } else {
            oracle::random_tree(&mut rng, 5, 3, &oracle::TREE_LABELS)
        };
        specs.push((t, rng.next_u64()));
    }

    let failures: usize = par::map_slice(&specs, usize::MAX, |(t, tree_seed)| {
        let mut rng = Rng::new(*tree_seed);
        let lp = tree::linearize(t);
        let n = lp.len();
        let paths = tree::enumerate_paths(&lp).expect("valid");
        let masks = tree::path_mask_matrix(&paths, n);
        let x0 = Tensor::uniform(vec![n, d_m], 1.0, &mut rng);
        let head_seed = rng.next_u64();

        let run = |x: &Tensor| -> (Vec<f64>, Vec<f64>) {
            let mut g = Graph::new();
            let xv = g.leaf(x);
            let mut prng = Rng::new(head_seed);
            let p = rand_attn(&mut g, 2, d_m, 4, &mut prng);
            let pa = path_attention(
                &mut g,
                xv,
                &masks,
                &p,
                PathMaskMode::KeysAndQueries,
                PathAverage::Uniform,
            )
            .expect("forward");
            let sa = multi_head_self_attention(&mut g, xv, &p, false, None).expect("forward");
            (g.value(pa).to_vec(), g.value(sa).to_vec())
        };

        let (base, base_plain) = run(&x0);
        let mut bad = 0;

        // chain trees: one path, equal to plain self-attention
        if paths.n_paths() == 1 {
            for (a, b) in base.iter().zip(base_plain.iter()) {
                if (a - b).abs() > 1e-12 {
                    bad += 1;
                }
            }
        }

        // locality: perturb u, rows of unrelated v must not move
        let shares_path = |u: usize, v: usize| {
            masks.iter().any(|row| row[u] && row[v])
        };
        for u in 0..n {
            let mut x = x0.clone();
            x.data_mut()[u * d_m] += 0.7;
            let (out, _) = run(&x);
            for v in 0..n {
                if shares_path(u, v) {
                    continue;
                }
                for c in 0..d_m {
                    if (out[v * d_m + c] - base[v * d_m + c]).abs() > 1e-12 {
                        bad += 1;
                    }
                }
            }
        }
        bad
    })
    .into_iter()
    .sum();

    SuiteResult::new(
        "path-locality",
        failures == 0,
        format!("{n_trees} trees, {failures} leaked entries"),
    )
}

/// With an empty second head group multi-encoder attention equals
/// standard cross-attention within 1e-12, and unequal encoder lengths
/// produce a well-formed output.
pub fn multi_encoder_reduction(seed: u64) -> SuiteResult {
    let mut rng = Rng::new(seed);
    let d_m = 8;
    let mut g = Graph::new();
    let o = g.leaf(&Tensor::uniform(vec![4, d_m], 1.0, &mut rng));
    let e1 = g.leaf(&Tensor::uniform(vec![3, d_m], 1.0, &mut rng));
    let e2 = g.leaf(&Tensor::uniform(vec![7, d_m], 1.0, &mut rng));
    let p = rand_attn(&mut g, 3, d_m, 4, &mut rng);
    let me = MultiEncVars {
        heads_enc1: p.heads.clone(),
        heads_enc2: vec![],
        w_o: p.w_o,
    };
    let reduced = multi_encoder_attention(&mut g, o, e1, None, &me, None, None).expect("forward");
    let cross = multi_head_attention(&mut g, o, e1, &p, None).expect("forward");
    let max_diff = g
        .value(reduced)
        .iter()
        .zip(g.value(cross).iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let mut rng2 = Rng::new(seed ^ 1);
    let p1 = rand_attn(&mut g, 2, d_m, 4, &mut rng2);
    let p2 = rand_attn(&mut g, 2, d_m, 4, &mut rng2);
    let me2 = MultiEncVars {
        heads_enc1: p1.heads,
        heads_enc2: p2.heads,
        w_o: g.leaf(&Tensor::uniform(vec![4 * 4, d_m], 1.0, &mut rng2)),
    };
    let mixed =
        multi_encoder_attention(&mut g, o, e1, Some(e2), &me2, None, None).expect("forward");
    let shape_ok = g.shape_of(mixed) == [4, d_m] && g.value(mixed).iter().all(|v| v.is_finite());

    SuiteResult::new(
        "multi-encoder-reduction",
        max_diff <= 1e-12 && shape_ok,
        format!("reduction max diff {max_diff:.3e}, unequal lengths ok: {shape_ok}"),
    )
}

/// Every suite at quick or full scale.
pub fn run_all(full: bool) -> Vec<SuiteResult> {
    let mut out = vec![
        bracket_round_trip(1000, 101),
        linearize_bijection(1000, 102),
        level_validity_oracle(6, 4),
    ];
    if full {
        out.push(ted_oracle(5));
        out.push(ted_axioms(10_000, 103));
        out.push(path_locality(100, 104));
    } else {
        out.push(ted_oracle(4));
        out.push(ted_axioms(1_000, 103));
        out.push(path_locality(20, 104));
    }
    out.push(multi_encoder_reduction(105));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suites_pass() {
        for r in run_all(false) {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
