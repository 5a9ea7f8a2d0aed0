//! Independent verification oracles.
//!
//! These deliberately avoid the algorithms they check: tree edit
//! distance is recomputed as a branch-and-bound search over valid edit
//! mappings (order- and ancestry-preserving node correspondences, whose
//! minimal cost is the edit distance by definition); level-sequence
//! validity is checked against exhaustive enumeration of tree shapes;
//! gradients are checked against central finite differences. The
//! `selftest` CLI subcommand and the acceptance suite both run them.

use crate::rng::Rng;
use crate::tree::{self, ParseTree};

/// All ordered tree shapes with exactly `n` nodes, labeled `X`.
fn shapes_exact(n: usize) -> Vec<ParseTree> {
    fn forests(n: usize) -> Vec<Vec<ParseTree>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for first in 1..=n {
            for t in shapes_exact(first) {
                for rest in forests(n - first) {
                    let mut f = Vec::with_capacity(rest.len() + 1);
                    f.push(t.clone());
                    f.extend(rest);
                    out.push(f);
                }
            }
        }
        out
    }
    forests(n - 1)
        .into_iter()
        .map(|children| ParseTree::node("X", children))
        .collect()
}

/// All ordered tree shapes with `1..=max_nodes` nodes.
pub fn all_shapes(max_nodes: usize) -> Vec<ParseTree> {
    (1..=max_nodes).flat_map(shapes_exact).collect()
}

/// All labeled ordered trees with up to `max_nodes` nodes over the given
/// label alphabet.
pub fn all_labeled_trees(max_nodes: usize, labels: &[&str]) -> Vec<ParseTree> {
    let mut out = Vec::new();
    for shape in all_shapes(max_nodes) {
        let n = shape.node_count();
        let combos = labels.len().pow(n as u32);
        for mut code in 0..combos {
            let mut assigned = Vec::with_capacity(n);
            for _ in 0..n {
                assigned.push(labels[code % labels.len()]);
                code /= labels.len();
            }
            out.push(relabel(&shape, &mut assigned.into_iter()));
        }
    }
    out
}

fn relabel<'a>(t: &ParseTree, labels: &mut impl Iterator<Item = &'a str>) -> ParseTree {
    let label = labels.next().expect("one label per node");
    ParseTree {
        label: label.to_string(),
        children: t.children.iter().map(|c| relabel(c, labels)).collect(),
    }
}

/// The set of valid level sequences: those produced by linearizing some
/// tree of at most `max_nodes` nodes.
pub fn level_sequences(max_nodes: usize) -> std::collections::HashSet<Vec<u32>> {
    all_shapes(max_nodes)
        .iter()
        .map(|t| tree::linearize(t).levels)
        .collect()
}

/// Every sequence over `1..=max_level` with length `1..=max_len`.
pub fn all_level_candidates(max_len: usize, max_level: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for len in 1..=max_len {
        let combos = (max_level as usize).pow(len as u32);
        for mut code in 0..combos {
            let mut seq = Vec::with_capacity(len);
            for _ in 0..len {
                seq.push((code % max_level as usize) as u32 + 1);
                code /= max_level as usize;
            }
            out.push(seq);
        }
    }
    out
}

/// Preorder flattening with ancestor bitmasks, for mapping enumeration.
struct FlatTree {
    labels: Vec<String>,
    /// `anc[i]` has bit `a` set iff node `a` is a proper ancestor of `i`.
    anc: Vec<u64>,
}

fn flatten(t: &ParseTree) -> FlatTree {
    let mut f = FlatTree {
        labels: Vec::with_capacity(t.node_count()),
        anc: Vec::with_capacity(t.node_count()),
    };
    fn walk(t: &ParseTree, mask: u64, f: &mut FlatTree) {
        let idx = f.labels.len();
        assert!(idx < 64, "mapping oracle supports up to 64 nodes");
        f.labels.push(t.label.clone());
        f.anc.push(mask);
        let child_mask = mask | (1 << idx);
        for c in &t.children {
            walk(c, child_mask, f);
        }
    }
    walk(t, 0, &mut f);
    f
}

/// Tree edit distance by exhaustive search over valid edit mappings
/// (branch and bound). A mapping pairs nodes one-to-one preserving
/// preorder and the ancestor relation; its cost is one per unmapped node
/// on either side plus one per mapped pair with different labels. The
/// minimum over all mappings is the edit distance.
pub fn ted_mapping_search(t1: &ParseTree, t2: &ParseTree) -> usize {
    let a = flatten(t1);
    let b = flatten(t2);
    let n1 = a.labels.len();
    let n2 = b.labels.len();
    let mut best = n1 + n2;
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(n1.min(n2));

    fn search(
        a: &FlatTree,
        b: &FlatTree,
        i: usize,
        next_j: usize,
        cost_so_far: usize,
        pairs: &mut Vec<(usize, usize)>,
        best: &mut usize,
    ) {
        let n1 = a.labels.len();
        let n2 = b.labels.len();
        // optimistic completion: pair the remainders perfectly
        let r1 = n1 - i;
        let r2 = n2 - next_j;
        let future = r1.abs_diff(r2);
        if cost_so_far + future >= *best {
            return;
        }
        if i == n1 {
            // everything left in t2 is inserted
            let total = cost_so_far + r2;
            if total < *best {
                *best = total;
            }
            return;
        }
        // option: map node i to some j, skipped j's become inserts
        for j in next_j..n2 {
            let consistent = pairs.iter().all(|&(pi, pj)| {
                ((a.anc[i] >> pi) & 1) == ((b.anc[j] >> pj) & 1)
            });
            if !consistent {
                continue;
            }
            let relabel = usize::from(a.labels[i] != b.labels[j]);
            let inserts = j - next_j;
            pairs.push((i, j));
            search(a, b, i + 1, j + 1, cost_so_far + relabel + inserts, pairs, best);
            pairs.pop();
        }
        // option: delete node i
        search(a, b, i + 1, next_j, cost_so_far + 1, pairs, best);
    }

    search(&a, &b, 0, 0, 0, &mut pairs, &mut best);
    best
}

/// Random ordered labeled tree with bounded depth and branching.
pub fn random_tree(rng: &mut Rng, max_depth: u32, max_branch: usize, labels: &[&str]) -> ParseTree {
    fn build(rng: &mut Rng, depth: u32, max_depth: u32, max_branch: usize, labels: &[&str]) -> ParseTree {
        let label = labels[rng.below(labels.len())];
        let n_children = if depth >= max_depth {
            0
        } else {
            // bias toward small fanout, allow leaves anywhere
            rng.below(max_branch + 1)
        };
        let children = (0..n_children)
            .map(|_| build(rng, depth + 1, max_depth, max_branch, labels))
            .collect();
        ParseTree {
            label: label.to_string(),
            children,
        }
    }
    build(rng, 1, max_depth, max_branch, labels)
}

/// Labels used by the random-tree suites.
pub const TREE_LABELS: [&str; 8] = ["S", "NP", "VP", "PP", "DT", "NN", "VB", "JJ"];


/// One entry of the gradient suite report.
#[derive(Debug, Clone)]
pub struct SuiteCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

const GRAD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;

/// Central finite-difference checks for every differentiable operation,
/// each attention mechanism, and both full models at a tiny config
/// (width 16, one block, two heads).
pub fn gradient_suite() -> Vec<SuiteCheck> {
    use crate::attention::{
        multi_encoder_attention, multi_head_self_attention, path_attention, scaled_dot_attention,
        HeadVars, MultiEncVars, PathAverage, PathMaskMode, SelfAttnVars,
    };
    use crate::tensor::{grad_check, Reduction, Tensor};

    let mut checks = Vec::new();
    let mut rng = Rng::new(0x5eed);
    let mut push = |name: &str, report: crate::tensor::GradCheckReport| {
        checks.push(SuiteCheck {
            name: name.to_string(),
            max_rel_err: report.max_rel_err(),
            passed: report.passed(),
        });
    };

    let rand = |shape: Vec<usize>, rng: &mut Rng| Tensor::uniform(shape, 1.0, rng);
    let weight = |g: &mut crate::tensor::Graph, d: usize| {
        let w: Vec<f64> = (0..d).map(|j| 0.3 + 0.7 * (j as f64).sin()).collect();
        g.constant(vec![d, 1], w).expect("weight vector")
    };

    // matmul
    let a = rand(vec![3, 4], &mut rng);
    let b = rand(vec![4, 2], &mut rng);
    push(
        "matmul",
        grad_check::<_, crate::tensor::TensorError>(
            |g, v| {
                let c = g.matmul(v[0], v[1])?;
                Ok(g.sum(c))
            },
            &[a, b],
            GRAD_STEP,
            GRAD_TOL,
        )
        .expect("check runs"),
    );

    // matmul against a transposed operand
    let a = rand(vec![3, 4], &mut rng);
    let b = rand(vec![5, 4], &mut rng);
    push(
        "matmul_nt",
        grad_check::<_, crate::tensor::TensorError>(
            |g, v| {
                let c = g.matmul_nt(v[0], v[1])?;
                Ok(g.sum(c))
            },
            &[a, b],
            GRAD_STEP,
            GRAD_TOL,
        )
        .expect("check runs"),
    );

    // add, bias row, scale
    let x = rand(vec![3, 4], &mut rng);
    let y = rand(vec![3, 4], &mut rng);
    let row = rand(vec![4], &mut rng);
    push(
        "add/add_row/scale",
        grad_check::<_, crate::tensor::TensorError>(
            |g, v| {
                let s = g.add(v[0], v[1])?;
                let s = g.add_row(s, v[2])?;
                let s = g.scale(s, -1.7);
                Ok(g.sum(s))
            },
            &[x, y, row],
            GRAD_STEP,
            GRAD_TOL,
        )
        .expect("check runs"),
    );

    // relu, inputs nudged off the kink
    let mut x = rand(vec![3, 4], &mut rng);
    for v in x.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1;
        }
    }
    push(
        "relu",
        grad_check::<_, crate::tensor::TensorError>(
            |g, v| {
                let r = g.relu(v[0]);
                let w = weight(g, 4);
                let s = g.matmul(r, w)?;
                Ok(g.sum(s))
            },
            &[x],
            GRAD_STEP,
            GRAD_TOL,
        )
        .expect("check runs"),
    );

    // concat, average, row masking and scaling
    let a = rand(vec![3, 2], &mut rng);
    let b = rand(vec![3, 2], &mut rng);
    let c = rand(vec![3, 4], &mut rng);
    push(
        "concat/average/row_mask/row_scale",
        grad_check::<_, crate::tensor::TensorError>(
            |g, v| {
                let cat = g.concat_cols(&[v[0], v[1]])?;
                let avg = g.average(&[cat, v[2]])?;
                let masked = g.row_mask(avg, &[true, false, true])?;
                let scaled = g.row_scale(masked, &[2.0, 0.0, 0.5])?;
                let w = weight(g, 4);
                let s = g.matmul(scaled, w)?;
                Ok(g.sum(s))
            },
            &[a, b, c],
            GRAD_STEP,
            GRAD_TOL,
        )
        .expect("check runs"),
    );

    // masked softmax
    let x = rand(vec![3, 4], &mut rng);
    let mask = vec![
        true, false, true, true, true, true, true, false, false, true, true, true,
    ];
    push(
        "softmax_masked",
        grad_check::<_, crate::tensor::TensorError>(
            |g, v| {
                let y = g.softmax_masked(v[0], Some(&mask))?;
                let w = weight(g, 4);
                let s = g.matmul(y, w)?;
                Ok(g.sum(s))
            },
            &[x],
            GRAD_STEP,
            GRAD_TOL,
        )
        .expect("check runs"),
    );

    // log-softmax into NLL
    let x = rand(vec![3, 5], &mut rng);
    push(
        "log_softmax/nll_loss",
        grad_check::<_, crate::tensor::TensorError>(
            |g, v| {
                let lp = g.log_softmax(v[0])?;
                g.nll_loss(lp, &[1, 4, 0], Reduction::Mean, Some(&[true, true, false]))
            },
            &[x],
            GRAD_STEP,
            GRAD_TOL,
        )
        .expect("check runs"),
    );

    // layer norm
    let x = rand(vec![3, 6], &mut rng);
    let gamma = rand(vec![6], &mut rng);
    let beta = rand(vec![6], &mut rng);
    push(
        "layer_norm",
        grad_check::<_, crate::tensor::TensorError>(
            |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                let w = weight(g, 6);
                let s = g.matmul(y, w)?;
                Ok(g.sum(s))
            },
            &[x, gamma, beta],
            GRAD_STEP,
            GRAD_TOL,
        )
        .expect("check runs"),
    );

    // embedding gather with repeated indices
    let table = rand(vec![6, 3], &mut rng);
    push(
        "embedding_gather",
        grad_check::<_, crate::tensor::TensorError>(
            |g, v| {
                let rows = g.gather(v[0], &[0, 3, 3, 5])?;
                let w = weight(g, 3);
                let s = g.matmul(rows, w)?;
                Ok(g.sum(s))
            },
            &[table],
            GRAD_STEP,
            GRAD_TOL,
        )
        .expect("check runs"),
    );

    // scaled dot-product attention
    let q = rand(vec![3, 4], &mut rng);
    let k = rand(vec![5, 4], &mut rng);
    let v_in = rand(vec![5, 2], &mut rng);
    push(
        "scaled_dot_attention",
        grad_check::<_, crate::tensor::TensorError>(
            |g, v| {
                let out = scaled_dot_attention(g, v[0], v[1], v[2], None)?;
                let w = weight(g, 2);
                let s = g.matmul(out, w)?;
                Ok(g.sum(s))
            },
            &[q, k, v_in],
            GRAD_STEP,
            GRAD_TOL,
        )
        .expect("check runs"),
    );

    // causal multi-head self-attention (two heads)
    let x = rand(vec![4, 6], &mut rng);
    let head_w: Vec<Tensor> = (0..6).map(|_| rand(vec![6, 3], &mut rng)).collect();
    let wo = rand(vec![6, 6], &mut rng);
    let mut inputs = vec![x];
    inputs.extend(head_w);
    inputs.push(wo);
    push(
        "multi_head_self_attention",
        grad_check::<_, crate::tensor::TensorError>(
            |g, v| {
                let p = SelfAttnVars {
                    heads: vec![
                        HeadVars { w_q: v[1], w_k: v[2], w_v: v[3] },
                        HeadVars { w_q: v[4], w_k: v[5], w_v: v[6] },
                    ],
                    w_o: v[7],
                };
                let out = multi_head_self_attention(g, v[0], &p, true, None)?;
                let w = weight(g, 6);
                let s = g.matmul(out, w)?;
                Ok(g.sum(s))
            },
            &inputs,
            GRAD_STEP,
            GRAD_TOL,
        )
        .expect("check runs"),
    );

    // multi-encoder attention, one head per encoder
    let o = rand(vec![2, 4], &mut rng);
    let e1 = rand(vec![3, 4], &mut rng);
    let e2 = rand(vec![5, 4], &mut rng);
    let mut inputs = vec![o, e1, e2];
    inputs.extend((0..6).map(|_| rand(vec![4, 2], &mut rng)));
    inputs.push(rand(vec![4, 4], &mut rng));
    push(
        "multi_encoder_attention",
        grad_check::<_, crate::tensor::TensorError>(
            |g, v| {
                let me = MultiEncVars {
                    heads_enc1: vec![HeadVars { w_q: v[3], w_k: v[4], w_v: v[5] }],
                    heads_enc2: vec![HeadVars { w_q: v[6], w_k: v[7], w_v: v[8] }],
                    w_o: v[9],
                };
                let out = multi_encoder_attention(g, v[0], v[1], Some(v[2]), &me, None, None)?;
                let w = weight(g, 4);
                let s = g.matmul(out, w)?;
                Ok(g.sum(s))
            },
            &inputs,
            GRAD_STEP,
            GRAD_TOL,
        )
        .expect("check runs"),
    );

    // path attention over the eight-node example tree
    let apple = tree::parse_bracketed("(S(NP(PRP))(VP(VBD)(NP(DT)(NN))))").expect("parses");
    let lp = tree::linearize(&apple);
    let paths = tree::enumerate_paths(&lp).expect("valid");
    let masks = tree::path_mask_matrix(&paths, lp.len());
    let x = rand(vec![8, 4], &mut rng);
    let mut inputs = vec![x];
    inputs.extend((0..3).map(|_| rand(vec![4, 2], &mut rng)));
    inputs.push(rand(vec![2, 4], &mut rng));
    push(
        "path_attention",
        grad_check::<_, crate::tensor::TensorError>(
            |g, v| {
                let p = SelfAttnVars {
                    heads: vec![HeadVars { w_q: v[1], w_k: v[2], w_v: v[3] }],
                    w_o: v[4],
                };
                let out = path_attention(
                    g,
                    v[0],
                    &masks,
                    &p,
                    PathMaskMode::KeysAndQueries,
                    PathAverage::Uniform,
                )?;
                let w = weight(g, 4);
                let s = g.matmul(out, w)?;
                Ok(g.sum(s))
            },
            &inputs,
            GRAD_STEP,
            GRAD_TOL,
        )
        .expect("check runs"),
    );

    checks.extend(model_gradient_checks());
    checks
}

/// Finite-difference checks of both full models' training losses at the
/// tiny config (d_m = 16, one block, two heads).
pub fn model_gradient_checks() -> Vec<SuiteCheck> {
    use crate::data::{build_vocabs, encode_records, load_corpus_str, synthetic, LoadConfig, BOS_ID, EOS_ID};
    use crate::model::{ExpanderModel, GeneratorModel, ModelConfig, ParseInput, SeqInput};
    use crate::tensor::grad_check_params;
    use crate::train::{loss_syntax, loss_text};

    let corpus = synthetic::corpus(2, 0xfeed);
    let text: String = corpus
        .iter()
        .map(|r| serde_json::to_string(r).expect("serializable") + "\n")
        .collect();
    let (records, _) = load_corpus_str(&text, &LoadConfig::default());
    let vocabs = build_vocabs(&records);
    let encoded = encode_records(&records, &vocabs, 3).expect("closed vocab");
    let r = &encoded[0];

    let config = ModelConfig {
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

    let mut checks = Vec::new();

    let expander = ExpanderModel::new(config.clone(), 0xabc).expect("valid config");
    let mut prefix_n = vec![BOS_ID];
    prefix_n.extend_from_slice(&r.tgt_parse.node_ids);
    let mut prefix_l = vec![BOS_ID];
    prefix_l.extend_from_slice(&r.tgt_parse.level_ids);
    let mut targets_n = r.tgt_parse.node_ids.clone();
    targets_n.push(EOS_ID);
    let mut targets_l = r.tgt_parse.level_ids.clone();
    targets_l.push(EOS_ID);
    let report = grad_check_params(
        |g, store| {
            let mut m = expander.clone();
            m.replace_store(store.clone());
            let (nl, ll) = m.forward_ids(
                g,
                ParseInput::unpadded(&r.src_parse),
                ParseInput::unpadded(&r.template),
                ParseInput { node_ids: &prefix_n, level_ids: &prefix_l, real: None },
            )?;
            loss_syntax(g, nl, ll, &targets_n, &targets_l, 0.5, 0.5, None)
                .map_err(crate::model::ModelError::from)
        },
        expander.store(),
        GRAD_STEP,
        GRAD_TOL,
    )
    .expect("check runs");
    checks.push(SuiteCheck {
        name: "expander_model_loss".into(),
        max_rel_err: report.max_rel_err(),
        passed: report.passed(),
    });

    let generator = GeneratorModel::new(config, 0xdef).expect("valid config");
    let mut prefix_t = vec![BOS_ID];
    prefix_t.extend_from_slice(&r.tgt_text);
    let mut targets_t = r.tgt_text.clone();
    targets_t.push(EOS_ID);
    let report = grad_check_params(
        |g, store| {
            let mut m = generator.clone();
            m.replace_store(store.clone());
            let logits = m.forward_ids(
                g,
                ParseInput::unpadded(&r.tgt_parse),
                &r.tgt_parse.levels,
                SeqInput::unpadded(&r.src_text),
                SeqInput { ids: &prefix_t, real: None },
            )?;
            loss_text(g, logits, &targets_t, None).map_err(crate::model::ModelError::from)
        },
        generator.store(),
        GRAD_STEP,
        GRAD_TOL,
    )
    .expect("check runs");
    checks.push(SuiteCheck {
        name: "generator_model_loss".into(),
        max_rel_err: report.max_rel_err(),
        passed: report.passed(),
    });

    checks
}

#[cfg(test)]
mod suite_tests {
    use super::*;
    use std::time::Instant;

    #[test]
    fn gradient_suite_passes() {
        let started = Instant::now();
        let checks = gradient_suite();
        assert!(checks.len() >= 15);
        for c in &checks {
            assert!(c.passed, "{} failed with rel err {}", c.name, c.max_rel_err);
        }
        println!("gradient suite: {} checks in {:?}", checks.len(), started.elapsed());
    }
}
