//! Attention mechanisms as pure functions over graph variables.
//!
//! Three flavors:
//! * scaled dot-product and standard multi-head attention (self, causal,
//!   cross) — the vanilla building blocks;
//! * multi-encoder attention — disjoint head groups attend to different
//!   encoders' outputs, letting one decoder integrate encodings of
//!   different lengths through concatenation;
//! * path attention — self-attention restricted, per duplicated
//!   computation, to the nodes of a single root-to-leaf path, then
//!   averaged over paths. Ancestors appear on many paths, so they
//!   accumulate more mass than leaves, and nodes on disjoint paths
//!   cannot exchange information within one application.
//!
//! All functions are deterministic and differentiable end to end.

use crate::rng::Rng;
use crate::tensor::{Graph, ParamId, ParamStore, Result, Tensor, TensorError, Var};

/// Per-head projection weights, bound into a graph.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

/// Heads plus output projection for one attention sublayer.
#[derive(Debug, Clone)]
pub struct SelfAttnVars {
    pub heads: Vec<HeadVars>,
    pub w_o: Var,
}

/// Two head groups attached to two encoders, plus the joint projection.
#[derive(Debug, Clone)]
pub struct MultiEncVars {
    pub heads_enc1: Vec<HeadVars>,
    pub heads_enc2: Vec<HeadVars>,
    pub w_o: Var,
}

/// Stored parameters for one attention head.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

impl HeadParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_m: usize,
        d_k: usize,
        d_v: usize,
        rng: &mut Rng,
    ) -> Self {
        let scale = 1.0 / (d_m as f64).sqrt();
        HeadParams {
            w_q: store.add(format!("{prefix}.wq"), Tensor::uniform(vec![d_m, d_k], scale, rng)),
            w_k: store.add(format!("{prefix}.wk"), Tensor::uniform(vec![d_m, d_k], scale, rng)),
            w_v: store.add(format!("{prefix}.wv"), Tensor::uniform(vec![d_m, d_v], scale, rng)),
        }
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> HeadVars {
        HeadVars {
            w_q: g.param(store, self.w_q),
            w_k: g.param(store, self.w_k),
            w_v: g.param(store, self.w_v),
        }
    }
}

/// Stored parameters for a (self or cross) attention sublayer.
#[derive(Debug, Clone)]
pub struct SelfAttnParams {
    pub heads: Vec<HeadParams>,
    pub w_o: ParamId,
}

impl SelfAttnParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        h: usize,
        d_m: usize,
        d_k: usize,
        d_v: usize,
        rng: &mut Rng,
    ) -> Self {
        assert!(h >= 1, "attention needs at least one head");
        let heads = (0..h)
            .map(|i| HeadParams::init(store, &format!("{prefix}.head{i}"), d_m, d_k, d_v, rng))
            .collect();
        let scale = 1.0 / (d_m as f64).sqrt();
        let w_o = store.add(
            format!("{prefix}.wo"),
            Tensor::uniform(vec![h * d_v, d_m], scale, rng),
        );
        SelfAttnParams { heads, w_o }
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> SelfAttnVars {
        SelfAttnVars {
            heads: self.heads.iter().map(|h| h.bind(g, store)).collect(),
            w_o: g.param(store, self.w_o),
        }
    }
}

/// Stored parameters for a multi-encoder attention sublayer.
#[derive(Debug, Clone)]
pub struct MultiEncoderParams {
    pub heads_enc1: Vec<HeadParams>,
    pub heads_enc2: Vec<HeadParams>,
    pub w_o: ParamId,
}

impl MultiEncoderParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        h1: usize,
        h2: usize,
        d_m: usize,
        d_k: usize,
        d_v: usize,
        rng: &mut Rng,
    ) -> Self {
        assert!(h1 + h2 >= 1, "multi-encoder attention needs at least one head");
        let heads_enc1 = (0..h1)
            .map(|i| HeadParams::init(store, &format!("{prefix}.enc1.head{i}"), d_m, d_k, d_v, rng))
            .collect();
        let heads_enc2 = (0..h2)
            .map(|i| HeadParams::init(store, &format!("{prefix}.enc2.head{i}"), d_m, d_k, d_v, rng))
            .collect();
        let scale = 1.0 / (d_m as f64).sqrt();
        let w_o = store.add(
            format!("{prefix}.wo"),
            Tensor::uniform(vec![(h1 + h2) * d_v, d_m], scale, rng),
        );
        MultiEncoderParams {
            heads_enc1,
            heads_enc2,
            w_o,
        }
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> MultiEncVars {
        MultiEncVars {
            heads_enc1: self.heads_enc1.iter().map(|h| h.bind(g, store)).collect(),
            heads_enc2: self.heads_enc2.iter().map(|h| h.bind(g, store)).collect(),
            w_o: g.param(store, self.w_o),
        }
    }
}

/// How path attention treats positions outside the current path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PathMaskMode {
    /// Off-path keys get zero weight and off-path query rows output
    /// zeros, so a position contributes nothing to paths it is not on.
    #[default]
    KeysAndQueries,
    /// Only keys are masked; every query row attends to the path.
    KeysOnly,
}

/// Denominator of the path-attention average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PathAverage {
    /// Divide by the total path count, weighting ancestors more heavily.
    #[default]
    Uniform,
    /// Divide each node by the number of paths it lies on.
    PerNode,
}

/// `Softmax(Q·Kᵀ/√d_k)·V` with an optional `[m_q × m_k]` key mask
/// (true = attend).
pub fn scaled_dot_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let d_k = g.shape_of(q)[1];
    let scores = g.matmul_nt(q, k)?;
    let scaled = g.scale(scores, 1.0 / (d_k as f64).sqrt());
    let probs = g.softmax_masked(scaled, key_mask)?;
    g.matmul(probs, v)
}

fn head_output(
    g: &mut Graph,
    q_src: Var,
    kv_src: Var,
    head: &HeadVars,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let q = g.matmul(q_src, head.w_q)?;
    let k = g.matmul(kv_src, head.w_k)?;
    let v = g.matmul(kv_src, head.w_v)?;
    scaled_dot_attention(g, q, k, v, mask)
}

/// Multi-head attention of `q_src` over `kv_src`: heads computed with
/// projected Q/K/V, concatenated, projected by `w_o`.
pub fn multi_head_attention(
    g: &mut Graph,
    q_src: Var,
    kv_src: Var,
    params: &SelfAttnVars,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let outs = params
        .heads
        .iter()
        .map(|h| head_output(g, q_src, kv_src, h, mask))
        .collect::<Result<Vec<_>>>()?;
    let c = g.concat_cols(&outs)?;
    g.matmul(c, params.w_o)
}

/// Self-attention with optional causal masking and key padding
/// (`key_real[j]` false marks a padded key).
pub fn multi_head_self_attention(
    g: &mut Graph,
    x: Var,
    params: &SelfAttnVars,
    causal: bool,
    key_real: Option<&[bool]>,
) -> Result<Var> {
    let m = g.shape_of(x)[0];
    let mask = build_mask(m, m, causal, key_real);
    multi_head_attention(g, x, x, params, mask.as_deref())
}

/// Decoder attention over two encoders: `h1` heads attend `enc1`, `h2`
/// heads attend `enc2`, all outputs concatenated and fused by `w_o`.
/// The encoders may have different lengths. With an empty second head
/// group this is exactly standard multi-head cross-attention over
/// `enc1`, and `enc2` is ignored.
pub fn multi_encoder_attention(
    g: &mut Graph,
    o: Var,
    enc1: Var,
    enc2: Option<Var>,
    params: &MultiEncVars,
    enc1_real: Option<&[bool]>,
    enc2_real: Option<&[bool]>,
) -> Result<Var> {
    let m_o = g.shape_of(o)[0];
    let mut outs = Vec::with_capacity(params.heads_enc1.len() + params.heads_enc2.len());
    let mask1 = build_mask(m_o, g.shape_of(enc1)[0], false, enc1_real);
    for h in &params.heads_enc1 {
        outs.push(head_output(g, o, enc1, h, mask1.as_deref())?);
    }
    if !params.heads_enc2.is_empty() {
        let enc2 = enc2.ok_or(TensorError::InvalidShape {
            op: "multi_encoder_attention",
            shape: vec![],
            reason: "second encoder output required when h2 > 0",
        })?;
        let mask2 = build_mask(m_o, g.shape_of(enc2)[0], false, enc2_real);
        for h in &params.heads_enc2 {
            outs.push(head_output(g, o, enc2, h, mask2.as_deref())?);
        }
    }
    let c = g.concat_cols(&outs)?;
    g.matmul(c, params.w_o)
}

/// Path attention over `x[n × d_m]` given one boolean membership row per
/// path (from `tree::path_mask_matrix`). The layer input is notionally
/// duplicated once per path; each copy runs through the same
/// self-attention restricted to that path's nodes, and the copies are
/// averaged. Projections and attention scores are shared across copies,
/// which changes nothing numerically.
pub fn path_attention(
    g: &mut Graph,
    x: Var,
    path_masks: &[Vec<bool>],
    params: &SelfAttnVars,
    mode: PathMaskMode,
    average: PathAverage,
) -> Result<Var> {
    let n = g.shape_of(x)[0];
    if path_masks.is_empty() {
        return Err(TensorError::InvalidShape {
            op: "path_attention",
            shape: vec![0],
            reason: "needs at least one path",
        });
    }
    for row in path_masks {
        if row.len() != n {
            return Err(TensorError::InvalidShape {
                op: "path_attention",
                shape: vec![row.len()],
                reason: "path mask width must equal sequence length",
            });
        }
        if !row.iter().any(|&b| b) {
            return Err(TensorError::InvalidShape {
                op: "path_attention",
                shape: vec![n],
                reason: "empty path mask row",
            });
        }
    }

    // shared per-head scaled scores and values
    let mut head_pre = Vec::with_capacity(params.heads.len());
    for h in &params.heads {
        let q = g.matmul(x, h.w_q)?;
        let k = g.matmul(x, h.w_k)?;
        let v = g.matmul(x, h.w_v)?;
        let d_k = g.shape_of(q)[1];
        let scores = g.matmul_nt(q, k)?;
        let scaled = g.scale(scores, 1.0 / (d_k as f64).sqrt());
        head_pre.push((scaled, v));
    }

    let mut per_path = Vec::with_capacity(path_masks.len());
    for members in path_masks {
        let mut key_mask = Vec::with_capacity(n * n);
        for _ in 0..n {
            key_mask.extend_from_slice(members);
        }
        let mut outs = Vec::with_capacity(head_pre.len());
        for &(scaled, v) in &head_pre {
            let probs = g.softmax_masked(scaled, Some(&key_mask))?;
            outs.push(g.matmul(probs, v)?);
        }
        let c = g.concat_cols(&outs)?;
        let c = match mode {
            PathMaskMode::KeysAndQueries => g.row_mask(c, members)?,
            PathMaskMode::KeysOnly => c,
        };
        per_path.push(c);
    }

    // the final projection is linear, so averaging first is exact
    let combined = g.average(&per_path)?;
    let combined = match average {
        PathAverage::Uniform => combined,
        PathAverage::PerNode => {
            let n_p = path_masks.len() as f64;
            let factors: Vec<f64> = (0..n)
                .map(|j| {
                    let count = path_masks.iter().filter(|row| row[j]).count();
                    if count == 0 {
                        0.0
                    } else {
                        n_p / count as f64
                    }
                })
                .collect();
            g.row_scale(combined, &factors)?
        }
    };
    g.matmul(combined, params.w_o)
}

/// Lower-triangular causal mask: query `r` may attend keys `0..=r`.
pub fn causal_mask(n: usize) -> Vec<bool> {
    let mut m = vec![false; n * n];
    for r in 0..n {
        for c in 0..=r {
            m[r * n + c] = true;
        }
    }
    m
}

/// Combine causal and key-padding constraints into one `[m_q × m_k]`
/// mask, or `None` when unconstrained.
pub fn build_mask(
    m_q: usize,
    m_k: usize,
    causal: bool,
    key_real: Option<&[bool]>,
) -> Option<Vec<bool>> {
    match (causal, key_real) {
        (false, None) => None,
        _ => {
            let mut m = vec![true; m_q * m_k];
            if causal {
                debug_assert_eq!(m_q, m_k, "causal masking is square");
                for r in 0..m_q {
                    for c in (r + 1)..m_k {
                        m[r * m_k + c] = false;
                    }
                }
            }
            if let Some(real) = key_real {
                debug_assert_eq!(real.len(), m_k);
                for r in 0..m_q {
                    for (c, &ok) in real.iter().enumerate() {
                        if !ok {
                            m[r * m_k + c] = false;
                        }
                    }
                }
            }
            Some(m)
        }
    }
}


#[cfg(test)]
mod keys_only_tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tree;

    // keys-only masking keeps off-path query rows alive: a leaf's output
    // then averages contributions from every path, not just its own
    #[test]
    fn keys_only_differs_but_chain_still_reduces() {
        let apple = tree::parse_bracketed("(S(NP(PRP))(VP(VBD)(NP(DT)(NN))))").unwrap();
        let lp = tree::linearize(&apple);
        let ps = tree::enumerate_paths(&lp).unwrap();
        let masks = tree::path_mask_matrix(&ps, lp.len());

        let mut rng = Rng::new(20);
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::uniform(vec![8, 6], 1.0, &mut rng));
        let heads = vec![HeadVars {
            w_q: g.leaf(&Tensor::uniform(vec![6, 3], 1.0, &mut rng)),
            w_k: g.leaf(&Tensor::uniform(vec![6, 3], 1.0, &mut rng)),
            w_v: g.leaf(&Tensor::uniform(vec![6, 3], 1.0, &mut rng)),
        }];
        let p = SelfAttnVars {
            heads,
            w_o: g.leaf(&Tensor::uniform(vec![3, 6], 1.0, &mut rng)),
        };
        let strict = path_attention(&mut g, x, &masks, &p, PathMaskMode::KeysAndQueries, PathAverage::Uniform).unwrap();
        let loose = path_attention(&mut g, x, &masks, &p, PathMaskMode::KeysOnly, PathAverage::Uniform).unwrap();
        assert!(g.value(loose).iter().all(|v| v.is_finite()));
        assert_ne!(g.value(strict), g.value(loose));

        // single-path chain: both modes coincide with self-attention
        let chain = tree::parse_bracketed("(A(B(C)))").unwrap();
        let clp = tree::linearize(&chain);
        let cmasks = tree::path_mask_matrix(&tree::enumerate_paths(&clp).unwrap(), clp.len());
        let cx = g.leaf(&Tensor::uniform(vec![3, 6], 1.0, &mut rng));
        let a = path_attention(&mut g, cx, &cmasks, &p, PathMaskMode::KeysOnly, PathAverage::Uniform).unwrap();
        let b = multi_head_self_attention(&mut g, cx, &p, false, None).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }
}
