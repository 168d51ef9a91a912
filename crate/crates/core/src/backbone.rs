//! Bidirectional Transformer sequence encoder with a tied-weight masked
//! item prediction head. The same parameter template backs the three
//! Stage-1 encoders and the Stage-2 session encoder, distinguished only by
//! a name prefix inside the parameter store.

use ndarray::Array2;
use rand::Rng;

use crate::corpus::MASK;
use crate::error::CoreError;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    pub d: usize,
    pub k_layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub l_max: usize,
}

impl BackboneConfig {
    pub fn new(d: usize, k_layers: usize, heads: usize, l_max: usize) -> Self {
        Self {
            d,
            k_layers,
            heads,
            d_ff: 4 * d,
            l_max,
        }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(CoreError::Config(format!(
                "embedding dim {} must be a positive multiple of heads {}",
                self.d, self.heads
            )));
        }
        Ok(())
    }
}

pub fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let r = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-r..r))
}

pub fn init_embeddings(store: &mut ParamStore, name: &str, vocab: usize, d: usize, rng: &mut impl Rng) {
    store.insert(name, xavier(rng, vocab, d));
}

/// Register all encoder parameters under `prefix.` in the store.
pub fn init_backbone(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &BackboneConfig,
    vocab: usize,
    rng: &mut impl Rng,
) {
    store.insert(&format!("{prefix}.pos"), xavier(rng, cfg.l_max, cfg.d));
    for k in 0..cfg.k_layers {
        let p = format!("{prefix}.l{k}");
        for w in ["wq", "wk", "wv", "wo"] {
            store.insert(&format!("{p}.{w}"), xavier(rng, cfg.d, cfg.d));
        }
        store.insert(&format!("{p}.bo"), Array2::zeros((1, cfg.d)));
        store.insert(&format!("{p}.ln_g"), Array2::ones((1, cfg.d)));
        store.insert(&format!("{p}.ln_b"), Array2::zeros((1, cfg.d)));
        store.insert(&format!("{p}.w1"), xavier(rng, cfg.d, cfg.d_ff));
        store.insert(&format!("{p}.b1"), Array2::zeros((1, cfg.d_ff)));
        store.insert(&format!("{p}.w2"), xavier(rng, cfg.d_ff, cfg.d));
        store.insert(&format!("{p}.b2"), Array2::zeros((1, cfg.d)));
    }
    store.insert(&format!("{prefix}.mlm_bias"), Array2::zeros((1, vocab)));
}

/// Copy one encoder's parameters to another prefix (shared initialization
/// that then diverges under staged training).
pub fn copy_backbone(store: &mut ParamStore, from: &str, to: &str) {
    let from_dot = format!("{from}.");
    let names: Vec<String> = store
        .names()
        .filter(|n| n.starts_with(&from_dot))
        .map(str::to_string)
        .collect();
    for name in names {
        let value = store.get(&name).clone();
        store.insert(&format!("{to}.{}", &name[from_dot.len()..]), value);
    }
}

pub struct Encoded {
    pub tokens: Var,
    pub pooled: Var,
}

/// Run the encoder over one windowed sequence. Padding positions are
/// excluded from attention keys and from pooling.
pub fn encode(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    emb: Var,
    ids: &[usize],
    mask: &[bool],
    cfg: &BackboneConfig,
) -> Encoded {
    let l = ids.len();
    assert!(l <= cfg.l_max, "window of length {l} exceeds l_max {}", cfg.l_max);
    assert_eq!(mask.len(), l);
    let dh = cfg.d / cfg.heads;

    let item = g.gather(emb, ids);
    let pos_table = g.param(store, &format!("{prefix}.pos"));
    let pos_idx: Vec<usize> = (0..l).collect();
    let pos = g.gather(pos_table, &pos_idx);
    let mut h = g.add(item, pos);

    // additive attention mask: invalid keys contribute -inf
    let mut mask_mat = Array2::zeros((l, l));
    for (j, &valid) in mask.iter().enumerate() {
        if !valid {
            mask_mat.column_mut(j).fill(-1e9);
        }
    }
    let attn_mask = g.constant(mask_mat);

    for k in 0..cfg.k_layers {
        let p = format!("{prefix}.l{k}");
        let wq = g.param(store, &format!("{p}.wq"));
        let wk = g.param(store, &format!("{p}.wk"));
        let wv = g.param(store, &format!("{p}.wv"));
        let q = g.matmul(h, wq);
        let key = g.matmul(h, wk);
        let v = g.matmul(h, wv);
        let mut heads = Vec::with_capacity(cfg.heads);
        for hd in 0..cfg.heads {
            let (s, e) = (hd * dh, (hd + 1) * dh);
            let qh = g.slice_cols(q, s, e);
            let kh = g.slice_cols(key, s, e);
            let vh = g.slice_cols(v, s, e);
            let scores = g.matmul_trans_b(qh, kh);
            let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
            let masked = g.add(scaled, attn_mask);
            let attn = g.softmax_rows(masked);
            heads.push(g.matmul(attn, vh));
        }
        let ctx = g.concat_cols(&heads);
        let wo = g.param(store, &format!("{p}.wo"));
        let bo = g.param(store, &format!("{p}.bo"));
        let proj = g.matmul(ctx, wo);
        let mha = g.add_row(proj, bo);
        let res = g.add(mha, h);
        let ln_g = g.param(store, &format!("{p}.ln_g"));
        let ln_b = g.param(store, &format!("{p}.ln_b"));
        let normed = g.layer_norm(res, ln_g, ln_b);
        let w1 = g.param(store, &format!("{p}.w1"));
        let b1 = g.param(store, &format!("{p}.b1"));
        let w2 = g.param(store, &format!("{p}.w2"));
        let b2 = g.param(store, &format!("{p}.b2"));
        let ff1 = g.matmul(normed, w1);
        let ff1b = g.add_row(ff1, b1);
        let act = g.gelu(ff1b);
        let ff2 = g.matmul(act, w2);
        h = g.add_row(ff2, b2);
    }
    let pooled = g.masked_mean_rows(h, mask);
    Encoded { tokens: h, pooled }
}

/// One row of Cloze supervision: inputs with MASK substitutions plus the
/// original indices at the masked positions.
#[derive(Clone, Debug)]
pub struct MaskedRow {
    pub inputs: Vec<usize>,
    pub mask: Vec<bool>,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Mask each valid position independently with probability `mask_ratio`,
/// forcing at least one mask per non-empty row.
pub fn mask_items(
    ids: &[usize],
    mask: &[bool],
    mask_ratio: f64,
    rng: &mut impl Rng,
) -> MaskedRow {
    assert!(mask_ratio > 0.0 && mask_ratio < 1.0);
    let mut inputs = ids.to_vec();
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    let valid: Vec<usize> = (0..ids.len()).filter(|&i| mask[i]).collect();
    for &i in &valid {
        if rng.gen::<f64>() < mask_ratio {
            positions.push(i);
            targets.push(ids[i]);
            inputs[i] = MASK;
        }
    }
    if positions.is_empty() && !valid.is_empty() {
        let i = valid[rng.gen_range(0..valid.len())];
        positions.push(i);
        targets.push(ids[i]);
        inputs[i] = MASK;
    }
    MaskedRow {
        inputs,
        mask: mask.to_vec(),
        positions,
        targets,
    }
}

/// Cross-entropy of predicting the original items at masked positions,
/// with logits tied to the item embedding table. Returns `None` when the
/// row has no masked positions (zero loss, zero gradients).
pub fn mlm_loss(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    emb: Var,
    row: &MaskedRow,
    cfg: &BackboneConfig,
) -> Option<Var> {
    if row.positions.is_empty() {
        return None;
    }
    let enc = encode(g, store, prefix, emb, &row.inputs, &row.mask, cfg);
    let states = g.gather_rows(enc.tokens, &row.positions);
    let logits = g.matmul_trans_b(states, emb);
    let bias = g.param(store, &format!("{prefix}.mlm_bias"));
    let logits = g.add_row(logits, bias);
    Some(g.mean_cross_entropy_rows(logits, &row.targets))
}
