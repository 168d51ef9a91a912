//! Stage-2 recommendation: recent-session encoding, token-level
//! cross-attention gating over frozen preference vectors, session
//! aggregation, scaled-inner-product scoring, and sampled cross-entropy
//! training.

use ndarray::Array2;
use rand::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig};
use crate::corpus::{Corpus, Domain, UserSequences, Vocabulary, PAD};
use crate::disentangle::PreferenceStore;
use crate::error::CoreError;
use crate::graph::{Graph, Var};
use crate::params::{Adam, ParamStore};

pub const SESSION: &str = "session";
pub const EMB2: &str = "emb2";
pub const WQ: &str = "wq";
pub const WG: &str = "wg";
pub const BG: &str = "bg";

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RecConfig {
    /// Negatives sampled per positive.
    pub q: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Session window length.
    pub l: usize,
    pub freeze_item_embeddings: bool,
    /// Exclude the user's training history from negative sampling, not just
    /// the positive item.
    pub exclude_history: bool,
    /// Most recent training positions used per user; 0 means all.
    pub max_positions: usize,
}

impl Default for RecConfig {
    fn default() -> Self {
        Self {
            q: 99,
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 32,
            l: 50,
            freeze_item_embeddings: false,
            exclude_history: false,
            max_positions: 0,
        }
    }
}

impl RecConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.q < 1 {
            return Err(CoreError::Config("Q must be at least 1".into()));
        }
        if self.l < 1 {
            return Err(CoreError::Config("session window must be non-empty".into()));
        }
        Ok(())
    }
}

/// How the two preference signals enter the fused token representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateMode {
    /// Learned cross-attention weights plus a learned sigmoid gate.
    Full,
    /// Only the specific signal; alpha_spe fixed to 1, gate unused.
    SpeOnly,
    /// Only the cross signal; alpha_cross fixed to 1, gate unused.
    CrossOnly,
    /// Static mean pooling: alpha fixed at 0.5, fused = (a_spe + a_cross)/2.
    StaticMean,
}

pub struct Stage2Model {
    pub store: ParamStore,
    pub bb: BackboneConfig,
    pub vocab_size: usize,
    pub mode: GateMode,
}

impl Stage2Model {
    /// Fresh session Transformer and gating parameters; the scoring table
    /// starts from the Stage-1 item embeddings and is trained from there.
    pub fn init(
        bb: BackboneConfig,
        stage1_embeddings: &Array2<f64>,
        mode: GateMode,
        rng: &mut impl Rng,
    ) -> Self {
        let vocab_size = stage1_embeddings.nrows();
        assert_eq!(stage1_embeddings.ncols(), bb.d);
        let mut store = ParamStore::new();
        store.insert(EMB2, stage1_embeddings.clone());
        backbone::init_backbone(&mut store, SESSION, &bb, vocab_size, rng);
        store.insert(WQ, backbone::xavier(rng, bb.d, bb.d));
        // stored transposed relative to the column-vector convention so the
        // row-vector concat [a_spe || a_cross || h] multiplies directly
        store.insert(WG, backbone::xavier(rng, 3 * bb.d, bb.d));
        store.insert(BG, Array2::zeros((1, bb.d)));
        Stage2Model {
            store,
            bb,
            vocab_size,
            mode,
        }
    }

    pub fn trained_prefixes(&self, cfg: &RecConfig) -> Vec<&'static str> {
        let mut p = vec![SESSION, WQ, WG, BG];
        if !cfg.freeze_item_embeddings {
            p.push(EMB2);
        }
        p
    }
}

pub struct GatedTokens {
    /// (L, 2) softmax weights over {spe, cross}; None when fixed by the mode.
    pub alpha: Option<Var>,
    /// (L, d) sigmoid gate; None when the mode bypasses gating.
    pub gate: Option<Var>,
    pub a_spe: Option<Var>,
    pub a_cross: Option<Var>,
    /// (L, d) fused token representations.
    pub fused: Var,
}

/// Token-level cross-attention gating over the two preference vectors.
pub fn gate_tokens(
    g: &mut Graph,
    store: &ParamStore,
    tokens: Var,
    v_spe: Var,
    v_cross: Var,
    mode: GateMode,
) -> GatedTokens {
    let l = g.value(tokens).nrows();
    let d = g.value(tokens).ncols();
    match mode {
        GateMode::Full => {
            let wq = g.param(store, WQ);
            let q = g.matmul(tokens, wq);
            let logit_spe = g.matmul_trans_b(q, v_spe);
            let logit_cross = g.matmul_trans_b(q, v_cross);
            let logits = g.concat_cols(&[logit_spe, logit_cross]);
            let alpha = g.softmax_rows(logits);
            let alpha_spe = g.slice_cols(alpha, 0, 1);
            let alpha_cross = g.slice_cols(alpha, 1, 2);
            let a_spe = g.matmul(alpha_spe, v_spe);
            let a_cross = g.matmul(alpha_cross, v_cross);
            let cat = g.concat_cols(&[a_spe, a_cross, tokens]);
            let wg = g.param(store, WG);
            let bg = g.param(store, BG);
            let pre = g.matmul(cat, wg);
            let pre = g.add_row(pre, bg);
            let gate = g.sigmoid(pre);
            let ones = g.constant(Array2::ones((l, d)));
            let inv_gate = g.sub(ones, gate);
            let left = g.mul(gate, a_spe);
            let right = g.mul(inv_gate, a_cross);
            let fused = g.add(left, right);
            GatedTokens {
                alpha: Some(alpha),
                gate: Some(gate),
                a_spe: Some(a_spe),
                a_cross: Some(a_cross),
                fused,
            }
        }
        GateMode::SpeOnly | GateMode::CrossOnly => {
            let col = g.constant(Array2::ones((l, 1)));
            let v = if mode == GateMode::SpeOnly { v_spe } else { v_cross };
            let fused = g.matmul(col, v);
            GatedTokens {
                alpha: None,
                gate: None,
                a_spe: (mode == GateMode::SpeOnly).then_some(fused),
                a_cross: (mode == GateMode::CrossOnly).then_some(fused),
                fused,
            }
        }
        GateMode::StaticMean => {
            let half = g.constant(Array2::from_elem((l, 1), 0.5));
            let a_spe = g.matmul(half, v_spe);
            let a_cross = g.matmul(half, v_cross);
            let sum = g.add(a_spe, a_cross);
            let fused = g.scale(sum, 0.5);
            GatedTokens {
                alpha: None,
                gate: None,
                a_spe: Some(a_spe),
                a_cross: Some(a_cross),
                fused,
            }
        }
    }
}

/// Mean of the fused tokens over valid positions.
pub fn session_vector(g: &mut Graph, fused: Var, mask: &[bool]) -> Result<Var, CoreError> {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(CoreError::Data("all-padding session window".into()));
    }
    let w: Vec<f64> = mask
        .iter()
        .map(|&m| if m { 1.0 / count as f64 } else { 0.0 })
        .collect();
    Ok(g.weighted_sum_rows(fused, &w))
}

/// Scaled inner product (c . e) / sqrt(d).
pub fn score(c: &[f64], e: &[f64], d: usize) -> f64 {
    assert_eq!(c.len(), d);
    assert_eq!(e.len(), d);
    let dot: f64 = c.iter().zip(e).map(|(a, b)| a * b).sum();
    dot / (d as f64).sqrt()
}

/// -log softmax of the positive among positive + Q negatives; candidates are
/// rows of the scoring table, positive first.
pub fn rec_loss(g: &mut Graph, c: Var, emb: Var, candidates: &[usize], d: usize) -> Var {
    assert!(candidates.len() >= 2);
    let cand_emb = g.gather(emb, candidates);
    let logits = g.matmul_trans_b(c, cand_emb);
    let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
    g.mean_cross_entropy_rows(logits, &[0])
}

/// Uniform sample of Q distinct negatives from the candidate pool, which
/// excludes the positive (and optionally the user's history).
pub fn sample_negatives(
    pool: &[usize],
    positive: usize,
    q: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>, CoreError> {
    let eligible: Vec<usize> = pool.iter().copied().filter(|&i| i != positive).collect();
    if eligible.len() < q {
        return Err(CoreError::Config(format!(
            "cannot sample {q} negatives from {} eligible items; lower Q",
            eligible.len()
        )));
    }
    let idx = rand::seq::index::sample(rng, eligible.len(), q);
    Ok(idx.into_iter().map(|i| eligible[i]).collect())
}

/// Cross-sequence prefix strictly before the p-th (0-based) target-domain
/// item; the session context for predicting that item.
pub fn session_before(
    u: &UserSequences,
    vocab: &Vocabulary,
    target: Domain,
    p: usize,
) -> Vec<usize> {
    let pos = u.cross_position_of_nth(vocab, target, p);
    u.seq_cross[..pos].to_vec()
}

fn preference_vars(
    g: &mut Graph,
    prefs: &PreferenceStore,
    user: &str,
    d: usize,
) -> Result<(Var, Var), CoreError> {
    let (v_spe, v_cross) = prefs.get(user).ok_or_else(|| {
        CoreError::Data(format!("no preference vector for user {user}"))
    })?;
    let row = |v: &[f64]| Array2::from_shape_vec((1, d), v.to_vec()).unwrap();
    let vs = g.constant(row(v_spe));
    let vx = g.constant(row(v_cross));
    Ok((vs, vx))
}

/// Forward pass from a raw session sequence to the session-level vector.
pub fn encode_session(
    g: &mut Graph,
    model: &Stage2Model,
    prefs: &PreferenceStore,
    user: &str,
    session_seq: &[usize],
    l: usize,
) -> Result<Var, CoreError> {
    let (ids, mask) = crate::corpus::window_fit(session_seq, l.min(model.bb.l_max), PAD);
    let emb = g.param(&model.store, EMB2);
    let enc = backbone::encode(g, &model.store, SESSION, emb, &ids, &mask, &model.bb);
    let (v_spe, v_cross) = preference_vars(g, prefs, user, model.bb.d)?;
    let gated = gate_tokens(g, &model.store, enc.tokens, v_spe, v_cross, model.mode);
    session_vector(g, gated.fused, &mask)
}

/// Session vector as plain numbers, for evaluation-time scoring.
pub fn session_vector_for(
    model: &Stage2Model,
    prefs: &PreferenceStore,
    user: &str,
    session_seq: &[usize],
    l: usize,
) -> Result<Vec<f64>, CoreError> {
    let mut g = Graph::new();
    let c = encode_session(&mut g, model, prefs, user, session_seq, l)?;
    Ok(g.value(c).row(0).to_vec())
}

/// One Stage-2 epoch over all users' training positions. Returns the mean
/// recommendation loss across training examples.
#[allow(clippy::too_many_arguments)]
pub fn stage2_epoch(
    model: &mut Stage2Model,
    prefs: &PreferenceStore,
    corpus: &Corpus,
    target: Domain,
    cfg: &RecConfig,
    opt: &mut Adam,
    rng: &mut impl Rng,
    shuffle: bool,
) -> Result<f64, CoreError> {
    assert!(prefs.is_frozen(), "preference store must be frozen before Stage 2");
    cfg.validate()?;
    let domain_pool = corpus.vocab.domain_items(target);
    if domain_pool.len() <= cfg.q {
        return Err(CoreError::Config(format!(
            "target vocabulary ({} items) must exceed Q={}",
            domain_pool.len(),
            cfg.q
        )));
    }

    // (user index, position of the positive within the target train split)
    let mut examples: Vec<(usize, usize)> = Vec::new();
    for (ui, u) in corpus.users.iter().enumerate() {
        let train_len = u.train(target).len();
        let start = if cfg.max_positions > 0 {
            train_len.saturating_sub(cfg.max_positions).max(1)
        } else {
            1
        };
        for p in start..train_len {
            examples.push((ui, p));
        }
    }
    if shuffle {
        examples.shuffle(rng);
    }

    let mut total = 0.0;
    let mut count = 0usize;
    let prefixes = model.trained_prefixes(cfg);
    for chunk in examples.chunks(cfg.batch_size.max(1)) {
        let mut g = Graph::new();
        let mut terms = Vec::new();
        for &(ui, p) in chunk {
            let u = &corpus.users[ui];
            let positive = u.train(target)[p];
            let session = session_before(u, &corpus.vocab, target, p);
            let c = encode_session(&mut g, model, prefs, &u.user, &session, cfg.l)?;
            let pool: Vec<usize> = if cfg.exclude_history {
                let history: std::collections::HashSet<usize> =
                    u.train(target).iter().copied().collect();
                domain_pool
                    .iter()
                    .copied()
                    .filter(|i| !history.contains(i) || *i == positive)
                    .collect()
            } else {
                domain_pool.clone()
            };
            let negatives = sample_negatives(&pool, positive, cfg.q, rng)?;
            let mut candidates = vec![positive];
            candidates.extend(negatives);
            let emb = g.param(&model.store, EMB2);
            terms.push(rec_loss(&mut g, c, emb, &candidates, model.bb.d));
        }
        let mut batch_loss = terms[0];
        for &t in &terms[1..] {
            batch_loss = g.add(batch_loss, t);
        }
        let batch_loss = g.scale(batch_loss, 1.0 / terms.len() as f64);
        let value = g.scalar(batch_loss);
        if !value.is_finite() {
            return Err(CoreError::Numerical("non-finite Stage-2 loss".into()));
        }
        total += value * terms.len() as f64;
        count += terms.len();
        let grads = g.backward(batch_loss);
        opt.step(&mut model.store, &grads, &prefixes);
    }
    if count == 0 {
        return Err(CoreError::Data("no Stage-2 training examples".into()));
    }
    if !model.store.all_finite() {
        return Err(CoreError::Numerical("non-finite Stage-2 parameters".into()));
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::grad_check;
    use crate::synth::{synthesize, SynthSpec};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(seed: u64, mode: GateMode) -> Stage2Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bb = BackboneConfig {
            d: 8,
            k_layers: 1,
            heads: 2,
            d_ff: 16,
            l_max: 10,
        };
        let emb = backbone::xavier(&mut rng, 30, bb.d);
        Stage2Model::init(bb, &emb, mode, &mut rng)
    }

    fn rand_row(rng: &mut ChaCha8Rng, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((1, d), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn equal_preference_vectors_give_half_alpha_and_half_v() {
        let model = tiny_model(1, GateMode::Full);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = model.bb.d;
        let mut g = Graph::new();
        let tokens = g.constant(Array2::from_shape_fn((4, d), |_| rng.gen_range(-1.0..1.0)));
        let v = rand_row(&mut rng, d);
        let vs = g.constant(v.clone());
        let vx = g.constant(v.clone());
        let out = gate_tokens(&mut g, &model.store, tokens, vs, vx, GateMode::Full);
        let alpha = g.value(out.alpha.unwrap());
        for t in 0..4 {
            assert!((alpha[[t, 0]] - 0.5).abs() < 1e-12);
            assert!((alpha[[t, 1]] - 0.5).abs() < 1e-12);
        }
        let fused = g.value(out.fused);
        for t in 0..4 {
            for j in 0..d {
                assert!((fused[[t, j]] - 0.5 * v[[0, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn saturated_gate_selects_specific_signal() {
        let mut model = tiny_model(2, GateMode::Full);
        model.store.insert(BG, Array2::from_elem((1, model.bb.d), 50.0));
        model.store.insert(WG, Array2::zeros((3 * model.bb.d, model.bb.d)));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = model.bb.d;
        let mut g = Graph::new();
        let tokens = g.constant(Array2::from_shape_fn((3, d), |_| rng.gen_range(-1.0..1.0)));
        let vs = g.constant(rand_row(&mut rng, d));
        let vx = g.constant(rand_row(&mut rng, d));
        let out = gate_tokens(&mut g, &model.store, tokens, vs, vx, GateMode::Full);
        let fused = g.value(out.fused).clone();
        let a_spe = g.value(out.a_spe.unwrap());
        for (f, a) in fused.iter().zip(a_spe.iter()) {
            assert!((f - a).abs() < 1e-12);
        }
    }

    #[test]
    fn fused_tokens_are_convex_combinations() {
        for seed in 0..100u64 {
            let model = tiny_model(seed, GateMode::Full);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let d = model.bb.d;
            let mut g = Graph::new();
            let tokens =
                g.constant(Array2::from_shape_fn((5, d), |_| rng.gen_range(-2.0..2.0)));
            let vs = g.constant(rand_row(&mut rng, d));
            let vx = g.constant(rand_row(&mut rng, d));
            let out = gate_tokens(&mut g, &model.store, tokens, vs, vx, GateMode::Full);
            let alpha = g.value(out.alpha.unwrap()).clone();
            let gate = g.value(out.gate.unwrap()).clone();
            let fused = g.value(out.fused).clone();
            let a_spe = g.value(out.a_spe.unwrap()).clone();
            let a_cross = g.value(out.a_cross.unwrap()).clone();
            for t in 0..5 {
                let s = alpha[[t, 0]] + alpha[[t, 1]];
                assert!((s - 1.0).abs() < 1e-6);
                assert!(alpha[[t, 0]] >= 0.0 && alpha[[t, 1]] >= 0.0);
                for j in 0..d {
                    assert!(gate[[t, j]] > 0.0 && gate[[t, j]] < 1.0);
                    let lo = a_spe[[t, j]].min(a_cross[[t, j]]) - 1e-12;
                    let hi = a_spe[[t, j]].max(a_cross[[t, j]]) + 1e-12;
                    assert!(fused[[t, j]] >= lo && fused[[t, j]] <= hi);
                }
            }
        }
    }

    #[test]
    fn session_vector_cases() {
        let mut g = Graph::new();
        let fused = g.constant(array![[1.0, 2.0], [3.0, 4.0], [9.0, 9.0]]);
        // one valid token -> that token
        let v = session_vector(&mut g, fused, &[false, true, false]).unwrap();
        assert_eq!(g.value(v), &array![[3.0, 4.0]]);
        // brute force mean over valid positions
        let v = session_vector(&mut g, fused, &[true, true, false]).unwrap();
        assert_eq!(g.value(v), &array![[2.0, 3.0]]);
        assert!(session_vector(&mut g, fused, &[false, false, false]).is_err());
    }

    #[test]
    fn score_cases() {
        assert_eq!(score(&[1.0, 0.0], &[0.0, 1.0], 2), 0.0);
        // d=4, c=(1,1,0,0), e=(2,0,0,0) -> 2/sqrt(4) = 1
        assert_eq!(score(&[1.0, 1.0, 0.0, 0.0], &[2.0, 0.0, 0.0, 0.0], 4), 1.0);
        // c = e with squared norm d -> sqrt(d)
        let c = vec![1.0; 9];
        assert!((score(&c, &c, 9) - 3.0).abs() < 1e-12);
        // explicit 1/sqrt(d) law: same vectors, d/4 -> doubled score
        let a = vec![0.7, -0.3, 0.2, 0.9];
        let b = vec![0.1, 0.4, -0.5, 0.6];
        assert!((score(&a[..1], &b[..1], 1) - 2.0 * score_fixed(&a[..1], &b[..1], 4)).abs() < 1e-12);

        fn score_fixed(c: &[f64], e: &[f64], d: usize) -> f64 {
            let dot: f64 = c.iter().zip(e).map(|(a, b)| a * b).sum();
            dot / (d as f64).sqrt()
        }
    }

    #[test]
    fn rec_loss_uniform_and_limit() {
        let mut store = ParamStore::new();
        store.insert("emb", Array2::zeros((6, 4)));
        store.insert("c", array![[1.0, 0.0, 0.0, 0.0]]);
        let mut g = Graph::new();
        let emb = g.param(&store, "emb");
        let c = g.param(&store, "c");
        let l = rec_loss(&mut g, c, emb, &[0, 1, 2, 3], 4);
        assert!((g.scalar(l) - 4.0f64.ln()).abs() < 1e-12);

        // positive score far above the negatives -> loss -> 0
        let mut emb_v = Array2::zeros((6, 4));
        emb_v[[0, 0]] = 100.0;
        store.insert("emb", emb_v);
        let mut g = Graph::new();
        let emb = g.param(&store, "emb");
        let c = g.param(&store, "c");
        let l = rec_loss(&mut g, c, emb, &[0, 1, 2], 4);
        assert!(g.scalar(l) < 1e-12);
    }

    #[test]
    fn rec_loss_invariant_to_negative_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        store.insert("emb", backbone::xavier(&mut rng, 10, 4));
        store.insert("c", rand_row(&mut rng, 4));
        let forward = |cands: &[usize]| {
            let mut g = Graph::new();
            let emb = g.param(&store, "emb");
            let c = g.param(&store, "c");
            let l = rec_loss(&mut g, c, emb, cands, 4);
            g.scalar(l)
        };
        assert!((forward(&[3, 1, 7, 5]) - forward(&[3, 5, 1, 7])).abs() < 1e-12);
    }

    #[test]
    fn rec_loss_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        store.insert("emb", backbone::xavier(&mut rng, 8, 4));
        store.insert("c", rand_row(&mut rng, 4));
        let mut g = Graph::new();
        let emb = g.param(&store, "emb");
        let c = g.param(&store, "c");
        let l = rec_loss(&mut g, c, emb, &[2, 0, 5, 7], 4);
        let grads = g.backward(l);
        let err = grad_check(
            &store,
            &grads,
            |s| {
                let mut g = Graph::new();
                let emb = g.param(s, "emb");
                let c = g.param(s, "c");
                let l = rec_loss(&mut g, c, emb, &[2, 0, 5, 7], 4);
                g.scalar(l)
            },
            1e-5,
            8,
        );
        assert!(err <= 1e-3, "rec_loss grad err {err}");
    }

    #[test]
    fn negative_sampling_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pool: Vec<usize> = (2..30).collect();
        let negs = sample_negatives(&pool, 5, 20, &mut rng).unwrap();
        assert_eq!(negs.len(), 20);
        assert!(!negs.contains(&5));
        let unique: std::collections::HashSet<_> = negs.iter().collect();
        assert_eq!(unique.len(), 20, "sampling must be without replacement");
        assert!(sample_negatives(&pool, 5, pool.len(), &mut rng).is_err());
    }

    #[test]
    fn stage2_preserves_preference_store_and_trains_loss_down() {
        let spec = SynthSpec {
            n_users: 12,
            n_items_per_domain: 15,
            seq_len_range: (6, 10),
            ..Default::default()
        };
        let out = synthesize(&spec).unwrap();
        let corpus = out.corpus;
        let d = 8;
        let mut prefs = PreferenceStore::new(d);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for u in &corpus.users {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            prefs.insert(&u.user, v, w).unwrap();
        }
        prefs.freeze();
        let bb = BackboneConfig {
            d,
            k_layers: 1,
            heads: 2,
            d_ff: 16,
            l_max: 12,
        };
        let emb = backbone::xavier(&mut rng, corpus.vocab.size(), d);
        let mut model = Stage2Model::init(bb, &emb, GateMode::Full, &mut rng);
        let cfg = RecConfig {
            q: 5,
            l: 8,
            batch_size: 8,
            ..Default::default()
        };
        let mut opt = Adam::new(cfg.learning_rate);
        let before = prefs.clone();
        let mut losses = Vec::new();
        for _ in 0..5 {
            // fixed batch order and fixed negative draws for a clean curve
            let mut epoch_rng = ChaCha8Rng::seed_from_u64(11);
            losses.push(
                stage2_epoch(
                    &mut model, &prefs, &corpus, Domain::X, &cfg, &mut opt, &mut epoch_rng,
                    false,
                )
                .unwrap(),
            );
        }
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "loss must decrease on a fixed batch order: {losses:?}");
        }
        // freeze contract: preference vectors untouched
        for u in before.users() {
            let (a1, b1) = before.get(u).unwrap();
            let (a2, b2) = prefs.get(u).unwrap();
            assert_eq!(a1, a2);
            assert_eq!(b1, b2);
        }
        assert!(model.store.all_finite());
    }

    #[test]
    fn static_mean_mode_leaves_gate_parameters_untouched() {
        let spec = SynthSpec {
            n_users: 8,
            n_items_per_domain: 12,
            seq_len_range: (6, 9),
            ..Default::default()
        };
        let corpus = synthesize(&spec).unwrap().corpus;
        let d = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut prefs = PreferenceStore::new(d);
        for u in &corpus.users {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            prefs.insert(&u.user, v, w).unwrap();
        }
        prefs.freeze();
        let bb = BackboneConfig {
            d,
            k_layers: 1,
            heads: 2,
            d_ff: 16,
            l_max: 12,
        };
        let emb = backbone::xavier(&mut rng, corpus.vocab.size(), d);
        let mut model = Stage2Model::init(bb, &emb, GateMode::StaticMean, &mut rng);
        let cfg = RecConfig {
            q: 4,
            l: 8,
            ..Default::default()
        };
        let wq_before = model.store.get(WQ).clone();
        let wg_before = model.store.get(WG).clone();
        let bg_before = model.store.get(BG).clone();
        let mut opt = Adam::new(cfg.learning_rate);
        stage2_epoch(
            &mut model, &prefs, &corpus, Domain::X, &cfg, &mut opt, &mut rng, true,
        )
        .unwrap();
        assert_eq!(model.store.get(WQ), &wq_before);
        assert_eq!(model.store.get(WG), &wg_before);
        assert_eq!(model.store.get(BG), &bg_before);
    }

    #[test]
    fn vocabulary_smaller_than_q_is_fatal() {
        let spec = SynthSpec {
            n_users: 6,
            n_items_per_domain: 10,
            seq_len_range: (6, 8),
            ..Default::default()
        };
        let corpus = synthesize(&spec).unwrap().corpus;
        let d = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut prefs = PreferenceStore::new(d);
        for u in &corpus.users {
            prefs.insert(&u.user, vec![0.0; d], vec![0.0; d]).unwrap();
        }
        prefs.freeze();
        let bb = BackboneConfig {
            d,
            k_layers: 1,
            heads: 2,
            d_ff: 16,
            l_max: 12,
        };
        let emb = backbone::xavier(&mut rng, corpus.vocab.size(), d);
        let mut model = Stage2Model::init(bb, &emb, GateMode::Full, &mut rng);
        let cfg = RecConfig {
            q: 10_000,
            l: 8,
            ..Default::default()
        };
        let mut opt = Adam::new(cfg.learning_rate);
        let err = stage2_epoch(
            &mut model, &prefs, &corpus, Domain::X, &cfg, &mut opt, &mut rng, true,
        );
        assert!(matches!(err, Err(CoreError::Config(_))));
    }
}
