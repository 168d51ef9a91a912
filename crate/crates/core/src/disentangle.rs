//! Stage-1 orthogonal preference decomposition: domain discriminator,
//! gradient reversal, alignment/separation constraints, staged per-encoder
//! optimization, and preference-vector extraction.

use std::fs;
use std::io::Read;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use indexmap::IndexMap;
use rand::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig};
use crate::corpus::{Corpus, Domain, UserSequences};
use crate::error::CoreError;
use crate::graph::{Graph, Var};
use crate::params::{Adam, ParamStore};

pub const SPE: &str = "spe";
pub const COM: &str = "com";
pub const CROSS: &str = "cross";
pub const EMB: &str = "emb";
/// The common encoder owns its item table so adversarial pressure can reach
/// the embeddings themselves; the shared table would pin its inputs to the
/// domain-clustered geometry learned by the other two encoders.
pub const COM_EMB: &str = "com.emb";

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GrlConfig {
    pub lambda: f64,
}

impl Default for GrlConfig {
    fn default() -> Self {
        Self { lambda: 1.0 }
    }
}

impl GrlConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.lambda > 0.0 {
            Ok(())
        } else {
            Err(CoreError::Config("GRL lambda must be positive".into()))
        }
    }
}

/// Stage-1 hyperparameters. Defaults are the optimal values from the
/// sensitivity study: beta1=0.1, beta2=0.01, beta3=0.1, beta4=0.1, rho=1.0.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OpdConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub beta4: f64,
    pub rho: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub mask_ratio: f64,
    /// Decoupled weight decay on the common encoder during its adversarial
    /// sub-step, and discriminator best-response steps taken (on frozen
    /// features) before each adversarial update. Both stabilize the minimax:
    /// the common encoder has no other objective, so without them the game
    /// oscillates instead of mixing the domains.
    pub weight_decay: f64,
    pub disc_steps: usize,
    pub grl: GrlConfig,
    /// Early-stop patience on the validation masked-prediction loss.
    pub patience: usize,
}

impl Default for OpdConfig {
    fn default() -> Self {
        Self {
            beta1: 0.1,
            beta2: 0.01,
            beta3: 0.1,
            beta4: 0.1,
            rho: 1.0,
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 32,
            mask_ratio: 0.2,
            weight_decay: 0.0,
            disc_steps: 5,
            grl: GrlConfig::default(),
            patience: 5,
        }
    }
}

impl OpdConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.beta1 < 0.0 || self.beta2 < 0.0 || self.beta3 < 0.0 || self.beta4 < 0.0 {
            return Err(CoreError::Config("loss weights must be non-negative".into()));
        }
        if self.rho <= 0.0 {
            return Err(CoreError::Config("separation margin must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) || self.mask_ratio == 0.0 {
            return Err(CoreError::Config("mask ratio must lie in (0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(CoreError::Config("weight decay must be non-negative".into()));
        }
        self.grl.validate()
    }
}

/// Which parts of Stage 1 are active; the full model enables everything.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stage1Wiring {
    pub train_com: bool,
    pub grl_enabled: bool,
    pub use_cross: bool,
    pub use_align: bool,
    pub use_sep: bool,
}

impl Default for Stage1Wiring {
    fn default() -> Self {
        Self {
            train_com: true,
            grl_enabled: true,
            use_cross: true,
            use_align: true,
            use_sep: true,
        }
    }
}

pub struct Stage1Model {
    pub store: ParamStore,
    pub bb: BackboneConfig,
    pub vocab_size: usize,
    pub wiring: Stage1Wiring,
}

impl Stage1Model {
    /// One random draw of shared Transformer weights, copied into the three
    /// encoders, which then diverge under staged training.
    pub fn init(
        bb: BackboneConfig,
        vocab_size: usize,
        wiring: Stage1Wiring,
        rng: &mut impl Rng,
    ) -> Self {
        let mut store = ParamStore::new();
        backbone::init_embeddings(&mut store, EMB, vocab_size, bb.d, rng);
        backbone::init_backbone(&mut store, SPE, &bb, vocab_size, rng);
        backbone::copy_backbone(&mut store, SPE, COM);
        let table = store.get(EMB).clone();
        store.insert(COM_EMB, table);
        if wiring.use_cross {
            backbone::copy_backbone(&mut store, SPE, CROSS);
        }
        init_discriminator(&mut store, bb.d, rng);
        Stage1Model {
            store,
            bb,
            vocab_size,
            wiring,
        }
    }
}

pub fn init_discriminator(store: &mut ParamStore, d: usize, rng: &mut impl Rng) {
    let hidden = (d / 2).max(1);
    let r1 = (6.0 / (d + hidden) as f64).sqrt();
    let r2 = (6.0 / (hidden + 1) as f64).sqrt();
    store.insert(
        "disc.w1",
        ndarray::Array2::from_shape_fn((d, hidden), |_| rng.gen_range(-r1..r1)),
    );
    store.insert("disc.b1", ndarray::Array2::zeros((1, hidden)));
    store.insert(
        "disc.w2",
        ndarray::Array2::from_shape_fn((hidden, 1), |_| rng.gen_range(-r2..r2)),
    );
    store.insert("disc.b2", ndarray::Array2::zeros((1, 1)));
}

/// Discriminator pre-sigmoid logit; the domain probability is its sigmoid,
/// always inside (0, 1) for finite inputs.
pub fn disc_logit(g: &mut Graph, store: &ParamStore, pooled: Var) -> Var {
    let w1 = g.param(store, "disc.w1");
    let b1 = g.param(store, "disc.b1");
    let w2 = g.param(store, "disc.w2");
    let b2 = g.param(store, "disc.b2");
    let h = g.matmul(pooled, w1);
    let h = g.add_row(h, b1);
    let h = g.tanh(h);
    let z = g.matmul(h, w2);
    g.add_row(z, b2)
}

pub fn disc_prob(g: &mut Graph, store: &ParamStore, pooled: Var) -> Var {
    let z = disc_logit(g, store, pooled);
    g.sigmoid(z)
}

/// Domain classification loss on the specific encoder's pooled output;
/// gradients flow unreversed into both the discriminator and the encoder.
pub fn disc_loss_spe(g: &mut Graph, store: &ParamStore, pooled: Var, domain: Domain) -> Var {
    let z = disc_logit(g, store, pooled);
    g.bce_with_logit(z, domain.label())
}

/// Same forward value as [`disc_loss_spe`], but encoder-side gradients are
/// reversed (scaled by -lambda) through the gradient reversal layer;
/// discriminator gradients are untouched.
pub fn disc_loss_com(
    g: &mut Graph,
    store: &ParamStore,
    pooled: Var,
    domain: Domain,
    grl: GrlConfig,
) -> Var {
    let reversed = g.grad_reverse(pooled, grl.lambda);
    let z = disc_logit(g, store, reversed);
    g.bce_with_logit(z, domain.label())
}

/// Squared L2 distance to the stop-gradiented common representation; only
/// the cross encoder receives gradients.
pub fn align_loss(g: &mut Graph, pooled_cross: Var, pooled_com: Var) -> Var {
    let sg = g.stop_grad(pooled_com);
    g.sq_dist(pooled_cross, sg)
}

/// Mean margin hinge over (cross, specific) pooled pairs; gradients flow
/// into both encoders.
pub fn sep_loss(g: &mut Graph, pairs: &[(Var, Var)], rho: f64) -> Var {
    assert!(!pairs.is_empty());
    let terms: Vec<Var> = pairs
        .iter()
        .map(|&(a, b)| g.hinge_dist(a, b, rho))
        .collect();
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    g.scale(total, 1.0 / pairs.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub l_mlm_spe: f64,
    pub l_disc_spe: f64,
    pub l_disc_com: f64,
    pub l_mlm_cross: f64,
    pub l_align: f64,
    pub l_sep: f64,
}

fn mean_losses(g: &mut Graph, terms: &[Var]) -> Option<Var> {
    if terms.is_empty() {
        return None;
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    Some(g.scale(total, 1.0 / terms.len() as f64))
}

fn check_finite(value: f64, substep: char) -> Result<(), CoreError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(CoreError::Numerical(format!(
            "non-finite loss in Stage-1 sub-step {substep}"
        )))
    }
}

pub struct Stage1Batch<'a> {
    pub users: Vec<&'a UserSequences>,
}

fn encode_clean(g: &mut Graph, model: &Stage1Model, prefix: &str, seq: &[usize]) -> Var {
    let table = if prefix == COM { COM_EMB } else { EMB };
    let emb = g.param(&model.store, table);
    let (ids, mask) = crate::corpus::window_fit(seq, model.bb.l_max, crate::corpus::PAD);
    backbone::encode(g, &model.store, prefix, emb, &ids, &mask, &model.bb).pooled
}

fn masked_mlm_term(
    g: &mut Graph,
    model: &Stage1Model,
    prefix: &str,
    emb: Var,
    seq: &[usize],
    cfg: &OpdConfig,
    rng: &mut impl Rng,
) -> Option<Var> {
    let (ids, mask) = crate::corpus::window_fit(seq, model.bb.l_max, crate::corpus::PAD);
    let row = backbone::mask_items(&ids, &mask, cfg.mask_ratio, rng);
    backbone::mlm_loss(g, &model.store, prefix, emb, &row, &model.bb)
}

/// Sub-step A: update f_spe and the discriminator via
/// L_spe = L_mlm(f_spe) + beta1 * L_disc_spe.
pub fn substep_a(
    model: &mut Stage1Model,
    batch: &Stage1Batch,
    cfg: &OpdConfig,
    opt: &mut Adam,
    rng: &mut impl Rng,
) -> Result<(Option<f64>, f64), CoreError> {
    let mut g = Graph::new();
    let emb = g.param(&model.store, EMB);
    let mut mlm_terms = Vec::new();
    let mut disc_terms = Vec::new();
    for u in &batch.users {
        for domain in [Domain::X, Domain::Y] {
            let seq = u.train(domain);
            if let Some(t) = masked_mlm_term(&mut g, model, SPE, emb, seq, cfg, rng) {
                mlm_terms.push(t);
            }
            let pooled = encode_clean(&mut g, model, SPE, seq);
            disc_terms.push(disc_loss_spe(&mut g, &model.store, pooled, domain));
        }
    }
    let mlm = mean_losses(&mut g, &mlm_terms);
    let disc = mean_losses(&mut g, &disc_terms).expect("batch not empty");
    let loss = match mlm {
        Some(m) => {
            let weighted = g.scale(disc, cfg.beta1);
            g.add(m, weighted)
        }
        None => g.scale(disc, cfg.beta1),
    };
    check_finite(g.scalar(loss), 'A')?;
    let result = (mlm.map(|m| g.scalar(m)), g.scalar(disc));
    let grads = g.backward(loss);
    opt.step(&mut model.store, &grads, &[EMB, "spe.", "disc."]);
    Ok(result)
}

/// Sub-step B: update f_com and the discriminator via the reversed
/// adversarial loss L_com = beta2 * L_disc_com.
pub fn substep_b(
    model: &mut Stage1Model,
    batch: &Stage1Batch,
    cfg: &OpdConfig,
    opt: &mut Adam,
) -> Result<f64, CoreError> {
    // Bring the discriminator near its best response before the adversarial
    // update; a single alternating step lets the encoder leapfrog a stale
    // boundary every batch and the minimax oscillates instead of mixing the
    // domains. The features are frozen here, so these steps only pay for the
    // tiny classification head.
    if model.wiring.grl_enabled && cfg.disc_steps > 0 {
        let mut features = Vec::new();
        {
            let mut g = Graph::new();
            for u in &batch.users {
                for domain in [Domain::X, Domain::Y] {
                    let pooled = encode_clean(&mut g, model, COM, u.train(domain));
                    features.push((g.value(pooled).to_owned(), domain));
                }
            }
        }
        for _ in 0..cfg.disc_steps {
            let mut g = Graph::new();
            let terms: Vec<Var> = features
                .iter()
                .map(|(pooled, domain)| {
                    let p = g.constant(pooled.clone());
                    disc_loss_spe(&mut g, &model.store, p, *domain)
                })
                .collect();
            let loss = mean_losses(&mut g, &terms).expect("batch not empty");
            let grads = g.backward(loss);
            opt.step(&mut model.store, &grads, &["disc."]);
        }
    }

    let mut g = Graph::new();
    let mut disc_terms = Vec::new();
    for u in &batch.users {
        for domain in [Domain::X, Domain::Y] {
            let pooled = encode_clean(&mut g, model, COM, u.train(domain));
            let term = if model.wiring.grl_enabled {
                disc_loss_com(&mut g, &model.store, pooled, domain, cfg.grl)
            } else {
                disc_loss_spe(&mut g, &model.store, pooled, domain)
            };
            disc_terms.push(term);
        }
    }
    let disc = mean_losses(&mut g, &disc_terms).expect("batch not empty");
    let loss = g.scale(disc, cfg.beta2);
    check_finite(g.scalar(loss), 'B')?;
    let value = g.scalar(disc);
    let grads = g.backward(loss);
    opt.step(&mut model.store, &grads, &["com.", "disc."]);
    if cfg.weight_decay > 0.0 {
        let factor = 1.0 - opt.lr * cfg.weight_decay;
        let names: Vec<String> = model
            .store
            .names()
            .filter(|n| n.starts_with("com."))
            .map(str::to_string)
            .collect();
        for n in &names {
            model.store.get_mut(n).mapv_inplace(|x| x * factor);
        }
    }
    Ok(value)
}

/// Sub-step C: update f_cross (and f_spe through separation only) via
/// L_cross = L_mlm(f_cross) + beta3 * L_align + beta4 * L_sep.
pub fn substep_c(
    model: &mut Stage1Model,
    corpus: &Corpus,
    target: Domain,
    batch: &Stage1Batch,
    cfg: &OpdConfig,
    opt: &mut Adam,
    rng: &mut impl Rng,
) -> Result<(Option<f64>, Option<f64>, Option<f64>), CoreError> {
    let mut g = Graph::new();
    let emb = g.param(&model.store, EMB);
    let mut mlm_terms = Vec::new();
    let mut align_terms = Vec::new();
    let mut sep_pairs = Vec::new();
    for u in &batch.users {
        let cross_seq = u.cross_train(&corpus.vocab, target);
        if let Some(t) = masked_mlm_term(&mut g, model, CROSS, emb, cross_seq, cfg, rng) {
            mlm_terms.push(t);
        }
        let cross_pooled = encode_clean(&mut g, model, CROSS, cross_seq);
        if model.wiring.use_align && cfg.beta3 > 0.0 {
            let com_pooled = encode_clean(&mut g, model, COM, u.train(target));
            align_terms.push(align_loss(&mut g, cross_pooled, com_pooled));
        }
        if model.wiring.use_sep && cfg.beta4 > 0.0 {
            let spe_pooled = encode_clean(&mut g, model, SPE, u.train(target));
            sep_pairs.push((cross_pooled, spe_pooled));
        }
    }
    let mut loss = mean_losses(&mut g, &mlm_terms);
    let l_mlm = loss.map(|m| g.scalar(m));
    let mut l_align = None;
    let mut l_sep = None;
    if let Some(a) = mean_losses(&mut g, &align_terms) {
        l_align = Some(g.scalar(a));
        let w = g.scale(a, cfg.beta3);
        loss = Some(match loss {
            Some(l) => g.add(l, w),
            None => w,
        });
    }
    if !sep_pairs.is_empty() {
        let s = sep_loss(&mut g, &sep_pairs, cfg.rho);
        l_sep = Some(g.scalar(s));
        let w = g.scale(s, cfg.beta4);
        loss = Some(match loss {
            Some(l) => g.add(l, w),
            None => w,
        });
    }
    if let Some(loss) = loss {
        check_finite(g.scalar(loss), 'C')?;
        let grads = g.backward(loss);
        opt.step(&mut model.store, &grads, &[EMB, "cross.", "spe."]);
    }
    Ok((l_mlm, l_align, l_sep))
}

/// Run one Stage-1 epoch of staged sub-steps A/B/C over the given batches.
/// Each sub-step builds its own graph (fresh gradient state) and updates
/// only its designated parameter sets.
pub fn stage1_epoch(
    model: &mut Stage1Model,
    corpus: &Corpus,
    target: Domain,
    batches: &[Stage1Batch],
    cfg: &OpdConfig,
    opt: &mut Adam,
    epoch: usize,
    rng: &mut impl Rng,
) -> Result<EpochLosses, CoreError> {
    let mut sums = EpochLosses {
        epoch,
        ..Default::default()
    };
    let mut counts = [0usize; 6];
    for (bi, batch) in batches.iter().enumerate() {
        let in_batch = |e: CoreError| match e {
            CoreError::Numerical(msg) => CoreError::Numerical(format!("{msg}, batch {bi}")),
            other => other,
        };
        let (mlm, disc) = substep_a(model, batch, cfg, opt, rng).map_err(in_batch)?;
        if let Some(m) = mlm {
            sums.l_mlm_spe += m;
            counts[0] += 1;
        }
        sums.l_disc_spe += disc;
        counts[1] += 1;

        if model.wiring.train_com {
            sums.l_disc_com += substep_b(model, batch, cfg, opt).map_err(in_batch)?;
            counts[2] += 1;
        }

        if model.wiring.use_cross {
            let (l_mlm, l_align, l_sep) =
                substep_c(model, corpus, target, batch, cfg, opt, rng).map_err(in_batch)?;
            if let Some(m) = l_mlm {
                sums.l_mlm_cross += m;
                counts[3] += 1;
            }
            if let Some(a) = l_align {
                sums.l_align += a;
                counts[4] += 1;
            }
            if let Some(s) = l_sep {
                sums.l_sep += s;
                counts[5] += 1;
            }
        }
    }
    let n = |c: usize| c.max(1) as f64;
    sums.l_mlm_spe /= n(counts[0]);
    sums.l_disc_spe /= n(counts[1]);
    sums.l_disc_com /= n(counts[2]);
    sums.l_mlm_cross /= n(counts[3]);
    sums.l_align /= n(counts[4]);
    sums.l_sep /= n(counts[5]);
    Ok(sums)
}

/// Masked-prediction loss of the specific encoder over the train+validation
/// prefix, with a fixed masking seed; the early-stopping signal.
pub fn validation_mlm(
    model: &Stage1Model,
    corpus: &Corpus,
    target: Domain,
    cfg: &OpdConfig,
    seed: u64,
) -> f64 {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut n = 0usize;
    for u in &corpus.users {
        let split = u.split(target);
        let upto_valid = &u.seq(target)[..split.train_end + 1];
        let mut g = Graph::new();
        let emb = g.param(&model.store, EMB);
        let (ids, mask) = crate::corpus::window_fit(upto_valid, model.bb.l_max, crate::corpus::PAD);
        let row = backbone::mask_items(&ids, &mask, cfg.mask_ratio, &mut rng);
        if let Some(l) = backbone::mlm_loss(&mut g, &model.store, SPE, emb, &row, &model.bb) {
            total += g.scalar(l);
            n += 1;
        }
    }
    total / n.max(1) as f64
}

pub const PREF_MAGIC: &[u8; 4] = b"PREF";
pub const PREF_VERSION: u32 = 1;

/// Cached per-user preference vectors, immutable once frozen.
#[derive(Clone, Debug)]
pub struct PreferenceStore {
    d: usize,
    frozen: bool,
    entries: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

impl PreferenceStore {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            frozen: false,
            entries: IndexMap::new(),
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn insert(
        &mut self,
        user: &str,
        v_spe: Vec<f64>,
        v_cross: Vec<f64>,
    ) -> Result<(), CoreError> {
        if self.frozen {
            return Err(CoreError::Config(format!(
                "preference store is frozen; rejected write for user {user}"
            )));
        }
        assert_eq!(v_spe.len(), self.d);
        assert_eq!(v_cross.len(), self.d);
        self.entries.insert(user.to_string(), (v_spe, v_cross));
        Ok(())
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn get(&self, user: &str) -> Option<(&[f64], &[f64])> {
        self.entries
            .get(user)
            .map(|(a, b)| (a.as_slice(), b.as_slice()))
    }

    pub fn users(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn save(&self, path: &Path) -> Result<(), CoreError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(PREF_MAGIC);
        buf.write_u32::<LittleEndian>(PREF_VERSION)?;
        buf.write_u64::<LittleEndian>(self.entries.len() as u64)?;
        buf.write_u32::<LittleEndian>(self.d as u32)?;
        for (user, (v_spe, v_cross)) in &self.entries {
            buf.write_u32::<LittleEndian>(user.len() as u32)?;
            buf.extend_from_slice(user.as_bytes());
            for &x in v_spe.iter().chain(v_cross) {
                buf.write_f32::<LittleEndian>(x as f32)?;
            }
        }
        fs::write(path, buf)?;
        Ok(())
    }

    /// Loaded stores are frozen.
    pub fn load(path: &Path) -> Result<Self, CoreError> {
        let mut f = fs::File::open(path)?;
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != PREF_MAGIC {
            return Err(CoreError::Data("not a preference store file".into()));
        }
        let version = f.read_u32::<LittleEndian>()?;
        if version != PREF_VERSION {
            return Err(CoreError::Data(format!(
                "unsupported preference store version {version}"
            )));
        }
        let n = f.read_u64::<LittleEndian>()? as usize;
        let d = f.read_u32::<LittleEndian>()? as usize;
        let mut store = PreferenceStore::new(d);
        for _ in 0..n {
            let klen = f.read_u32::<LittleEndian>()? as usize;
            let mut key = vec![0u8; klen];
            f.read_exact(&mut key)?;
            let user = String::from_utf8(key)
                .map_err(|_| CoreError::Data("invalid user key encoding".into()))?;
            let read_vec = |f: &mut fs::File| -> Result<Vec<f64>, CoreError> {
                let mut v = Vec::with_capacity(d);
                for _ in 0..d {
                    v.push(f.read_f32::<LittleEndian>()? as f64);
                }
                Ok(v)
            };
            let v_spe = read_vec(&mut f)?;
            let v_cross = read_vec(&mut f)?;
            store.insert(&user, v_spe, v_cross)?;
        }
        store.freeze();
        Ok(store)
    }
}

/// Compute and cache per-user preference vectors from the trained encoders,
/// then freeze the store.
pub fn extract_preferences(
    model: &Stage1Model,
    corpus: &Corpus,
    target: Domain,
) -> Result<PreferenceStore, CoreError> {
    let mut store = PreferenceStore::new(model.bb.d);
    for u in &corpus.users {
        let train = u.train(target);
        if train.is_empty() {
            return Err(CoreError::Data(format!(
                "user {} has an empty training portion",
                u.user
            )));
        }
        let mut g = Graph::new();
        let v_spe = encode_clean(&mut g, model, SPE, train);
        let v_spe = g.value(v_spe).row(0).to_vec();
        let v_cross = if model.wiring.use_cross {
            let cross = u.cross_train(&corpus.vocab, target);
            let v = encode_clean(&mut g, model, CROSS, cross);
            g.value(v).row(0).to_vec()
        } else {
            vec![0.0; model.bb.d]
        };
        store.insert(&u.user, v_spe, v_cross)?;
    }
    // Center each population across users: mean-pooled encoder outputs share
    // a large common component, and downstream scoring is linear in the
    // vectors, so the shared part only buys a popularity bias while the
    // per-user residual carries all of the signal.
    let d = model.bb.d;
    let n = corpus.users.len() as f64;
    let mut mean_spe = vec![0.0; d];
    let mut mean_cross = vec![0.0; d];
    for user in store.users() {
        let (s, x) = store.get(user).expect("user just inserted");
        for i in 0..d {
            mean_spe[i] += s[i] / n;
            mean_cross[i] += x[i] / n;
        }
    }
    let users: Vec<String> = store.users().map(str::to_string).collect();
    let mut centered = PreferenceStore::new(d);
    for user in &users {
        let (s, x) = store.get(user).expect("user just inserted");
        let vs = s.iter().zip(&mean_spe).map(|(a, m)| a - m).collect();
        let vx = x.iter().zip(&mean_cross).map(|(a, m)| a - m).collect();
        centered.insert(user, vs, vx)?;
    }
    centered.freeze();
    Ok(centered)
}

/// Frobenius norms of pairwise cross-covariance matrices between the three
/// preference populations. Diagnostic only; never backpropagated.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct CovarianceDiagnostic {
    pub spe_com: f64,
    pub spe_cross: f64,
    pub com_cross: f64,
}

pub fn cross_covariance_frobenius(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, CoreError> {
    if a.len() < 2 || a.len() != b.len() {
        return Err(CoreError::Data(
            "covariance diagnostic needs >= 2 paired samples".into(),
        ));
    }
    let n = a.len();
    let da = a[0].len();
    let db = b[0].len();
    let mean = |v: &[Vec<f64>], d: usize| -> Vec<f64> {
        let mut m = vec![0.0; d];
        for row in v {
            for (mi, &x) in m.iter_mut().zip(row) {
                *mi += x;
            }
        }
        m.iter().map(|x| x / n as f64).collect()
    };
    let ma = mean(a, da);
    let mb = mean(b, db);
    let mut frob = 0.0;
    for i in 0..da {
        for j in 0..db {
            let mut c = 0.0;
            for k in 0..n {
                c += (a[k][i] - ma[i]) * (b[k][j] - mb[j]);
            }
            c /= (n - 1) as f64;
            frob += c * c;
        }
    }
    Ok(frob.sqrt())
}

pub fn covariance_diagnostic(
    spe: &[Vec<f64>],
    com: &[Vec<f64>],
    cross: &[Vec<f64>],
) -> Result<CovarianceDiagnostic, CoreError> {
    Ok(CovarianceDiagnostic {
        spe_com: cross_covariance_frobenius(spe, com)?,
        spe_cross: cross_covariance_frobenius(spe, cross)?,
        com_cross: cross_covariance_frobenius(com, cross)?,
    })
}
