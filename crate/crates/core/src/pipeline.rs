//! End-to-end orchestration of the two training stages, ablation wiring,
//! run manifests, and resumable checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::corpus::{Corpus, Domain};
use crate::disentangle::{
    extract_preferences, stage1_epoch, validation_mlm, EpochLosses, OpdConfig, PreferenceStore,
    Stage1Batch, Stage1Model, Stage1Wiring,
};
use crate::error::CoreError;
use crate::evaluate::AblationVariant;
use crate::fuser::{stage2_epoch, GateMode, RecConfig, Stage2Model};
use crate::params::{write_json_sorted, Adam, CheckpointMeta, ParamStore};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub bb: BackboneConfig,
    pub opd: OpdConfig,
    pub rec: RecConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            bb: BackboneConfig::new(128, 2, 2, 50),
            opd: OpdConfig::default(),
            rec: RecConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        self.bb.validate()?;
        self.opd.validate()?;
        self.rec.validate()
    }
}

/// Stage-1 and Stage-2 wiring implied by an ablation variant.
pub fn wiring_for(variant: AblationVariant) -> (Stage1Wiring, GateMode) {
    let full = Stage1Wiring::default();
    match variant {
        AblationVariant::Full => (full, GateMode::Full),
        AblationVariant::NoSpe => (full, GateMode::CrossOnly),
        AblationVariant::NoCom => (
            Stage1Wiring {
                train_com: false,
                ..full
            },
            GateMode::Full,
        ),
        AblationVariant::NoCross => (
            Stage1Wiring {
                use_cross: false,
                use_align: false,
                use_sep: false,
                ..full
            },
            GateMode::SpeOnly,
        ),
        AblationVariant::NoGrl => (
            Stage1Wiring {
                grl_enabled: false,
                ..full
            },
            GateMode::Full,
        ),
        AblationVariant::NoAlign => (
            Stage1Wiring {
                use_align: false,
                ..full
            },
            GateMode::Full,
        ),
        AblationVariant::NoSep => (
            Stage1Wiring {
                use_sep: false,
                ..full
            },
            GateMode::Full,
        ),
        AblationVariant::NoGate => (full, GateMode::StaticMean),
    }
}

pub fn make_batches<'a>(corpus: &'a Corpus, order: &[usize], batch_size: usize) -> Vec<Stage1Batch<'a>> {
    order
        .chunks(batch_size.max(1))
        .map(|chunk| Stage1Batch {
            users: chunk.iter().map(|&i| &corpus.users[i]).collect(),
        })
        .collect()
}

pub struct Stage1Run {
    pub model: Stage1Model,
    pub losses: Vec<EpochLosses>,
    pub stopped_early: bool,
}

/// Stage 1 with per-epoch shuffled batches and early stopping on the
/// validation masked-prediction loss.
pub fn run_stage1(
    corpus: &Corpus,
    target: Domain,
    cfg: &PipelineConfig,
    wiring: Stage1Wiring,
    seed: u64,
) -> Result<Stage1Run, CoreError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Stage1Model::init(cfg.bb, corpus.vocab.size(), wiring, &mut rng);
    let mut opt = Adam::new(cfg.opd.learning_rate);
    run_stage1_epochs(corpus, target, cfg, &mut model, &mut opt, 0, &mut rng)
        .map(|(losses, stopped_early)| Stage1Run {
            model,
            losses,
            stopped_early,
        })
}

fn run_stage1_epochs(
    corpus: &Corpus,
    target: Domain,
    cfg: &PipelineConfig,
    model: &mut Stage1Model,
    opt: &mut Adam,
    start_epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<EpochLosses>, bool), CoreError> {
    let mut losses = Vec::new();
    let mut best = f64::INFINITY;
    let mut since_best = 0usize;
    let mut stopped_early = false;
    for epoch in start_epoch..cfg.opd.epochs {
        let mut order: Vec<usize> = (0..corpus.users.len()).collect();
        order.shuffle(rng);
        let batches = make_batches(corpus, &order, cfg.opd.batch_size);
        losses.push(stage1_epoch(
            model, corpus, target, &batches, &cfg.opd, opt, epoch, rng,
        )?);
        let val = validation_mlm(model, corpus, target, &cfg.opd, VALIDATION_MASK_SEED);
        if val + 1e-12 < best {
            best = val;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.opd.patience {
                stopped_early = true;
                break;
            }
        }
    }
    Ok((losses, stopped_early))
}

// fixed masking seed so validation losses are comparable across epochs
const VALIDATION_MASK_SEED: u64 = 0xC0FFEE;

pub struct Stage2Run {
    pub model: Stage2Model,
    pub losses: Vec<f64>,
}

pub fn run_stage2(
    corpus: &Corpus,
    target: Domain,
    cfg: &PipelineConfig,
    stage1: &Stage1Model,
    prefs: &PreferenceStore,
    mode: GateMode,
    seed: u64,
) -> Result<Stage2Run, CoreError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x517A_6E2));
    let mut model = Stage2Model::init(
        cfg.bb,
        stage1.store.get(crate::disentangle::EMB),
        mode,
        &mut rng,
    );
    let mut opt = Adam::new(cfg.rec.learning_rate);
    let mut losses = Vec::new();
    for _ in 0..cfg.rec.epochs {
        losses.push(stage2_epoch(
            &mut model, prefs, corpus, target, &cfg.rec, &mut opt, &mut rng, true,
        )?);
    }
    Ok(Stage2Run { model, losses })
}

pub struct TrainedVariant {
    pub stage1: Stage1Model,
    pub prefs: PreferenceStore,
    pub stage2: Stage2Model,
    pub stage1_losses: Vec<EpochLosses>,
    pub stage2_losses: Vec<f64>,
}

/// Full two-stage pipeline for one variant and one seed.
pub fn train_variant(
    corpus: &Corpus,
    target: Domain,
    variant: AblationVariant,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<TrainedVariant, CoreError> {
    let (wiring, mode) = wiring_for(variant);
    let s1 = run_stage1(corpus, target, cfg, wiring, seed)?;
    let prefs = extract_preferences(&s1.model, corpus, target)?;
    let s2 = run_stage2(corpus, target, cfg, &s1.model, &prefs, mode, seed)?;
    Ok(TrainedVariant {
        stage1: s1.model,
        prefs,
        stage2: s2.model,
        stage1_losses: s1.losses,
        stage2_losses: s2.losses,
    })
}

pub fn checkpoint_meta(cfg: &PipelineConfig, vocab_size: usize) -> CheckpointMeta {
    CheckpointMeta {
        d: cfg.bb.d,
        k_layers: cfg.bb.k_layers,
        heads: cfg.bb.heads,
        d_ff: cfg.bb.d_ff,
        l_max: cfg.bb.l_max,
        vocab_size,
        format_version: 1,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub input_hashes: BTreeMap<String, String>,
    pub build: String,
}

impl RunManifest {
    pub fn new<C: Serialize>(command: &str, config: &C, seeds: &[u64]) -> Self {
        RunManifest {
            command: command.to_string(),
            config: serde_json::to_value(config).expect("serializable config"),
            seeds: seeds.to_vec(),
            input_hashes: BTreeMap::new(),
            build: format!(
                "{}-{}",
                env!("CARGO_PKG_NAME"),
                env!("CARGO_PKG_VERSION")
            ),
        }
    }

    pub fn hash_input(&mut self, label: &str, path: &Path) -> Result<(), CoreError> {
        self.input_hashes
            .insert(label.to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), CoreError> {
        write_json_sorted(path, self)
    }

    pub fn load(path: &Path) -> Result<Self, CoreError> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn sha256_file(path: &Path) -> Result<String, CoreError> {
    let bytes = fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

#[derive(Serialize, Deserialize)]
struct ResumeState {
    epoch_done: usize,
    optimizer_step: u64,
    rng: String,
    best_val: f64,
    since_best: usize,
}

/// Persist enough state mid-Stage-1 to resume training exactly: parameters,
/// optimizer moments, RNG state, patience counters, and the last completed
/// epoch.
fn save_stage1_checkpoint(
    dir: &Path,
    model: &Stage1Model,
    opt: &Adam,
    rng: &ChaCha8Rng,
    state: &ResumeState,
    cfg: &PipelineConfig,
) -> Result<(), CoreError> {
    fs::create_dir_all(dir)?;
    model
        .store
        .save(&dir.join("params"), &checkpoint_meta(cfg, model.vocab_size))?;
    opt.state_store()
        .save(&dir.join("adam"), &checkpoint_meta(cfg, model.vocab_size))?;
    debug_assert_eq!(state.optimizer_step, opt.step_count());
    debug_assert_eq!(state.rng, serde_json::to_string(rng).unwrap());
    write_json_sorted(&dir.join("state.json"), state)?;
    Ok(())
}

/// Stage 1 with per-epoch checkpoints under `ckpt_dir`, resuming from the
/// last completed epoch when one exists.
pub fn run_stage1_resumable(
    corpus: &Corpus,
    target: Domain,
    cfg: &PipelineConfig,
    wiring: Stage1Wiring,
    seed: u64,
    ckpt_dir: &Path,
) -> Result<Stage1Run, CoreError> {
    cfg.validate()?;
    let state_path = ckpt_dir.join("state.json");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Stage1Model::init(cfg.bb, corpus.vocab.size(), wiring, &mut rng);
    let mut opt = Adam::new(cfg.opd.learning_rate);
    let mut start_epoch = 0usize;
    let mut best = f64::INFINITY;
    let mut since_best = 0usize;
    if state_path.exists() {
        let text = fs::read_to_string(&state_path)?;
        let state: ResumeState = serde_json::from_str(&text)?;
        let (store, _meta) = ParamStore::load(&ckpt_dir.join("params"))?;
        let (adam_store, _) = ParamStore::load(&ckpt_dir.join("adam"))?;
        model.store = store;
        opt.restore_state(&adam_store, state.optimizer_step);
        rng = serde_json::from_str(&state.rng)?;
        start_epoch = state.epoch_done + 1;
        best = state.best_val;
        since_best = state.since_best;
    }
    let mut all_losses = Vec::new();
    let mut stopped_early = false;
    for epoch in start_epoch..cfg.opd.epochs {
        let mut order: Vec<usize> = (0..corpus.users.len()).collect();
        order.shuffle(&mut rng);
        let batches = make_batches(corpus, &order, cfg.opd.batch_size);
        all_losses.push(stage1_epoch(
            &mut model, corpus, target, &batches, &cfg.opd, &mut opt, epoch, &mut rng,
        )?);
        let val = validation_mlm(&model, corpus, target, &cfg.opd, VALIDATION_MASK_SEED);
        if val + 1e-12 < best {
            best = val;
            since_best = 0;
        } else {
            since_best += 1;
        }
        let state = ResumeState {
            epoch_done: epoch,
            optimizer_step: opt.step_count(),
            rng: serde_json::to_string(&rng)?,
            best_val: best,
            since_best,
        };
        save_stage1_checkpoint(ckpt_dir, &model, &opt, &rng, &state, cfg)?;
        if since_best >= cfg.opd.patience {
            stopped_early = true;
            break;
        }
    }
    Ok(Stage1Run {
        model,
        losses: all_losses,
        stopped_early,
    })
}

/// Append one JSON object per epoch to the loss log.
pub fn append_loss_log(path: &Path, losses: &[EpochLosses]) -> Result<(), CoreError> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    for l in losses {
        let line = serde_json::to_string(l)?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synthesize, SynthSpec};

    fn tiny_cfg() -> PipelineConfig {
        let mut bb = BackboneConfig::new(8, 1, 2, 10);
        bb.d_ff = 16;
        PipelineConfig {
            bb,
            opd: OpdConfig {
                epochs: 2,
                batch_size: 8,
                ..Default::default()
            },
            rec: RecConfig {
                epochs: 2,
                q: 5,
                l: 8,
                batch_size: 8,
                ..Default::default()
            },
        }
    }

    fn tiny_corpus(seed: u64) -> Corpus {
        synthesize(&SynthSpec {
            n_users: 10,
            n_items_per_domain: 12,
            seq_len_range: (6, 9),
            seed,
            ..Default::default()
        })
        .unwrap()
        .corpus
    }

    #[test]
    fn full_pipeline_produces_finite_models() {
        let corpus = tiny_corpus(1);
        let cfg = tiny_cfg();
        let trained =
            train_variant(&corpus, Domain::X, AblationVariant::Full, &cfg, 1).unwrap();
        assert!(trained.stage1.store.all_finite());
        assert!(trained.stage2.store.all_finite());
        assert!(trained.prefs.is_frozen());
        assert_eq!(trained.prefs.len(), corpus.users.len());
        assert_eq!(trained.stage1_losses.len(), 2);
        assert_eq!(trained.stage2_losses.len(), 2);
    }

    #[test]
    fn no_cross_variant_has_no_cross_parameters() {
        let corpus = tiny_corpus(2);
        let cfg = tiny_cfg();
        let trained =
            train_variant(&corpus, Domain::X, AblationVariant::NoCross, &cfg, 2).unwrap();
        assert!(
            !trained.stage1.store.names().any(|n| n.starts_with("cross.")),
            "cross encoder must be absent"
        );
    }

    #[test]
    fn pipeline_is_deterministic_given_seed() {
        let corpus = tiny_corpus(3);
        let cfg = tiny_cfg();
        let a = train_variant(&corpus, Domain::X, AblationVariant::Full, &cfg, 5).unwrap();
        let b = train_variant(&corpus, Domain::X, AblationVariant::Full, &cfg, 5).unwrap();
        for name in a.stage1.store.names() {
            assert_eq!(a.stage1.store.get(name), b.stage1.store.get(name), "{name}");
        }
        for name in a.stage2.store.names() {
            assert_eq!(a.stage2.store.get(name), b.stage2.store.get(name), "{name}");
        }
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let corpus = tiny_corpus(4);
        let mut cfg = tiny_cfg();
        cfg.opd.epochs = 3;
        cfg.opd.patience = 100;
        let wiring = Stage1Wiring::default();

        let dir_full = tempfile::tempdir().unwrap();
        let full = run_stage1_resumable(
            &corpus,
            Domain::X,
            &cfg,
            wiring,
            7,
            &dir_full.path().join("ck"),
        )
        .unwrap();

        // interrupted run: stop after 2 epochs, then resume from checkpoint
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("ck");
        let mut short_cfg = cfg;
        short_cfg.opd.epochs = 2;
        run_stage1_resumable(&corpus, Domain::X, &short_cfg, wiring, 7, &ck).unwrap();
        let resumed = run_stage1_resumable(&corpus, Domain::X, &cfg, wiring, 7, &ck).unwrap();

        let pf = extract_preferences(&full.model, &corpus, Domain::X).unwrap();
        let pr = extract_preferences(&resumed.model, &corpus, Domain::X).unwrap();
        for u in pf.users() {
            let (a1, b1) = pf.get(u).unwrap();
            let (a2, b2) = pr.get(u).unwrap();
            for (x, y) in a1.iter().zip(a2).chain(b1.iter().zip(b2)) {
                assert!((x - y).abs() < 1e-5, "resume drift {x} vs {y}");
            }
        }
    }

    #[test]
    fn manifest_round_trips() {
        let cfg = tiny_cfg();
        let mut m = RunManifest::new("pretrain", &cfg, &[1, 2, 3]);
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("input.tsv");
        fs::write(&input, "user_id\titem_id\tdomain\ttimestamp\n").unwrap();
        m.hash_input("corpus", &input).unwrap();
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let loaded = RunManifest::load(&path).unwrap();
        assert_eq!(m, loaded);
        // byte-stable serialization
        let bytes1 = fs::read(&path).unwrap();
        loaded.save(&path).unwrap();
        assert_eq!(bytes1, fs::read(&path).unwrap());
    }
}
