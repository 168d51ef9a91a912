mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crossrec_core::corpus::{self, Corpus};
use crossrec_core::disentangle::{extract_preferences, PreferenceStore, Stage1Model};
use crossrec_core::evaluate::{
    evaluate_model, probe, relative_delta_pct, run_ablation, AblationVariant, RankingReport,
};
use crossrec_core::fuser::Stage2Model;
use crossrec_core::params::{write_json_sorted, ParamStore};
use crossrec_core::pipeline::{
    checkpoint_meta, run_stage1_resumable, run_stage2, wiring_for, append_loss_log,
    RunManifest,
};
use crossrec_core::synth::{save_labels, synthesize, SynthSpec};
use crossrec_core::CoreError;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "crossrec", version, about = "Cross-domain sequential recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// key=value overrides applied after the config file (flags win).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct OutArg {
    /// Output directory; defaults under $CROSSREC_OUT_ROOT (or ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest a raw interaction TSV into a corpus directory.
    Preprocess {
        /// TSV with header user_id, item_id, domain, timestamp.
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Generate a synthetic corpus with planted mechanisms.
    Synth {
        #[arg(long, default_value_t = 50)]
        users: usize,
        #[arg(long, default_value_t = 30)]
        items_per_domain: usize,
        #[arg(long, default_value_t = 8)]
        min_len: usize,
        #[arg(long, default_value_t = 16)]
        max_len: usize,
        /// Comma-separated specific,common,cross weights summing to 1.
        #[arg(long, default_value = "0.4,0.4,0.2")]
        mix: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Stage 1: train the three encoders and freeze preference vectors.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        out: OutArg,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Stage 2: train the gated recommendation module.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Directory produced by `pretrain`.
        #[arg(long)]
        pretrain: PathBuf,
        #[command(flatten)]
        out: OutArg,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Rank held-out items and report HR@K / NDCG@K.
    Evaluate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        pretrain: PathBuf,
        /// Directory produced by `train`.
        #[arg(long)]
        train: PathBuf,
        #[command(flatten)]
        out: OutArg,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train and evaluate ablation variants across seeds.
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated variant names; defaults to all.
        #[arg(long)]
        variants: Option<String>,
        /// Sweep one config key over comma-separated values,
        /// e.g. --sweep beta3=0.01,0.1,0.5,1.0.
        #[arg(long)]
        sweep: Option<String>,
        #[command(flatten)]
        out: OutArg,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Linear-probe disentanglement diagnostics on a trained Stage-1 model.
    Probe {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        pretrain: PathBuf,
        /// Fraction of users held out for the probe.
        #[arg(long, default_value_t = 0.5)]
        holdout_frac: f64,
        #[command(flatten)]
        out: OutArg,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn out_root() -> PathBuf {
    std::env::var_os("CROSSREC_OUT_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn resolve_out(out: OutArg, command: &str) -> PathBuf {
    out.out.unwrap_or_else(|| out_root().join(command))
}

/// Exclusive ownership of an output directory for the process lifetime.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<DirLock, CoreError> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CoreError::Config(
                format!(
                    "output directory {} is locked by another run (remove {} if stale)",
                    dir.display(),
                    path.display()
                ),
            )),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn print_stats(corpus: &Corpus) {
    println!("domain\tusers\titems\tinteractions\tavg_len\tdensity");
    for s in corpus.stats() {
        println!(
            "{}\t{}\t{}\t{}\t{:.2}\t{:.4}",
            s.domain, s.users, s.items, s.interactions, s.avg_len, s.density
        );
    }
}

fn cmd_preprocess(input: &Path, out: &Path) -> Result<(), CoreError> {
    let _lock = DirLock::acquire(out)?;
    let (records, report) = corpus::ingest(input)?;
    if !report.malformed_lines.is_empty() {
        eprintln!(
            "warning: skipped {} malformed lines",
            report.malformed_lines.len()
        );
    }
    let corpus = corpus::preprocess(&records)?;
    corpus.save(out)?;
    let mut manifest = RunManifest::new("preprocess", &serde_json::json!({}), &[]);
    manifest.hash_input("input", input)?;
    manifest.save(&out.join("run_manifest.json"))?;
    print_stats(&corpus);
    println!("corpus written to {}", out.display());
    Ok(())
}

fn cmd_synth(spec: &SynthSpec, out: &Path) -> Result<(), CoreError> {
    let _lock = DirLock::acquire(out)?;
    let result = synthesize(spec)?;
    result.corpus.save(out)?;
    save_labels(&result.labels, out)?;
    let manifest = RunManifest::new("synth", spec, &[spec.seed]);
    manifest.save(&out.join("run_manifest.json"))?;
    print_stats(&result.corpus);
    println!("synthetic corpus written to {}", out.display());
    Ok(())
}

fn load_run_config(cfg: &ConfigArgs) -> Result<RunConfig, CoreError> {
    RunConfig::resolve(cfg.config.as_deref(), &cfg.overrides)
}

fn corpus_hash_sources(dir: &Path) -> Vec<(&'static str, PathBuf)> {
    vec![
        ("vocab", dir.join("vocab.tsv")),
        ("sequences", dir.join("sequences.jsonl")),
    ]
}

fn cmd_pretrain(corpus_dir: &Path, out: &Path, cfg_args: &ConfigArgs) -> Result<(), CoreError> {
    let cfg = load_run_config(cfg_args)?;
    let _lock = DirLock::acquire(out)?;
    let corpus = Corpus::load(corpus_dir)?;
    let seed = cfg.seeds[0];
    let (wiring, _mode) = wiring_for(cfg.variant);
    let run = run_stage1_resumable(
        &corpus,
        cfg.target,
        &cfg.pipeline,
        wiring,
        seed,
        &out.join("checkpoints"),
    )?;
    append_loss_log(&out.join("loss_log.jsonl"), &run.losses)?;
    let prefs = extract_preferences(&run.model, &corpus, cfg.target)?;
    prefs.save(&out.join("preferences.bin"))?;
    run.model.store.save(
        &out.join("stage1"),
        &checkpoint_meta(&cfg.pipeline, run.model.vocab_size),
    )?;
    let mut manifest = RunManifest::new("pretrain", &cfg, &[seed]);
    for (label, path) in corpus_hash_sources(corpus_dir) {
        manifest.hash_input(label, &path)?;
    }
    manifest.save(&out.join("run_manifest.json"))?;
    println!(
        "stage 1 finished after {} epochs{}; outputs in {}",
        run.losses.len(),
        if run.stopped_early { " (early stop)" } else { "" },
        out.display()
    );
    Ok(())
}

fn load_stage1(pretrain_dir: &Path, cfg: &RunConfig) -> Result<Stage1Model, CoreError> {
    let manifest = RunManifest::load(&pretrain_dir.join("run_manifest.json"))?;
    let trained_cfg: RunConfig = serde_json::from_value(manifest.config)?;
    let (store, meta) = ParamStore::load(&pretrain_dir.join("stage1"))?;
    let mut bb = cfg.pipeline.bb;
    bb.d = meta.d;
    bb.k_layers = meta.k_layers;
    bb.heads = meta.heads;
    bb.d_ff = meta.d_ff;
    bb.l_max = meta.l_max;
    let (wiring, _) = wiring_for(trained_cfg.variant);
    Ok(Stage1Model {
        store,
        bb,
        vocab_size: meta.vocab_size,
        wiring,
    })
}

fn load_preferences(pretrain_dir: &Path) -> Result<PreferenceStore, CoreError> {
    let path = pretrain_dir.join("preferences.bin");
    if !path.exists() {
        return Err(CoreError::Config(format!(
            "no preference store at {}; run `crossrec pretrain` first",
            path.display()
        )));
    }
    PreferenceStore::load(&path)
}

fn cmd_train(
    corpus_dir: &Path,
    pretrain_dir: &Path,
    out: &Path,
    cfg_args: &ConfigArgs,
) -> Result<(), CoreError> {
    let cfg = load_run_config(cfg_args)?;
    let _lock = DirLock::acquire(out)?;
    let corpus = Corpus::load(corpus_dir)?;
    let stage1 = load_stage1(pretrain_dir, &cfg)?;
    let prefs = load_preferences(pretrain_dir)?;
    assert!(prefs.is_frozen());
    let seed = cfg.seeds[0];
    let (_wiring, mode) = wiring_for(cfg.variant);
    let run = run_stage2(&corpus, cfg.target, &cfg.pipeline, &stage1, &prefs, mode, seed)?;
    run.model.store.save(
        &out.join("stage2"),
        &checkpoint_meta(&cfg.pipeline, run.model.vocab_size),
    )?;
    write_json_sorted(&out.join("loss_log.json"), &run.losses)?;
    let mut manifest = RunManifest::new("train", &cfg, &[seed]);
    manifest.hash_input("preferences", &pretrain_dir.join("preferences.bin"))?;
    for (label, path) in corpus_hash_sources(corpus_dir) {
        manifest.hash_input(label, &path)?;
    }
    manifest.save(&out.join("run_manifest.json"))?;
    println!(
        "stage 2 finished after {} epochs; outputs in {}",
        run.losses.len(),
        out.display()
    );
    Ok(())
}

fn cmd_evaluate(
    corpus_dir: &Path,
    pretrain_dir: &Path,
    train_dir: &Path,
    out: &Path,
    cfg_args: &ConfigArgs,
) -> Result<(), CoreError> {
    let cfg = load_run_config(cfg_args)?;
    let _lock = DirLock::acquire(out)?;
    let corpus = Corpus::load(corpus_dir)?;
    let prefs = load_preferences(pretrain_dir)?;
    let (store, meta) = ParamStore::load(&train_dir.join("stage2"))?;
    let mut bb = cfg.pipeline.bb;
    bb.d = meta.d;
    bb.k_layers = meta.k_layers;
    bb.heads = meta.heads;
    bb.d_ff = meta.d_ff;
    bb.l_max = meta.l_max;
    let (_wiring, mode) = wiring_for(cfg.variant);
    let model = Stage2Model {
        store,
        bb,
        vocab_size: meta.vocab_size,
        mode,
    };
    let metrics = evaluate_model(
        &model,
        &prefs,
        &corpus,
        cfg.target,
        cfg.split,
        cfg.protocol,
        cfg.pipeline.rec.l,
    )?;
    let report = RankingReport::aggregate(
        cfg.variant,
        cfg.protocol,
        cfg.split,
        &cfg.seeds[..1],
        &[metrics],
    );
    report.save_json(&out.join("report.json"))?;
    fs::write(out.join("report.tsv"), report.to_tsv())?;
    print!("{}", report.to_tsv());
    Ok(())
}

fn parse_variants(spec: Option<&str>) -> Result<Vec<AblationVariant>, CoreError> {
    match spec {
        None => Ok(AblationVariant::ALL.to_vec()),
        Some(s) => s
            .split(',')
            .map(|name| AblationVariant::parse(name.trim()))
            .collect(),
    }
}

fn cmd_ablate(
    corpus_dir: &Path,
    variants: Option<&str>,
    sweep: Option<&str>,
    out: &Path,
    cfg_args: &ConfigArgs,
) -> Result<(), CoreError> {
    let base_cfg = load_run_config(cfg_args)?;
    let _lock = DirLock::acquire(out)?;
    let corpus = Corpus::load(corpus_dir)?;
    let variants = parse_variants(variants)?;

    // (label, config) pairs: one per sweep value, or just the base config
    let mut grid: Vec<(String, RunConfig)> = Vec::new();
    if let Some(sweep) = sweep {
        let (key, values) = sweep.split_once('=').ok_or_else(|| {
            CoreError::Config(format!("--sweep expects key=v1,v2,..., got {sweep:?}"))
        })?;
        for v in values.split(',') {
            let mut cfg = base_cfg.clone();
            cfg.apply(key.trim(), v.trim())?;
            grid.push((format!("{}={}", key.trim(), v.trim()), cfg));
        }
    } else {
        grid.push((String::from("base"), base_cfg));
    }

    let mut summary = String::from(
        "sweep\tvariant\thr@10_mean\thr@10_std\tndcg@10_mean\tndcg@10_std\tdelta_hr10_pct\tdelta_ndcg10_pct\n",
    );
    let mut reports: Vec<RankingReport> = Vec::new();
    for (label, cfg) in &grid {
        let mut full_hr = f64::NAN;
        let mut full_ndcg = f64::NAN;
        for &variant in &variants {
            let report = run_ablation(
                &corpus,
                cfg.target,
                variant,
                &cfg.pipeline,
                &cfg.seeds,
                cfg.split,
                cfg.protocol,
            )?;
            let hr = report.hr_mean(10);
            let ndcg = report.ndcg_mean(10);
            if variant == AblationVariant::Full {
                full_hr = hr;
                full_ndcg = ndcg;
            }
            let (dh, dn) = if variant == AblationVariant::Full || full_hr.is_nan() {
                (0.0, 0.0)
            } else {
                (
                    relative_delta_pct(hr, full_hr),
                    relative_delta_pct(ndcg, full_ndcg),
                )
            };
            let e = report.per_k.iter().find(|e| e.k == 10).expect("K=10");
            summary.push_str(&format!(
                "{label}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{dh:+.1}\t{dn:+.1}\n",
                variant, e.hr_mean, e.hr_std, e.ndcg_mean, e.ndcg_std
            ));
            reports.push(report);
        }
    }
    write_json_sorted(&out.join("report.json"), &reports)?;
    fs::write(out.join("summary.tsv"), &summary)?;
    let base = &grid[0].1;
    let mut manifest = RunManifest::new("ablate", base, &base.seeds);
    for (label, path) in corpus_hash_sources(corpus_dir) {
        manifest.hash_input(label, &path)?;
    }
    manifest.save(&out.join("run_manifest.json"))?;
    print!("{summary}");
    Ok(())
}

fn cmd_probe(
    corpus_dir: &Path,
    pretrain_dir: &Path,
    holdout_frac: f64,
    out: &Path,
    cfg_args: &ConfigArgs,
) -> Result<(), CoreError> {
    let cfg = load_run_config(cfg_args)?;
    if !(0.0..=1.0).contains(&holdout_frac) {
        return Err(CoreError::Config("holdout fraction must be in [0,1]".into()));
    }
    let _lock = DirLock::acquire(out)?;
    let corpus = Corpus::load(corpus_dir)?;
    let stage1 = load_stage1(pretrain_dir, &cfg)?;
    let n = corpus.users.len();
    let holdout: Vec<usize> = (0..n).skip(n - (n as f64 * holdout_frac) as usize).collect();
    let report = probe(&stage1, &corpus, &holdout, cfg.target)?;
    write_json_sorted(&out.join("probe.json"), &report)?;
    println!(
        "probe accuracy: specific {:.3}, common {:.3} over {} holdout users",
        report.acc_spe, report.acc_com, report.holdout_users
    );
    println!(
        "covariance diagnostic (Frobenius): spe/com {:.4}, spe/cross {:.4}, com/cross {:.4}",
        report.covariance.spe_com, report.covariance.spe_cross, report.covariance.com_cross
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), CoreError> {
    match cli.command {
        Command::Preprocess { input, out } => {
            cmd_preprocess(&input, &resolve_out(out, "preprocess"))
        }
        Command::Synth {
            users,
            items_per_domain,
            min_len,
            max_len,
            mix,
            seed,
            out,
        } => {
            let weights: Vec<f64> = mix
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| CoreError::Config(format!("invalid mix weight {s:?}")))
                })
                .collect::<Result<_, _>>()?;
            if weights.len() != 3 {
                return Err(CoreError::Config("mix needs exactly three weights".into()));
            }
            let spec = SynthSpec {
                n_users: users,
                n_items_per_domain: items_per_domain,
                seq_len_range: (min_len, max_len),
                seq_len_range_y: None,
                signal_mix: (weights[0], weights[1], weights[2]),
                seed,
            };
            cmd_synth(&spec, &resolve_out(out, "synth"))
        }
        Command::Pretrain { corpus, out, cfg } => {
            cmd_pretrain(&corpus, &resolve_out(out, "pretrain"), &cfg)
        }
        Command::Train {
            corpus,
            pretrain,
            out,
            cfg,
        } => cmd_train(&corpus, &pretrain, &resolve_out(out, "train"), &cfg),
        Command::Evaluate {
            corpus,
            pretrain,
            train,
            out,
            cfg,
        } => cmd_evaluate(&corpus, &pretrain, &train, &resolve_out(out, "evaluate"), &cfg),
        Command::Ablate {
            corpus,
            variants,
            sweep,
            out,
            cfg,
        } => cmd_ablate(
            &corpus,
            variants.as_deref(),
            sweep.as_deref(),
            &resolve_out(out, "ablate"),
            &cfg,
        ),
        Command::Probe {
            corpus,
            pretrain,
            holdout_frac,
            out,
            cfg,
        } => cmd_probe(
            &corpus,
            &pretrain,
            holdout_frac,
            &resolve_out(out, "probe"),
            &cfg,
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
