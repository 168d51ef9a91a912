//! Flat key=value run configuration with flag overrides (flags win).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crossrec_core::corpus::Domain;
use crossrec_core::evaluate::{AblationVariant, EvalSplit, Protocol};
use crossrec_core::pipeline::PipelineConfig;
use crossrec_core::CoreError;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub target: Domain,
    pub seeds: Vec<u64>,
    pub variant: AblationVariant,
    pub split: EvalSplit,
    pub protocol: Protocol,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            target: Domain::X,
            seeds: vec![1, 2, 3],
            variant: AblationVariant::Full,
            split: EvalSplit::Test,
            protocol: Protocol::FullRanking,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CoreError> {
    value
        .parse()
        .map_err(|_| CoreError::Config(format!("invalid value {value:?} for {key}")))
}

impl RunConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), CoreError> {
        let p = &mut self.pipeline;
        match key {
            "beta1" => p.opd.beta1 = parse(key, value)?,
            "beta2" => p.opd.beta2 = parse(key, value)?,
            "beta3" => p.opd.beta3 = parse(key, value)?,
            "beta4" => p.opd.beta4 = parse(key, value)?,
            "rho" => p.opd.rho = parse(key, value)?,
            "grl_lambda" => p.opd.grl.lambda = parse(key, value)?,
            "stage1_lr" => p.opd.learning_rate = parse(key, value)?,
            "weight_decay" => p.opd.weight_decay = parse(key, value)?,
            "disc_steps" => p.opd.disc_steps = parse(key, value)?,
            "stage1_epochs" => p.opd.epochs = parse(key, value)?,
            "stage1_batch_size" => p.opd.batch_size = parse(key, value)?,
            "mask_ratio" => p.opd.mask_ratio = parse(key, value)?,
            "patience" => p.opd.patience = parse(key, value)?,
            "q" => p.rec.q = parse(key, value)?,
            "stage2_lr" => p.rec.learning_rate = parse(key, value)?,
            "stage2_epochs" => p.rec.epochs = parse(key, value)?,
            "stage2_batch_size" => p.rec.batch_size = parse(key, value)?,
            "session_len" => p.rec.l = parse(key, value)?,
            "freeze_item_embeddings" => p.rec.freeze_item_embeddings = parse(key, value)?,
            "exclude_history" => p.rec.exclude_history = parse(key, value)?,
            "max_positions" => p.rec.max_positions = parse(key, value)?,
            "d" => {
                p.bb.d = parse(key, value)?;
                p.bb.d_ff = 4 * p.bb.d;
            }
            "k_layers" => p.bb.k_layers = parse(key, value)?,
            "heads" => p.bb.heads = parse(key, value)?,
            "d_ff" => p.bb.d_ff = parse(key, value)?,
            "l_max" => p.bb.l_max = parse(key, value)?,
            "target" => {
                self.target = match value {
                    "x" | "X" => Domain::X,
                    "y" | "Y" => Domain::Y,
                    _ => return Err(CoreError::Config(format!("unknown domain {value:?}"))),
                }
            }
            "seeds" => {
                self.seeds = value
                    .split(',')
                    .map(|s| parse::<u64>(key, s.trim()))
                    .collect::<Result<_, _>>()?;
                if self.seeds.is_empty() {
                    return Err(CoreError::Config("seeds must be non-empty".into()));
                }
            }
            "variant" => self.variant = AblationVariant::parse(value)?,
            "split" => {
                self.split = match value {
                    "valid" => EvalSplit::Valid,
                    "test" => EvalSplit::Test,
                    _ => return Err(CoreError::Config(format!("unknown split {value:?}"))),
                }
            }
            "protocol" => {
                self.protocol = match value {
                    "full_ranking" => Protocol::FullRanking,
                    "seen_excluded" => Protocol::SeenExcluded,
                    _ => return Err(CoreError::Config(format!("unknown protocol {value:?}"))),
                }
            }
            _ => return Err(CoreError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CoreError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CoreError::Config(format!("cannot read {}: {e}", path.display())))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CoreError::Config(format!(
                    "{}:{}: expected key=value, got {line:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Config file first, then --set overrides in order (flags win).
    pub fn resolve(
        config_file: Option<&Path>,
        overrides: &[String],
    ) -> Result<RunConfig, CoreError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = config_file {
            cfg.apply_file(path)?;
        }
        for pair in overrides {
            let (key, value) = pair.split_once('=').ok_or_else(|| {
                CoreError::Config(format!("--set expects key=value, got {pair:?}"))
            })?;
            cfg.apply(key.trim(), value.trim())?;
        }
        cfg.pipeline.validate()?;
        Ok(cfg)
    }
}
