//! Command-line options. Every option can also come from the `SESSREC_*`
//! environment variable or a TOML config file; flags beat the environment,
//! which beats the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use sessrec::corpus::{EventFormat, SplitSpec};
use sessrec::eval::PositionKey;
use sessrec::{EvalConfig, LossKind, ModelConfig, ModelKind, UserGradMode};

use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "sessrec", version, about = "Session-based and hierarchical recurrent recommenders")]
pub struct Cli {
    /// TOML file with option defaults (keys are flag names with underscores).
    #[arg(long, global = true, env = "SESSREC_CONFIG")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sessionize and filter an event log, then write train/test and
    /// validation splits.
    Preprocess {
        #[command(flatten)]
        paths: PathOpts,
        #[command(flatten)]
        prep: PrepOpts,
    },
    /// Train a model on the training split and write a checkpoint.
    Train {
        #[command(flatten)]
        paths: PathOpts,
        #[command(flatten)]
        model: ModelOpts,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        paths: PathOpts,
        #[command(flatten)]
        eval: EvalOpts,
    },
    /// Random hyper-parameter search on the validation split.
    Search {
        #[command(flatten)]
        paths: PathOpts,
        #[command(flatten)]
        model: ModelOpts,
        #[command(flatten)]
        eval: EvalOpts,
        #[command(flatten)]
        search: SearchOpts,
    },
}

/// Fills every unset field of `$hi` from `$lo`.
macro_rules! overlay {
    ($hi:expr, $lo:expr; $($f:ident),* $(,)?) => {
        $( if $hi.$f.is_none() { $hi.$f = $lo.$f.clone(); } )*
    };
}

#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(default)]
pub struct PathOpts {
    /// Raw event log.
    #[arg(long, env = "SESSREC_EVENTS")]
    pub events: Option<PathBuf>,
    /// Directory holding the preprocessed splits.
    #[arg(long, env = "SESSREC_CORPUS_DIR")]
    pub corpus_dir: Option<PathBuf>,
    #[arg(long, env = "SESSREC_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    /// Where to write the tab-separated metrics report.
    #[arg(long, env = "SESSREC_REPORT")]
    pub report: Option<PathBuf>,
}

impl PathOpts {
    fn overlay(&mut self, lo: &Self) {
        overlay!(self, lo; events, corpus_dir, checkpoint, report);
    }

    pub fn require<'a>(field: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
        field
            .as_deref()
            .ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
    }
}

/// Session dropout alone (`0.1`) or the user/session/init triple
/// (`0.0/0.1/0.0`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutSpec {
    pub user: Option<f64>,
    pub session: f64,
    pub init: Option<f64>,
}

impl FromStr for DropoutSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parse = |v: &str| v.trim().parse::<f64>().map_err(|_| format!("bad dropout value `{v}`"));
        let parts: Vec<&str> = s.split('/').collect();
        match parts.as_slice() {
            [p] => Ok(DropoutSpec {
                user: None,
                session: parse(p)?,
                init: None,
            }),
            [u, p, i] => Ok(DropoutSpec {
                user: Some(parse(u)?),
                session: parse(p)?,
                init: Some(parse(i)?),
            }),
            _ => Err(format!("dropout `{s}`: expected `p` or `user/session/init`")),
        }
    }
}

impl<'de> Deserialize<'de> for DropoutSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(p) => Ok(DropoutSpec {
                user: None,
                session: p,
                init: None,
            }),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(default)]
pub struct ModelOpts {
    /// rnn, rnn-concat, hrnn-init, hrnn-all, ppop or itemknn.
    #[arg(long, env = "SESSREC_MODEL")]
    pub model: Option<ModelKind>,
    /// top1, bpr or xent.
    #[arg(long, env = "SESSREC_LOSS")]
    pub loss: Option<LossKind>,
    /// Session-level hidden units.
    #[arg(long, env = "SESSREC_HIDDEN")]
    pub hidden: Option<usize>,
    /// User-level hidden units (defaults to --hidden).
    #[arg(long, env = "SESSREC_USER_HIDDEN")]
    pub user_hidden: Option<usize>,
    #[arg(long, env = "SESSREC_BATCH")]
    pub batch: Option<usize>,
    #[arg(long, env = "SESSREC_EPOCHS")]
    pub epochs: Option<usize>,
    #[arg(long, env = "SESSREC_LR")]
    pub lr: Option<f64>,
    #[arg(long, env = "SESSREC_MOMENTUM")]
    pub momentum: Option<f64>,
    /// Session dropout, or `user/session/init`.
    #[arg(long, env = "SESSREC_DROPOUT")]
    pub dropout: Option<DropoutSpec>,
    #[arg(long, env = "SESSREC_DROPOUT_USER")]
    pub dropout_user: Option<f64>,
    #[arg(long, env = "SESSREC_DROPOUT_INIT")]
    pub dropout_init: Option<f64>,
    /// accumulate or per-step.
    #[arg(long, env = "SESSREC_USER_GRAD")]
    pub user_grad: Option<UserGradMode>,
    #[arg(long, env = "SESSREC_SEED")]
    pub seed: Option<u64>,
    /// Neighborhood size of the item-KNN baseline.
    #[arg(long, env = "SESSREC_KNN_NEIGHBORS")]
    pub knn_neighbors: Option<usize>,
}

impl ModelOpts {
    fn overlay(&mut self, lo: &Self) {
        overlay!(self, lo; model, loss, hidden, user_hidden, batch, epochs, lr, momentum,
            dropout, dropout_user, dropout_init, user_grad, seed, knn_neighbors);
    }

    pub fn resolve(&self) -> Result<ModelConfig, CliError> {
        let kind = self
            .model
            .ok_or_else(|| CliError::Usage("--model is required".into()))?;
        let d = ModelConfig::default();
        let triple = self.dropout;
        let cfg = ModelConfig {
            kind,
            loss: self.loss.unwrap_or(d.loss),
            hidden_size: self.hidden.unwrap_or(d.hidden_size),
            user_hidden: self.user_hidden.unwrap_or(d.user_hidden),
            batch_size: self.batch.unwrap_or(d.batch_size),
            epochs: self.epochs.unwrap_or(d.epochs),
            learning_rate: self.lr.unwrap_or(d.learning_rate),
            momentum: self.momentum.unwrap_or(d.momentum),
            dropout_session: triple.map_or(d.dropout_session, |t| t.session),
            dropout_user: self
                .dropout_user
                .or(triple.and_then(|t| t.user))
                .unwrap_or(d.dropout_user),
            dropout_init: self
                .dropout_init
                .or(triple.and_then(|t| t.init))
                .unwrap_or(d.dropout_init),
            user_grad: self.user_grad.unwrap_or(d.user_grad),
            seed: self.seed.unwrap_or(d.seed),
            knn_neighbors: self.knn_neighbors.unwrap_or(d.knn_neighbors),
            ..d
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(default)]
pub struct EvalOpts {
    /// List length N of Recall@N, MRR@N and Precision@N.
    #[arg(long, env = "SESSREC_CUTOFF")]
    pub cutoff: Option<usize>,
    /// Rank only among the M most popular training items.
    #[arg(long, env = "SESSREC_CANDIDATES")]
    pub candidates: Option<usize>,
    /// Group positions by the predicted event (target) or the events seen
    /// before it (prefix).
    #[arg(long, env = "SESSREC_POSITION_KEY")]
    pub position_key: Option<PositionKey>,
    /// Largest history, in sessions, that counts as short.
    #[arg(long, env = "SESSREC_SHORT_HISTORY_MAX")]
    pub short_history_max: Option<usize>,
    /// Retrain and evaluate with this many consecutive seeds.
    #[arg(long, env = "SESSREC_SEEDS")]
    pub seeds: Option<usize>,
}

impl EvalOpts {
    fn overlay(&mut self, lo: &Self) {
        overlay!(self, lo; cutoff, candidates, position_key, short_history_max, seeds);
    }

    pub fn resolve(&self) -> Result<EvalConfig, CliError> {
        let d = EvalConfig::default();
        let cfg = EvalConfig {
            cutoff: self.cutoff.unwrap_or(d.cutoff),
            candidates: self.candidates.or(d.candidates),
            position_key: self.position_key.unwrap_or(d.position_key),
            short_history_max: self.short_history_max.unwrap_or(d.short_history_max),
            ..d
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn seeds(&self) -> Result<usize, CliError> {
        match self.seeds.unwrap_or(1) {
            0 => Err(CliError::Usage("--seeds must be at least 1".into())),
            n => Ok(n),
        }
    }
}

#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(default)]
pub struct PrepOpts {
    /// Field delimiter of the event log.
    #[arg(long, env = "SESSREC_DELIMITER")]
    pub delimiter: Option<char>,
    /// The event log starts with a header row.
    #[arg(long, env = "SESSREC_HEADER", num_args = 0..=1, default_missing_value = "true")]
    pub header: Option<bool>,
    /// Column positions of user, item, timestamp and type, e.g. `0,1,3,2`.
    #[arg(long, env = "SESSREC_COLUMNS")]
    pub columns: Option<String>,
    /// Idle gap in seconds that starts a new session.
    #[arg(long, env = "SESSREC_IDLE_THRESHOLD")]
    pub idle_threshold: Option<u64>,
    #[arg(long, env = "SESSREC_MIN_ITEM_SUPPORT")]
    pub min_item_support: Option<usize>,
    #[arg(long, env = "SESSREC_MIN_SESSION_LEN")]
    pub min_session_len: Option<usize>,
    #[arg(long, env = "SESSREC_MIN_USER_SESSIONS")]
    pub min_user_sessions: Option<usize>,
    /// Interaction types to discard (comma-separated or repeated).
    #[arg(long = "drop-type", env = "SESSREC_DROP_TYPES", value_delimiter = ',')]
    #[serde(rename = "drop_types")]
    pub drop_types: Option<Vec<String>>,
    /// Keep only the first interaction of each (item, type) within a session.
    #[arg(long, env = "SESSREC_DEDUP", num_args = 0..=1, default_missing_value = "true")]
    pub dedup: Option<bool>,
}

impl PrepOpts {
    fn overlay(&mut self, lo: &Self) {
        overlay!(self, lo; delimiter, header, columns, idle_threshold, min_item_support,
            min_session_len, min_user_sessions, drop_types, dedup);
    }

    pub fn split_spec(&self) -> SplitSpec {
        let d = SplitSpec::default();
        SplitSpec {
            idle_threshold_s: self.idle_threshold.unwrap_or(d.idle_threshold_s),
            min_item_support: self.min_item_support.unwrap_or(d.min_item_support),
            min_session_len: self.min_session_len.unwrap_or(d.min_session_len),
            min_user_sessions: self.min_user_sessions.unwrap_or(d.min_user_sessions),
            dropped_types: self.drop_types.clone().unwrap_or(d.dropped_types),
            dedup_same_type_in_session: self.dedup.unwrap_or(d.dedup_same_type_in_session),
        }
    }

    pub fn event_format(&self) -> Result<EventFormat, CliError> {
        let d = EventFormat::default();
        let delimiter = match self.delimiter {
            None => d.delimiter,
            Some(c) if c.is_ascii() => c as u8,
            Some(c) => return Err(CliError::Usage(format!("delimiter `{c}` is not ASCII"))),
        };
        let columns = match &self.columns {
            None => d.columns,
            Some(s) => {
                let cols: Vec<usize> = s
                    .split(',')
                    .map(|c| c.trim().parse())
                    .collect::<Result<_, _>>()
                    .map_err(|_| CliError::Usage(format!("bad --columns `{s}`")))?;
                cols.try_into()
                    .map_err(|_| CliError::Usage(format!("--columns `{s}` needs four positions")))?
            }
        };
        Ok(EventFormat {
            delimiter,
            has_header: self.header.unwrap_or(d.has_header),
            columns,
        })
    }
}

#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(default)]
pub struct SearchOpts {
    #[arg(long, env = "SESSREC_TRIALS")]
    pub trials: Option<usize>,
    /// Learning rates are drawn log-uniformly from [lr-min, lr-max].
    #[arg(long, env = "SESSREC_LR_MIN")]
    pub lr_min: Option<f64>,
    #[arg(long, env = "SESSREC_LR_MAX")]
    pub lr_max: Option<f64>,
    #[arg(long, env = "SESSREC_MOMENTUM_MAX")]
    pub momentum_max: Option<f64>,
    /// Every dropout probability is drawn from [0, dropout-max].
    #[arg(long, env = "SESSREC_DROPOUT_MAX")]
    pub dropout_max: Option<f64>,
    #[arg(long, env = "SESSREC_BATCH_CHOICES", value_delimiter = ',')]
    pub batch_choices: Option<Vec<usize>>,
    /// Where to write the winning configuration (TOML, usable as --config).
    #[arg(long, env = "SESSREC_BEST")]
    pub best: Option<PathBuf>,
    /// Where to write one line per trial.
    #[arg(long, env = "SESSREC_TRIALS_LOG")]
    pub trials_log: Option<PathBuf>,
}

impl SearchOpts {
    fn overlay(&mut self, lo: &Self) {
        overlay!(self, lo; trials, lr_min, lr_max, momentum_max, dropout_max, batch_choices,
            best, trials_log);
    }
}

/// The config file: one flat table shared by all commands.
#[derive(Debug, Default, Deserialize)]
struct FileConfig {
    #[serde(flatten)]
    paths: PathOpts,
    #[serde(flatten)]
    model: ModelOpts,
    #[serde(flatten)]
    eval: EvalOpts,
    #[serde(flatten)]
    prep: PrepOpts,
    #[serde(flatten)]
    search: SearchOpts,
    #[serde(flatten)]
    unknown: BTreeMap<String, toml::Value>,
}

fn read_config(path: &Path) -> Result<FileConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let cfg: FileConfig =
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if let Some(key) = cfg.unknown.keys().next() {
        return Err(CliError::Usage(format!("{}: unknown option `{key}`", path.display())));
    }
    Ok(cfg)
}

impl Cli {
    /// Fills options not given as flags or environment variables from the
    /// config file.
    pub fn apply_config_file(&mut self) -> Result<(), CliError> {
        let Some(path) = &self.config else {
            return Ok(());
        };
        let file = read_config(path)?;
        match &mut self.command {
            Command::Preprocess { paths, prep } => {
                paths.overlay(&file.paths);
                prep.overlay(&file.prep);
            }
            Command::Train { paths, model } => {
                paths.overlay(&file.paths);
                model.overlay(&file.model);
            }
            Command::Eval { paths, eval } => {
                paths.overlay(&file.paths);
                eval.overlay(&file.eval);
            }
            Command::Search {
                paths,
                model,
                eval,
                search,
            } => {
                paths.overlay(&file.paths);
                model.overlay(&file.model);
                eval.overlay(&file.eval);
                search.overlay(&file.search);
            }
        }
        Ok(())
    }
}
