use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use sessrec::checkpoint::train_model;
use sessrec::eval::{evaluate_model, MetricsReport};
use sessrec::{Error, ModelConfig, ModelKind, Rng};

use crate::commands::{Split, VALIDATION_DIR};
use crate::opts::{EvalOpts, ModelOpts, PathOpts, SearchOpts};
use crate::CliError;

/// Trial `i` samples from RNG stream `TRIAL_STREAM + i` of the seed, apart
/// from the streams training uses.
const TRIAL_STREAM: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Space {
    pub lr: (f64, f64),
    pub momentum_max: f64,
    pub dropout_max: f64,
    pub batch_choices: Vec<usize>,
    pub knn: (usize, usize),
}

impl Default for Space {
    fn default() -> Self {
        Space {
            lr: (0.02, 0.2),
            momentum_max: 0.3,
            dropout_max: 0.3,
            batch_choices: vec![50, 100],
            knn: (20, 500),
        }
    }
}

impl Space {
    fn from_opts(o: &SearchOpts) -> Result<Space, CliError> {
        let d = Space::default();
        let s = Space {
            lr: (o.lr_min.unwrap_or(d.lr.0), o.lr_max.unwrap_or(d.lr.1)),
            momentum_max: o.momentum_max.unwrap_or(d.momentum_max),
            dropout_max: o.dropout_max.unwrap_or(d.dropout_max),
            batch_choices: o.batch_choices.clone().unwrap_or(d.batch_choices),
            knn: d.knn,
        };
        if !(s.lr.0 > 0.0 && s.lr.0 <= s.lr.1) {
            return Err(CliError::Usage("need 0 < lr-min <= lr-max".into()));
        }
        if !(0.0..1.0).contains(&s.momentum_max) || !(0.0..1.0).contains(&s.dropout_max) {
            return Err(CliError::Usage("momentum-max and dropout-max must lie in [0, 1)".into()));
        }
        if s.batch_choices.is_empty() || s.batch_choices.contains(&0) {
            return Err(CliError::Usage("batch-choices must be positive".into()));
        }
        Ok(s)
    }

    pub fn sample(&self, base: &ModelConfig, rng: &mut Rng) -> ModelConfig {
        let mut c = base.clone();
        if c.kind == ModelKind::ItemKnn {
            let (lo, hi) = (self.knn.0 as f64, self.knn.1 as f64);
            c.knn_neighbors = rng.uniform_range(lo.ln(), hi.ln()).exp().round() as usize;
            return c;
        }
        c.learning_rate = rng.uniform_range(self.lr.0.ln(), self.lr.1.ln()).exp();
        c.momentum = rng.uniform_range(0.0, self.momentum_max);
        c.batch_size = self.batch_choices[rng.below(self.batch_choices.len())];
        c.dropout_session = rng.uniform_range(0.0, self.dropout_max);
        if c.kind.variant().is_some() {
            c.dropout_user = rng.uniform_range(0.0, self.dropout_max);
            c.dropout_init = rng.uniform_range(0.0, self.dropout_max);
        }
        c
    }
}

#[derive(Clone, Debug)]
pub struct Trial {
    pub index: usize,
    pub config: ModelConfig,
    /// `None` when training diverged.
    pub report: Option<MetricsReport>,
}

impl Trial {
    fn recall(&self) -> f64 {
        self.report.as_ref().map_or(f64::NEG_INFINITY, |r| r.recall)
    }
}

/// Runs `n` trials in parallel; results come back in trial order.
pub fn run_trials(
    base: &ModelConfig,
    space: &Space,
    split: &Split,
    eval: &sessrec::EvalConfig,
    n: usize,
) -> Result<Vec<Trial>, Error> {
    let eval = base.adjust_eval(eval);
    (0..n)
        .into_par_iter()
        .map(|index| {
            let mut rng = Rng::with_stream(base.seed, TRIAL_STREAM + index as u64);
            let config = space.sample(base, &mut rng);
            let report = match train_model(&config, &split.train, |_| {}) {
                Ok(ck) => {
                    let ev = evaluate_model(&*ck.recommender(), &split.test, &split.train, &eval)?;
                    MetricsReport::per_target(&ev.records, eval.cutoff)
                }
                Err(Error::Diverged { .. }) => None,
                Err(e) => return Err(e),
            };
            Ok(Trial { index, config, report })
        })
        .collect()
}

/// Highest recall; the earliest trial wins ties.
pub fn best(trials: &[Trial]) -> Option<&Trial> {
    trials
        .iter()
        .fold(None, |acc: Option<&Trial>, t| match acc {
            Some(b) if b.recall() >= t.recall() => Some(b),
            _ => Some(t),
        })
}

fn trial_line(t: &Trial) -> String {
    let c = &t.config;
    let (recall, mrr) = match &t.report {
        Some(r) => (format!("{:.6}", r.recall), format!("{:.6}", r.mrr)),
        None => ("diverged".into(), "diverged".into()),
    };
    format!(
        "{}\t{recall}\t{mrr}\t{:.6}\t{:.4}\t{}\t{:.4}\t{:.4}\t{:.4}\t{}",
        t.index,
        c.learning_rate,
        c.momentum,
        c.batch_size,
        c.dropout_user,
        c.dropout_session,
        c.dropout_init,
        c.knn_neighbors
    )
}

const TRIALS_HEADER: &str =
    "trial\trecall\tmrr\tlr\tmomentum\tbatch\tdropout_user\tdropout_session\tdropout_init\tknn_neighbors";

/// The winning configuration in config-file form.
#[derive(Serialize)]
struct BestConfig<'a> {
    model: &'a str,
    loss: &'a str,
    hidden: usize,
    user_hidden: usize,
    batch: usize,
    epochs: usize,
    lr: f64,
    momentum: f64,
    dropout: String,
    user_grad: sessrec::UserGradMode,
    seed: u64,
    knn_neighbors: usize,
}

fn best_toml(c: &ModelConfig) -> String {
    let b = BestConfig {
        model: c.kind.as_str(),
        loss: c.loss.as_str(),
        hidden: c.hidden_size,
        user_hidden: c.user_hidden,
        batch: c.batch_size,
        epochs: c.epochs,
        lr: c.learning_rate,
        momentum: c.momentum,
        dropout: format!("{}/{}/{}", c.dropout_user, c.dropout_session, c.dropout_init),
        user_grad: c.user_grad,
        seed: c.seed,
        knn_neighbors: c.knn_neighbors,
    };
    toml::to_string(&b).expect("plain fields serialize")
}

pub fn search(paths: &PathOpts, model: &ModelOpts, eval: &EvalOpts, opts: &SearchOpts) -> Result<(), CliError> {
    let dir = PathOpts::require(&paths.corpus_dir, "corpus-dir")?;
    let base = model.resolve()?;
    if base.kind == ModelKind::Ppop {
        return Err(CliError::Usage("ppop has no hyper-parameters to search".into()));
    }
    let n = opts.trials.unwrap_or(10);
    if n == 0 {
        return Err(CliError::Usage("--trials must be at least 1".into()));
    }
    let space = Space::from_opts(opts)?;
    let eval_cfg = eval.resolve()?;
    let split = Split::load(&dir.join(VALIDATION_DIR))?;

    let trials = run_trials(&base, &space, &split, &eval_cfg, n)?;
    let mut log = format!("{TRIALS_HEADER}\n");
    for t in &trials {
        let line = trial_line(t);
        println!("{line}");
        let _ = writeln!(log, "{line}");
    }
    let winner = best(&trials).expect("at least one trial");
    if winner.report.is_none() {
        return Err(Error::Diverged {
            epoch: 0,
            step: 0,
            loss: f64::NAN,
        }
        .into());
    }
    println!("best trial {} recall@{} {:.6}", winner.index, eval_cfg.cutoff, winner.recall());
    write_file(opts.trials_log.as_deref(), &log)?;
    write_file(opts.best.as_deref(), &best_toml(&winner.config))?;
    Ok(())
}

fn write_file(path: Option<&Path>, text: &str) -> Result<(), Error> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => Ok(()),
    }
}
