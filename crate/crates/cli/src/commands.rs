use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sessrec::checkpoint::{train_model, Checkpoint};
use sessrec::corpus::{
    corpus_stats, filter_corpus, load_events, read_corpus, read_vocab, sessionize, split_last_session, write_corpus,
    write_vocab, SplitSpec, Stats,
};
use sessrec::eval::{combine_seeds, evaluate_model, full_report, render_table, report_rows, write_tsv};
use sessrec::{Corpus, EvalConfig, Error};

use crate::opts::{EvalOpts, ModelOpts, PathOpts, PrepOpts};
use crate::CliError;

pub const TRAIN_FILE: &str = "train.corpus";
pub const TEST_FILE: &str = "test.corpus";
pub const ITEMS_FILE: &str = "items.tsv";
pub const USERS_FILE: &str = "users.tsv";
pub const VALIDATION_DIR: &str = "validation";

/// A training corpus and the held-out last sessions of its users, over one
/// item vocabulary.
pub struct Split {
    pub train: Corpus,
    pub test: Corpus,
}

impl Split {
    pub fn load(dir: &Path) -> Result<Split, Error> {
        let items = read_vocab(&dir.join(ITEMS_FILE))?;
        let users = read_vocab(&dir.join(USERS_FILE))?;
        let train = read_corpus(&dir.join(TRAIN_FILE), items.clone(), users.clone())?.corpus;
        let test = read_corpus(&dir.join(TEST_FILE), items, users)?.corpus;
        Ok(Split { train, test })
    }

    fn write(&self, dir: &Path, meta: &BTreeMap<String, String>) -> Result<(), Error> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_vocab(&dir.join(ITEMS_FILE), &self.train.items)?;
        write_vocab(&dir.join(USERS_FILE), &self.train.user_ids)?;
        write_corpus(&dir.join(TRAIN_FILE), &self.train, meta)?;
        write_corpus(&dir.join(TEST_FILE), &self.test, meta)
    }
}

fn split_meta(spec: &SplitSpec, split: &str) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("split".into(), split.into()),
        ("idle_threshold_s".into(), spec.idle_threshold_s.to_string()),
        ("min_item_support".into(), spec.min_item_support.to_string()),
        ("min_session_len".into(), spec.min_session_len.to_string()),
        ("min_user_sessions".into(), spec.min_user_sessions.to_string()),
        ("dropped_types".into(), spec.dropped_types.join(",")),
        ("dedup_same_type_in_session".into(), spec.dedup_same_type_in_session.to_string()),
    ])
}

fn stats_line(name: &str, s: &Stats) -> String {
    format!(
        "{name:<10} users {:>8}  items {:>8}  sessions {:>9}  events {:>10}",
        s.users, s.items, s.sessions, s.events
    )
}

pub fn preprocess(paths: &PathOpts, prep: &PrepOpts) -> Result<(), CliError> {
    let events_path = PathOpts::require(&paths.events, "events")?;
    let dir = PathOpts::require(&paths.corpus_dir, "corpus-dir")?;
    let format = prep.event_format()?;
    let spec = prep.split_spec();

    let loaded = load_events(events_path, &format)?;
    if loaded.malformed > 0 {
        log::warn!("skipped {} malformed lines in {}", loaded.malformed, events_path.display());
    }
    let corpus = filter_corpus(&sessionize(&loaded.events, &spec), &spec);
    if corpus.users.is_empty() {
        return Err(Error::Corpus("no users left after filtering".into()).into());
    }
    let (train, test) = split_last_session(&corpus)?;
    let (sub, valid) = split_last_session(&train)?;

    let full = Split { train, test };
    full.write(dir, &split_meta(&spec, "test"))?;
    Split {
        train: sub,
        test: valid,
    }
    .write(&dir.join(VALIDATION_DIR), &split_meta(&spec, "validation"))?;

    let stats = BTreeMap::from([
        ("all", corpus_stats(&corpus)),
        ("train", corpus_stats(&full.train)),
        ("test", corpus_stats(&full.test)),
    ]);
    let stats_path = dir.join("stats.json");
    let json = serde_json::to_string_pretty(&stats).map_err(|e| CliError::Io(e.to_string()))?;
    fs::write(&stats_path, json + "\n").map_err(|e| Error::io(&stats_path, e))?;
    for (name, s) in &stats {
        println!("{}", stats_line(name, s));
    }
    Ok(())
}

pub fn train(paths: &PathOpts, opts: &ModelOpts) -> Result<(), CliError> {
    let dir = PathOpts::require(&paths.corpus_dir, "corpus-dir")?;
    let out = PathOpts::require(&paths.checkpoint, "checkpoint")?;
    let cfg = opts.resolve()?;
    let split = Split::load(dir)?;
    let epochs = cfg.epochs;
    let ck = train_model(&cfg, &split.train, |s| {
        println!(
            "epoch {}/{epochs}\tloss {:.6}\tsteps {}\ttargets {}",
            s.epoch, s.mean_loss, s.steps, s.targets
        );
    })?;
    ck.save(out)?;
    log::info!("wrote {}", out.display());
    Ok(())
}

pub fn eval(paths: &PathOpts, opts: &EvalOpts) -> Result<(), CliError> {
    let dir = PathOpts::require(&paths.corpus_dir, "corpus-dir")?;
    let ck_path = PathOpts::require(&paths.checkpoint, "checkpoint")?;
    let ck = Checkpoint::load(ck_path)?;
    let split = Split::load(dir)?;
    ck.check_vocab(&split.train.items)?;
    let cfg = ck.config.adjust_eval(&opts.resolve()?);

    let mut seeds = opts.seeds()?;
    if seeds > 1 && !ck.config.kind.is_neural() {
        log::warn!("{} is deterministic; evaluating once", ck.config.kind);
        seeds = 1;
    }
    let runs = if seeds == 1 {
        vec![evaluate_checkpoint(&ck, &split, &cfg)?]
    } else {
        (0..seeds as u64)
            .map(|k| {
                let mut mc = ck.config.clone();
                mc.seed = ck.config.seed.wrapping_add(k);
                let retrained = train_model(&mc, &split.train, |_| {})?;
                evaluate_checkpoint(&retrained, &split, &cfg)
            })
            .collect::<Result<Vec<_>, _>>()?
    };
    let combined = combine_seeds(&runs);
    let name = ck.config.kind.as_str();
    print!("{}", render_table(name, &combined));
    if let Some(report) = &paths.report {
        write_report(report, name, &combined, seeds)?;
    }
    Ok(())
}

type Groups = Vec<(sessrec::eval::Group, Option<sessrec::MetricsReport>)>;

fn evaluate_checkpoint(ck: &Checkpoint, split: &Split, cfg: &EvalConfig) -> Result<Groups, Error> {
    let ev = evaluate_model(&*ck.recommender(), &split.test, &split.train, cfg)?;
    if ev.skipped_users > 0 {
        log::warn!("{} test users had no training history and were skipped", ev.skipped_users);
    }
    Ok(full_report(&ev, cfg))
}

fn write_report(path: &PathBuf, name: &str, groups: &Groups, seeds: usize) -> Result<(), Error> {
    let rows = report_rows(name, groups, seeds);
    let mut buf = Vec::new();
    write_tsv(&mut buf, &rows).map_err(|e| Error::io(path, e))?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}
