//! Sequential next-item evaluation: every model scores the catalog after
//! each event of a test session, and the rank of the event that actually
//! followed is recorded. Headline metrics average over targets; breakdowns
//! average per test session.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{KnnModel, PopModel};
use crate::corpus::{Corpus, UserHistory};
use crate::error::{Error, Result};
use crate::hier::HrnnModel;
use crate::session::SessionRnn;

/// Stateful per-user scoring.
pub trait UserScorer {
    /// Scores for the first event of the next session, for models that
    /// carry state across sessions in a single stream.
    fn begin_session(&mut self) -> Result<Option<Vec<f64>>> {
        Ok(None)
    }

    /// Consumes `item` and returns scores for the event that follows it.
    fn step(&mut self, item: usize) -> Result<Vec<f64>>;
}

pub trait Recommender: Sync {
    fn n_items(&self) -> usize;

    /// Whether the model needs the user's training history to score.
    fn needs_history(&self) -> bool {
        false
    }

    /// A scorer positioned at the start of the user's next session, after
    /// replaying `history` where the model uses it.
    fn user_scorer<'a>(&'a self, user: usize, history: Option<&UserHistory>) -> Result<Box<dyn UserScorer + 'a>>;
}

impl<T: Recommender + ?Sized> Recommender for &T {
    fn n_items(&self) -> usize {
        (**self).n_items()
    }

    fn needs_history(&self) -> bool {
        (**self).needs_history()
    }

    fn user_scorer<'a>(&'a self, user: usize, history: Option<&UserHistory>) -> Result<Box<dyn UserScorer + 'a>> {
        (**self).user_scorer(user, history)
    }
}

struct RnnScorer<'a> {
    model: &'a SessionRnn,
    state: Vec<f64>,
}

impl UserScorer for RnnScorer<'_> {
    fn step(&mut self, item: usize) -> Result<Vec<f64>> {
        let (scores, next) = self.model.score_step(item, &self.state)?;
        self.state = next;
        Ok(scores)
    }
}

impl Recommender for SessionRnn {
    fn n_items(&self) -> usize {
        SessionRnn::n_items(self)
    }

    fn user_scorer<'a>(&'a self, _user: usize, _history: Option<&UserHistory>) -> Result<Box<dyn UserScorer + 'a>> {
        Ok(Box::new(RnnScorer {
            model: self,
            state: self.initial_state(),
        }))
    }
}

/// A session RNN trained on concatenated user histories: the whole history
/// is replayed as one stream and the test session continues it.
pub struct ConcatRnn<'a>(pub &'a SessionRnn);

struct ConcatScorer<'a> {
    model: &'a SessionRnn,
    state: Vec<f64>,
    replayed: bool,
}

impl UserScorer for ConcatScorer<'_> {
    fn begin_session(&mut self) -> Result<Option<Vec<f64>>> {
        Ok(self.replayed.then(|| self.model.scores(&self.state)))
    }

    fn step(&mut self, item: usize) -> Result<Vec<f64>> {
        let (scores, next) = self.model.score_step(item, &self.state)?;
        self.state = next;
        Ok(scores)
    }
}

impl Recommender for ConcatRnn<'_> {
    fn n_items(&self) -> usize {
        self.0.n_items()
    }

    fn needs_history(&self) -> bool {
        true
    }

    fn user_scorer<'a>(&'a self, _user: usize, history: Option<&UserHistory>) -> Result<Box<dyn UserScorer + 'a>> {
        let mut state = self.0.initial_state();
        let mut replayed = false;
        for s in history.iter().flat_map(|h| &h.sessions) {
            for &item in &s.items {
                state = self.0.advance(item, &state)?;
                replayed = true;
            }
        }
        Ok(Box::new(ConcatScorer {
            model: self.0,
            state,
            replayed,
        }))
    }
}

struct HrnnScorer<'a> {
    model: &'a HrnnModel,
    c: Vec<f64>,
    s: Vec<f64>,
}

impl UserScorer for HrnnScorer<'_> {
    fn step(&mut self, item: usize) -> Result<Vec<f64>> {
        let (scores, s) = self.model.hrnn_step(item, &self.s, &self.c)?;
        self.s = s;
        Ok(scores)
    }
}

impl Recommender for HrnnModel {
    fn n_items(&self) -> usize {
        HrnnModel::n_items(self)
    }

    fn needs_history(&self) -> bool {
        true
    }

    fn user_scorer<'a>(&'a self, _user: usize, history: Option<&UserHistory>) -> Result<Box<dyn UserScorer + 'a>> {
        let sessions = history.iter().flat_map(|h| h.sessions.iter().map(|s| s.items.as_slice()));
        let c = self.replay_history(sessions)?;
        let s = self.init_session_state(&c)?;
        Ok(Box::new(HrnnScorer { model: self, c, s }))
    }
}

struct PopScorer<'a> {
    model: &'a PopModel,
    user: usize,
    context: Vec<usize>,
}

impl UserScorer for PopScorer<'_> {
    fn step(&mut self, item: usize) -> Result<Vec<f64>> {
        self.context.push(item);
        Ok(self.model.score(self.user, &self.context))
    }
}

impl Recommender for PopModel {
    fn n_items(&self) -> usize {
        PopModel::n_items(self)
    }

    fn user_scorer<'a>(&'a self, user: usize, _history: Option<&UserHistory>) -> Result<Box<dyn UserScorer + 'a>> {
        Ok(Box::new(PopScorer {
            model: self,
            user,
            context: Vec::new(),
        }))
    }
}

struct KnnScorer<'a>(&'a KnnModel);

impl UserScorer for KnnScorer<'_> {
    fn step(&mut self, item: usize) -> Result<Vec<f64>> {
        Ok(self.0.score(item))
    }
}

impl Recommender for KnnModel {
    fn n_items(&self) -> usize {
        KnnModel::n_items(self)
    }

    fn user_scorer<'a>(&'a self, _user: usize, _history: Option<&UserHistory>) -> Result<Box<dyn UserScorer + 'a>> {
        Ok(Box::new(KnnScorer(self)))
    }
}

/// Which event position a target is grouped by in the position breakdown.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionKey {
    /// 1-based position of the predicted event.
    #[default]
    Target,
    /// Number of events seen before the prediction.
    Prefix,
}

impl std::str::FromStr for PositionKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(PositionKey::Target),
            "prefix" => Ok(PositionKey::Prefix),
            other => Err(Error::Config(format!("unknown position key `{other}` (expected target or prefix)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub cutoff: usize,
    /// Do not score a session's first event even when the model can.
    pub skip_first_prediction: bool,
    /// Rank only among the `M` items with the most training events.
    pub candidates: Option<usize>,
    pub position_key: PositionKey,
    /// Histories up to this many sessions count as short.
    pub short_history_max: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            cutoff: 5,
            skip_first_prediction: false,
            candidates: None,
            position_key: PositionKey::Target,
            short_history_max: 6,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cutoff == 0 {
            return Err(Error::Config("cutoff must be at least 1".into()));
        }
        if self.candidates == Some(0) {
            return Err(Error::Config("candidate set must not be empty".into()));
        }
        Ok(())
    }
}

/// 1-based rank with ties counted against the target.
pub fn rank_of_target(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(k, &s)| k != target && s >= t)
        .count()
}

/// Rank within a candidate subset; `None` when the target is not a
/// candidate.
pub fn rank_among(scores: &[f64], target: usize, candidates: &[usize], is_candidate: &[bool]) -> Option<usize> {
    if !is_candidate[target] {
        return None;
    }
    let t = scores[target];
    Some(1 + candidates.iter().filter(|&&k| k != target && scores[k] >= t).count())
}

/// One scored prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TargetRecord {
    pub user: usize,
    /// Index of the test session among the user's test sessions.
    pub session: usize,
    pub session_len: usize,
    /// 1-based position of the predicted event in its session.
    pub position: usize,
    /// Number of training sessions of the user.
    pub history_len: usize,
    /// `None` when the target fell outside the candidate set.
    pub rank: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Evaluation {
    pub records: Vec<TargetRecord>,
    /// Test users skipped because their history was required but missing.
    pub skipped_users: usize,
}

/// Most supported items first, ties by index.
pub fn top_supported(train: &Corpus, m: usize) -> Vec<usize> {
    let support = train.item_support();
    let mut items: Vec<usize> = (0..support.len()).collect();
    items.sort_by(|&a, &b| support[b].cmp(&support[a]).then(a.cmp(&b)));
    items.truncate(m);
    items.sort_unstable();
    items
}

pub fn evaluate_model(
    model: &dyn Recommender,
    test: &Corpus,
    history: &Corpus,
    cfg: &EvalConfig,
) -> Result<Evaluation> {
    cfg.validate()?;
    let n_items = model.n_items();
    if test.n_items() != n_items || history.n_items() != n_items {
        return Err(Error::Config(format!(
            "model has {n_items} items, corpora have {} (test) and {} (history)",
            test.n_items(),
            history.n_items()
        )));
    }
    test.validate()?;
    let by_user: HashMap<usize, &UserHistory> = history.users.iter().map(|u| (u.user_index, u)).collect();
    let candidates = cfg.candidates.map(|m| top_supported(history, m));
    let is_candidate = candidates.as_ref().map(|c| {
        let mut flags = vec![false; n_items];
        c.iter().for_each(|&i| flags[i] = true);
        flags
    });
    let rank = |scores: &[f64], target: usize| match (&candidates, &is_candidate) {
        (Some(c), Some(f)) => rank_among(scores, target, c, f),
        _ => Some(rank_of_target(scores, target)),
    };

    let per_user: Vec<Result<Option<Vec<TargetRecord>>>> = test
        .users
        .par_iter()
        .map(|u| {
            let past = by_user.get(&u.user_index).copied();
            if past.is_none() && model.needs_history() {
                return Ok(None);
            }
            let history_len = past.map_or(0, |h| h.sessions.len());
            let mut scorer = model.user_scorer(u.user_index, past)?;
            let mut out = Vec::new();
            for (si, s) in u.sessions.iter().enumerate() {
                let record = |position: usize, r: Option<usize>| TargetRecord {
                    user: u.user_index,
                    session: si,
                    session_len: s.len(),
                    position,
                    history_len,
                    rank: r,
                };
                let first = scorer.begin_session()?;
                if let (Some(scores), false, Some(&t)) = (first, cfg.skip_first_prediction, s.items.first()) {
                    out.push(record(1, rank(&scores, t)));
                }
                for (k, w) in s.items.windows(2).enumerate() {
                    let scores = scorer.step(w[0])?;
                    out.push(record(k + 2, rank(&scores, w[1])));
                }
            }
            Ok(Some(out))
        })
        .collect();

    let mut eval = Evaluation::default();
    for r in per_user {
        match r? {
            Some(recs) => eval.records.extend(recs),
            None => eval.skipped_users += 1,
        }
    }
    Ok(eval)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cutoff: usize,
    pub recall: f64,
    pub mrr: f64,
    /// Always `recall / cutoff`: there is one relevant item per target.
    pub precision: f64,
    pub targets: usize,
    pub sessions: usize,
}

fn hit(rank: Option<usize>, cutoff: usize) -> (f64, f64) {
    match rank {
        Some(r) if r <= cutoff => (1.0, 1.0 / r as f64),
        _ => (0.0, 0.0),
    }
}

impl MetricsReport {
    fn new(cutoff: usize, recall: f64, mrr: f64, targets: usize, sessions: usize) -> Self {
        MetricsReport {
            cutoff,
            recall,
            mrr,
            precision: recall / cutoff as f64,
            targets,
            sessions,
        }
    }

    /// Averaged over targets. `None` without targets.
    pub fn per_target(records: &[TargetRecord], cutoff: usize) -> Option<Self> {
        if records.is_empty() {
            return None;
        }
        let (mut rec, mut rr) = (0.0, 0.0);
        for r in records {
            let (h, m) = hit(r.rank, cutoff);
            rec += h;
            rr += m;
        }
        let n = records.len() as f64;
        Some(MetricsReport::new(cutoff, rec / n, rr / n, records.len(), count_sessions(records)))
    }

    /// Metrics averaged within each test session first, then over sessions.
    pub fn per_session(records: &[TargetRecord], cutoff: usize) -> Option<Self> {
        let groups = session_groups(records);
        if groups.is_empty() {
            return None;
        }
        let (mut rec, mut rr) = (0.0, 0.0);
        for g in &groups {
            let (mut h, mut m) = (0.0, 0.0);
            for r in g.iter() {
                let (a, b) = hit(r.rank, cutoff);
                h += a;
                m += b;
            }
            rec += h / g.len() as f64;
            rr += m / g.len() as f64;
        }
        let n = groups.len() as f64;
        Some(MetricsReport::new(cutoff, rec / n, rr / n, records.len(), groups.len()))
    }
}

/// Records of one session are contiguous.
fn session_groups(records: &[TargetRecord]) -> Vec<&[TargetRecord]> {
    records
        .chunk_by(|a, b| (a.user, a.session) == (b.user, b.session))
        .collect()
}

fn count_sessions(records: &[TargetRecord]) -> usize {
    session_groups(records).len()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    All,
    Short,
    Long,
    Beginning,
    Middle,
    End,
}

impl Group {
    pub fn label(self) -> &'static str {
        match self {
            Group::All => "all",
            Group::Short => "short",
            Group::Long => "long",
            Group::Beginning => "beginning",
            Group::Middle => "middle",
            Group::End => "end",
        }
    }
}

/// Short (history ≤ `short_max` sessions) and Long groups, per-session
/// averages. A group with no sessions is `None`.
pub fn breakdown_by_history_length(
    records: &[TargetRecord],
    cutoff: usize,
    short_max: usize,
) -> Vec<(Group, Option<MetricsReport>)> {
    let (short, long): (Vec<TargetRecord>, Vec<TargetRecord>) =
        records.iter().partition(|r| r.history_len <= short_max);
    vec![
        (Group::Short, MetricsReport::per_session(&short, cutoff)),
        (Group::Long, MetricsReport::per_session(&long, cutoff)),
    ]
}

/// Group of an event position (positions 1–2, 3–4, 5 and later).
pub fn position_group(position: usize) -> Group {
    match position {
        0..=2 => Group::Beginning,
        3 | 4 => Group::Middle,
        _ => Group::End,
    }
}

/// Beginning / Middle / End groups over sessions of at least five events,
/// per-session averages within each group.
pub fn breakdown_by_position(
    records: &[TargetRecord],
    cutoff: usize,
    key: PositionKey,
) -> Vec<(Group, Option<MetricsReport>)> {
    let eligible = records.iter().filter(|r| r.session_len >= 5);
    let mut groups: [Vec<TargetRecord>; 3] = Default::default();
    for r in eligible {
        let pos = match key {
            PositionKey::Target => r.position,
            PositionKey::Prefix => r.position - 1,
        };
        let slot = match position_group(pos) {
            Group::Beginning => 0,
            Group::Middle => 1,
            _ => 2,
        };
        groups[slot].push(*r);
    }
    [Group::Beginning, Group::Middle, Group::End]
        .into_iter()
        .zip(groups.iter())
        .map(|(g, recs)| (g, MetricsReport::per_session(recs, cutoff)))
        .collect()
}

/// All reports for one evaluation: the headline over targets, and the two
/// breakdowns over sessions.
pub fn full_report(eval: &Evaluation, cfg: &EvalConfig) -> Vec<(Group, Option<MetricsReport>)> {
    let mut out = vec![(Group::All, MetricsReport::per_target(&eval.records, cfg.cutoff))];
    out.extend(breakdown_by_history_length(&eval.records, cfg.cutoff, cfg.short_history_max));
    out.extend(breakdown_by_position(&eval.records, cfg.cutoff, cfg.position_key));
    out
}

fn aggregate(reports: &[MetricsReport], f: fn(&mut [f64]) -> f64) -> Option<MetricsReport> {
    let first = reports.first()?;
    let pick = |g: fn(&MetricsReport) -> f64| {
        let mut v: Vec<f64> = reports.iter().map(g).collect();
        f(&mut v)
    };
    Some(MetricsReport::new(
        first.cutoff,
        pick(|r| r.recall),
        pick(|r| r.mrr),
        first.targets,
        first.sessions,
    ))
}

fn mean(v: &mut [f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn mean_report(reports: &[MetricsReport]) -> Option<MetricsReport> {
    aggregate(reports, mean)
}

pub fn median_report(reports: &[MetricsReport]) -> Option<MetricsReport> {
    aggregate(reports, median)
}

/// Combines per-seed report sets: the headline group is averaged, the
/// breakdown groups take the median. A group absent in any seed stays
/// absent.
pub fn combine_seeds(runs: &[Vec<(Group, Option<MetricsReport>)>]) -> Vec<(Group, Option<MetricsReport>)> {
    let Some(first) = runs.first() else {
        return Vec::new();
    };
    first
        .iter()
        .enumerate()
        .map(|(k, (g, _))| {
            let reps: Option<Vec<MetricsReport>> = runs.iter().map(|r| r[k].1.clone()).collect();
            let combined = reps.and_then(|r| {
                if *g == Group::All {
                    mean_report(&r)
                } else {
                    median_report(&r)
                }
            });
            (*g, combined)
        })
        .collect()
}

/// One line of the machine-readable report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub metric: String,
    pub cutoff: usize,
    pub group: String,
    pub value: f64,
    pub seed_count: usize,
}

pub fn report_rows(model: &str, groups: &[(Group, Option<MetricsReport>)], seed_count: usize) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for (g, rep) in groups {
        let Some(r) = rep else { continue };
        for (metric, value) in [("recall", r.recall), ("mrr", r.mrr), ("precision", r.precision)] {
            rows.push(ReportRow {
                model: model.to_string(),
                metric: metric.to_string(),
                cutoff: r.cutoff,
                group: g.label().to_string(),
                value,
                seed_count,
            });
        }
    }
    rows
}

pub fn write_tsv<W: Write>(w: &mut W, rows: &[ReportRow]) -> std::io::Result<()> {
    writeln!(w, "model\tmetric\tcutoff\tgroup\tvalue\tseed_count")?;
    for r in rows {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{:.6}\t{}",
            r.model, r.metric, r.cutoff, r.group, r.value, r.seed_count
        )?;
    }
    Ok(())
}

/// Human-readable table, one line per group.
pub fn render_table(model: &str, groups: &[(Group, Option<MetricsReport>)]) -> String {
    let mut out = String::new();
    let n = groups
        .iter()
        .find_map(|(_, r)| r.as_ref().map(|r| r.cutoff))
        .unwrap_or(0);
    let _ = writeln!(
        out,
        "{model:<12} {:<10} {:>10} {:>10} {:>10} {:>9} {:>9}",
        "group",
        format!("Recall@{n}"),
        format!("MRR@{n}"),
        format!("Prec@{n}"),
        "targets",
        "sessions"
    );
    for (g, rep) in groups {
        match rep {
            Some(r) => {
                let _ = writeln!(
                    out,
                    "{:<12} {:<10} {:>10.4} {:>10.4} {:>10.4} {:>9} {:>9}",
                    "",
                    g.label(),
                    r.recall,
                    r.mrr,
                    r.precision,
                    r.targets,
                    r.sessions
                );
            }
            None => {
                let _ = writeln!(out, "{:<12} {:<10} {:>10}", "", g.label(), "-");
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Session;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn rec(user: usize, session_len: usize, position: usize, history_len: usize, rank: usize) -> TargetRecord {
        TargetRecord {
            user,
            session: 0,
            session_len,
            position,
            history_len,
            rank: Some(rank),
        }
    }

    #[test]
    fn rank_cases() {
        assert_eq!(rank_of_target(&[0.1, 0.9, 0.3], 1), 1);
        assert_eq!(rank_of_target(&[0.5; 10], 4), 10);
        assert_eq!(rank_of_target(&[0.2, 0.9, 0.2, 0.1], 0), 3);
    }

    #[test]
    fn metric_cases() {
        let r = MetricsReport::per_target(&[rec(0, 4, 2, 1, 3)], 5).unwrap();
        assert_eq!((r.recall, r.mrr, r.precision), (1.0, 1.0 / 3.0, 0.2));
        let r = MetricsReport::per_target(&[rec(0, 4, 2, 1, 6)], 5).unwrap();
        assert_eq!((r.recall, r.mrr), (0.0, 0.0));
        assert!(MetricsReport::per_target(&[], 5).is_none());
        let miss = TargetRecord {
            rank: None,
            ..rec(0, 2, 2, 1, 1)
        };
        assert_eq!(MetricsReport::per_target(&[miss], 5).unwrap().recall, 0.0);
    }

    #[test]
    fn per_session_weights_sessions_equally() {
        // user 0: one hit of one; user 1: one hit of three
        let recs = [
            rec(0, 2, 2, 1, 1),
            rec(1, 4, 2, 1, 1),
            rec(1, 4, 3, 1, 9),
            rec(1, 4, 4, 1, 9),
        ];
        let s = MetricsReport::per_session(&recs, 5).unwrap();
        assert!((s.recall - (1.0 + 1.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(s.sessions, 2);
        let t = MetricsReport::per_target(&recs, 5).unwrap();
        assert_eq!(t.recall, 0.5);
    }

    #[test]
    fn position_groups_for_length_five() {
        let recs: Vec<_> = (2..=5).map(|p| rec(0, 5, p, 1, 1)).collect();
        let got: Vec<Group> = recs.iter().map(|r| position_group(r.position)).collect();
        assert_eq!(got, vec![Group::Beginning, Group::Middle, Group::Middle, Group::End]);
        let short: Vec<_> = (2..=4).map(|p| rec(0, 4, p, 1, 1)).collect();
        let b = breakdown_by_position(&short, 5, PositionKey::Target);
        assert!(b.iter().all(|(_, r)| r.is_none()));
        let b = breakdown_by_position(&recs, 5, PositionKey::Target);
        assert_eq!(b[1].1.as_ref().unwrap().targets, 2);
        let b = breakdown_by_position(&recs, 5, PositionKey::Prefix);
        assert_eq!(b[0].1.as_ref().unwrap().targets, 2);
    }

    #[test]
    fn history_groups() {
        let recs = [rec(0, 2, 2, 5, 1), rec(1, 2, 2, 5, 1)];
        let b = breakdown_by_history_length(&recs, 5, 6);
        assert_eq!(b[0].1.as_ref().unwrap().sessions, 2);
        assert!(b[1].1.is_none());
        let recs = [rec(0, 2, 2, 6, 1), rec(1, 2, 2, 7, 1)];
        let b = breakdown_by_history_length(&recs, 5, 6);
        assert_eq!(b[0].1.as_ref().unwrap().sessions, 1);
        assert_eq!(b[1].1.as_ref().unwrap().sessions, 1);
    }

    struct RandomScores(usize, u64);

    struct RandomScorer(usize, Rng);

    impl UserScorer for RandomScorer {
        fn step(&mut self, _item: usize) -> Result<Vec<f64>> {
            Ok((0..self.0).map(|_| self.1.uniform()).collect())
        }
    }

    impl Recommender for RandomScores {
        fn n_items(&self) -> usize {
            self.0
        }

        fn user_scorer<'a>(&'a self, user: usize, _h: Option<&UserHistory>) -> Result<Box<dyn UserScorer + 'a>> {
            Ok(Box::new(RandomScorer(self.0, Rng::with_stream(self.1, user as u64))))
        }
    }

    #[test]
    fn random_scorer_hits_chance_level() {
        let c = 40;
        let mut rng = Rng::new(3);
        let users: Vec<Vec<Session>> = (0..400)
            .map(|_| vec![Session::from_items((0..6).map(|_| rng.below(c)).collect())])
            .collect();
        let test = Corpus::from_sessions(c, users);
        let eval = evaluate_model(&RandomScores(c, 1), &test, &test, &EvalConfig::default()).unwrap();
        let r = MetricsReport::per_target(&eval.records, 5).unwrap();
        let p = 5.0 / c as f64;
        let se = (p * (1.0 - p) / r.targets as f64).sqrt();
        assert!((r.recall - p).abs() < 3.0 * se, "{} vs {p}", r.recall);
        assert_eq!(r.precision, r.recall / 5.0);
        let again = evaluate_model(&RandomScores(c, 1), &test, &test, &EvalConfig::default()).unwrap();
        assert_eq!(again, eval);
    }

    #[test]
    fn history_requirement_skips_unknown_users() {
        let rnn = SessionRnn::zeros(3, 2, crate::loss::LossKind::Top1);
        let concat = ConcatRnn(&rnn);
        let test = Corpus::from_sessions(3, vec![vec![Session::from_items(vec![0, 1, 2])]]);
        let history = Corpus::from_sessions(3, vec![]);
        let eval = evaluate_model(&concat, &test, &history, &EvalConfig::default()).unwrap();
        assert_eq!((eval.skipped_users, eval.records.len()), (1, 0));
        let eval = evaluate_model(&rnn, &test, &history, &EvalConfig::default()).unwrap();
        assert_eq!(eval.records.len(), 2);
    }

    #[test]
    fn concat_first_prediction_is_optional() {
        let rnn = SessionRnn::zeros(3, 2, crate::loss::LossKind::Top1);
        let history = Corpus::from_sessions(3, vec![vec![Session::from_items(vec![2, 2])]]);
        let test = Corpus::from_sessions(3, vec![vec![Session::from_items(vec![0, 1, 2])]]);
        let mut cfg = EvalConfig::default();
        let eval = evaluate_model(&ConcatRnn(&rnn), &test, &history, &cfg).unwrap();
        assert_eq!(eval.records.len(), 3);
        assert_eq!(eval.records[0].position, 1);
        cfg.skip_first_prediction = true;
        let eval = evaluate_model(&ConcatRnn(&rnn), &test, &history, &cfg).unwrap();
        assert_eq!(eval.records.len(), 2);
    }

    #[test]
    fn candidate_subset_ranking() {
        let scores = [0.9, 0.1, 0.5, 0.7];
        let cands = [1, 2];
        let flags = [false, true, true, false];
        assert_eq!(rank_among(&scores, 2, &cands, &flags), Some(1));
        assert_eq!(rank_among(&scores, 0, &cands, &flags), None);
    }

    #[test]
    fn seed_combination() {
        let mk = |r: f64| MetricsReport::new(5, r, r / 2.0, 10, 3);
        let runs = vec![
            vec![(Group::All, Some(mk(0.1))), (Group::Short, Some(mk(0.1)))],
            vec![(Group::All, Some(mk(0.2))), (Group::Short, Some(mk(0.9)))],
            vec![(Group::All, Some(mk(0.6))), (Group::Short, Some(mk(0.2)))],
        ];
        let c = combine_seeds(&runs);
        assert!((c[0].1.as_ref().unwrap().recall - 0.3).abs() < 1e-15);
        assert_eq!(c[1].1.as_ref().unwrap().recall, 0.2);
        let t = report_rows("m", &c, 3);
        assert_eq!(t.len(), 6);
        let mut buf = Vec::new();
        write_tsv(&mut buf, &t).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("model\tmetric\tcutoff\tgroup\tvalue\tseed_count\n"));
    }

    proptest! {
        #[test]
        fn metrics_monotone_in_cutoff(ranks in proptest::collection::vec(1usize..30, 1..50)) {
            let recs: Vec<_> = ranks.iter().enumerate().map(|(i, &r)| rec(i, 2, 2, 1, r)).collect();
            let mut prev: Option<MetricsReport> = None;
            for n in 1..35 {
                let m = MetricsReport::per_target(&recs, n).unwrap();
                prop_assert_eq!(m.precision, m.recall / n as f64);
                prop_assert!((0.0..=1.0).contains(&m.recall) && (0.0..=1.0).contains(&m.mrr));
                if let Some(p) = prev {
                    prop_assert!(m.recall >= p.recall && m.mrr >= p.mrr);
                }
                prev = Some(m);
            }
        }
    }
}
