//! Interaction logs → sessions → filtered, split corpora.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CORPUS_MAGIC: &str = "SESSREC-CORPUS-v1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawEvent {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: u64,
    pub interaction_type: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Session {
    pub items: Vec<usize>,
    pub timestamps: Vec<u64>,
}

impl Session {
    pub fn new(items: Vec<usize>, timestamps: Vec<u64>) -> Self {
        assert_eq!(items.len(), timestamps.len());
        Session { items, timestamps }
    }

    /// Session with timestamps 0, 1, 2, ... (synthetic data, tests).
    pub fn from_items(items: Vec<usize>) -> Self {
        let timestamps = (0..items.len() as u64).collect();
        Session { items, timestamps }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn start(&self) -> Option<u64> {
        self.timestamps.first().copied()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UserHistory {
    pub user_index: usize,
    pub sessions: Vec<Session>,
}

impl UserHistory {
    pub fn n_events(&self) -> usize {
        self.sessions.iter().map(Session::len).sum()
    }
}

/// Bidirectional id ↔ dense index map.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_ids<I: IntoIterator<Item = String>>(ids: I) -> Result<Self> {
        let mut v = Vocab::new();
        for id in ids {
            if v.index.contains_key(&id) {
                return Err(Error::Format(format!("duplicate vocabulary id `{id}`")));
            }
            v.intern(&id);
        }
        Ok(v)
    }

    /// Index of `id`, inserting it if new.
    pub fn intern(&mut self, id: &str) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        let i = self.ids.len();
        self.ids.push(id.to_owned());
        self.index.insert(id.to_owned(), i);
        i
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Keeps the entries flagged in `keep`, preserving order. Returns the new
    /// vocabulary and the old → new index map.
    fn compact(&self, keep: &[bool]) -> (Vocab, Vec<Option<usize>>) {
        let mut out = Vocab::new();
        let remap = self
            .ids
            .iter()
            .zip(keep)
            .map(|(id, &k)| k.then(|| out.intern(id)))
            .collect();
        (out, remap)
    }
}

/// Users with their sessions, plus the item and user vocabularies the dense
/// indices refer to.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub users: Vec<UserHistory>,
    pub items: Vocab,
    pub user_ids: Vocab,
}

impl Corpus {
    /// Corpus over anonymous items `0..n_items` and users `0..`.
    pub fn from_sessions(n_items: usize, users: Vec<Vec<Session>>) -> Self {
        let items = Vocab::from_ids((0..n_items).map(|i| format!("i{i}"))).unwrap();
        let user_ids = Vocab::from_ids((0..users.len()).map(|u| format!("u{u}"))).unwrap();
        let users = users
            .into_iter()
            .enumerate()
            .map(|(user_index, sessions)| UserHistory {
                user_index,
                sessions,
            })
            .collect();
        Corpus {
            users,
            items,
            user_ids,
        }
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_sessions(&self) -> usize {
        self.users.iter().map(|u| u.sessions.len()).sum()
    }

    pub fn n_events(&self) -> usize {
        self.users.iter().map(UserHistory::n_events).sum()
    }

    pub fn sessions(&self) -> impl Iterator<Item = &Session> {
        self.users.iter().flat_map(|u| u.sessions.iter())
    }

    pub fn user(&self, user_index: usize) -> Option<&UserHistory> {
        self.users.iter().find(|u| u.user_index == user_index)
    }

    /// Checks that every item index is inside the vocabulary.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_items();
        for s in self.sessions() {
            if let Some(&bad) = s.items.iter().find(|&&i| i >= n) {
                return Err(Error::ItemOutOfRange {
                    index: bad,
                    n_items: n,
                });
            }
        }
        Ok(())
    }

    /// Per-item event counts.
    pub fn item_support(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_items()];
        for s in self.sessions() {
            for &i in &s.items {
                counts[i] += 1;
            }
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub idle_threshold_s: u64,
    pub min_item_support: usize,
    pub min_session_len: usize,
    pub min_user_sessions: usize,
    pub dropped_types: Vec<String>,
    pub dedup_same_type_in_session: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            idle_threshold_s: 1800,
            min_item_support: 1,
            min_session_len: 3,
            min_user_sessions: 5,
            dropped_types: Vec::new(),
            dedup_same_type_in_session: false,
        }
    }
}

/// Column layout of an event file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventFormat {
    pub delimiter: u8,
    pub has_header: bool,
    /// Column positions of user, item, timestamp and interaction type.
    pub columns: [usize; 4],
}

impl Default for EventFormat {
    fn default() -> Self {
        EventFormat {
            delimiter: b'\t',
            has_header: false,
            columns: [0, 1, 2, 3],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadedEvents {
    pub events: Vec<RawEvent>,
    /// Lines skipped for a wrong column count or an empty field.
    pub malformed: usize,
}

pub fn load_events(path: &Path, format: &EventFormat) -> Result<LoadedEvents> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(format.delimiter)
        .has_headers(format.has_header)
        .flexible(true)
        .quoting(false)
        .from_reader(BufReader::new(file));
    let needed = format.columns.iter().copied().max().unwrap_or(0) + 1;
    let mut out = LoadedEvents::default();
    for record in reader.records() {
        let record = record.map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
            _ => Error::Parse {
                path: path.to_owned(),
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            },
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() == 1 && record.get(0).is_some_and(|f| f.trim().is_empty()) {
            continue;
        }
        let field = |i: usize| record.get(format.columns[i]).map(str::trim).unwrap_or("");
        if record.len() < needed || (0..4).any(|i| field(i).is_empty()) {
            out.malformed += 1;
            continue;
        }
        let timestamp = field(2).parse::<u64>().map_err(|_| Error::Parse {
            path: path.to_owned(),
            line,
            message: format!("unparseable timestamp `{}`", field(2)),
        })?;
        out.events.push(RawEvent {
            user_id: field(0).to_owned(),
            item_id: field(1).to_owned(),
            timestamp,
            interaction_type: field(3).to_owned(),
        });
    }
    if out.malformed > 0 {
        log::warn!("{}: skipped {} malformed lines", path.display(), out.malformed);
    }
    Ok(out)
}

/// Groups events per user, orders them by time (stable for equal timestamps)
/// and cuts a new session whenever the idle gap reaches the threshold.
pub fn sessionize(events: &[RawEvent], spec: &SplitSpec) -> Corpus {
    let dropped: HashSet<&str> = spec.dropped_types.iter().map(String::as_str).collect();
    let mut items = Vocab::new();
    let mut user_ids = Vocab::new();
    let mut per_user: Vec<Vec<(u64, usize, &str)>> = Vec::new();
    for e in events {
        if dropped.contains(e.interaction_type.as_str()) {
            continue;
        }
        let u = user_ids.intern(&e.user_id);
        if u == per_user.len() {
            per_user.push(Vec::new());
        }
        let i = items.intern(&e.item_id);
        per_user[u].push((e.timestamp, i, e.interaction_type.as_str()));
    }

    let users = per_user
        .into_iter()
        .enumerate()
        .map(|(user_index, mut evs)| {
            evs.sort_by_key(|&(ts, _, _)| ts);
            let mut sessions = Vec::new();
            let mut current: Vec<(u64, usize, &str)> = Vec::new();
            for ev in evs {
                if let Some(&(last, _, _)) = current.last() {
                    if ev.0 - last >= spec.idle_threshold_s {
                        sessions.push(close_session(std::mem::take(&mut current), spec));
                    }
                }
                current.push(ev);
            }
            if !current.is_empty() {
                sessions.push(close_session(current, spec));
            }
            UserHistory {
                user_index,
                sessions,
            }
        })
        .collect();
    Corpus {
        users,
        items,
        user_ids,
    }
}

fn close_session(events: Vec<(u64, usize, &str)>, spec: &SplitSpec) -> Session {
    let mut seen = HashSet::new();
    let mut s = Session::default();
    for (ts, item, kind) in events {
        if spec.dedup_same_type_in_session && !seen.insert((item, kind)) {
            continue;
        }
        s.items.push(item);
        s.timestamps.push(ts);
    }
    s
}

/// Item support → session length → sessions per user, each applied once in
/// that order. Users and items are re-indexed densely afterwards.
pub fn filter_corpus(corpus: &Corpus, spec: &SplitSpec) -> Corpus {
    let support = corpus.item_support();
    let item_ok: Vec<bool> = support.iter().map(|&c| c >= spec.min_item_support).collect();

    let mut kept_users = Vec::new();
    for u in &corpus.users {
        let sessions: Vec<Session> = u
            .sessions
            .iter()
            .map(|s| {
                let mut out = Session::default();
                for (&i, &t) in s.items.iter().zip(&s.timestamps) {
                    if item_ok[i] {
                        out.items.push(i);
                        out.timestamps.push(t);
                    }
                }
                out
            })
            .filter(|s| s.len() >= spec.min_session_len.max(1))
            .collect();
        if sessions.len() >= spec.min_user_sessions {
            kept_users.push((u.user_index, sessions));
        }
    }

    let mut item_used = vec![false; corpus.n_items()];
    for (_, sessions) in &kept_users {
        for s in sessions {
            for &i in &s.items {
                item_used[i] = true;
            }
        }
    }
    let (items, item_map) = corpus.items.compact(&item_used);
    let mut user_keep = vec![false; corpus.user_ids.len()];
    for (u, _) in &kept_users {
        user_keep[*u] = true;
    }
    let (user_ids, user_map) = corpus.user_ids.compact(&user_keep);

    let users = kept_users
        .into_iter()
        .map(|(u, sessions)| UserHistory {
            user_index: user_map[u].expect("kept user"),
            sessions: sessions
                .into_iter()
                .map(|mut s| {
                    s.items.iter_mut().for_each(|i| *i = item_map[*i].expect("kept item"));
                    s
                })
                .collect(),
        })
        .collect();
    Corpus {
        users,
        items,
        user_ids,
    }
}

/// Last session of each user → test, the rest → train. The item vocabulary is
/// rebuilt from the training side; test events on unseen items are dropped,
/// and test sessions left with fewer than two events are removed.
pub fn split_last_session(corpus: &Corpus) -> Result<(Corpus, Corpus)> {
    let mut in_train = vec![false; corpus.n_items()];
    for u in &corpus.users {
        if u.sessions.len() < 2 {
            return Err(Error::Corpus(format!(
                "user `{}` has {} session(s); splitting needs at least 2",
                corpus.user_ids.id(u.user_index),
                u.sessions.len()
            )));
        }
        for s in &u.sessions[..u.sessions.len() - 1] {
            for &i in &s.items {
                in_train[i] = true;
            }
        }
    }
    let (items, remap) = corpus.items.compact(&in_train);

    let mut train_users = Vec::with_capacity(corpus.users.len());
    let mut test_users = Vec::new();
    for u in &corpus.users {
        let (last, head) = u.sessions.split_last().expect("checked above");
        let sessions = head
            .iter()
            .map(|s| Session {
                items: s.items.iter().map(|&i| remap[i].expect("train item")).collect(),
                timestamps: s.timestamps.clone(),
            })
            .collect();
        train_users.push(UserHistory {
            user_index: u.user_index,
            sessions,
        });

        let mut test = Session::default();
        for (&i, &t) in last.items.iter().zip(&last.timestamps) {
            if let Some(j) = remap[i] {
                test.items.push(j);
                test.timestamps.push(t);
            }
        }
        if test.len() >= 2 {
            test_users.push(UserHistory {
                user_index: u.user_index,
                sessions: vec![test],
            });
        }
    }
    Ok((
        Corpus {
            users: train_users,
            items: items.clone(),
            user_ids: corpus.user_ids.clone(),
        },
        Corpus {
            users: test_users,
            items,
            user_ids: corpus.user_ids.clone(),
        },
    ))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[usize]) -> Summary {
        if values.is_empty() {
            return Summary::default();
        }
        let mut sorted = values.to_vec();
        sorted.sort_unstable();
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2] as f64
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
        };
        let mean = sorted.iter().sum::<usize>() as f64 / n as f64;
        let var = sorted.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        Summary {
            median,
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub users: usize,
    /// Distinct items that occur in at least one event.
    pub items: usize,
    pub sessions: usize,
    pub events: usize,
    pub events_per_item: Summary,
    pub events_per_session: Summary,
    pub sessions_per_user: Summary,
}

pub fn corpus_stats(c: &Corpus) -> Stats {
    let per_item: Vec<usize> = c.item_support().into_iter().filter(|&n| n > 0).collect();
    let per_session: Vec<usize> = c.sessions().map(Session::len).collect();
    let per_user: Vec<usize> = c
        .users
        .iter()
        .filter(|u| !u.sessions.is_empty())
        .map(|u| u.sessions.len())
        .collect();
    Stats {
        users: per_user.len(),
        items: per_item.len(),
        sessions: per_session.len(),
        events: per_session.iter().sum(),
        events_per_item: Summary::of(&per_item),
        events_per_session: Summary::of(&per_session),
        sessions_per_user: Summary::of(&per_user),
    }
}

/// Flattens a corpus back into events (one per session item, type `view`).
pub fn flatten(c: &Corpus) -> Vec<RawEvent> {
    let mut out = Vec::with_capacity(c.n_events());
    for u in &c.users {
        for s in &u.sessions {
            for (&i, &t) in s.items.iter().zip(&s.timestamps) {
                out.push(RawEvent {
                    user_id: c.user_ids.id(u.user_index).to_owned(),
                    item_id: c.items.id(i).to_owned(),
                    timestamp: t,
                    interaction_type: "view".to_owned(),
                });
            }
        }
    }
    out
}

pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for (i, id) in vocab.ids().iter().enumerate() {
        writeln!(w, "{i}\t{id}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut ids = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_owned(),
            line: n as u64 + 1,
            message,
        };
        let (idx, id) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected `index<TAB>id`".into()))?;
        let idx: usize = idx.parse().map_err(|_| parse_err(format!("bad index `{idx}`")))?;
        if idx != ids.len() {
            return Err(parse_err(format!("index {idx} out of sequence")));
        }
        ids.push(id.to_owned());
    }
    Vocab::from_ids(ids)
}

/// Writes the corpus as `user<TAB>session<TAB>item<TAB>timestamp` lines under a
/// versioned header. Vocabularies go to sidecar files (see [`write_vocab`]).
pub fn write_corpus(path: &Path, c: &Corpus, meta: &BTreeMap<String, String>) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "{CORPUS_MAGIC}").map_err(io)?;
    writeln!(w, "#n_items={}", c.n_items()).map_err(io)?;
    writeln!(w, "#n_users={}", c.user_ids.len()).map_err(io)?;
    for (k, v) in meta {
        writeln!(w, "#meta.{k}={v}").map_err(io)?;
    }
    for u in &c.users {
        for (si, s) in u.sessions.iter().enumerate() {
            for (&i, &t) in s.items.iter().zip(&s.timestamps) {
                writeln!(w, "{}\t{si}\t{i}\t{t}", u.user_index).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

pub struct LoadedCorpus {
    pub corpus: Corpus,
    pub meta: BTreeMap<String, String>,
}

pub fn read_corpus(path: &Path, items: Vocab, user_ids: Vocab) -> Result<LoadedCorpus> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let perr = |line: usize, message: String| Error::Parse {
        path: path.to_owned(),
        line: line as u64,
        message,
    };
    match lines.next() {
        Some(Ok(l)) if l == CORPUS_MAGIC => {}
        Some(Err(e)) => return Err(Error::io(path, e)),
        _ => return Err(perr(1, format!("missing `{CORPUS_MAGIC}` header"))),
    }
    let mut meta = BTreeMap::new();
    let mut users: Vec<UserHistory> = Vec::new();
    let mut n_items = None;
    for (n, line) in lines.enumerate() {
        let lineno = n + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        if let Some(h) = line.strip_prefix('#') {
            let (k, v) = h.split_once('=').ok_or_else(|| perr(lineno, "bad header".into()))?;
            match k {
                "n_items" => {
                    n_items = Some(v.parse::<usize>().map_err(|_| perr(lineno, "bad n_items".into()))?)
                }
                "n_users" => {}
                _ => {
                    meta.insert(k.strip_prefix("meta.").unwrap_or(k).to_owned(), v.to_owned());
                }
            }
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(perr(lineno, "expected 4 columns".into()));
        }
        let num = |s: &str| s.parse::<u64>().map_err(|_| perr(lineno, format!("bad number `{s}`")));
        let (u, s, i, t) = (num(f[0])? as usize, num(f[1])? as usize, num(f[2])? as usize, num(f[3])?);
        if users.last().is_none_or(|h| h.user_index != u) {
            users.push(UserHistory {
                user_index: u,
                sessions: Vec::new(),
            });
        }
        let h = users.last_mut().unwrap();
        if s == h.sessions.len() {
            h.sessions.push(Session::default());
        } else if s + 1 != h.sessions.len() {
            return Err(perr(lineno, format!("session index {s} out of sequence")));
        }
        let sess = h.sessions.last_mut().unwrap();
        sess.items.push(i);
        sess.timestamps.push(t);
    }
    if n_items != Some(items.len()) {
        return Err(Error::Format(format!(
            "{}: corpus declares {:?} items but the vocabulary has {}",
            path.display(),
            n_items,
            items.len()
        )));
    }
    let corpus = Corpus {
        users,
        items,
        user_ids,
    };
    corpus.validate()?;
    Ok(LoadedCorpus { corpus, meta })
}
