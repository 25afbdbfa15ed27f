//! Non-recurrent comparison systems: personal popularity, item-to-item
//! co-occurrence KNN, and the session concatenation used to train a plain
//! session RNN on whole user histories.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::corpus::{Corpus, Session, UserHistory};
use crate::error::{Error, Result};

/// Per-user interaction counts with a global fallback.
#[derive(Clone, Debug, PartialEq)]
pub struct PopModel {
    n_items: usize,
    /// Keyed by `UserHistory::user_index`.
    user_counts: HashMap<usize, HashMap<usize, u64>>,
    global: Vec<u64>,
    /// Items by descending global count, then ascending index.
    global_order: Vec<usize>,
}

impl PopModel {
    fn from_counts(n_items: usize, user_counts: HashMap<usize, HashMap<usize, u64>>) -> Self {
        let mut global = vec![0u64; n_items];
        for counts in user_counts.values() {
            for (&item, &n) in counts {
                global[item] += n;
            }
        }
        let mut global_order: Vec<usize> = (0..n_items).collect();
        global_order.sort_by(|&a, &b| global[b].cmp(&global[a]).then(a.cmp(&b)));
        PopModel {
            n_items,
            user_counts,
            global,
            global_order,
        }
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn global_counts(&self) -> &[u64] {
        &self.global
    }

    pub fn user_count(&self, user: usize, item: usize) -> u64 {
        self.user_counts
            .get(&user)
            .and_then(|c| c.get(&item))
            .copied()
            .unwrap_or(0)
    }

    pub fn knows_user(&self, user: usize) -> bool {
        self.user_counts.contains_key(&user)
    }

    /// Scores from a full ranking: the top item scores `n_items`, the last
    /// `1`. Items are ordered by the user's count (training history plus
    /// `context`), then global count, then index. Unknown users fall back to
    /// the global ranking, still counting `context`.
    pub fn score(&self, user: usize, context: &[usize]) -> Vec<f64> {
        let mut own: HashMap<usize, u64> = self.user_counts.get(&user).cloned().unwrap_or_default();
        for &item in context {
            if item < self.n_items {
                *own.entry(item).or_default() += 1;
            }
        }
        let mut seen: Vec<(usize, u64)> = own.into_iter().filter(|&(_, n)| n > 0).collect();
        seen.sort_by(|a, b| {
            b.1.cmp(&a.1)
                .then(self.global[b.0].cmp(&self.global[a.0]))
                .then(a.0.cmp(&b.0))
        });
        let mut scores = vec![0.0; self.n_items];
        let mut pos = 0;
        let mut placed = vec![false; self.n_items];
        for (item, _) in seen {
            scores[item] = (self.n_items - pos) as f64;
            placed[item] = true;
            pos += 1;
        }
        for &item in &self.global_order {
            if !placed[item] {
                scores[item] = (self.n_items - pos) as f64;
                pos += 1;
            }
        }
        scores
    }

    /// `user<TAB>item<TAB>count` lines, sorted.
    pub fn write_triples<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let mut users: Vec<&usize> = self.user_counts.keys().collect();
        users.sort();
        for u in users {
            let mut items: Vec<(&usize, &u64)> = self.user_counts[u].iter().collect();
            items.sort();
            for (i, n) in items {
                writeln!(w, "{u}\t{i}\t{n}")?;
            }
        }
        Ok(())
    }

    pub fn read_triples<R: BufRead>(n_items: usize, r: R) -> Result<Self> {
        let mut counts: HashMap<usize, HashMap<usize, u64>> = HashMap::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::Format(e.to_string()))?;
            if line.is_empty() {
                continue;
            }
            let (u, i, n) = parse_triple::<u64>(&line, lineno + 1)?;
            if i >= n_items {
                return Err(Error::ItemOutOfRange { index: i, n_items });
            }
            counts.entry(u).or_default().insert(i, n);
        }
        Ok(PopModel::from_counts(n_items, counts))
    }
}

fn parse_triple<T: std::str::FromStr>(line: &str, lineno: usize) -> Result<(usize, usize, T)> {
    let bad = || Error::Format(format!("line {lineno}: expected three tab-separated fields"));
    let mut f = line.split('\t');
    let a = f.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
    let b = f.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
    let c = f.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
    if f.next().is_some() {
        return Err(bad());
    }
    Ok((a, b, c))
}

pub fn fit_ppop(train: &Corpus) -> PopModel {
    let mut counts: HashMap<usize, HashMap<usize, u64>> = HashMap::new();
    for u in &train.users {
        let entry = counts.entry(u.user_index).or_default();
        for s in &u.sessions {
            for &item in &s.items {
                *entry.entry(item).or_default() += 1;
            }
        }
    }
    PopModel::from_counts(train.n_items(), counts)
}

/// Item-to-item cosine similarity over binary session incidence, keeping
/// the `k` most similar neighbors per item.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnModel {
    n_items: usize,
    k: usize,
    /// Sorted by descending similarity, then ascending index.
    neighbors: Vec<Vec<(usize, f64)>>,
}

/// Untruncated similarity lists: for every item, all items it co-occurs
/// with, with `cooc(a,b) / sqrt(supp(a) · supp(b))`.
pub fn item_similarities(train: &Corpus) -> Vec<Vec<(usize, f64)>> {
    let n = train.n_items();
    let mut support = vec![0u64; n];
    let mut cooc: HashMap<(usize, usize), u64> = HashMap::new();
    for s in train.sessions() {
        let mut items = s.items.clone();
        items.sort_unstable();
        items.dedup();
        for &a in &items {
            support[a] += 1;
        }
        for (x, &a) in items.iter().enumerate() {
            for &b in &items[x + 1..] {
                *cooc.entry((a, b)).or_default() += 1;
            }
        }
    }
    let mut lists = vec![Vec::new(); n];
    for (&(a, b), &c) in &cooc {
        let sim = c as f64 / ((support[a] * support[b]) as f64).sqrt();
        lists[a].push((b, sim));
        lists[b].push((a, sim));
    }
    for l in &mut lists {
        sort_neighbors(l);
    }
    lists
}

fn sort_neighbors(list: &mut [(usize, f64)]) {
    list.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
}

pub fn fit_item_knn(train: &Corpus, k: usize) -> Result<KnnModel> {
    if k == 0 {
        return Err(Error::Config("neighborhood size must be at least 1".into()));
    }
    let mut neighbors = item_similarities(train);
    for l in &mut neighbors {
        l.truncate(k);
    }
    Ok(KnnModel {
        n_items: train.n_items(),
        k,
        neighbors,
    })
}

impl KnnModel {
    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn neighbors(&self, item: usize) -> &[(usize, f64)] {
        self.neighbors.get(item).map_or(&[], Vec::as_slice)
    }

    /// Similarity of each item to `current`; zero everywhere for an unknown
    /// item.
    pub fn score(&self, current: usize) -> Vec<f64> {
        let mut s = vec![0.0; self.n_items];
        for &(b, sim) in self.neighbors(current) {
            s[b] = sim;
        }
        s
    }

    /// `item<TAB>neighbor<TAB>similarity` lines in list order.
    pub fn write_triples<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for (a, list) in self.neighbors.iter().enumerate() {
            for &(b, sim) in list {
                writeln!(w, "{a}\t{b}\t{sim}")?;
            }
        }
        Ok(())
    }

    pub fn read_triples<R: BufRead>(n_items: usize, k: usize, r: R) -> Result<Self> {
        let mut neighbors = vec![Vec::new(); n_items];
        for (lineno, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::Format(e.to_string()))?;
            if line.is_empty() {
                continue;
            }
            let (a, b, sim) = parse_triple::<f64>(&line, lineno + 1)?;
            if a >= n_items || b >= n_items {
                return Err(Error::ItemOutOfRange {
                    index: a.max(b),
                    n_items,
                });
            }
            neighbors[a].push((b, sim));
        }
        for l in &mut neighbors {
            sort_neighbors(l);
        }
        Ok(KnnModel { n_items, k, neighbors })
    }
}

/// Merges every user's sessions, in order, into a single session.
pub fn concat_sessions(corpus: &Corpus) -> Corpus {
    let users = corpus
        .users
        .iter()
        .filter(|u| u.n_events() > 0)
        .map(|u| {
            let mut items = Vec::with_capacity(u.n_events());
            let mut times = Vec::with_capacity(u.n_events());
            for s in &u.sessions {
                items.extend_from_slice(&s.items);
                times.extend_from_slice(&s.timestamps);
            }
            UserHistory {
                user_index: u.user_index,
                sessions: vec![Session::new(items, times)],
            }
        })
        .collect();
    Corpus {
        users,
        items: corpus.items.clone(),
        user_ids: corpus.user_ids.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn corpus_of(n_items: usize, users: Vec<Vec<Vec<usize>>>) -> Corpus {
        Corpus::from_sessions(
            n_items,
            users
                .into_iter()
                .map(|u| u.into_iter().map(Session::from_items).collect())
                .collect(),
        )
    }

    #[test]
    fn ppop_prefers_own_counts() {
        // user 0 clicked A(0)×3, B(1)×1; user 1 makes item 2 globally popular
        let c = corpus_of(4, vec![vec![vec![0, 0, 1], vec![0, 3]], vec![vec![2, 2, 2, 2, 2]]]);
        let m = fit_ppop(&c);
        let s = m.score(0, &[]);
        assert!(s[0] > s[1] && s[1] > s[3]);
        assert!(s[3] > s[2]);
        // unknown user: global popularity
        let g = m.score(99, &[]);
        assert!(g[2] > g[0] && g[0] > g[1]);
        assert!(!m.knows_user(99));
        // context counts as the user's own interactions
        let s = m.score(0, &[3, 3, 3]);
        assert!(s[3] > s[0]);
    }

    #[test]
    fn knn_simple_cases() {
        let c = corpus_of(5, vec![vec![vec![0, 1], vec![0, 1, 2], vec![3, 4]]]);
        let m = fit_item_knn(&c, 10).unwrap();
        assert_eq!(m.neighbors(0)[0], (1, 1.0));
        assert_eq!(m.neighbors(3), &[(4, 1.0)]);
        assert!(m.neighbors(0).iter().all(|&(b, _)| b != 3));
        let s = m.score(2);
        assert!(s[0] > 0.0 && s[3] == 0.0);
        assert_eq!(m.score(17), vec![0.0; 5]);
        assert!(fit_item_knn(&c, 0).is_err());
        let one = fit_item_knn(&c, 1).unwrap();
        assert!(one.neighbors(2).len() == 1);
    }

    #[test]
    fn triples_round_trip() {
        let mut rng = Rng::new(1);
        let users: Vec<Vec<Vec<usize>>> = (0..6)
            .map(|_| (0..3).map(|_| (0..4).map(|_| rng.below(9)).collect()).collect())
            .collect();
        let c = corpus_of(9, users);
        let knn = fit_item_knn(&c, 3).unwrap();
        let mut buf = Vec::new();
        knn.write_triples(&mut buf).unwrap();
        assert_eq!(KnnModel::read_triples(9, 3, &buf[..]).unwrap(), knn);

        let pop = fit_ppop(&c);
        let mut buf = Vec::new();
        pop.write_triples(&mut buf).unwrap();
        assert_eq!(PopModel::read_triples(9, &buf[..]).unwrap(), pop);
        assert!(PopModel::read_triples(9, &b"1\t2\n"[..]).is_err());
    }

    #[test]
    fn concat_merges_in_order() {
        let c = corpus_of(4, vec![vec![vec![0, 1], vec![2]], vec![vec![3, 3]]]);
        let m = concat_sessions(&c);
        assert_eq!(m.users[0].sessions.len(), 1);
        assert_eq!(m.users[0].sessions[0].items, vec![0, 1, 2]);
        assert_eq!(m.n_events(), c.n_events());
        assert_eq!(m.n_sessions(), c.users.len());
    }

    fn arb_corpus() -> impl Strategy<Value = Vec<Vec<Vec<usize>>>> {
        proptest::collection::vec(
            proptest::collection::vec(proptest::collection::vec(0usize..8, 1..6), 1..4),
            1..6,
        )
    }

    proptest! {
        #[test]
        fn similarity_is_symmetric_and_bounded(users in arb_corpus()) {
            let c = corpus_of(8, users);
            let lists = item_similarities(&c);
            for (a, l) in lists.iter().enumerate() {
                for &(b, s) in l {
                    prop_assert!(s > 0.0 && s <= 1.0 + 1e-15);
                    let back = lists[b].iter().find(|&&(x, _)| x == a).map(|&(_, s)| s);
                    prop_assert_eq!(back, Some(s));
                }
            }
        }

        #[test]
        fn ppop_ignores_event_order(users in arb_corpus(), seed in 0u64..1000) {
            let c = corpus_of(8, users.clone());
            let mut rng = Rng::new(seed);
            let shuffled: Vec<Vec<Vec<usize>>> = users
                .into_iter()
                .map(|u| u.into_iter().map(|mut s| { rng.shuffle(&mut s); s }).collect())
                .collect();
            let d = corpus_of(8, shuffled);
            let (a, b) = (fit_ppop(&c), fit_ppop(&d));
            for u in 0..c.users.len() {
                prop_assert_eq!(a.score(u, &[1, 2]), b.score(u, &[2, 1]));
            }
        }

        #[test]
        fn concat_preserves_triples(users in arb_corpus()) {
            let c = corpus_of(8, users);
            let m = concat_sessions(&c);
            let triples = |c: &Corpus| {
                let mut v: Vec<(usize, usize, u64)> = c.users.iter().flat_map(|u| {
                    u.sessions.iter().flat_map(move |s| {
                        s.items.iter().zip(&s.timestamps).map(move |(&i, &t)| (u.user_index, i, t))
                    })
                }).collect();
                v.sort();
                v
            };
            prop_assert_eq!(triples(&c), triples(&m));
        }
    }
}
