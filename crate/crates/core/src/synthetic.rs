//! Synthetic corpora with known structure, for tests, benchmarks and demos.

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Session};
use crate::tensor::Rng;

/// Users belong to archetypes; each archetype owns a disjoint pool of items.
/// Within a session, the next item usually follows a Markov chain over the
/// user's pool; with probability `noise` it is drawn from the whole catalog
/// instead. Since a session's first events are often noise, the user's
/// history identifies the pool earlier than the session itself does.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchetypeSpec {
    pub users: usize,
    pub items: usize,
    pub pools: usize,
    pub min_sessions: usize,
    pub max_sessions: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub noise: f64,
    /// Probability that an in-pool step goes to the fixed successor of the
    /// current item rather than a uniform pool item.
    pub successor: f64,
    pub seed: u64,
}

impl Default for ArchetypeSpec {
    fn default() -> Self {
        ArchetypeSpec {
            users: 200,
            items: 40,
            pools: 8,
            min_sessions: 5,
            max_sessions: 15,
            min_len: 2,
            max_len: 4,
            noise: 0.4,
            successor: 0.5,
            seed: 7,
        }
    }
}

impl ArchetypeSpec {
    pub fn pool_of_user(&self, user: usize) -> usize {
        user % self.pools
    }

    /// Items of pool `p`: a contiguous block of the catalog.
    pub fn pool_items(&self, p: usize) -> std::ops::Range<usize> {
        let size = self.items / self.pools;
        p * size..(p + 1) * size
    }
}

pub fn archetype_corpus(spec: &ArchetypeSpec) -> Corpus {
    assert!(spec.pools > 0 && spec.items >= spec.pools, "every pool needs an item");
    assert!(spec.min_len >= 1 && spec.min_len <= spec.max_len);
    assert!(spec.min_sessions <= spec.max_sessions);
    let mut rng = Rng::new(spec.seed);
    let users = (0..spec.users)
        .map(|u| {
            let pool = spec.pool_items(spec.pool_of_user(u));
            let size = pool.len();
            let n_sessions = spec.min_sessions + rng.below(spec.max_sessions - spec.min_sessions + 1);
            let mut t = 0u64;
            (0..n_sessions)
                .map(|_| {
                    let len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
                    let mut items = Vec::with_capacity(len);
                    let mut times = Vec::with_capacity(len);
                    let mut last: Option<usize> = None;
                    for _ in 0..len {
                        let item = if rng.uniform() < spec.noise {
                            rng.below(spec.items)
                        } else {
                            match last.filter(|i| pool.contains(i)) {
                                Some(i) if rng.uniform() < spec.successor => {
                                    pool.start + (i - pool.start + 1) % size
                                }
                                _ => pool.start + rng.below(size),
                            }
                        };
                        items.push(item);
                        times.push(t);
                        t += 60;
                        last = Some(item);
                    }
                    t += 86_400;
                    Session::new(items, times)
                })
                .collect()
        })
        .collect();
    Corpus::from_sessions(spec.items, users)
}

/// Single-session users whose items follow `i → i+1 (mod n)` with
/// probability `1 - noise`, otherwise a uniform item.
pub fn markov_corpus(n_items: usize, sessions: usize, noise: f64, seed: u64) -> Corpus {
    let mut rng = Rng::new(seed);
    let users = (0..sessions)
        .map(|_| {
            let len = 3 + rng.below(6);
            let mut item = rng.below(n_items);
            let mut items = vec![item];
            for _ in 1..len {
                item = if rng.uniform() < noise {
                    rng.below(n_items)
                } else {
                    (item + 1) % n_items
                };
                items.push(item);
            }
            vec![Session::from_items(items)]
        })
        .collect();
    Corpus::from_sessions(n_items, users)
}

/// Random corpus for schedule and counting checks: session lengths in
/// `1..=max_len`, including sessions too short to carry a target.
pub fn random_corpus(rng: &mut Rng, n_items: usize, max_users: usize, max_sessions: usize, max_len: usize) -> Corpus {
    let users = (0..1 + rng.below(max_users))
        .map(|_| {
            (0..1 + rng.below(max_sessions))
                .map(|_| Session::from_items((0..1 + rng.below(max_len)).map(|_| rng.below(n_items)).collect()))
                .collect()
        })
        .collect();
    Corpus::from_sessions(n_items, users)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archetype_corpus_shape() {
        let spec = ArchetypeSpec {
            noise: 0.0,
            ..ArchetypeSpec::default()
        };
        let c = archetype_corpus(&spec);
        assert_eq!(c.users.len(), 200);
        for (u, h) in c.users.iter().enumerate() {
            let pool = spec.pool_items(spec.pool_of_user(u));
            assert!((5..=15).contains(&h.sessions.len()));
            for s in &h.sessions {
                assert!((2..=4).contains(&s.len()));
                assert!(s.items.iter().all(|i| pool.contains(i)));
            }
        }
        assert_eq!(archetype_corpus(&spec), c);
    }

    #[test]
    fn markov_corpus_follows_rule() {
        let c = markov_corpus(10, 50, 0.0, 1);
        for s in c.sessions() {
            for w in s.items.windows(2) {
                assert_eq!(w[1], (w[0] + 1) % 10);
            }
        }
    }
}
