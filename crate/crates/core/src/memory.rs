//! Working-memory window and the bounded token caches behind the
//! compressor.
//!
//! A [`TokenCache`] never holds more than `capacity` entries. When an insert
//! overflows it, the configured [`CachePolicy`] runs once to bring the size
//! back to `capacity`:
//!
//! | policy   | reduction from `S+1` to `S`                                  |
//! |----------|--------------------------------------------------------------|
//! | `fifo`   | drop the oldest entry                                        |
//! | `random` | drop a uniformly drawn entry (seeded)                        |
//! | `kmeans` | k-means with `k = S`, centroids stamped with cluster min `τ` |
//! | `adjsim` | merge the most cosine-similar `τ`-adjacent pair into its mean |
//!
//! Entries are kept sorted by `τ` under every policy.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compressor::EpisodicMemory;
use crate::encoder::ObservationToken;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CachePolicy {
    Fifo,
    Random,
    Kmeans,
    Adjsim,
}

impl CachePolicy {
    pub const ALL: [CachePolicy; 4] = [CachePolicy::Fifo, CachePolicy::Random, CachePolicy::Kmeans, CachePolicy::Adjsim];

    pub fn name(self) -> &'static str {
        match self {
            CachePolicy::Fifo => "fifo",
            CachePolicy::Random => "random",
            CachePolicy::Kmeans => "kmeans",
            CachePolicy::Adjsim => "adjsim",
        }
    }
}

impl fmt::Display for CachePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CachePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CachePolicy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown cache policy {s:?} (expected fifo|random|kmeans|adjsim)")))
    }
}

/// FIFO window over the most recent `capacity` tokens.
#[derive(Clone, Debug)]
pub struct WorkingWindow {
    capacity: usize,
    tokens: VecDeque<ObservationToken>,
}

impl WorkingWindow {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "window length must be at least 1");
        Self { capacity, tokens: VecDeque::with_capacity(capacity + 1) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> impl Iterator<Item = &ObservationToken> {
        self.tokens.iter()
    }

    /// Appends `token`; when that overflows the window, the oldest token is
    /// removed and returned.
    pub fn push(&mut self, token: ObservationToken) -> Result<Option<ObservationToken>> {
        if let Some(last) = self.tokens.back() {
            if token.t <= last.t {
                return Err(Error::Contract(format!(
                    "window push at τ={} after τ={}: timesteps must increase",
                    token.t, last.t
                )));
            }
        }
        self.tokens.push_back(token);
        Ok(if self.tokens.len() > self.capacity { self.tokens.pop_front() } else { None })
    }

    /// The window as exactly `capacity` rows, front-padded by repeating the
    /// oldest token when the episode is younger than the window.
    pub fn padded_rows(&self) -> Matrix {
        let first = self.tokens.front().expect("padded_rows on an empty window");
        let pad = self.capacity - self.tokens.len();
        let rows: Vec<&[f64]> = std::iter::repeat(first.values.as_slice())
            .take(pad)
            .chain(self.tokens.iter().map(|t| t.values.as_slice()))
            .collect();
        Matrix::from_rows(&rows)
    }

    pub fn clear(&mut self) {
        self.tokens.clear();
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry {
    pub t: usize,
    pub payload: Matrix,
}

/// Bounded store of `(τ, payload)` entries with a reduction policy.
#[derive(Clone, Debug)]
pub struct TokenCache {
    capacity: usize,
    policy: CachePolicy,
    seed: u64,
    rng: ChaCha8Rng,
    entries: Vec<CacheEntry>,
}

impl TokenCache {
    pub fn new(capacity: usize, policy: CachePolicy, seed: u64) -> Self {
        assert!(capacity >= 1, "cache capacity must be at least 1");
        Self { capacity, policy, seed, rng: ChaCha8Rng::seed_from_u64(seed), entries: Vec::with_capacity(capacity + 1) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn policy(&self) -> CachePolicy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[CacheEntry] {
        &self.entries
    }

    pub fn timesteps(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.t).collect()
    }

    /// Adds an entry (kept in `τ` order) and applies the policy once if the
    /// cache overflowed.
    pub fn insert(&mut self, t: usize, payload: Matrix) -> Result<()> {
        if let Some(first) = self.entries.first() {
            if first.payload.shape() != payload.shape() {
                return Err(Error::Config(format!(
                    "cache payload shape {:?} does not match {:?}",
                    payload.shape(),
                    first.payload.shape()
                )));
            }
        }
        let pos = self.entries.partition_point(|e| e.t <= t);
        self.entries.insert(pos, CacheEntry { t, payload });
        if self.entries.len() > self.capacity {
            self.reduce();
        }
        Ok(())
    }

    fn reduce(&mut self) {
        match self.policy {
            CachePolicy::Fifo => {
                self.entries.remove(0);
            }
            CachePolicy::Random => {
                let i = self.rng.gen_range(0..self.entries.len());
                self.entries.remove(i);
            }
            CachePolicy::Kmeans => {
                let entries = std::mem::take(&mut self.entries);
                self.entries = evict_kmeans(entries, self.capacity);
            }
            CachePolicy::Adjsim => {
                let entries = std::mem::take(&mut self.entries);
                self.entries = evict_adjsim(entries);
            }
        }
    }

    /// All payloads stacked row-wise, `τ` ascending.
    pub fn stacked(&self) -> Matrix {
        let parts: Vec<&Matrix> = self.entries.iter().map(|e| &e.payload).collect();
        Matrix::concat_rows(&parts)
    }

    /// Empties the cache and rewinds the policy rng to its seed.
    pub fn clear(&mut self) {
        self.entries.clear();
        self.rng = ChaCha8Rng::seed_from_u64(self.seed);
    }
}

const KMEANS_MAX_ITERS: usize = 20;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// K-means over flattened payloads with `k` clusters, initialised from the
/// `k` oldest entries. Each centroid carries the smallest `τ` of its
/// members; a cluster that ends up empty keeps its last centre and stamp.
pub fn evict_kmeans(entries: Vec<CacheEntry>, k: usize) -> Vec<CacheEntry> {
    assert!(k >= 1 && k <= entries.len(), "kmeans: k={k} for {} entries", entries.len());
    let (rows, cols) = entries[0].payload.shape();
    let mut centres: Vec<Vec<f64>> = entries[..k].iter().map(|e| e.payload.as_slice().to_vec()).collect();
    let mut stamps: Vec<usize> = entries[..k].iter().map(|e| e.t).collect();
    let mut assign: Vec<usize> = vec![usize::MAX; entries.len()];

    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, e) in entries.iter().enumerate() {
            let x = e.payload.as_slice();
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, centre) in centres.iter().enumerate() {
                let d = sq_dist(x, centre);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for c in 0..k {
            let members: Vec<&CacheEntry> =
                entries.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(e, _)| e).collect();
            if members.is_empty() {
                continue;
            }
            let n = members.len() as f64;
            let mut centre = vec![0.0; rows * cols];
            for m in &members {
                for (o, v) in centre.iter_mut().zip(m.payload.as_slice()) {
                    *o += v;
                }
            }
            centre.iter_mut().for_each(|v| *v /= n);
            centres[c] = centre;
            stamps[c] = members.iter().map(|m| m.t).min().unwrap();
        }
    }

    let mut out: Vec<CacheEntry> = centres
        .into_iter()
        .zip(stamps)
        .map(|(c, t)| CacheEntry { t, payload: Matrix::from_vec(rows, cols, c) })
        .collect();
    out.sort_by_key(|e| e.t);
    out
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return -1.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Merges the `τ`-adjacent pair with the highest cosine similarity into
/// its elementwise mean, stamped with the earlier `τ`. Ties go to the
/// earliest pair; zero payloads score −1.
pub fn evict_adjsim(mut entries: Vec<CacheEntry>) -> Vec<CacheEntry> {
    assert!(entries.len() >= 2, "adjsim needs at least two entries");
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for i in 0..entries.len() - 1 {
        let s = cosine(entries[i].payload.as_slice(), entries[i + 1].payload.as_slice());
        if s > best_sim {
            best_sim = s;
            best = i;
        }
    }
    let later = entries.remove(best + 1);
    let merged = entries[best].payload.zip_map(&later.payload, |a, b| 0.5 * (a + b));
    entries[best].payload = merged;
    entries
}

/// Per-episode memory: working window, observation cache and one summary
/// cache per compressor block.
#[derive(Clone, Debug)]
pub struct MemoryState {
    pub window: WorkingWindow,
    pub obs_cache: TokenCache,
    pub summary_caches: Vec<TokenCache>,
    pub episodic: Option<EpisodicMemory>,
}

impl MemoryState {
    pub fn new(window_len: usize, cache_size: usize, depth: usize, policy: CachePolicy, seed: u64) -> Self {
        let mix = |i: u64| seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i);
        Self {
            window: WorkingWindow::new(window_len),
            obs_cache: TokenCache::new(cache_size, policy, mix(0)),
            summary_caches: (0..depth).map(|n| TokenCache::new(cache_size, policy, mix(n as u64 + 1))).collect(),
            episodic: None,
        }
    }

    pub fn reset_episode(&mut self) {
        self.window.clear();
        self.obs_cache.clear();
        for c in &mut self.summary_caches {
            c.clear();
        }
        self.episodic = None;
    }

    /// Window tokens plus entries of every cache.
    pub fn tokens_live(&self) -> usize {
        self.window.len() + self.obs_cache.len() + self.summary_caches.iter().map(TokenCache::len).sum::<usize>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tok(t: usize) -> ObservationToken {
        ObservationToken { values: vec![t as f64, 1.0], t }
    }

    fn scalar(v: f64) -> Matrix {
        Matrix::row_vector(vec![v])
    }

    fn vec2(a: f64, b: f64) -> Matrix {
        Matrix::row_vector(vec![a, b])
    }

    #[test]
    fn window_push_examples() {
        let mut w = WorkingWindow::new(2);
        assert_eq!(w.push(tok(0)).unwrap(), None);
        assert_eq!(w.len(), 1);
        assert_eq!(w.push(tok(1)).unwrap(), None);
        assert_eq!(w.push(tok(2)).unwrap(), Some(tok(0)));
        let ts: Vec<usize> = w.tokens().map(|t| t.t).collect();
        assert_eq!(ts, vec![1, 2]);
        assert!(matches!(w.push(tok(2)), Err(Error::Contract(_))));
    }

    #[test]
    fn window_evicts_exactly_the_overflow_in_order() {
        for l in 1..=4 {
            for total in 0..=10 {
                let mut w = WorkingWindow::new(l);
                let evicted: Vec<usize> =
                    (0..total).filter_map(|t| w.push(tok(t)).unwrap()).map(|e| e.t).collect();
                let expected: Vec<usize> = (0..total.saturating_sub(l)).collect();
                assert_eq!(evicted, expected, "L={l} T={total}");
            }
        }
    }

    #[test]
    fn padded_rows_repeat_the_first_frame() {
        let mut w = WorkingWindow::new(3);
        w.push(tok(0)).unwrap();
        let rows = w.padded_rows();
        assert_eq!(rows.shape(), (3, 2));
        for r in 0..3 {
            assert_eq!(rows.row(r), &[0.0, 1.0]);
        }
    }

    #[test]
    fn fifo_keeps_latest() {
        let mut c = TokenCache::new(2, CachePolicy::Fifo, 0);
        for t in 1..=3 {
            c.insert(t, scalar(t as f64)).unwrap();
        }
        assert_eq!(c.timesteps(), vec![2, 3]);
    }

    #[test]
    fn random_policy_draws_a_valid_reproducible_pair() {
        let mut outcomes = std::collections::BTreeSet::new();
        for seed in 0..64 {
            let run = || {
                let mut c = TokenCache::new(2, CachePolicy::Random, seed);
                for t in 1..=3 {
                    c.insert(t, scalar(t as f64)).unwrap();
                }
                c.timesteps()
            };
            let a = run();
            assert_eq!(a, run());
            assert!([vec![1, 2], vec![1, 3], vec![2, 3]].contains(&a));
            outcomes.insert(a);
        }
        // Enumerating the three possible removals: 64 seeds hit all of them.
        assert_eq!(outcomes.len(), 3);
    }

    #[test]
    fn adjsim_merges_identical_neighbours() {
        let mut c = TokenCache::new(2, CachePolicy::Adjsim, 0);
        c.insert(1, vec2(1.0, 0.0)).unwrap();
        c.insert(2, vec2(1.0, 0.0)).unwrap();
        c.insert(3, vec2(0.0, 1.0)).unwrap();
        assert_eq!(c.entries(), &[
            CacheEntry { t: 1, payload: vec2(1.0, 0.0) },
            CacheEntry { t: 3, payload: vec2(0.0, 1.0) },
        ]);
    }

    #[test]
    fn adjsim_two_entries_collapse_to_mean() {
        let out = evict_adjsim(vec![
            CacheEntry { t: 4, payload: vec2(1.0, 3.0) },
            CacheEntry { t: 6, payload: vec2(3.0, -1.0) },
        ]);
        assert_eq!(out, vec![CacheEntry { t: 4, payload: vec2(2.0, 1.0) }]);
    }

    #[test]
    fn adjsim_orthogonal_chain_with_duplicate() {
        // cosines: (e1,e2)=0, (e2,e3)=0, (e3,e3)=1, (e3,e1)=0
        let e = |i: usize| {
            let mut v = vec![0.0; 3];
            v[i] = 1.0;
            Matrix::row_vector(v)
        };
        let entries = vec![
            CacheEntry { t: 0, payload: e(0) },
            CacheEntry { t: 1, payload: e(1) },
            CacheEntry { t: 2, payload: e(2) },
            CacheEntry { t: 3, payload: e(2) },
            CacheEntry { t: 4, payload: e(0) },
        ];
        let out = evict_adjsim(entries);
        assert_eq!(out.iter().map(|e| e.t).collect::<Vec<_>>(), vec![0, 1, 2, 4]);
        assert_eq!(out[2].payload, e(2));
    }

    #[test]
    fn adjsim_zero_payload_is_never_preferred() {
        let out = evict_adjsim(vec![
            CacheEntry { t: 0, payload: vec2(0.0, 0.0) },
            CacheEntry { t: 1, payload: vec2(1.0, 0.0) },
            CacheEntry { t: 2, payload: vec2(-1.0, 0.1) },
        ]);
        // pair (0,1) scores −1, pair (1,2) scores ≈ −0.995: the latter merges.
        assert_eq!(out.iter().map(|e| e.t).collect::<Vec<_>>(), vec![0, 1]);
    }

    /// Brute force: the optimal 2-partition of the sorted points by
    /// within-cluster squared error.
    fn best_two_partition(points: &[f64]) -> (f64, f64) {
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for mask in 1u32..(1 << points.len()) - 1 {
            let (a, b): (Vec<f64>, Vec<f64>) = {
                let mut a = vec![];
                let mut b = vec![];
                for (i, p) in points.iter().enumerate() {
                    if mask & (1 << i) != 0 { a.push(*p) } else { b.push(*p) }
                }
                (a, b)
            };
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let (ma, mb) = (mean(&a), mean(&b));
            let sse: f64 = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() + b.iter().map(|x| (x - mb).powi(2)).sum::<f64>();
            if sse < best.0 {
                best = (sse, ma.min(mb), ma.max(mb));
            }
        }
        (best.1, best.2)
    }

    #[test]
    fn kmeans_matches_brute_force_partition() {
        let points = [0.0, 0.1, 10.0, 10.1];
        let entries: Vec<CacheEntry> =
            points.iter().enumerate().map(|(t, p)| CacheEntry { t, payload: scalar(*p) }).collect();
        let out = evict_kmeans(entries, 2);
        let (lo, hi) = best_two_partition(&points);
        assert!((lo - 0.05).abs() < 1e-12 && (hi - 10.05).abs() < 1e-12);
        assert_eq!(out.len(), 2);
        assert!((out[0].payload.get(0, 0) - lo).abs() < 1e-12);
        assert!((out[1].payload.get(0, 0) - hi).abs() < 1e-12);
        assert_eq!(out[0].t, 0);
        assert_eq!(out[1].t, 2);
    }

    #[test]
    fn kmeans_identical_payloads() {
        let entries: Vec<CacheEntry> = (0..5).map(|t| CacheEntry { t, payload: vec2(0.3, 0.3) }).collect();
        let out = evict_kmeans(entries, 4);
        assert_eq!(out.len(), 4);
        assert!(out.iter().all(|e| e.payload == vec2(0.3, 0.3)));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut c = TokenCache::new(2, CachePolicy::Fifo, 0);
        c.insert(0, vec2(1.0, 0.0)).unwrap();
        assert!(matches!(c.insert(1, scalar(1.0)), Err(Error::Config(_))));
    }

    #[test]
    fn policy_names_round_trip() {
        for p in CachePolicy::ALL {
            assert_eq!(p.name().parse::<CachePolicy>().unwrap(), p);
            assert_eq!(serde_json::to_string(&p).unwrap(), format!("\"{}\"", p.name()));
        }
        assert!("lru".parse::<CachePolicy>().is_err());
    }

    #[test]
    fn reset_empties_everything_idempotently() {
        let mut m = MemoryState::new(2, 3, 2, CachePolicy::Fifo, 1);
        for t in 0..5 {
            m.window.push(tok(t)).unwrap();
            m.obs_cache.insert(t, scalar(t as f64)).unwrap();
            m.summary_caches[1].insert(t, vec2(0.0, 1.0)).unwrap();
        }
        m.reset_episode();
        assert_eq!(m.tokens_live(), 0);
        assert_eq!(m.window.len(), 0);
        assert!(m.episodic.is_none());
        m.reset_episode();
        assert_eq!(m.tokens_live(), 0);
    }

    fn arb_policy() -> impl Strategy<Value = CachePolicy> {
        prop_oneof![
            Just(CachePolicy::Fifo),
            Just(CachePolicy::Random),
            Just(CachePolicy::Kmeans),
            Just(CachePolicy::Adjsim)
        ]
    }

    proptest! {
        #[test]
        fn caches_stay_bounded_and_sorted(
            policy in arb_policy(),
            cap in 1usize..6,
            seed in any::<u64>(),
            payloads in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 1..40),
        ) {
            let mut c = TokenCache::new(cap, policy, seed);
            for (t, p) in payloads.iter().enumerate() {
                let before_max = c.entries().last().map(|e| e.t);
                let before_len = c.len();
                c.insert(t, Matrix::row_vector(p.clone())).unwrap();
                prop_assert!(c.len() <= cap);
                prop_assert!(c.entries().windows(2).all(|w| w[0].t <= w[1].t));
                if policy == CachePolicy::Adjsim && before_len == cap {
                    prop_assert_eq!(c.len(), before_len);
                    prop_assert!(c.entries().last().unwrap().t <= t.max(before_max.unwrap_or(0)));
                }
            }
            if policy == CachePolicy::Fifo {
                let n = payloads.len();
                let expected: Vec<usize> = (n.saturating_sub(cap)..n).collect();
                prop_assert_eq!(c.timesteps(), expected);
            }
        }

        #[test]
        fn random_policy_is_reproducible(seed in any::<u64>(), n in 1usize..30) {
            let run = || {
                let mut c = TokenCache::new(3, CachePolicy::Random, seed);
                for t in 0..n {
                    c.insert(t, scalar(t as f64)).unwrap();
                }
                c.timesteps()
            };
            prop_assert_eq!(run(), run());
        }
    }
}
