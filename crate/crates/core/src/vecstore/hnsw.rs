//! Hierarchical navigable small-world graph over unit vectors.
//!
//! Similarity is the dot product, so higher is closer. Level assignment uses
//! a seeded ChaCha stream and insertion is sequential, which makes a build
//! a pure function of (vectors, parameters).

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::composer::dot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HnswParams {
    /// Links per node on upper layers; layer 0 allows twice as many.
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        Self {
            m: 16,
            ef_construction: 200,
            ef_search: 200,
            seed: 0x5eed,
        }
    }
}

/// Random access to the indexed vectors.
pub trait VectorSource {
    fn vector(&self, i: usize) -> &[f64];
    fn count(&self) -> usize;
}

#[derive(Debug, Clone, Copy)]
struct Scored {
    score: f64,
    id: u32,
}

impl PartialEq for Scored {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Scored {}
impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scored {
    /// Greater means closer; on equal scores the lower id is closer.
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.id.cmp(&self.id))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hnsw {
    params: HnswParams,
    /// `links[node][layer]` lists neighbor ids.
    links: Vec<Vec<Vec<u32>>>,
    entry: Option<u32>,
    max_level: usize,
}

impl Hnsw {
    pub fn build(source: &(impl VectorSource + ?Sized), params: HnswParams) -> Self {
        let mut index = Hnsw {
            params,
            links: Vec::with_capacity(source.count()),
            entry: None,
            max_level: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let level_mult = 1.0 / (params.m.max(2) as f64).ln();
        for i in 0..source.count() {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let level = (-u.ln() * level_mult).floor() as usize;
            index.insert(source, i as u32, level);
        }
        index
    }

    pub fn params(&self) -> HnswParams {
        self.params
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    fn max_links(&self, layer: usize) -> usize {
        if layer == 0 {
            self.params.m * 2
        } else {
            self.params.m
        }
    }

    fn insert(&mut self, source: &(impl VectorSource + ?Sized), id: u32, level: usize) {
        debug_assert_eq!(id as usize, self.links.len());
        self.links.push(vec![Vec::new(); level + 1]);
        let Some(entry) = self.entry else {
            self.entry = Some(id);
            self.max_level = level;
            return;
        };
        let query = source.vector(id as usize);

        let mut eps = vec![Scored {
            score: dot(query, source.vector(entry as usize)),
            id: entry,
        }];
        for layer in (level + 1..=self.max_level).rev() {
            eps = self.search_layer(source, query, &eps, 1, layer);
        }
        for layer in (0..=level.min(self.max_level)).rev() {
            let found = self.search_layer(source, query, &eps, self.params.ef_construction, layer);
            let neighbors = select_neighbors(source, &found, self.params.m);
            self.links[id as usize][layer] = neighbors.iter().map(|s| s.id).collect();
            let cap = self.max_links(layer);
            for n in &neighbors {
                let list = &mut self.links[n.id as usize][layer];
                list.push(id);
                if list.len() > cap {
                    self.shrink(source, n.id, layer);
                }
            }
            eps = found;
        }
        if level > self.max_level {
            self.max_level = level;
            self.entry = Some(id);
        }
    }

    fn shrink(&mut self, source: &(impl VectorSource + ?Sized), node: u32, layer: usize) {
        let base = source.vector(node as usize);
        let mut candidates: Vec<Scored> = self.links[node as usize][layer]
            .iter()
            .map(|&n| Scored {
                score: dot(base, source.vector(n as usize)),
                id: n,
            })
            .collect();
        candidates.sort_unstable_by(|a, b| b.cmp(a));
        let kept = select_neighbors(source, &candidates, self.max_links(layer));
        self.links[node as usize][layer] = kept.iter().map(|s| s.id).collect();
    }

    /// Beam search on one layer. Returns up to `ef` nodes, best first.
    fn search_layer(
        &self,
        source: &(impl VectorSource + ?Sized),
        query: &[f64],
        entry_points: &[Scored],
        ef: usize,
        layer: usize,
    ) -> Vec<Scored> {
        let ef = ef.max(1);
        let mut visited = vec![false; self.links.len()];
        // max-heap of candidates to expand, min-heap (via Reverse) of results
        let mut candidates: BinaryHeap<Scored> = BinaryHeap::new();
        let mut results: BinaryHeap<std::cmp::Reverse<Scored>> = BinaryHeap::new();
        for &ep in entry_points {
            if !std::mem::replace(&mut visited[ep.id as usize], true) {
                candidates.push(ep);
                results.push(std::cmp::Reverse(ep));
                if results.len() > ef {
                    results.pop();
                }
            }
        }
        while let Some(current) = candidates.pop() {
            let worst = results.peek().expect("results seeded").0;
            if current < worst && results.len() >= ef {
                break;
            }
            let Some(neighbors) = self.links[current.id as usize].get(layer) else {
                continue;
            };
            for &n in neighbors {
                if std::mem::replace(&mut visited[n as usize], true) {
                    continue;
                }
                let cand = Scored {
                    score: dot(query, source.vector(n as usize)),
                    id: n,
                };
                let worst = results.peek().expect("results seeded").0;
                if results.len() < ef || cand > worst {
                    candidates.push(cand);
                    results.push(std::cmp::Reverse(cand));
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        let mut out: Vec<Scored> = results.into_iter().map(|r| r.0).collect();
        out.sort_unstable_by(|a, b| b.cmp(a));
        out
    }

    /// Approximate top-`k` as `(node, score)`, best first with ties broken
    /// by ascending node id.
    pub fn search(&self, source: &(impl VectorSource + ?Sized), query: &[f64], k: usize, ef: usize) -> Vec<(usize, f64)> {
        let Some(entry) = self.entry else {
            return Vec::new();
        };
        let mut eps = vec![Scored {
            score: dot(query, source.vector(entry as usize)),
            id: entry,
        }];
        for layer in (1..=self.max_level).rev() {
            eps = self.search_layer(source, query, &eps, 1, layer);
        }
        let found = self.search_layer(source, query, &eps, ef.max(k), 0);
        found
            .into_iter()
            .take(k)
            .map(|s| (s.id as usize, s.score))
            .collect()
    }

    pub(crate) fn entry(&self) -> Option<u32> {
        self.entry
    }

    pub(crate) fn max_level(&self) -> usize {
        self.max_level
    }

    pub(crate) fn links(&self) -> &[Vec<Vec<u32>>] {
        &self.links
    }

    pub(crate) fn from_parts(
        params: HnswParams,
        links: Vec<Vec<Vec<u32>>>,
        entry: Option<u32>,
        max_level: usize,
    ) -> Self {
        Self {
            params,
            links,
            entry,
            max_level,
        }
    }
}

/// Neighbor selection heuristic: walk candidates best-first and keep one
/// only if it is closer to the base than to every neighbor kept so far;
/// leftover slots are filled with the best discarded candidates.
fn select_neighbors(source: &(impl VectorSource + ?Sized), candidates: &[Scored], m: usize) -> Vec<Scored> {
    let mut kept: Vec<Scored> = Vec::with_capacity(m);
    let mut discarded: Vec<Scored> = Vec::new();
    for &c in candidates {
        if kept.len() >= m {
            break;
        }
        let cv = source.vector(c.id as usize);
        let diverse = kept
            .iter()
            .all(|k| c.score > dot(cv, source.vector(k.id as usize)));
        if diverse {
            kept.push(c);
        } else {
            discarded.push(c);
        }
    }
    for d in discarded {
        if kept.len() >= m {
            break;
        }
        kept.push(d);
    }
    kept
}
