//! Supervision graphs over languages.
//!
//! An undirected edge means both directions of the pair are trained. Every
//! direction not covered by an edge is zero-shot, and its bridge path is the
//! shortest route through supervised edges.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type LangId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologyKind {
    Star,
    Chain,
    Custom,
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TopologyKind::Star => "star",
            TopologyKind::Chain => "chain",
            TopologyKind::Custom => "custom",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LanguageTopology {
    kind: TopologyKind,
    n_languages: usize,
    edges: BTreeSet<(LangId, LangId)>,
}

/// Display name of a language id.
pub fn lang_name(id: LangId) -> String {
    format!("L{id}")
}

impl LanguageTopology {
    /// Hub-and-spoke: language 0 is paired with every other language.
    pub fn star(n_languages: usize) -> Result<Self> {
        Self::new(TopologyKind::Star, n_languages, (1..n_languages).map(|l| (0, l)))
    }

    /// Path graph `L0 – L1 – … – L(n-1)`.
    pub fn chain(n_languages: usize) -> Result<Self> {
        Self::new(
            TopologyKind::Chain,
            n_languages,
            (1..n_languages).map(|l| (l - 1, l)),
        )
    }

    pub fn custom(n_languages: usize, edges: impl IntoIterator<Item = (LangId, LangId)>) -> Result<Self> {
        Self::new(TopologyKind::Custom, n_languages, edges)
    }

    fn new(
        kind: TopologyKind,
        n_languages: usize,
        edges: impl IntoIterator<Item = (LangId, LangId)>,
    ) -> Result<Self> {
        if n_languages < 2 {
            return Err(Error::Topology(format!(
                "need at least 2 languages, got {n_languages}"
            )));
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a == b || a >= n_languages || b >= n_languages {
                return Err(Error::Topology(format!("invalid edge {a}-{b}")));
            }
            set.insert((a.min(b), a.max(b)));
        }
        let topo = Self {
            kind,
            n_languages,
            edges: set,
        };
        if let Some(l) = (0..n_languages).find(|&l| topo.distances_from(l).contains(&None)) {
            return Err(Error::Topology(format!(
                "supervision graph is disconnected (from {})",
                lang_name(l)
            )));
        }
        Ok(topo)
    }

    pub fn kind(&self) -> TopologyKind {
        self.kind
    }

    pub fn n_languages(&self) -> usize {
        self.n_languages
    }

    pub fn languages(&self) -> impl Iterator<Item = LangId> {
        0..self.n_languages
    }

    /// Undirected supervised pairs, each as `(smaller, larger)`.
    pub fn edges(&self) -> impl Iterator<Item = (LangId, LangId)> + '_ {
        self.edges.iter().copied()
    }

    pub fn is_supervised(&self, src: LangId, tgt: LangId) -> bool {
        self.edges.contains(&(src.min(tgt), src.max(tgt)))
    }

    /// Every ordered pair of distinct languages, row-major by source.
    pub fn all_directions(&self) -> Vec<(LangId, LangId)> {
        let n = self.n_languages;
        (0..n)
            .flat_map(|s| (0..n).filter(move |&t| t != s).map(move |t| (s, t)))
            .collect()
    }

    pub fn supervised_directions(&self) -> Vec<(LangId, LangId)> {
        self.all_directions()
            .into_iter()
            .filter(|&(s, t)| self.is_supervised(s, t))
            .collect()
    }

    pub fn zero_shot_directions(&self) -> Vec<(LangId, LangId)> {
        self.all_directions()
            .into_iter()
            .filter(|&(s, t)| !self.is_supervised(s, t))
            .collect()
    }

    fn neighbors(&self, l: LangId) -> impl Iterator<Item = LangId> + '_ {
        // BTreeSet order makes neighbor lists ascending per language
        let mut ns: Vec<LangId> = self
            .edges
            .iter()
            .filter_map(move |&(a, b)| {
                if a == l {
                    Some(b)
                } else if b == l {
                    Some(a)
                } else {
                    None
                }
            })
            .collect();
        ns.sort_unstable();
        ns.into_iter()
    }

    fn distances_from(&self, src: LangId) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n_languages];
        dist[src] = Some(0);
        let mut queue = VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            let d = dist[u].unwrap();
            for v in self.neighbors(u) {
                if dist[v].is_none() {
                    dist[v] = Some(d + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    fn check_lang(&self, l: LangId) -> Result<()> {
        if l >= self.n_languages {
            return Err(Error::Topology(format!("unknown language {}", lang_name(l))));
        }
        Ok(())
    }

    /// Number of supervised hops on the shortest bridge path.
    pub fn distance(&self, src: LangId, tgt: LangId) -> Result<usize> {
        self.check_lang(src)?;
        self.check_lang(tgt)?;
        Ok(self.distances_from(tgt)[src].expect("topology is connected"))
    }

    /// Shortest path `src → … → tgt` over supervised edges. Among equally
    /// short paths the one with the smallest intermediate ids (compared hop by
    /// hop) wins.
    pub fn bridge_path(&self, src: LangId, tgt: LangId) -> Result<Vec<LangId>> {
        self.check_lang(src)?;
        self.check_lang(tgt)?;
        let to_tgt = self.distances_from(tgt);
        let mut path = vec![src];
        let mut cur = src;
        while cur != tgt {
            let want = to_tgt[cur].unwrap() - 1;
            cur = self
                .neighbors(cur)
                .find(|&n| to_tgt[n] == Some(want))
                .expect("connected graph has a closer neighbor");
            path.push(cur);
        }
        Ok(path)
    }

    /// Stable textual form, e.g. `star:5:0-1,0-2,0-3,0-4`.
    pub fn describe(&self) -> String {
        let edges: Vec<String> = self.edges.iter().map(|(a, b)| format!("{a}-{b}")).collect();
        format!("{}:{}:{}", self.kind, self.n_languages, edges.join(","))
    }
}

/// Parses `"0-1,1-2"` into edges.
pub fn parse_edges(s: &str) -> Result<Vec<(LangId, LangId)>> {
    s.split(',')
        .map(str::trim)
        .filter(|e| !e.is_empty())
        .map(|e| {
            let (a, b) = e
                .split_once('-')
                .ok_or_else(|| Error::Topology(format!("edge `{e}` is not of the form a-b")))?;
            let parse = |x: &str| {
                x.trim()
                    .parse::<LangId>()
                    .map_err(|_| Error::Topology(format!("bad language id in edge `{e}`")))
            };
            Ok((parse(a)?, parse(b)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn star_counts() {
        let t = LanguageTopology::star(5).unwrap();
        assert_eq!(t.edges().count(), 4);
        assert_eq!(t.supervised_directions().len(), 8);
        assert_eq!(t.zero_shot_directions().len(), 12);
        for (s, d) in t.zero_shot_directions() {
            assert_eq!(t.bridge_path(s, d).unwrap(), vec![s, 0, d]);
            assert_eq!(t.distance(s, d).unwrap(), 2);
        }
    }

    #[test]
    fn chain_distances() {
        let t = LanguageTopology::chain(5).unwrap();
        assert_eq!(t.supervised_directions().len(), 8);
        let mut unordered: Vec<usize> = t
            .zero_shot_directions()
            .into_iter()
            .filter(|(s, d)| s < d)
            .map(|(s, d)| t.distance(s, d).unwrap())
            .collect();
        unordered.sort();
        assert_eq!(unordered, vec![2, 2, 2, 3, 3, 4]);
        assert_eq!(t.bridge_path(0, 4).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(t.bridge_path(3, 2).unwrap(), vec![3, 2]);
    }

    #[test]
    fn tie_break_prefers_smaller_bridge() {
        // square 0-1-3 and 0-2-3
        let t = LanguageTopology::custom(4, [(0, 1), (1, 3), (0, 2), (2, 3)]).unwrap();
        assert_eq!(t.bridge_path(0, 3).unwrap(), vec![0, 1, 3]);
        assert_eq!(t.bridge_path(3, 0).unwrap(), vec![3, 1, 0]);
    }

    #[test]
    fn rejects_disconnected_and_unknown() {
        assert!(LanguageTopology::custom(4, [(0, 1), (2, 3)]).is_err());
        let t = LanguageTopology::star(3).unwrap();
        assert!(t.bridge_path(0, 7).is_err());
    }

    #[test]
    fn edge_parsing() {
        assert_eq!(parse_edges("0-1, 2-1").unwrap(), vec![(0, 1), (2, 1)]);
        assert!(parse_edges("0:1").is_err());
    }
}
