//! Token-level structure matrices built from an annotated dialogue and its
//! encoded sequence:
//!
//! * the coreference matrix `M₁` linking tokens of co-referring mentions,
//! * the role matrix `M₂` linking tokens spoken by the same interlocutor,
//! * the discourse mask `G ∈ {0, −∞}` admitting attention only between
//!   utterances that are close in the discourse graph.
//!
//! Distances follow one convention throughout: `1 + hop count`, so a node is
//! at distance 1 from itself, adjacent utterances at 2, and 0 means "no
//! path". A threshold `γ` over this distance therefore admits paths of at
//! most `γ − 1` arcs; [`gamma_from_arc_count`] converts from an arc budget.
//!
//! Question and special tokens belong to a virtual question node `q*`. With
//! question routing on, `q*` is one hop from every utterance, but it never
//! relays paths between two utterances.

use std::collections::VecDeque;

use crate::corpus::{Dialogue, EncodedSequence};

/// Threshold meaning "any finite distance".
pub const GAMMA_UNBOUNDED: u32 = u32::MAX;

/// Internal threshold admitting every path of at most `arcs` discourse arcs.
pub fn gamma_from_arc_count(arcs: u32) -> u32 {
    arcs.saturating_add(1)
}

/// Dense square `f64` matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        SquareMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn filled(n: usize, value: f64) -> Self {
        SquareMatrix {
            n,
            data: vec![value; n * n],
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    /// Whitespace-separated grid using `0`, `1` and `-inf`.
    pub fn to_grid(&self) -> String {
        let mut out = String::new();
        for i in 0..self.n {
            let row: Vec<String> = (0..self.n)
                .map(|j| match self.get(i, j) {
                    v if v == f64::NEG_INFINITY => "-inf".to_string(),
                    v if v == 0.0 => "0".to_string(),
                    v if v == 1.0 => "1".to_string(),
                    v => format!("{v}"),
                })
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

/// `1 + hops` between discourse-graph nodes, `0` when unreachable.
/// Node `n` (the last one) is the virtual question node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<u32>,
}

impl DistanceMatrix {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, a: usize, b: usize) -> u32 {
        self.data[a * self.n + b]
    }

    pub fn question_node(&self) -> usize {
        self.n - 1
    }
}

/// All-pairs distances over utterances plus `q*`, by breadth-first search
/// from every utterance. Arcs are treated as undirected.
pub fn utterance_distances(dialogue: &Dialogue, question_routing: bool) -> DistanceMatrix {
    let n = dialogue.utterances.len();
    let mut adj = vec![Vec::new(); n];
    for e in &dialogue.edges {
        adj[e.from_utt].push(e.to_utt);
        adj[e.to_utt].push(e.from_utt);
    }
    let size = n + 1;
    let mut data = vec![0u32; size * size];
    let mut hops = vec![u32::MAX; n];
    let mut queue = VecDeque::new();
    for src in 0..n {
        hops.fill(u32::MAX);
        hops[src] = 0;
        queue.push_back(src);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if hops[v] == u32::MAX {
                    hops[v] = hops[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        for (dst, &h) in hops.iter().enumerate() {
            if h != u32::MAX {
                data[src * size + dst] = h + 1;
            }
        }
    }
    let q = n;
    data[q * size + q] = 1;
    if question_routing {
        for u in 0..n {
            data[q * size + u] = 2;
            data[u * size + q] = 2;
        }
    }
    DistanceMatrix { n: size, data }
}

/// Graph node of every token: its utterance, or `q*` for question and
/// special tokens.
pub fn token_nodes(seq: &EncodedSequence, utterance_count: usize) -> Vec<usize> {
    seq.token_utt
        .iter()
        .map(|&u| if u >= 0 { u as usize } else { utterance_count })
        .collect()
}

/// Utterance-level allowance table plus the token → node map; the compact
/// form of `G`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscourseMask {
    nodes: Vec<usize>,
    allowed: Vec<bool>,
    width: usize,
}

impl DiscourseMask {
    pub fn build(dist: &DistanceMatrix, seq: &EncodedSequence, gamma: u32) -> Self {
        assert!(gamma >= 1, "gamma must be at least 1");
        let width = dist.size();
        let allowed = (0..width * width)
            .map(|k| {
                let l = dist.get(k / width, k % width);
                l > 0 && l <= gamma
            })
            .collect();
        DiscourseMask {
            nodes: token_nodes(seq, width - 1),
            allowed,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if self.allowed[self.nodes[i] * self.width + self.nodes[j]] {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }

    pub fn materialize(&self) -> SquareMatrix {
        let n = self.len();
        let mut m = SquareMatrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m.set(i, j, self.get(i, j));
            }
        }
        m
    }
}

/// `G[i, j] = 0` when `0 < dist(node(i), node(j)) ≤ gamma`, else `−∞`.
pub fn build_discourse_mask(dist: &DistanceMatrix, seq: &EncodedSequence, gamma: u32) -> SquareMatrix {
    DiscourseMask::build(dist, seq, gamma).materialize()
}

/// `M₁` from mention spans already in global `[start, end)` coordinates.
/// Tokens of two distinct mentions of one cluster are linked both ways;
/// tokens within a single mention are not, and the diagonal stays 0.
pub fn coref_matrix_from_spans(n: usize, clusters: &[Vec<(usize, usize)>]) -> SquareMatrix {
    let mut m = SquareMatrix::zeros(n);
    for cluster in clusters {
        for (a, &(sa, ea)) in cluster.iter().enumerate() {
            for &(sb, eb) in &cluster[a + 1..] {
                for i in sa..ea {
                    for j in sb..eb {
                        if i != j {
                            m.set(i, j, 1.0);
                            m.set(j, i, 1.0);
                        }
                    }
                }
            }
        }
    }
    m
}

/// Coreference matrix `M₁` for one encoded sequence. Mentions in truncated
/// utterances are skipped.
pub fn build_coref_matrix(dialogue: &Dialogue, seq: &EncodedSequence) -> SquareMatrix {
    let clusters: Vec<Vec<(usize, usize)>> = dialogue
        .clusters
        .iter()
        .map(|c| {
            c.mentions
                .iter()
                .filter_map(|m| {
                    let start = seq.global_position(m.utt, m.start)?;
                    let last = seq.global_position(m.utt, m.end - 1)?;
                    Some((start, last + 1))
                })
                .collect()
        })
        .collect();
    coref_matrix_from_spans(seq.len(), &clusters)
}

/// Role matrix `M₂`: 1 where both tokens belong to utterances of one speaker.
pub fn build_role_matrix(seq: &EncodedSequence) -> SquareMatrix {
    let n = seq.len();
    let mut m = SquareMatrix::zeros(n);
    for i in 0..n {
        let si = seq.token_speaker[i];
        if si < 0 {
            continue;
        }
        for j in 0..n {
            if seq.token_speaker[j] == si {
                m.set(i, j, 1.0);
            }
        }
    }
    m
}

#[derive(Clone, Debug, PartialEq)]
pub struct StructureMatrices {
    pub m1: SquareMatrix,
    pub m2: SquareMatrix,
    pub g: SquareMatrix,
    pub utt_dist: DistanceMatrix,
}

impl StructureMatrices {
    pub fn build(
        dialogue: &Dialogue,
        seq: &EncodedSequence,
        gamma: u32,
        question_routing: bool,
    ) -> Self {
        let utt_dist = utterance_distances(dialogue, question_routing);
        StructureMatrices {
            m1: build_coref_matrix(dialogue, seq),
            m2: build_role_matrix(seq),
            g: build_discourse_mask(&utt_dist, seq, gamma),
            utt_dist,
        }
    }
}
