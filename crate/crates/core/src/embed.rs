//! Node embeddings for the global social graph and for per-cascade graphs.
//!
//! Global embeddings factorize a shifted-PPMI matrix of exact random-walk
//! co-occurrences (windows `1..=window`) and keep the top-`d` spectral
//! components as rows `U * sqrt(S)`. Cascade embeddings are heat-kernel
//! wavelet signatures: for each node the empirical characteristic function
//! of its wavelet coefficients, sampled at evenly spaced points per scale.
//!
//! Both are deterministic functions of the graph and configuration.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Undirected graph over node ids `0..n`, without self-loops or duplicate edges.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
    adj: Vec<Vec<usize>>,
}

impl GlobalGraph {
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::Config(format!("edge ({u}, {v}) outside node range 0..{n}")));
            }
            if u != v {
                set.insert((u.min(v), u.max(v)));
            }
        }
        let edges: Vec<_> = set.into_iter().collect();
        let mut adj = vec![Vec::new(); n];
        for &(u, v) in &edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        Ok(Self { n, edges, adj })
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.adj[u]
    }

    pub fn degree(&self, u: usize) -> usize {
        self.adj[u].len()
    }

    /// Parses `u<TAB>v` lines. Node count is one past the largest id.
    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut edges = Vec::new();
        let mut n = 0;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split('\t');
            let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected `u<TAB>v`, got {line:?}"),
                });
            };
            let parse = |s: &str| {
                s.trim().parse::<usize>().map_err(|e| Error::Parse {
                    line: i + 1,
                    msg: format!("bad node id {s:?}: {e}"),
                })
            };
            let (u, v) = (parse(a)?, parse(b)?);
            n = n.max(u + 1).max(v + 1);
            edges.push((u, v));
        }
        Self::new(n, edges)
    }

    pub fn read_tsv(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_tsv(&fs::read_to_string(path)?)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for &(u, v) in &self.edges {
            s.push_str(&format!("{u}\t{v}\n"));
        }
        s
    }

    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }
}

/// Row-major `n x d` table of node embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

const CACHE_MAGIC: &[u8; 4] = b"VNEM";
const CACHE_VERSION: u32 = 1;

impl EmbeddingTable {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::shape(
                "embedding",
                format!("{n}x{d} needs {} values, got {}", n * d, data.len()),
            ));
        }
        Ok(Self { n, d, data })
    }

    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            n,
            d,
            data: vec![0.0; n * d],
        }
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    /// Row for `user`, or zeros when the user is outside the table.
    pub fn row_or_zero(&self, user: u64) -> Vec<f64> {
        match usize::try_from(user) {
            Ok(u) if u < self.n => self.row(u).to_vec(),
            _ => vec![0.0; self.d],
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&CACHE_VERSION.to_le_bytes())?;
        w.write_all(&(self.n as u64).to_le_bytes())?;
        w.write_all(&(self.d as u64).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(Error::Checkpoint("not an embedding cache".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != CACHE_VERSION {
            return Err(Error::Checkpoint(format!("embedding cache version {version} unsupported")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let n = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8)?;
        let d = u64::from_le_bytes(b8) as usize;
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            r.read_exact(&mut b8)?;
            data.push(f64::from_le_bytes(b8));
        }
        Self::new(n, d, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = BufReader::new(fs::File::open(path)?);
        let t = Self::read_from(&mut f)?;
        if !f.fill_buf()?.is_empty() {
            return Err(Error::Checkpoint("trailing bytes after embedding cache".into()));
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalEmbedConfig {
    pub dim: usize,
    pub window: usize,
    pub negative: f64,
}

impl Default for GlobalEmbedConfig {
    fn default() -> Self {
        Self {
            dim: 40,
            window: 10,
            negative: 1.0,
        }
    }
}

/// Shifted-PPMI matrix `log(max(1, vol * avg_r(P^r)_ij / (neg * deg_j)))`,
/// with `P = D^-1 A`. Rows and columns of isolated nodes are zero.
pub fn shifted_ppmi(g: &GlobalGraph, window: usize, negative: f64) -> Result<DMatrix<f64>> {
    let n = g.node_count();
    if n == 0 {
        return Err(Error::EmptyGraph);
    }
    if window == 0 || !(negative > 0.0) {
        return Err(Error::Config("window and negative must be positive".into()));
    }
    let deg: Vec<f64> = (0..n).map(|u| g.degree(u) as f64).collect();
    let vol: f64 = deg.iter().sum();

    // power holds P^r row-major; acc sums the powers.
    let mut power = vec![0.0; n * n];
    for i in 0..n {
        power[i * n + i] = 1.0;
    }
    let mut acc = vec![0.0; n * n];
    let mut next = vec![0.0; n * n];
    for _ in 0..window {
        // (P * M)_i = (1/deg_i) sum_{j in N(i)} M_j
        for i in 0..n {
            let row = &mut next[i * n..(i + 1) * n];
            row.iter_mut().for_each(|v| *v = 0.0);
            if deg[i] == 0.0 {
                continue;
            }
            for &j in g.neighbors(i) {
                for (o, &m) in row.iter_mut().zip(&power[j * n..(j + 1) * n]) {
                    *o += m;
                }
            }
            let inv = 1.0 / deg[i];
            row.iter_mut().for_each(|v| *v *= inv);
        }
        std::mem::swap(&mut power, &mut next);
        for (a, p) in acc.iter_mut().zip(&power) {
            *a += p;
        }
    }

    let scale = vol / (negative * window as f64);
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if deg[i] == 0.0 || deg[j] == 0.0 {
                continue;
            }
            let x = scale * acc[i * n + j] / deg[j];
            m[(i, j)] = x.max(1.0).ln();
        }
    }
    // Exact arithmetic gives a symmetric matrix; remove round-off asymmetry.
    let sym = (&m + m.transpose()) * 0.5;
    Ok(sym)
}

/// Sorts eigenpairs by decreasing |lambda| (ties by original index) and
/// fixes each eigenvector's sign so its largest-magnitude entry is positive.
fn sorted_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .abs()
            .partial_cmp(&eig.eigenvalues[a].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (c, &k) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(k);
        let mut pivot = 0;
        for i in 0..n {
            if col[i].abs() > col[pivot].abs() + 1e-12 {
                pivot = i;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            vectors[(i, c)] = sign * col[i];
        }
    }
    (values, vectors)
}

/// Global-graph embeddings: rank-`dim` factorization of [`shifted_ppmi`].
pub fn embed_global(g: &GlobalGraph, cfg: &GlobalEmbedConfig) -> Result<EmbeddingTable> {
    let n = g.node_count();
    if n == 0 {
        return Err(Error::EmptyGraph);
    }
    if cfg.dim > n {
        return Err(Error::Rank { d: cfg.dim, n });
    }
    let m = shifted_ppmi(g, cfg.window, cfg.negative)?;
    let (values, vectors) = sorted_eigen(m);
    let top = values.first().map(|v| v.abs()).unwrap_or(0.0);
    let mut data = vec![0.0; n * cfg.dim];
    for c in 0..cfg.dim {
        let s = values[c].abs();
        // Numerically-null directions are arbitrary; drop them.
        if s <= 1e-10 * top.max(1e-300) {
            continue;
        }
        let root = s.sqrt();
        for i in 0..n {
            data[i * cfg.dim + c] = vectors[(i, c)] * root;
        }
    }
    EmbeddingTable::new(n, cfg.dim, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphWaveConfig {
    pub dim: usize,
    pub scales: Vec<f64>,
    pub t_max: f64,
}

impl Default for GraphWaveConfig {
    fn default() -> Self {
        Self {
            dim: 40,
            scales: vec![0.5, 1.0],
            t_max: 10.0,
        }
    }
}

impl GraphWaveConfig {
    pub fn points_per_scale(&self) -> Result<usize> {
        let per = 2 * self.scales.len();
        if per == 0 || self.dim == 0 || !self.dim.is_multiple_of(per) {
            return Err(Error::Config(format!(
                "cascade embedding dim {} must be a positive multiple of 2 x {} scales",
                self.dim,
                self.scales.len()
            )));
        }
        Ok(self.dim / per)
    }
}

/// Heat-kernel wavelet embeddings of a small undirected graph on nodes
/// `0..n`. Row layout: for each scale, for each sample point `t`, the pair
/// (Re, Im) of the characteristic function at `t`.
pub fn embed_cascade(n: usize, edges: &[(usize, usize)], cfg: &GraphWaveConfig) -> Result<EmbeddingTable> {
    let k = cfg.points_per_scale()?;
    if n == 0 {
        return Err(Error::EmptyGraph);
    }
    let g = GlobalGraph::new(n, edges.iter().copied())?;
    let mut lap: DMatrix<f64> = DMatrix::zeros(n, n);
    for &(u, v) in g.edges() {
        lap[(u, v)] -= 1.0;
        lap[(v, u)] -= 1.0;
        lap[(u, u)] += 1.0;
        lap[(v, v)] += 1.0;
    }
    let eig = SymmetricEigen::new(lap);
    let u = &eig.eigenvectors;
    let ts: Vec<f64> = (1..=k).map(|j| cfg.t_max * j as f64 / k as f64).collect();

    let mut data = vec![0.0; n * cfg.dim];
    for (si, &s) in cfg.scales.iter().enumerate() {
        let filter: Vec<f64> = eig.eigenvalues.iter().map(|&l| (-s * l.max(0.0)).exp()).collect();
        // heat = U diag(filter) U^T
        let mut scaled = u.clone();
        for (c, f) in filter.iter().enumerate() {
            scaled.column_mut(c).scale_mut(*f);
        }
        let heat = &scaled * u.transpose();
        for a in 0..n {
            let base = a * cfg.dim + si * 2 * k;
            for (j, &t) in ts.iter().enumerate() {
                let (mut re, mut im) = (0.0, 0.0);
                for m in 0..n {
                    let psi = heat[(m, a)];
                    re += (t * psi).cos();
                    im += (t * psi).sin();
                }
                data[base + 2 * j] = re / n as f64;
                data[base + 2 * j + 1] = im / n as f64;
            }
        }
    }
    EmbeddingTable::new(n, cfg.dim, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn star(leaves: usize) -> GlobalGraph {
        GlobalGraph::new(leaves + 1, (1..=leaves).map(|l| (0, l))).unwrap()
    }

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn graph_normalization() {
        let g = GlobalGraph::new(3, [(0, 1), (1, 0), (2, 2), (1, 2)]).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
        assert!(GlobalGraph::new(2, [(0, 5)]).is_err());
    }

    #[test]
    fn tsv_parse_errors_carry_line() {
        let err = GlobalGraph::parse_tsv("0\t1\n1 2\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn global_rank_and_empty_errors() {
        let g = star(2);
        let cfg = GlobalEmbedConfig {
            dim: 4,
            ..Default::default()
        };
        assert!(matches!(embed_global(&g, &cfg), Err(Error::Rank { d: 4, n: 3 })));
        let empty = GlobalGraph::new(0, []).unwrap();
        assert!(matches!(embed_global(&empty, &cfg), Err(Error::EmptyGraph)));
    }

    #[test]
    fn star_leaves_are_equal() {
        let g = star(5);
        let cfg = GlobalEmbedConfig {
            dim: 4,
            ..Default::default()
        };
        let e = embed_global(&g, &cfg).unwrap();
        for a in 1..=5 {
            for b in 1..=5 {
                assert!(dist(e.row(a), e.row(b)) < 1e-8);
            }
        }
    }

    #[test]
    fn isolated_nodes_have_zero_rows() {
        let g = GlobalGraph::new(4, [(0, 1), (1, 2)]).unwrap();
        let cfg = GlobalEmbedConfig {
            dim: 2,
            ..Default::default()
        };
        let e = embed_global(&g, &cfg).unwrap();
        assert!(e.row(3).iter().all(|&v| v == 0.0));
        assert!(e.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn graphwave_bad_dim() {
        let cfg = GraphWaveConfig {
            dim: 30,
            ..Default::default()
        };
        assert!(matches!(embed_cascade(2, &[(0, 1)], &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn graphwave_single_node() {
        let cfg = GraphWaveConfig::default();
        let e = embed_cascade(1, &[], &cfg).unwrap();
        for (si, _) in cfg.scales.iter().enumerate() {
            for j in 0..10 {
                let t = 10.0 * (j + 1) as f64 / 10.0;
                let base = si * 20 + 2 * j;
                assert!((e.row(0)[base] - t.cos()).abs() < 1e-12);
                assert!((e.row(0)[base + 1] - t.sin()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embedding_cache_roundtrip() {
        let t = EmbeddingTable::new(2, 3, vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5, 1e300, -2.25]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"VNEM");
        let back = EmbeddingTable::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(
            back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
