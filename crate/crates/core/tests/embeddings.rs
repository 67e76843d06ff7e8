use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use vnoip::embed::{embed_cascade, embed_global, shifted_ppmi, EmbeddingTable, GlobalEmbedConfig, GlobalGraph, GraphWaveConfig};

fn gram(t: &EmbeddingTable) -> DMatrix<f64> {
    let x = DMatrix::from_row_slice(t.rows(), t.dim(), t.data());
    &x * x.transpose()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Dense `log(max(1, vol / (neg * window) * sum_r (D^-1 A)^r_ij / deg_j))`.
fn ppmi_oracle(n: usize, edges: &[(usize, usize)], window: usize, neg: f64) -> DMatrix<f64> {
    let mut a = DMatrix::<f64>::zeros(n, n);
    for &(u, v) in edges {
        a[(u, v)] = 1.0;
        a[(v, u)] = 1.0;
    }
    let deg: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
    let vol: f64 = deg.iter().sum();
    let mut p = a.clone();
    for i in 0..n {
        for j in 0..n {
            p[(i, j)] /= deg[i];
        }
    }
    let mut power = DMatrix::<f64>::identity(n, n);
    let mut acc = DMatrix::<f64>::zeros(n, n);
    for _ in 0..window {
        power = &p * &power;
        acc += &power;
    }
    DMatrix::from_fn(n, n, |i, j| (vol / (neg * window as f64) * acc[(i, j)] / deg[j]).max(1.0).ln())
}

fn path(n: usize) -> Vec<(usize, usize)> {
    (0..n - 1).map(|i| (i, i + 1)).collect()
}

#[test]
fn two_triangles_share_geometry() {
    let edges = [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)];
    let g = GlobalGraph::new(6, edges).unwrap();
    let cfg = GlobalEmbedConfig {
        dim: 6,
        window: 3,
        negative: 1.0,
    };
    let t = embed_global(&g, &cfg).unwrap();
    let k = gram(&t);
    for a in 0..3 {
        for b in 0..3 {
            assert!((k[(a, b)] - k[(a + 3, b + 3)]).abs() < 1e-10);
            assert!(k[(a, b + 3)].abs() < 1e-10);
        }
        // the triangle is vertex-transitive
        assert!((k[(a, a)] - k[(0, 0)]).abs() < 1e-10);
    }
}

#[test]
fn star_leaves_share_rows() {
    let g = GlobalGraph::new(6, (1..6).map(|l| (0, l))).unwrap();
    let cfg = GlobalEmbedConfig {
        dim: 2,
        window: 4,
        negative: 1.0,
    };
    let t = embed_global(&g, &cfg).unwrap();
    for l in 2..6 {
        assert!(max_diff(t.row(1), t.row(l)) < 1e-8);
    }
}

#[test]
fn path_ppmi_matches_dense_oracle() {
    let edges = path(5);
    let g = GlobalGraph::new(5, edges.iter().copied()).unwrap();
    for window in [1, 2, 5, 10] {
        let got = shifted_ppmi(&g, window, 1.0).unwrap();
        let want = ppmi_oracle(5, &edges, window, 1.0);
        assert!((&got - &want).amax() < 1e-12, "window {window}");
    }
}

#[test]
fn path_mirror_rows_agree() {
    let edges = path(5);
    let g = GlobalGraph::new(5, edges.iter().copied()).unwrap();
    let cfg = GlobalEmbedConfig {
        dim: 2,
        window: 3,
        negative: 1.0,
    };
    let t = embed_global(&g, &cfg).unwrap();
    let abs = |r: &[f64]| r.iter().map(|x| x.abs()).collect::<Vec<_>>();
    assert!(max_diff(&abs(t.row(0)), &abs(t.row(4))) < 1e-8);
    assert!(max_diff(&abs(t.row(1)), &abs(t.row(3))) < 1e-8);

    // rank-2 Gram against |lambda|-weighted top eigenvectors of the oracle
    let eig = SymmetricEigen::new(ppmi_oracle(5, &edges, 3, 1.0));
    let mut order: Vec<usize> = (0..5).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].abs().partial_cmp(&eig.eigenvalues[a].abs()).unwrap());
    let mut want = DMatrix::<f64>::zeros(5, 5);
    for &c in &order[..2] {
        let u = eig.eigenvectors.column(c);
        want += u * u.transpose() * eig.eigenvalues[c].abs();
    }
    let k = gram(&t);
    assert!((&k - &want).amax() < 1e-10);
    assert!((k[(0, 0)] - k[(4, 4)]).abs() < 1e-10);
    assert!((k[(0, 1)] - k[(4, 3)]).abs() < 1e-10);
}

#[test]
fn graphwave_zero_scale_matches_closed_form() {
    // s = 0 makes the heat kernel the identity: one unit coefficient per node.
    let cfg = GraphWaveConfig {
        dim: 8,
        scales: vec![0.0],
        t_max: 10.0,
    };
    let edges = [(0, 1), (1, 2), (2, 3), (0, 2)];
    let t = embed_cascade(4, &edges, &cfg).unwrap();
    for node in 0..4 {
        for j in 0..4 {
            let s = 10.0 * (j + 1) as f64 / 4.0;
            let row = t.row(node);
            assert!((row[2 * j] - (3.0 + s.cos()) / 4.0).abs() < 1e-12);
            assert!((row[2 * j + 1] - s.sin() / 4.0).abs() < 1e-12);
        }
    }
}

#[test]
fn graphwave_single_node_is_unit_circle() {
    let cfg = GraphWaveConfig::default();
    let t = embed_cascade(1, &[], &cfg).unwrap();
    let k = cfg.points_per_scale().unwrap();
    for si in 0..cfg.scales.len() {
        for j in 0..k {
            let s = cfg.t_max * (j + 1) as f64 / k as f64;
            let base = si * 2 * k + 2 * j;
            assert!((t.row(0)[base] - s.cos()).abs() < 1e-12);
            assert!((t.row(0)[base + 1] - s.sin()).abs() < 1e-12);
        }
    }
}

#[test]
fn graphwave_equivalent_nodes_share_rows() {
    let cfg = GraphWaveConfig::default();
    let star: Vec<_> = (1..6).map(|l| (0, l)).collect();
    let cycle: Vec<_> = (0..6).map(|i| (i, (i + 1) % 6)).collect();
    let complete: Vec<_> = (0..5).flat_map(|i| (i + 1..5).map(move |j| (i, j))).collect();
    let s = embed_cascade(6, &star, &cfg).unwrap();
    for l in 2..6 {
        assert!(max_diff(s.row(1), s.row(l)) < 1e-8);
    }
    assert!(max_diff(s.row(0), s.row(1)) > 1e-3);
    let c = embed_cascade(6, &cycle, &cfg).unwrap();
    for i in 1..6 {
        assert!(max_diff(c.row(0), c.row(i)) < 1e-8);
    }
    let k = embed_cascade(5, &complete, &cfg).unwrap();
    for i in 1..5 {
        assert!(max_diff(k.row(0), k.row(i)) < 1e-8);
    }
}

#[test]
fn embeddings_are_deterministic() {
    let edges = [(0, 1), (1, 2), (2, 3), (3, 0), (0, 4), (4, 5), (5, 6), (2, 6)];
    let g = GlobalGraph::new(7, edges).unwrap();
    let cfg = GlobalEmbedConfig {
        dim: 4,
        window: 5,
        negative: 1.0,
    };
    assert_eq!(embed_global(&g, &cfg).unwrap(), embed_global(&g, &cfg).unwrap());
    let wc = GraphWaveConfig::default();
    assert_eq!(embed_cascade(7, &edges, &wc).unwrap(), embed_cascade(7, &edges, &wc).unwrap());
}

fn random_graph() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    (2usize..14).prop_flat_map(|n| (Just(n), prop::collection::vec((0..n, 0..n), 0..3 * n)))
}

proptest! {
    #[test]
    fn embeddings_stay_finite((n, edges) in random_graph(), window in 1usize..6) {
        let g = GlobalGraph::new(n, edges.iter().copied()).unwrap();
        let dim = n.min(4);
        let t = embed_global(&g, &GlobalEmbedConfig { dim, window, negative: 1.0 }).unwrap();
        prop_assert!(t.data().iter().all(|x| x.is_finite()));
        for u in (0..n).filter(|&u| g.degree(u) == 0) {
            prop_assert!(t.row(u).iter().all(|x| x.abs() < 1e-12));
        }
        let clean: Vec<_> = edges.iter().copied().filter(|(a, b)| a != b).collect();
        let w = embed_cascade(n, &clean, &GraphWaveConfig::default()).unwrap();
        prop_assert!(w.data().iter().all(|x| x.is_finite() && x.abs() <= 1.0 + 1e-12));
    }
}
