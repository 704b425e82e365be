//! Key-ring connectivity threshold and its Monte Carlo validation.
//!
//! For a cluster of `n` clients and a target connectivity probability `P_c`,
//! the random-graph threshold gives an edge probability
//! `r = (ln n − ln(−ln P_c)) / n`, and the key-ring size is the expected
//! degree `m = ln n − ln(−ln P_c)`, rounded up.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::keying;
use crate::rng::{self, label};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("connectivity target undefined for n = {n}, P_c = {p_c}: need n ≥ 2 and 0 < P_c < 1")]
    DomainError { n: usize, p_c: f64 },
}

fn check_domain(n: usize, p_c: f64) -> Result<(), AnalysisError> {
    if n >= 2 && p_c > 0.0 && p_c < 1.0 {
        Ok(())
    } else {
        Err(AnalysisError::DomainError { n, p_c })
    }
}

/// The real constant `c = −ln(−ln P_c)` for which `P_c = e^{−e^{−c}}`.
pub fn threshold_constant(p_c: f64) -> f64 {
    -(-p_c.ln()).ln()
}

/// Unrounded `ln n − ln(−ln P_c)`.
pub fn ring_size_real(n: usize, p_c: f64) -> Result<f64, AnalysisError> {
    check_domain(n, p_c)?;
    Ok((n as f64).ln() + threshold_constant(p_c))
}

/// Key-ring size: ceiling of [`ring_size_real`], clamped to `[1, n − 1]`.
pub fn ring_size(n: usize, p_c: f64) -> Result<usize, AnalysisError> {
    let m = ring_size_real(n, p_c)?.ceil();
    Ok((m.max(1.0) as usize).min(n - 1))
}

/// Threshold edge probability, clamped to `[0, 1]`.
pub fn edge_probability(n: usize, p_c: f64) -> Result<f64, AnalysisError> {
    Ok((ring_size_real(n, p_c)? / n as f64).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConnectivitySpec {
    pub n_h: usize,
    pub p_c: f64,
    pub r_h: f64,
    pub c: f64,
    /// Expected edge count `r_h · C(n_h, 2)`.
    pub expected_edges: f64,
    pub m_h: usize,
}

impl ConnectivitySpec {
    pub fn new(n_h: usize, p_c: f64) -> Result<Self, AnalysisError> {
        let r_h = edge_probability(n_h, p_c)?;
        let pairs = (n_h * (n_h - 1)) as f64 / 2.0;
        Ok(Self {
            n_h,
            p_c,
            r_h,
            c: threshold_constant(p_c),
            expected_edges: r_h * pairs,
            m_h: ring_size(n_h, p_c)?,
        })
    }

    /// Expected degree `2e / n`.
    pub fn expected_degree(&self) -> f64 {
        2.0 * self.expected_edges / self.n_h as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphModel {
    /// `G(n, r)`: every pair linked independently.
    ErdosRenyi { edge_probability: f64 },
    /// Random pairwise key rings of fixed size.
    KeyRing { ring_size: usize },
}

struct DisjointSet {
    parent: Vec<usize>,
    components: usize,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            components: n,
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra] = rb;
            self.components -= 1;
        }
    }
}

/// Geometric skipping over the pair sequence, O(n + edges).
fn erdos_renyi_connected<R: Rng>(n: usize, p: f64, rng: &mut R) -> bool {
    if n <= 1 {
        return true;
    }
    if p <= 0.0 {
        return false;
    }
    let mut ds = DisjointSet::new(n);
    if p >= 1.0 {
        return true;
    }
    let log_q = (1.0 - p).ln();
    let (mut v, mut w): (usize, i64) = (1, -1);
    while v < n {
        let r: f64 = rng.random();
        w += 1 + ((1.0 - r).ln() / log_q).floor() as i64;
        while w >= v as i64 && v < n {
            w -= v as i64;
            v += 1;
        }
        if v < n {
            ds.union(v, w as usize);
            if ds.components == 1 {
                return true;
            }
        }
    }
    ds.components == 1
}

fn ring_graph_connected<R: Rng>(n: usize, m: usize, rng: &mut R) -> bool {
    if n <= 1 {
        return true;
    }
    let Ok(adj) = keying::random_ring_graph(n, m, rng) else {
        return false;
    };
    let mut ds = DisjointSet::new(n);
    for (a, peers) in adj.iter().enumerate() {
        for b in peers {
            ds.union(a, *b);
        }
    }
    ds.components == 1
}

/// Fraction of `trials` sampled graphs that are connected.
pub fn monte_carlo_connectivity(n: usize, model: GraphModel, trials: usize, seed: u64) -> f64 {
    if trials == 0 {
        return 0.0;
    }
    let hits: usize = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng::stream(seed, &[label::MONTE_CARLO, n as u64, t as u64]);
            let ok = match model {
                GraphModel::ErdosRenyi { edge_probability } => {
                    erdos_renyi_connected(n, edge_probability, &mut rng)
                }
                GraphModel::KeyRing { ring_size } => ring_graph_connected(n, ring_size, &mut rng),
            };
            usize::from(ok)
        })
        .sum();
    hits as f64 / trials as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub p_c: f64,
    pub m_h: usize,
    pub r_h: f64,
    pub trials: usize,
    pub erdos_renyi_connectivity: f64,
    pub key_ring_connectivity: f64,
}

/// Both graph models for every `(n, P_c)` pair, in input order.
pub fn connectivity_sweep(
    ns: &[usize],
    pcs: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<SweepRow>, AnalysisError> {
    let mut rows = Vec::with_capacity(ns.len() * pcs.len());
    for &n in ns {
        for &p_c in pcs {
            let spec = ConnectivitySpec::new(n, p_c)?;
            rows.push(SweepRow {
                n,
                p_c,
                m_h: spec.m_h,
                r_h: spec.r_h,
                trials,
                erdos_renyi_connectivity: monte_carlo_connectivity(
                    n,
                    GraphModel::ErdosRenyi {
                        edge_probability: spec.r_h,
                    },
                    trials,
                    seed,
                ),
                key_ring_connectivity: monte_carlo_connectivity(
                    n,
                    GraphModel::KeyRing { ring_size: spec.m_h },
                    trials,
                    seed,
                ),
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "n",
        "p_c",
        "m_h",
        "r_h",
        "trials",
        "erdos_renyi_connectivity",
        "key_ring_connectivity",
    ])?;
    for r in rows {
        w.write_record([
            r.n.to_string(),
            r.p_c.to_string(),
            r.m_h.to_string(),
            format!("{:.6}", r.r_h),
            r.trials.to_string(),
            format!("{:.4}", r.erdos_renyi_connectivity),
            format!("{:.4}", r.key_ring_connectivity),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_size_reference_values() {
        // ln 40 + (−ln(−ln 0.999)) = 3.68888 + 6.90726 = 10.596
        assert_eq!(ring_size(40, 0.999).unwrap(), 11);
        // ln 100 + 6.90726 = 11.512
        assert_eq!(ring_size(100, 0.999).unwrap(), 12);
        assert!((ring_size_real(40, 0.999).unwrap() - 10.596_14).abs() < 1e-4);
    }

    #[test]
    fn domain_edges() {
        assert!(matches!(ring_size(10, 1.0), Err(AnalysisError::DomainError { .. })));
        assert!(ring_size(10, 0.0).is_err());
        assert!(ring_size(1, 0.5).is_err());
        assert!(edge_probability(10, -0.1).is_err());
    }

    #[test]
    fn edge_probability_reference_and_shape() {
        assert!((edge_probability(100, 0.999).unwrap() - 0.11513).abs() < 1e-5);
        assert!(edge_probability(1000, 0.999).unwrap() < edge_probability(100, 0.999).unwrap());
        // ln 2 + 13.8 ≫ 2
        assert_eq!(edge_probability(2, 0.999_999).unwrap(), 1.0);
        assert_eq!(ring_size(2, 0.999_999).unwrap(), 1);
    }

    #[test]
    fn ring_size_tracks_n_times_edge_probability() {
        for n in [20, 40, 100, 500, 1000] {
            for p_c in [0.9, 0.99, 0.999] {
                let m = ring_size(n, p_c).unwrap() as f64;
                let approx = n as f64 * edge_probability(n, p_c).unwrap();
                assert!(m >= approx - 1e-9 && m < approx + 1.0, "n={n} p={p_c}");
            }
        }
    }

    #[test]
    fn ring_size_increases_with_target() {
        let a = ring_size(100, 0.9).unwrap();
        let b = ring_size(100, 0.99).unwrap();
        let c = ring_size(100, 0.999).unwrap();
        assert!(a < b && b < c, "{a} {b} {c}");
    }

    #[test]
    fn spec_fields_consistent() {
        let s = ConnectivitySpec::new(100, 0.999).unwrap();
        assert!((s.expected_degree() - s.r_h * 99.0).abs() < 1e-9);
        assert!((s.c - threshold_constant(0.999)).abs() < 1e-12);
    }

    #[test]
    fn monte_carlo_extremes() {
        let full = GraphModel::ErdosRenyi { edge_probability: 1.0 };
        let empty = GraphModel::ErdosRenyi { edge_probability: 0.0 };
        assert_eq!(monte_carlo_connectivity(30, full, 50, 1), 1.0);
        assert_eq!(monte_carlo_connectivity(30, empty, 50, 1), 0.0);
    }

    #[test]
    fn erdos_renyi_edge_density_matches_p() {
        // Count edges through the skip sampler against p·C(n,2).
        let n = 300;
        let p = 0.05;
        let mut rng = rng::stream(5, &[99]);
        let log_q = (1.0f64 - p).ln();
        let mut edges = 0usize;
        for _ in 0..20 {
            let (mut v, mut w): (usize, i64) = (1, -1);
            while v < n {
                let r: f64 = rng.random();
                w += 1 + ((1.0 - r).ln() / log_q).floor() as i64;
                while w >= v as i64 && v < n {
                    w -= v as i64;
                    v += 1;
                }
                if v < n {
                    edges += 1;
                }
            }
        }
        let expected = 20.0 * p * (n * (n - 1) / 2) as f64;
        assert!((edges as f64 - expected).abs() / expected < 0.03);
    }

    #[test]
    fn sweep_rows_and_csv() {
        let rows = connectivity_sweep(&[40], &[0.999], 20, 3).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].m_h, 11);
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 2);

        let empty = connectivity_sweep(&[], &[], 10, 1).unwrap();
        let mut buf = Vec::new();
        write_sweep_csv(&empty, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1);
    }
}
