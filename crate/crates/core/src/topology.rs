//! Undirected agent graphs with a tolerance on each directed edge.
//!
//! Every undirected edge `{i, j}` yields two directed constraints `i -> j`
//! and `j -> i`. Dual variables are owned by the agents (the tail of each
//! directed edge); the graph itself is immutable after construction.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How an edge tolerance is derived from the distance between its ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaRule {
    /// `exp(-dist)`, with distances taken on the positions as given (the
    /// field benchmark normalizes positions to the unit square first).
    Correlation,
    /// `exp(-dist / scale)`.
    ExpDistance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    #[default]
    Euclidean,
    /// Great-circle distance in kilometres; positions are `(lat, lon)` degrees.
    HaversineKm,
}

const EARTH_RADIUS_KM: f64 = 6371.0088;

pub fn haversine_km(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (lat1, lon1) = (a[0].to_radians(), a[1].to_radians());
    let (lat2, lon2) = (b[0].to_radians(), b[1].to_radians());
    let s = ((lat2 - lat1) / 2.0).sin().powi(2)
        + lat1.cos() * lat2.cos() * ((lon2 - lon1) / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * s.sqrt().min(1.0).asin()
}

impl DistanceMetric {
    pub fn distance(&self, a: [f64; 2], b: [f64; 2]) -> f64 {
        match self {
            DistanceMetric::Euclidean => ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt(),
            DistanceMetric::HaversineKm => haversine_km(a, b),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    nodes: usize,
    /// Undirected edges as `(i, j)` with `i < j`, sorted.
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    gamma: BTreeMap<(usize, usize), f64>,
}

impl Topology {
    /// Builds a graph from undirected edges and their (symmetric) tolerances.
    /// Fails when the graph is disconnected.
    pub fn new(nodes: usize, edges: &[(usize, usize, f64)]) -> Result<Topology> {
        if nodes == 0 {
            return Err(Error::Topology("graph needs at least one node".into()));
        }
        let mut neighbors = vec![Vec::new(); nodes];
        let mut gamma = BTreeMap::new();
        let mut und = Vec::with_capacity(edges.len());
        for &(a, b, g) in edges {
            if a >= nodes || b >= nodes || a == b {
                return Err(Error::Topology(format!("invalid edge ({a}, {b})")));
            }
            if !(g >= 0.0) {
                return Err(Error::Topology(format!(
                    "tolerance on edge ({a}, {b}) must be non-negative, got {g}"
                )));
            }
            let (i, j) = (a.min(b), a.max(b));
            if gamma.insert((i, j), g).is_some() {
                return Err(Error::Topology(format!("duplicate edge ({i}, {j})")));
            }
            gamma.insert((j, i), g);
            neighbors[i].push(j);
            neighbors[j].push(i);
            und.push((i, j));
        }
        for n in &mut neighbors {
            n.sort_unstable();
        }
        und.sort_unstable();
        let t = Topology {
            nodes,
            edges: und,
            neighbors,
            gamma,
        };
        t.check_connected()?;
        Ok(t)
    }

    pub fn complete(nodes: usize, gamma: f64) -> Result<Topology> {
        let mut e = Vec::new();
        for i in 0..nodes {
            for j in (i + 1)..nodes {
                e.push((i, j, gamma));
            }
        }
        Topology::new(nodes, &e)
    }

    pub fn path(nodes: usize, gamma: f64) -> Result<Topology> {
        let e: Vec<_> = (1..nodes).map(|i| (i - 1, i, gamma)).collect();
        Topology::new(nodes, &e)
    }

    fn reachable_from_zero(&self) -> Vec<bool> {
        let mut seen = vec![false; self.nodes];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &self.neighbors[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen
    }

    fn check_connected(&self) -> Result<()> {
        let seen = self.reachable_from_zero();
        if let Some(start) = seen.iter().position(|s| !s) {
            // collect the component of the first unreachable node
            let mut comp = vec![start];
            let mut mark = vec![false; self.nodes];
            mark[start] = true;
            let mut k = 0;
            while k < comp.len() {
                for &v in &self.neighbors[comp[k]] {
                    if !mark[v] {
                        mark[v] = true;
                        comp.push(v);
                    }
                }
                k += 1;
            }
            comp.sort_unstable();
            return Err(Error::Topology(format!(
                "graph is disconnected: component {comp:?} is unreachable from node 0"
            )));
        }
        Ok(())
    }

    pub fn is_connected(&self) -> bool {
        self.reachable_from_zero().iter().all(|&s| s)
    }

    pub fn node_count(&self) -> usize {
        self.nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Directed edges `(i, j)` in lexicographic order; `2 |E|` of them.
    pub fn directed_edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.gamma.keys().copied()
    }

    pub fn dual_dimension(&self) -> usize {
        self.gamma.len()
    }

    pub fn neighbors(&self, i: usize) -> Result<&[usize]> {
        self.neighbors
            .get(i)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::InvalidArgument(format!("agent id {i} out of range ({})", self.nodes)))
    }

    pub fn gamma(&self, i: usize, j: usize) -> Option<f64> {
        self.gamma.get(&(i, j)).copied()
    }
}

/// Geometric graph: an edge joins nodes closer than `connect_radius`, with
/// tolerance from `rule`.
pub fn build_geometric(
    positions: &[[f64; 2]],
    connect_radius: f64,
    rule: GammaRule,
    scale: f64,
) -> Result<Topology> {
    build_geometric_with_metric(positions, connect_radius, rule, scale, DistanceMetric::Euclidean)
}

pub fn build_geometric_with_metric(
    positions: &[[f64; 2]],
    connect_radius: f64,
    rule: GammaRule,
    scale: f64,
    metric: DistanceMetric,
) -> Result<Topology> {
    if positions.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "geometric graph needs at least 2 nodes, got {}",
            positions.len()
        )));
    }
    if !(connect_radius > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "connect radius must be positive, got {connect_radius}"
        )));
    }
    if rule == GammaRule::ExpDistance && !(scale > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "distance scale must be positive, got {scale}"
        )));
    }
    let mut edges = Vec::new();
    for i in 0..positions.len() {
        for j in (i + 1)..positions.len() {
            let d = metric.distance(positions[i], positions[j]);
            if d < connect_radius {
                edges.push((i, j, gamma_for(rule, d, scale)));
            }
        }
    }
    Topology::new(positions.len(), &edges)
}

pub fn gamma_for(rule: GammaRule, dist: f64, scale: f64) -> f64 {
    match rule {
        GammaRule::Correlation => (-dist).exp(),
        GammaRule::ExpDistance => (-dist / scale).exp(),
    }
}

/// Node coordinates from a CSV with a header whose first three columns are
/// `id, x, y`; extra columns are ignored. Each id's first row wins, and
/// positions come back ordered by ascending id.
pub fn load_positions_csv(path: &Path) -> Result<Vec<[f64; 2]>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let mut by_id: BTreeMap<String, [f64; 2]> = BTreeMap::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let field = |k: usize| {
            rec.get(k)
                .ok_or_else(|| Error::Data(format!("line {}: missing column {k}", line + 2)))
        };
        let id = field(0)?.trim().to_string();
        let parse = |k: usize| -> Result<f64> {
            field(k)?
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::Data(format!("line {}: column {k}: {e}", line + 2)))
        };
        let p = [parse(1)?, parse(2)?];
        by_id.entry(id).or_insert(p);
    }
    if by_id.is_empty() {
        return Err(Error::Data("no data rows".into()));
    }
    let mut ids: Vec<(String, [f64; 2])> = by_id.into_iter().collect();
    ids.sort_by(|a, b| match (a.0.parse::<i64>(), b.0.parse::<i64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        _ => a.0.cmp(&b.0),
    });
    Ok(ids.into_iter().map(|(_, p)| p).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn gamma_closed_forms() {
        assert_eq!(gamma_for(GammaRule::ExpDistance, 0.0, 1000.0), 1.0);
        assert_eq!(gamma_for(GammaRule::Correlation, 0.0, 1.0), 1.0);
        assert_abs_diff_eq!(
            gamma_for(GammaRule::ExpDistance, 1000.0, 1000.0),
            0.367879,
            epsilon = 1e-6
        );
    }

    #[test]
    fn collinear_path() {
        let t = build_geometric(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], 1.5, GammaRule::Correlation, 1.0)
            .unwrap();
        assert_eq!(t.edges(), &[(0, 1), (1, 2)]);
        assert_eq!(t.neighbors(1).unwrap(), &[0, 2]);
        assert_eq!(t.neighbors(0).unwrap(), &[1]);
        assert!(t.neighbors(3).is_err());
        assert_abs_diff_eq!(t.gamma(0, 1).unwrap(), (-1.0f64).exp(), epsilon = 1e-15);
        assert_eq!(t.gamma(1, 0), t.gamma(0, 1));
        assert_eq!(t.gamma(0, 2), None);
        assert_eq!(t.dual_dimension(), 4);
    }

    #[test]
    fn complete_graph_degrees() {
        let t = Topology::complete(4, 0.5).unwrap();
        for i in 0..4 {
            assert_eq!(t.neighbors(i).unwrap().len(), 3);
        }
        assert_eq!(t.dual_dimension(), 12);
    }

    #[test]
    fn disconnected_graph_names_component() {
        let err = build_geometric(
            &[[0.0, 0.0], [0.5, 0.0], [10.0, 0.0], [10.2, 0.0]],
            1.0,
            GammaRule::ExpDistance,
            1.0,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn invalid_arguments() {
        assert!(build_geometric(&[[0.0, 0.0]], 1.0, GammaRule::Correlation, 1.0).is_err());
        assert!(build_geometric(&[[0.0, 0.0], [0.1, 0.0]], 0.0, GammaRule::Correlation, 1.0).is_err());
        assert!(Topology::new(2, &[(0, 0, 1.0)]).is_err());
        assert!(Topology::new(2, &[(0, 1, -1.0)]).is_err());
        assert!(Topology::new(2, &[(0, 1, 1.0), (1, 0, 1.0)]).is_err());
        assert!(Topology::new(1, &[]).is_ok());
    }

    #[test]
    fn haversine_known_distance() {
        // one degree of latitude
        let d = haversine_km([20.0, -90.0], [21.0, -90.0]);
        assert_abs_diff_eq!(d, 111.19, epsilon = 0.05);
    }

    #[test]
    fn positions_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nodes.csv");
        std::fs::write(&p, "id,x,y,extra\n10,3.0,4.0,a\n2,1.0,2.0,b\n2,9.0,9.0,c\n").unwrap();
        assert_eq!(load_positions_csv(&p).unwrap(), vec![[1.0, 2.0], [3.0, 4.0]]);
        std::fs::write(&p, "id,x,y\n").unwrap();
        assert!(load_positions_csv(&p).is_err());
        std::fs::write(&p, "id,x,y\n1,abc,2\n").unwrap();
        assert!(load_positions_csv(&p).unwrap_err().to_string().contains("line 2"));
    }

    fn bfs_all(t: &Topology) -> bool {
        let mut seen = vec![false; t.node_count()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &v in t.neighbors(u).unwrap() {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    proptest! {
        #[test]
        fn connectivity_and_dual_dimension(
            pts in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 2..30),
            radius in 0.05f64..1.5,
        ) {
            let pos: Vec<[f64; 2]> = pts.iter().map(|&(a, b)| [a, b]).collect();
            match build_geometric(&pos, radius, GammaRule::Correlation, 1.0) {
                Ok(t) => {
                    prop_assert!(bfs_all(&t));
                    let deg: usize = (0..t.node_count()).map(|i| t.neighbors(i).unwrap().len()).sum();
                    prop_assert_eq!(t.dual_dimension(), deg);
                    prop_assert_eq!(t.dual_dimension(), 2 * t.edge_count());
                    for (i, j) in t.directed_edges() {
                        prop_assert_eq!(t.gamma(i, j), t.gamma(j, i));
                    }
                }
                Err(Error::Topology(_)) => {
                    // an independent union-find must also see several components
                    let n = pos.len();
                    let mut parent: Vec<usize> = (0..n).collect();
                    fn find(p: &mut Vec<usize>, x: usize) -> usize {
                        if p[x] != x { let r = find(p, p[x]); p[x] = r; }
                        p[x]
                    }
                    for i in 0..n {
                        for j in (i + 1)..n {
                            let d = ((pos[i][0] - pos[j][0]).powi(2) + (pos[i][1] - pos[j][1]).powi(2)).sqrt();
                            if d < radius {
                                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                                parent[a] = b;
                            }
                        }
                    }
                    let r0 = find(&mut parent, 0);
                    prop_assert!((0..n).any(|i| find(&mut parent, i) != r0));
                }
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }
    }
}
