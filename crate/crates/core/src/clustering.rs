//! HDBSCAN over 3D points.
//!
//! The pipeline is the classic one: core distances, a minimum spanning tree
//! of the mutual-reachability graph, a single-linkage hierarchy condensed by
//! `min_cluster_size`, and stability-based flat cluster selection. All steps
//! are exact and quadratic in the point count.

use crate::geometry::Point3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NOISE: i32 = -1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClusterError {
    #[error("core distance needs k < point count (k = {k}, points = {points})")]
    TooFewPoints { k: usize, points: usize },
    #[error("invalid cluster parameters: {0}")]
    InvalidParams(String),
    #[error("edge list is not a spanning tree of {0} points")]
    NotSpanning(usize),
    #[error("core distances cover {core} points but {points} were given")]
    LengthMismatch { core: usize, points: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterSelection {
    #[default]
    ExcessOfMass,
    Leaf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    pub min_cluster_size: usize,
    /// `k` of the core distance (neighbors, self excluded).
    pub min_samples: usize,
    pub selection: ClusterSelection,
    /// Let the root of the hierarchy win selection when nothing splits it.
    pub allow_single_cluster: bool,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            min_cluster_size: 20,
            min_samples: 5,
            selection: ClusterSelection::ExcessOfMass,
            allow_single_cluster: true,
        }
    }
}

impl ClusterParams {
    pub fn validate(&self) -> Result<(), ClusterError> {
        if self.min_cluster_size < 2 {
            return Err(ClusterError::InvalidParams("min_cluster_size must be ≥ 2".into()));
        }
        if self.min_samples < 1 {
            return Err(ClusterError::InvalidParams("min_samples must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MstEdge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpanningTree {
    pub n_points: usize,
    /// Sorted by `(weight, a, b)` with `a < b`.
    pub edges: Vec<MstEdge>,
}

impl SpanningTree {
    pub fn total_weight(&self) -> f64 {
        self.edges.iter().map(|e| e.weight).sum()
    }
}

/// Per-point cluster labels; `NOISE` for unassigned points.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterLabels {
    pub labels: Vec<i32>,
    pub n_clusters: usize,
}

impl ClusterLabels {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == cluster as i32)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn noise(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == NOISE)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Distance from each point to its `k`-th nearest other point.
pub fn core_distances(points: &[Point3], k: usize) -> Result<Vec<f64>, ClusterError> {
    let n = points.len();
    if k == 0 || k >= n {
        return Err(ClusterError::TooFewPoints { k, points: n });
    }
    Ok(points
        .par_iter()
        .enumerate()
        .map_init(
            || Vec::with_capacity(n - 1),
            |dists, (i, p)| {
                dists.clear();
                dists.extend(
                    points
                        .iter()
                        .enumerate()
                        .filter(|(j, _)| *j != i)
                        .map(|(_, q)| (p - q).norm()),
                );
                let (_, kth, _) = dists.select_nth_unstable_by(k - 1, f64::total_cmp);
                *kth
            },
        )
        .collect())
}

#[inline]
fn mutual_reachability(points: &[Point3], core: &[f64], i: usize, j: usize) -> f64 {
    (points[i] - points[j]).norm().max(core[i]).max(core[j])
}

/// Prim's algorithm on the complete mutual-reachability graph.
pub fn mutual_reachability_mst(points: &[Point3], core: &[f64]) -> Result<SpanningTree, ClusterError> {
    let n = points.len();
    if core.len() != n {
        return Err(ClusterError::LengthMismatch {
            core: core.len(),
            points: n,
        });
    }
    let mut edges = Vec::with_capacity(n.saturating_sub(1));
    if n >= 2 {
        let mut in_tree = vec![false; n];
        let mut best = vec![f64::INFINITY; n];
        let mut parent = vec![0usize; n];
        let mut current = 0usize;
        in_tree[0] = true;
        for _ in 1..n {
            let mut next = usize::MAX;
            let mut next_w = f64::INFINITY;
            for j in 0..n {
                if in_tree[j] {
                    continue;
                }
                let w = mutual_reachability(points, core, current, j);
                if w < best[j] || (w == best[j] && current < parent[j]) {
                    best[j] = w;
                    parent[j] = current;
                }
                if best[j] < next_w || next == usize::MAX {
                    next_w = best[j];
                    next = j;
                }
            }
            in_tree[next] = true;
            let (a, b) = (parent[next].min(next), parent[next].max(next));
            edges.push(MstEdge { a, b, weight: next_w });
            current = next;
        }
    }
    sort_edges(&mut edges);
    Ok(SpanningTree { n_points: n, edges })
}

fn sort_edges(edges: &mut [MstEdge]) {
    edges.sort_by(|x, y| x.weight.total_cmp(&y.weight).then(x.a.cmp(&y.a)).then(x.b.cmp(&y.b)));
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }
}

/// Internal node of the single-linkage dendrogram.
#[derive(Debug, Clone, Copy)]
struct Merge {
    left: usize,
    right: usize,
    distance: f64,
    size: usize,
}

fn single_linkage(tree: &SpanningTree) -> Vec<Merge> {
    let n = tree.n_points;
    let mut edges = tree.edges.clone();
    sort_edges(&mut edges);
    // Node ids: 0..n are points, n.. are merges. `node_of[root]` maps a
    // union-find root to its current dendrogram node.
    let mut uf = UnionFind::new(n);
    let mut node_of: Vec<usize> = (0..n).collect();
    let mut size_of = vec![1usize; n];
    let mut merges = Vec::with_capacity(edges.len());
    for e in &edges {
        let ra = uf.find(e.a);
        let rb = uf.find(e.b);
        if ra == rb {
            continue;
        }
        let size = size_of[ra] + size_of[rb];
        merges.push(Merge {
            left: node_of[ra],
            right: node_of[rb],
            distance: e.weight,
            size,
        });
        uf.parent[rb] = ra;
        size_of[ra] = size;
        node_of[ra] = n + merges.len() - 1;
    }
    merges
}

/// One row of the condensed tree.
#[derive(Debug, Clone, Copy)]
struct Condensed {
    parent: usize,
    child: usize,
    lambda: f64,
    size: usize,
}

fn lambda_of(distance: f64) -> f64 {
    1.0 / distance.max(1e-12)
}

/// Condensed tree with cluster ids starting at `n_points` (the root).
fn condense(n: usize, merges: &[Merge], min_cluster_size: usize) -> Vec<Condensed> {
    let mut rows = Vec::new();
    if merges.is_empty() {
        return rows;
    }
    let node_size = |node: usize| if node < n { 1 } else { merges[node - n].size };
    let root = n + merges.len() - 1;
    let mut relabel = vec![0usize; n + merges.len()];
    relabel[root] = n;
    let mut next_label = n + 1;

    let leaves_of = |node: usize, out: &mut Vec<usize>| {
        let mut stack = vec![node];
        while let Some(x) = stack.pop() {
            if x < n {
                out.push(x);
            } else {
                let m = merges[x - n];
                stack.push(m.right);
                stack.push(m.left);
            }
        }
    };

    // Depth-first over internal nodes that still belong to some cluster.
    let mut stack = vec![root];
    let mut fallen = Vec::new();
    while let Some(node) = stack.pop() {
        let m = merges[node - n];
        let lambda = lambda_of(m.distance);
        let parent = relabel[node];
        let (l, r) = (m.left, m.right);
        let (ls, rs) = (node_size(l), node_size(r));
        let big_l = ls >= min_cluster_size;
        let big_r = rs >= min_cluster_size;
        let mut emit_fall = |child: usize, rows: &mut Vec<Condensed>| {
            fallen.clear();
            leaves_of(child, &mut fallen);
            fallen.sort_unstable();
            for &p in fallen.iter() {
                rows.push(Condensed {
                    parent,
                    child: p,
                    lambda,
                    size: 1,
                });
            }
        };
        match (big_l, big_r) {
            (true, true) => {
                for (child, size) in [(l, ls), (r, rs)] {
                    relabel[child] = next_label;
                    rows.push(Condensed {
                        parent,
                        child: next_label,
                        lambda,
                        size,
                    });
                    next_label += 1;
                }
                // Visit the left child first.
                for child in [r, l] {
                    if child >= n {
                        stack.push(child);
                    }
                }
            }
            (false, false) => {
                emit_fall(l, &mut rows);
                emit_fall(r, &mut rows);
            }
            (true, false) => {
                emit_fall(r, &mut rows);
                relabel[l] = parent;
                if l >= n {
                    stack.push(l);
                }
            }
            (false, true) => {
                emit_fall(l, &mut rows);
                relabel[r] = parent;
                if r >= n {
                    stack.push(r);
                }
            }
        }
    }
    rows
}

/// Selected condensed-tree clusters, by condensed id.
fn select_clusters(n: usize, rows: &[Condensed], params: &ClusterParams) -> Vec<usize> {
    let count = 1 + rows.iter().filter(|r| r.size > 1).count();
    let mut birth = vec![0.0f64; count];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); count];
    for r in rows.iter().filter(|r| r.size > 1) {
        birth[r.child - n] = r.lambda;
        children[r.parent - n].push(r.child - n);
    }
    let mut stability = vec![0.0f64; count];
    for r in rows {
        let c = r.parent - n;
        stability[c] += (r.lambda - birth[c]) * r.size as f64;
    }

    let root_ok = params.allow_single_cluster;
    let mut selected = vec![false; count];
    match params.selection {
        ClusterSelection::ExcessOfMass => {
            // Children carry larger ids than parents, so a reverse sweep is bottom-up.
            let mut best = stability.clone();
            for c in (0..count).rev() {
                if c == 0 && !root_ok {
                    break;
                }
                let child_sum: f64 = children[c].iter().map(|&k| best[k]).sum();
                if !children[c].is_empty() && child_sum > stability[c] {
                    best[c] = child_sum;
                } else {
                    selected[c] = true;
                    let mut stack = children[c].clone();
                    while let Some(k) = stack.pop() {
                        selected[k] = false;
                        stack.extend(children[k].iter().copied());
                    }
                }
            }
        }
        ClusterSelection::Leaf => {
            for c in 0..count {
                if children[c].is_empty() && (c != 0 || root_ok) {
                    selected[c] = true;
                }
            }
        }
    }
    if !root_ok {
        selected[0] = false;
    }
    (0..count).filter(|&c| selected[c]).map(|c| c + n).collect()
}

/// Flat clusters from the mutual-reachability MST.
pub fn extract_clusters(tree: &SpanningTree, params: &ClusterParams) -> Result<ClusterLabels, ClusterError> {
    params.validate()?;
    let n = tree.n_points;
    let mut labels = vec![NOISE; n];
    if n < params.min_cluster_size || n < 2 {
        return Ok(ClusterLabels { labels, n_clusters: 0 });
    }
    let merges = single_linkage(tree);
    if merges.len() != n - 1 {
        return Err(ClusterError::NotSpanning(n));
    }
    let rows = condense(n, &merges, params.min_cluster_size);
    let selected = select_clusters(n, &rows, params);
    if selected.is_empty() {
        return Ok(ClusterLabels { labels, n_clusters: 0 });
    }

    // Map every condensed cluster to its selected ancestor (if any).
    let mut owner = vec![usize::MAX; 1 + rows.iter().filter(|r| r.size > 1).count()];
    for &s in &selected {
        owner[s - n] = s;
    }
    // Rows are emitted parent-before-child, so one forward pass propagates.
    for r in rows.iter().filter(|r| r.size > 1) {
        if owner[r.child - n] == usize::MAX {
            owner[r.child - n] = owner[r.parent - n];
        }
    }
    let mut raw = vec![usize::MAX; n];
    for r in rows.iter().filter(|r| r.size == 1) {
        raw[r.child] = owner[r.parent - n];
    }

    // Stable ids: larger clusters first, ties by smallest member index.
    let mut groups: Vec<(usize, usize, usize)> = selected
        .iter()
        .map(|&s| {
            let members = raw.iter().filter(|&&o| o == s);
            let size = members.count();
            let first = raw.iter().position(|&o| o == s).unwrap_or(usize::MAX);
            (s, size, first)
        })
        .filter(|g| g.1 > 0)
        .collect();
    groups.sort_by(|x, y| y.1.cmp(&x.1).then(x.2.cmp(&y.2)));
    for (id, &(s, _, _)) in groups.iter().enumerate() {
        for (p, o) in raw.iter().enumerate() {
            if *o == s {
                labels[p] = id as i32;
            }
        }
    }
    Ok(ClusterLabels {
        labels,
        n_clusters: groups.len(),
    })
}

/// Full HDBSCAN: core distances, MST, extraction. Inputs too small for the
/// core distance come back as all noise.
pub fn hdbscan(points: &[Point3], params: &ClusterParams) -> Result<ClusterLabels, ClusterError> {
    params.validate()?;
    if points.len() <= params.min_samples || points.len() < params.min_cluster_size {
        return Ok(ClusterLabels {
            labels: vec![NOISE; points.len()],
            n_clusters: 0,
        });
    }
    let core = core_distances(points, params.min_samples)?;
    let tree = mutual_reachability_mst(points, &core)?;
    extract_clusters(&tree, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn brute_core(points: &[Point3], k: usize) -> Vec<f64> {
        points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut d: Vec<f64> = points
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, q)| (p - q).norm())
                    .collect();
                d.sort_by(f64::total_cmp);
                d[k - 1]
            })
            .collect()
    }

    #[test]
    fn core_distance_collinear() {
        let pts: Vec<_> = (0..3).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        assert_eq!(core_distances(&pts, 1).unwrap(), vec![1.0, 1.0, 1.0]);
        assert_eq!(core_distances(&pts, 2).unwrap(), vec![2.0, 1.0, 2.0]);
        assert!(matches!(
            core_distances(&pts, 3),
            Err(ClusterError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn core_distance_matches_sorted_pairwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<_> = (0..50)
            .map(|_| Point3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        assert_eq!(core_distances(&pts, 5).unwrap(), brute_core(&pts, 5));
    }

    #[test]
    fn two_point_mst() {
        let pts = [Point3::origin(), Point3::new(0.3, 0.0, 0.0)];
        let tree = mutual_reachability_mst(&pts, &[0.5, 0.1]).unwrap();
        assert_eq!(
            tree.edges,
            vec![MstEdge {
                a: 0,
                b: 1,
                weight: 0.5
            }]
        );
    }

    #[test]
    fn two_triads_have_one_bridge_edge() {
        let mut pts = Vec::new();
        for base in [0.0, 5.0] {
            for (dx, dy) in [(0.0, 0.0), (0.1, 0.0), (0.0, 0.1)] {
                pts.push(Point3::new(base + dx, dy, 0.0));
            }
        }
        let core = core_distances(&pts, 1).unwrap();
        let tree = mutual_reachability_mst(&pts, &core).unwrap();
        assert_eq!(tree.edges.len(), 5);
        let crossing = tree.edges.iter().filter(|e| (e.a < 3) != (e.b < 3)).count();
        assert_eq!(crossing, 1);
    }

    fn blobs(centers: &[[f64; 3]], per: usize, sigma: f64, seed: u64) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma).unwrap();
        let mut pts = Vec::new();
        for c in centers {
            for _ in 0..per {
                pts.push(Point3::new(
                    c[0] + normal.sample(&mut rng),
                    c[1] + normal.sample(&mut rng),
                    c[2] + normal.sample(&mut rng),
                ));
            }
        }
        pts
    }

    #[test]
    fn two_separated_blobs() {
        let pts = blobs(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], 100, 0.01, 5);
        let params = ClusterParams {
            min_cluster_size: 10,
            ..Default::default()
        };
        let labels = hdbscan(&pts, &params).unwrap();
        assert_eq!(labels.n_clusters, 2);
        assert!(labels.noise().is_empty());
        assert!(labels.labels[..100].iter().all(|&l| l == labels.labels[0]));
        assert!(labels.labels[100..].iter().all(|&l| l == labels.labels[100]));
        assert_ne!(labels.labels[0], labels.labels[100]);
    }

    #[test]
    fn too_few_points_are_noise() {
        let pts = blobs(&[[0.0, 0.0, 0.0]], 15, 0.5, 1);
        let labels = hdbscan(&pts, &ClusterParams::default()).unwrap();
        assert_eq!(labels.n_clusters, 0);
        assert!(labels.labels.iter().all(|&l| l == NOISE));
    }

    #[test]
    fn single_object_forms_one_cluster() {
        let pts = blobs(&[[0.2, 0.7, 0.4]], 200, 0.05, 9);
        let labels = hdbscan(&pts, &ClusterParams::default()).unwrap();
        assert_eq!(labels.n_clusters, 1);
    }

    #[test]
    fn leaf_selection_picks_leaves() {
        // Two pairs of blobs: EOM keeps four leaves or two parents depending on
        // stability, leaf selection always keeps the four leaves.
        let pts = blobs(
            &[[0.0, 0.0, 0.0], [0.2, 0.0, 0.0], [3.0, 0.0, 0.0], [3.2, 0.0, 0.0]],
            40,
            0.01,
            4,
        );
        let params = ClusterParams {
            min_cluster_size: 10,
            selection: ClusterSelection::Leaf,
            ..Default::default()
        };
        assert_eq!(hdbscan(&pts, &params).unwrap().n_clusters, 4);
    }

    #[test]
    fn ids_ordered_by_size() {
        let mut pts = blobs(&[[5.0, 0.0, 0.0]], 30, 0.01, 2);
        pts.extend(blobs(&[[0.0, 0.0, 0.0]], 80, 0.01, 3));
        let params = ClusterParams {
            min_cluster_size: 10,
            ..Default::default()
        };
        let labels = hdbscan(&pts, &params).unwrap();
        assert_eq!(labels.labels[0], 1);
        assert_eq!(labels.labels[30], 0);
    }

    #[test]
    fn invalid_params_rejected() {
        let p = ClusterParams {
            min_cluster_size: 1,
            ..Default::default()
        };
        assert!(hdbscan(&[], &p).is_err());
    }

    fn canonical(labels: &[i32]) -> Vec<i32> {
        let mut map = std::collections::HashMap::new();
        labels
            .iter()
            .map(|&l| {
                if l == NOISE {
                    NOISE
                } else {
                    let next = map.len() as i32;
                    *map.entry(l).or_insert(next)
                }
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn clusters_respect_min_size_and_rigid_invariance(
            seed in 0u64..1000,
            yaw in -3.0f64..3.0,
            shift in prop::array::uniform3(-5.0f64..5.0),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let centers: Vec<[f64; 3]> = (0..3)
                .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect();
            let pts = blobs(&centers, 30, 0.05, seed);
            let params = ClusterParams { min_cluster_size: 8, ..Default::default() };
            let labels = hdbscan(&pts, &params).unwrap();
            for c in 0..labels.n_clusters {
                prop_assert!(labels.members(c).len() >= params.min_cluster_size);
            }
            let g = crate::geometry::RigidTransform::from_yaw(yaw, crate::geometry::Vec3::from(shift));
            let moved: Vec<_> = pts.iter().map(|p| g.transform_point(p)).collect();
            let moved_labels = hdbscan(&moved, &params).unwrap();
            prop_assert_eq!(canonical(&labels.labels), canonical(&moved_labels.labels));
            prop_assert_eq!(hdbscan(&pts, &params).unwrap(), labels);
        }
    }
}
