//! Isomap: symmetric k-NN graph, geodesic distances by repeated
//! Dijkstra, then classical metric MDS of the geodesic matrix.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::analysis::spectral::{top_eigenpairs, SymMat};
use crate::error::{Error, Result};

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Undirected neighbor lists; an edge exists when either endpoint ranks
/// the other among its k nearest.
pub struct Graph {
    pub adj: Vec<Vec<(usize, f64)>>,
}

impl Graph {
    pub fn len(&self) -> usize {
        self.adj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adj.is_empty()
    }
}

pub fn knn_graph(points: &[Vec<f64>], k: usize) -> Result<Graph> {
    let n = points.len();
    if n <= k {
        return Err(Error::Analysis(format!("k-NN graph needs more than k={} points, got {}", k, n)));
    }
    if k == 0 {
        return Err(Error::Analysis("k must be positive".into()));
    }
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for i in 0..n {
        let mut dists: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (euclidean(&points[i], &points[j]), j))
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for &(d, j) in dists.iter().take(k) {
            if !adj[i].iter().any(|&(t, _)| t == j) {
                adj[i].push((j, d));
            }
            if !adj[j].iter().any(|&(t, _)| t == i) {
                adj[j].push((i, d));
            }
        }
    }
    for list in adj.iter_mut() {
        list.sort_by(|a, b| a.0.cmp(&b.0));
    }
    Ok(Graph { adj })
}

/// Indices of the largest connected component (ties to the one holding
/// the smallest index) and how many points fall outside it.
pub fn largest_component(g: &Graph) -> (Vec<usize>, usize) {
    let n = g.len();
    let mut comp = vec![usize::MAX; n];
    let mut sizes = Vec::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let mut stack = vec![start];
        let mut size = 0usize;
        comp[start] = id;
        while let Some(u) = stack.pop() {
            size += 1;
            for &(v, _) in &g.adj[u] {
                if comp[v] == usize::MAX {
                    comp[v] = id;
                    stack.push(v);
                }
            }
        }
        sizes.push(size);
    }
    let best = sizes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let kept: Vec<usize> = (0..n).filter(|&i| comp[i] == best).collect();
    let dropped = n - kept.len();
    (kept, dropped)
}

#[derive(PartialEq)]
struct HeapItem {
    dist: f64,
    node: usize,
}

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on distance via reversed comparison
        other
            .dist
            .partial_cmp(&self.dist)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Single-source shortest paths over nonnegative edge weights.
pub fn dijkstra(g: &Graph, src: usize) -> Vec<f64> {
    let n = g.len();
    let mut dist = vec![f64::INFINITY; n];
    dist[src] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(HeapItem { dist: 0.0, node: src });
    while let Some(HeapItem { dist: d, node: u }) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &(v, w) in &g.adj[u] {
            let nd = d + w;
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(HeapItem { dist: nd, node: v });
            }
        }
    }
    dist
}

/// Geodesic distance matrix over `nodes`, which must lie in one
/// connected component.
pub fn geodesic_matrix(g: &Graph, nodes: &[usize]) -> Result<SymMat> {
    let m = nodes.len();
    let mut rows = vec![vec![0.0; m]; m];
    for (row, &src) in nodes.iter().enumerate() {
        let dist = dijkstra(g, src);
        for (col, &node) in nodes.iter().enumerate() {
            let d = dist[node];
            if !d.is_finite() {
                return Err(Error::Analysis(format!("nodes {} and {} are disconnected", src, node)));
            }
            rows[row][col] = d;
        }
    }
    SymMat::from_rows(&rows)
}

/// B = −½ J D² J with J the centering projector.
pub fn double_center(d: &SymMat) -> SymMat {
    let n = d.n();
    let mut sq = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let v = d.get(i, j);
            sq[i][j] = v * v;
        }
    }
    let row_mean: Vec<f64> = sq.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
    let grand = row_mean.iter().sum::<f64>() / n as f64;
    let mut b = SymMat::zeros(n);
    for i in 0..n {
        for j in i..n {
            b.set(i, j, -0.5 * (sq[i][j] - row_mean[i] - row_mean[j] + grand));
        }
    }
    b
}

/// Classical metric MDS: top eigenpairs of the centered Gram matrix,
/// coordinates scaled by square-rooted eigenvalues.
pub fn classical_mds(dist: &SymMat, out_dim: usize) -> Result<Vec<Vec<f64>>> {
    let n = dist.n();
    if n == 0 {
        return Err(Error::Analysis("cannot project an empty point set".into()));
    }
    if out_dim == 0 || out_dim > n {
        return Err(Error::Analysis(format!("out_dim {} not in 1..={}", out_dim, n)));
    }
    let b = double_center(dist);
    let pairs = top_eigenpairs(&b, out_dim)?;
    let mut coords = vec![vec![0.0; out_dim]; n];
    for (m, p) in pairs.iter().enumerate() {
        let s = p.value.max(0.0).sqrt();
        for i in 0..n {
            coords[i][m] = p.vector[i] * s;
        }
    }
    Ok(coords)
}

pub struct IsomapOutput {
    /// Original indices that survived the component filter, ascending.
    pub kept: Vec<usize>,
    pub dropped: usize,
    /// One row per kept point.
    pub coords: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
}

pub fn isomap(points: &[Vec<f64>], k: usize, out_dim: usize) -> Result<IsomapOutput> {
    let g = knn_graph(points, k)?;
    let (kept, dropped) = largest_component(&g);
    let dist = geodesic_matrix(&g, &kept)?;
    let b = double_center(&dist);
    let pairs = top_eigenpairs(&b, out_dim.min(kept.len()))?;
    let mut coords = vec![vec![0.0; pairs.len()]; kept.len()];
    for (m, p) in pairs.iter().enumerate() {
        let s = p.value.max(0.0).sqrt();
        for i in 0..kept.len() {
            coords[i][m] = p.vector[i] * s;
        }
    }
    Ok(IsomapOutput { kept, dropped, coords, eigenvalues: pairs.iter().map(|p| p.value).collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::spectral::tests::jacobi_eigen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairwise(coords: &[Vec<f64>]) -> Vec<f64> {
        let n = coords.len();
        let mut out = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                out.push(euclidean(&coords[i], &coords[j]));
            }
        }
        out
    }

    /// Fully independent MDS: Jacobi eigendecomposition of the centered
    /// Gram matrix.
    fn mds_jacobi(dist: &SymMat, out_dim: usize) -> Vec<Vec<f64>> {
        let b = double_center(dist);
        let (vals, vecs) = jacobi_eigen(&b);
        let n = dist.n();
        let mut coords = vec![vec![0.0; out_dim]; n];
        for m in 0..out_dim {
            let s = vals[m].max(0.0).sqrt();
            for i in 0..n {
                coords[i][m] = vecs[m][i] * s;
            }
        }
        coords
    }

    fn cloud(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect()
    }

    #[test]
    fn knn_graph_is_symmetric_and_bounded() {
        let points = cloud(40, 3, 5);
        let g = knn_graph(&points, 6).unwrap();
        for (i, list) in g.adj.iter().enumerate() {
            for &(j, w) in list {
                assert!(g.adj[j].iter().any(|&(t, wb)| t == i && wb == w));
                assert!((w - euclidean(&points[i], &points[j])).abs() < 1e-15);
            }
            assert!(list.len() >= 6);
        }
    }

    #[test]
    fn knn_needs_enough_points() {
        let points = cloud(5, 2, 1);
        assert!(knn_graph(&points, 5).is_err());
        assert!(knn_graph(&points, 4).is_ok());
    }

    #[test]
    fn disconnected_graph_keeps_largest_component() {
        // two clusters far apart, k small enough to isolate them
        let mut points = cloud(12, 2, 9);
        for p in points.iter_mut().take(5) {
            p[0] += 100.0;
        }
        let g = knn_graph(&points, 3).unwrap();
        let (kept, dropped) = largest_component(&g);
        assert_eq!(kept.len(), 7);
        assert_eq!(dropped, 5);
        assert!(kept.iter().all(|&i| i >= 5));
    }

    #[test]
    fn dijkstra_on_a_path_graph_sums_edges() {
        // chain 0-1-2-3 with unit-ish spacing
        let points: Vec<Vec<f64>> =
            (0..4).map(|i| vec![i as f64 * 1.5, 0.0]).collect();
        let g = knn_graph(&points, 1).unwrap();
        let d = dijkstra(&g, 0);
        assert!((d[3] - 4.5).abs() < 1e-12);
        assert!((d[1] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn complete_graph_isomap_equals_classical_mds() {
        let points = cloud(40, 5, 13);
        let out = isomap(&points, 39, 3).unwrap();
        assert_eq!(out.dropped, 0);

        let n = points.len();
        let mut dist = SymMat::zeros(n);
        for i in 0..n {
            for j in (i + 1)..n {
                dist.set(i, j, euclidean(&points[i], &points[j]));
            }
        }
        let oracle = mds_jacobi(&dist, 3);
        let da = pairwise(&out.coords);
        let db = pairwise(&oracle);
        let worst = da
            .iter()
            .zip(&db)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(worst <= 1e-6, "max distance gap {}", worst);
    }

    #[test]
    fn collinear_points_collapse_to_one_axis() {
        let points: Vec<Vec<f64>> =
            (0..12).map(|i| vec![0.7 * i as f64, 0.0, 0.0]).collect();
        let out = isomap(&points, 11, 3).unwrap();
        let e = &out.eigenvalues;
        assert!(e[0] > 0.0);
        assert!(e[1].abs() <= 1e-8 * e[0], "λ2/λ1 = {}", e[1] / e[0]);
        assert!(e[2].abs() <= 1e-8 * e[0]);
        // first coordinate reproduces the ordering (up to mirror)
        let xs: Vec<f64> = out.coords.iter().map(|c| c[0]).collect();
        let inc = xs.windows(2).all(|w| w[1] > w[0]);
        let dec = xs.windows(2).all(|w| w[1] < w[0]);
        assert!(inc || dec, "not monotone: {:?}", xs);
    }

    fn spearman(a: &[f64], b: &[f64]) -> f64 {
        fn ranks(v: &[f64]) -> Vec<f64> {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap());
            let mut r = vec![0.0; v.len()];
            let mut i = 0;
            while i < idx.len() {
                let mut j = i;
                while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                    j += 1;
                }
                let mean = (i + j) as f64 / 2.0;
                for &ii in &idx[i..=j] {
                    r[ii] = mean;
                }
                i = j + 1;
            }
            r
        }
        let (ra, rb) = (ranks(a), ranks(b));
        let n = a.len() as f64;
        let ma = ra.iter().sum::<f64>() / n;
        let mb = rb.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for (x, y) in ra.iter().zip(&rb) {
            cov += (x - ma) * (y - mb);
            va += (x - ma) * (x - ma);
            vb += (y - mb) * (y - mb);
        }
        cov / (va.sqrt() * vb.sqrt())
    }

    #[test]
    fn geodesics_track_the_swiss_roll_better_than_euclidean() {
        // strip (t, w) rolled into 3-D; intrinsic metric uses arc length
        fn arc(t: f64) -> f64 {
            0.5 * (t * (1.0 + t * t).sqrt() + t.asinh())
        }
        let mut points = Vec::new();
        let mut intrinsic = Vec::new();
        let (t0, t1) = (1.5 * std::f64::consts::PI, 4.5 * std::f64::consts::PI);
        let (rows, cols) = (40, 8);
        for r in 0..rows {
            let t = t0 + (t1 - t0) * r as f64 / (rows - 1) as f64;
            for c in 0..cols {
                let w = 6.0 * c as f64 / (cols - 1) as f64;
                points.push(vec![t * t.cos(), w, t * t.sin()]);
                intrinsic.push(vec![arc(t), w]);
            }
        }
        let g = knn_graph(&points, 8).unwrap();
        let (kept, dropped) = largest_component(&g);
        assert_eq!(dropped, 0);
        let geo = geodesic_matrix(&g, &kept).unwrap();

        let mut gd = Vec::new();
        let mut ed = Vec::new();
        let mut td = Vec::new();
        for i in 0..points.len() {
            for j in (i + 1)..points.len() {
                gd.push(geo.get(i, j));
                ed.push(euclidean(&points[i], &points[j]));
                td.push(euclidean(&intrinsic[i], &intrinsic[j]));
            }
        }
        let rho_geo = spearman(&gd, &td);
        let rho_euc = spearman(&ed, &td);
        assert!(
            rho_geo > rho_euc,
            "geodesic ρ {} should beat euclidean ρ {}",
            rho_geo,
            rho_euc
        );
        assert!(rho_geo > 0.99, "geodesic ρ only {}", rho_geo);
    }

    #[test]
    fn isomap_rejects_too_few_points() {
        let points = cloud(10, 2, 2);
        assert!(isomap(&points, 10, 3).is_err());
        assert!(isomap(&points, 15, 3).is_err());
    }
}
