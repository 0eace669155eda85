//! Symmetric eigenpairs by shifted power iteration with deflation, plus
//! the PCA variance-coverage measurement built on top.
//!
//! The shift by the Frobenius norm makes the iterated matrix positive
//! semidefinite, so magnitude order equals algebraic order and deflation
//! can peel eigenvalues from the top down.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const MAX_ITERS: usize = 10_000;
const VALUE_TOL: f64 = 1e-10;
// keep well under the 1e-6·‖A‖ residual contract
const RESIDUAL_TOL: f64 = 1e-9;

/// Dense symmetric matrix, full row-major storage.
#[derive(Debug, Clone)]
pub struct SymMat {
    n: usize,
    data: Vec<f64>,
}

impl SymMat {
    pub fn zeros(n: usize) -> SymMat {
        SymMat { n, data: vec![0.0; n * n] }
    }

    /// Build from rows, symmetrizing round-off skew.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<SymMat> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Analysis("matrix rows must form a square".into()));
        }
        let mut m = SymMat::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m.data[i * n + j] = 0.5 * (rows[i][j] + rows[j][i]);
            }
        }
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
        self.data[j * self.n + i] = v;
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n];
        for i in 0..n {
            let row = &self.data[i * n..(i + 1) * n];
            out[i] = row.iter().zip(v).map(|(a, b)| a * b).sum();
        }
        out
    }

    pub fn fro_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct EigenPair {
    pub value: f64,
    pub vector: Vec<f64>,
}

/// ‖Av − λv‖₂ against the original matrix.
pub fn residual(a: &SymMat, pair: &EigenPair) -> f64 {
    let av = a.matvec(&pair.vector);
    av.iter()
        .zip(&pair.vector)
        .map(|(x, v)| (x - pair.value * v).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Incremental top-down extraction; each call to `next` peels the largest
/// remaining algebraic eigenvalue.
pub struct PowerSolver<'a> {
    a: &'a SymMat,
    shift: f64,
    found: Vec<(f64, Vec<f64>)>,
    rng: ChaCha8Rng,
}

impl<'a> PowerSolver<'a> {
    pub fn new(a: &'a SymMat) -> PowerSolver<'a> {
        PowerSolver {
            a,
            shift: a.fro_norm(),
            found: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(0x9e3779b97f4a7c15),
        }
    }

    // (A + shift·I)v with found pairs projected out
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = self.a.matvec(v);
        for (o, x) in out.iter_mut().zip(v) {
            *o += self.shift * x;
        }
        for (mu, u) in &self.found {
            let c = (mu + self.shift) * dot(u, v);
            for (o, ui) in out.iter_mut().zip(u) {
                *o -= c * ui;
            }
        }
        out
    }

    pub fn next(&mut self) -> Result<EigenPair> {
        let n = self.a.n();
        if self.found.len() >= n {
            return Err(Error::Analysis("all eigenpairs already extracted".into()));
        }
        if self.shift == 0.0 {
            // zero matrix: any orthonormal completion works
            let mut v = vec![0.0; n];
            v[self.found.len()] = 1.0;
            self.found.push((0.0, v.clone()));
            return Ok(EigenPair { value: 0.0, vector: v });
        }
        let fro = self.shift;
        let mut v: Vec<f64> = (0..n).map(|_| self.rng.random::<f64>() - 0.5).collect();
        // start orthogonal to everything found so far
        for (_, u) in &self.found {
            let c = dot(u, &v);
            for (x, ui) in v.iter_mut().zip(u) {
                *x -= c * ui;
            }
        }
        let nv = norm(&v);
        if nv == 0.0 {
            return Err(Error::Analysis("degenerate start vector".into()));
        }
        for x in v.iter_mut() {
            *x /= nv;
        }
        let mut mu_prev = f64::INFINITY;
        for _ in 0..MAX_ITERS {
            let w = self.apply(&v);
            let nw = norm(&w);
            if nw == 0.0 {
                // v lies in the null space of the deflated operator
                break;
            }
            for (x, wi) in v.iter_mut().zip(&w) {
                *x = wi / nw;
            }
            let mu = dot(&v, &self.apply(&v)) - self.shift;
            let settled = (mu - mu_prev).abs() <= VALUE_TOL;
            mu_prev = mu;
            if settled && residual(self.a, &EigenPair { value: mu, vector: v.clone() }) <= RESIDUAL_TOL * fro
            {
                break;
            }
        }
        let value = dot(&v, &self.a.matvec(&v));
        self.found.push((value, v.clone()));
        Ok(EigenPair { value, vector: v })
    }
}

/// The `k` algebraically largest eigenpairs.
pub fn top_eigenpairs(a: &SymMat, k: usize) -> Result<Vec<EigenPair>> {
    if k > a.n() {
        return Err(Error::Analysis(format!("asked for {} eigenpairs of an {}×{} matrix", k, a.n(), a.n())));
    }
    let mut solver = PowerSolver::new(a);
    (0..k).map(|_| solver.next()).collect()
}

/// Sample covariance of mean-centered points.
pub fn covariance(points: &[Vec<f64>]) -> Result<SymMat> {
    let n = points.len();
    if n < 2 {
        return Err(Error::Analysis("covariance needs at least two points".into()));
    }
    let d = points[0].len();
    if d == 0 || points.iter().any(|p| p.len() != d) {
        return Err(Error::Analysis("points must share a positive dimension".into()));
    }
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = SymMat::zeros(d);
    for p in points {
        for i in 0..d {
            let ci = p[i] - mean[i];
            for j in i..d {
                let v = cov.get(i, j) + ci * (p[j] - mean[j]);
                cov.data[i * d + j] = v;
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov.get(i, j) / denom;
            cov.set(i, j, v);
        }
    }
    Ok(cov)
}

/// Fraction of dimensions whose top principal components reach
/// `target` of the total variance.
pub fn pca_variance_coverage(points: &[Vec<f64>], target: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::Analysis(format!("coverage target {} outside [0, 1]", target)));
    }
    let cov = covariance(points)?;
    let d = cov.n();
    let total: f64 = (0..d).map(|i| cov.get(i, i)).sum();
    if total <= 0.0 {
        return Err(Error::Analysis("zero total variance".into()));
    }
    let mut solver = PowerSolver::new(&cov);
    let mut cum = 0.0;
    for k in 1..=d {
        cum += solver.next()?.value.max(0.0);
        if cum >= target * total {
            return Ok(k as f64 / d as f64);
        }
    }
    Ok(1.0)
}
