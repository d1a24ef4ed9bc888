//! Synthetic Q/K/V generators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::numerics::Matrix;

/// Independent standard-normal entries.
pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Matrix::from_vec_unchecked(rows, cols, data)
}

/// Gaussian random walk over a `grid_rows × grid_cols` lattice, one
/// `dim`-vector per site, emitted in row-major site order. Each site is the
/// mean of its upper and left neighbours plus `step`-scaled noise, so values
/// vary smoothly in both grid directions. Every feature column is
/// standardised to zero mean and unit variance.
pub fn random_walk_field(grid_rows: usize, grid_cols: usize, dim: usize, step: f64, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = grid_rows * grid_cols;
    let mut data = vec![0.0; n * dim];
    for r in 0..grid_rows {
        for c in 0..grid_cols {
            let t = r * grid_cols + c;
            for f in 0..dim {
                let up = (r > 0).then(|| data[(t - grid_cols) * dim + f]);
                let left = (c > 0).then(|| data[(t - 1) * dim + f]);
                let base = match (up, left) {
                    (Some(a), Some(b)) => 0.5 * (a + b),
                    (Some(a), None) | (None, Some(a)) => a,
                    (None, None) => 0.0,
                };
                let z: f64 = rng.sample(StandardNormal);
                data[t * dim + f] = base + step * z;
            }
        }
    }
    standardize_columns(&mut data, n, dim);
    Matrix::from_vec_unchecked(n, dim, data)
}

fn standardize_columns(data: &mut [f64], n: usize, dim: usize) {
    if n < 2 {
        return;
    }
    for f in 0..dim {
        let mean = (0..n).map(|t| data[t * dim + f]).sum::<f64>() / n as f64;
        let var = (0..n).map(|t| (data[t * dim + f] - mean).powi(2)).sum::<f64>() / n as f64;
        let inv = if var > 0.0 { var.sqrt().recip() } else { 1.0 };
        for t in 0..n {
            data[t * dim + f] = (data[t * dim + f] - mean) * inv;
        }
    }
}

/// Locally-correlated attention inputs on a 2D grid.
///
/// Keys are a smooth random-walk field; queries are the same field plus
/// independent noise of relative size `query_noise`, so each query attends
/// mostly to spatially nearby keys; values are an independent smooth field.
/// `sharpness` scales the queries and hence the peakiness of attention.
#[derive(Debug, Clone, Copy)]
pub struct LocalQkv {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub dim: usize,
    pub step: f64,
    pub query_noise: f64,
    pub sharpness: f64,
}

impl LocalQkv {
    pub fn new(grid_rows: usize, grid_cols: usize, dim: usize) -> Self {
        Self {
            grid_rows,
            grid_cols,
            dim,
            step: 0.3,
            query_noise: 0.5,
            sharpness: 1.0,
        }
    }

    pub fn generate(&self, seed: u64) -> (Matrix, Matrix, Matrix) {
        let mut seeds = ChaCha8Rng::seed_from_u64(seed);
        let (sk, sn, sv): (u64, u64, u64) = (seeds.random(), seeds.random(), seeds.random());
        let k = random_walk_field(self.grid_rows, self.grid_cols, self.dim, self.step, sk);
        let noise = gaussian(k.rows(), self.dim, sn);
        let q_data = k
            .as_slice()
            .iter()
            .zip(noise.as_slice())
            .map(|(a, z)| self.sharpness * (a + self.query_noise * z))
            .collect();
        let q = Matrix::from_vec_unchecked(k.rows(), self.dim, q_data);
        let v = random_walk_field(self.grid_rows, self.grid_cols, self.dim, self.step, sv);
        (q, k, v)
    }
}

/// Repeats every row `factor` times in place: rows `a, b` become
/// `a, a, b, b` for `factor == 2`.
pub fn duplicate_rows(x: &Matrix, factor: usize) -> Matrix {
    let mut data = Vec::with_capacity(x.rows() * factor * x.cols());
    for r in x.row_iter() {
        for _ in 0..factor {
            data.extend_from_slice(r);
        }
    }
    Matrix::from_vec_unchecked(x.rows() * factor, x.cols(), data)
}
