//! Serial dense oracles shared by the integration tests. Written with plain
//! loops and no blocking so they share no code with the library kernels.
#![allow(dead_code)]

use distgp::dense::Matrix;
use distgp::rng::StreamFamily;

pub fn normals(seed: u64, count: usize) -> Vec<f64> {
    StreamFamily::new(seed).stream(1).standard_normals(count)
}

pub fn random_matrix(seed: u64, rows: usize, cols: usize) -> Matrix {
    Matrix::from_col_major(rows, cols, normals(seed, rows * cols))
}

/// `B B^T + n I` for a standard normal `B`.
pub fn random_spd(seed: u64, n: usize) -> Matrix {
    let b = random_matrix(seed, n, n);
    let mut a = b.matmul(&b.transpose());
    for i in 0..n {
        a.as_mut_slice()[i + i * n] += n as f64;
    }
    a
}

/// Random lower-triangular matrix with diagonal in `[1, 2)`.
pub fn random_lower(seed: u64, n: usize) -> Matrix {
    let z = normals(seed, n * n);
    Matrix::from_fn(n, n, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Less => 0.0,
        std::cmp::Ordering::Equal => 1.0 + z[i + j * n].abs().min(0.999),
        std::cmp::Ordering::Greater => z[i + j * n],
    })
}

pub fn get(m: &Matrix, i: usize, j: usize) -> f64 {
    m.as_slice()[i + j * m.rows()]
}

pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows());
    Matrix::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|k| get(a, i, k) * get(b, k, j)).sum())
}

pub fn naive_cholesky(c: &Matrix) -> Matrix {
    let n = c.rows();
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = get(c, j, j);
        for k in 0..j {
            d -= l[j + k * n] * l[j + k * n];
        }
        assert!(d > 0.0, "oracle: matrix not positive definite");
        let d = d.sqrt();
        l[j + j * n] = d;
        for i in j + 1..n {
            let mut s = get(c, i, j);
            for k in 0..j {
                s -= l[i + k * n] * l[j + k * n];
            }
            l[i + j * n] = s / d;
        }
    }
    Matrix::from_col_major(n, n, l)
}

/// Solves `L X = B` column by column.
pub fn naive_forward(l: &Matrix, b: &Matrix) -> Matrix {
    let n = l.rows();
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in 0..n {
            let mut s = get(&x, i, c);
            for k in 0..i {
                s -= get(l, i, k) * get(&x, k, c);
            }
            x.as_mut_slice()[i + c * n] = s / get(l, i, i);
        }
    }
    x
}

/// Solves `L^T X = B` column by column.
pub fn naive_back(l: &Matrix, b: &Matrix) -> Matrix {
    let n = l.rows();
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in (0..n).rev() {
            let mut s = get(&x, i, c);
            for k in i + 1..n {
                s -= get(l, k, i) * get(&x, k, c);
            }
            x.as_mut_slice()[i + c * n] = s / get(l, i, i);
        }
    }
    x
}

/// `||a - b||_F / ||b||_F`, or the absolute difference when `b` is zero.
pub fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()));
    let num: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den = b.frobenius_norm();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

pub fn rel_err_vec(a: &[f64], b: &[f64]) -> f64 {
    rel_err(&Matrix::column_vector(a), &Matrix::column_vector(b))
}

/// Exponential covariance between two sets of scalar locations.
pub fn exp_cov(x: &[f64], y: &[f64], sigma2: f64, rho: f64) -> Matrix {
    Matrix::from_fn(x.len(), y.len(), |i, j| sigma2 * (-(x[i] - y[j]).abs() / rho).exp())
}

pub fn lower_of(m: &Matrix) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| if i >= j { get(m, i, j) } else { 0.0 })
}

/// Serial kriging with an exponential covariance plus nugget on 1-D inputs
/// and a constant mean.
pub struct SerialKriging {
    pub loglik: f64,
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    pub sigma: Matrix,
}

pub fn serial_kriging(x: &[f64], y: &[f64], xp: &[f64], theta: &[f64], mu: f64) -> SerialKriging {
    let n = x.len();
    let mut c = exp_cov(x, x, theta[0], theta[1]);
    for i in 0..n {
        c.as_mut_slice()[i + i * n] += theta[2];
    }
    let l = naive_cholesky(&c);
    let r: Vec<f64> = y.iter().map(|v| v - mu).collect();
    let u = naive_forward(&l, &Matrix::column_vector(&r));
    let ss: f64 = u.as_slice().iter().map(|v| v * v).sum();
    let logdet: f64 = (0..n).map(|i| get(&l, i, i).ln()).sum();
    let loglik = -0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln() - logdet - 0.5 * ss;
    if xp.is_empty() {
        return SerialKriging { loglik, mean: vec![], se: vec![], sigma: Matrix::zeros(0, 0) };
    }
    let cs = exp_cov(x, xp, theta[0], theta[1]);
    let cpp = exp_cov(xp, xp, theta[0], theta[1]);
    let v = naive_forward(&l, &cs);
    let vt = v.transpose();
    let mean: Vec<f64> = naive_matmul(&vt, &u).as_slice().iter().map(|w| w + mu).collect();
    let vv = naive_matmul(&vt, &v);
    let m = xp.len();
    let sigma = Matrix::from_fn(m, m, |i, j| if i >= j { get(&cpp, i, j) - get(&vv, i, j) } else { 0.0 });
    let se = (0..m).map(|i| get(&sigma, i, i).max(0.0).sqrt()).collect();
    SerialKriging { loglik, mean, se, sigma }
}

/// Draws a realization of the exponential-plus-nugget process at `x`.
pub fn synthetic_gp(seed: u64, x: &[f64], theta: &[f64], mu: f64) -> Vec<f64> {
    let n = x.len();
    let mut c = exp_cov(x, x, theta[0], theta[1]);
    for i in 0..n {
        c.as_mut_slice()[i + i * n] += theta[2];
    }
    let l = naive_cholesky(&c);
    let z = Matrix::column_vector(&normals(seed, n));
    naive_matmul(&l, &z).as_slice().iter().map(|v| v + mu).collect()
}

/// Evenly spread locations on `[0, len)` with a deterministic jitter.
pub fn locations(seed: u64, n: usize, len: f64) -> Vec<f64> {
    let u = normals(seed, n);
    (0..n).map(|i| (i as f64 + 0.5 + 0.3 * u[i].tanh()) * len / n as f64).collect()
}
