//! Dense brute-force helpers for oracle tests.

pub type Dense = Vec<Vec<f64>>;

/// Gauss-Jordan inverse with partial pivoting; also returns the determinant.
pub fn inverse(a: &Dense) -> (Dense, f64) {
    let n = a.len();
    let mut m: Dense = a
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = r.clone();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    let mut det = 1.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
        if p != c {
            m.swap(p, c);
            det = -det;
        }
        let piv = m[c][c];
        det *= piv;
        for v in m[c].iter_mut() {
            *v /= piv;
        }
        let pivot_row = m[c].clone();
        for (r, row) in m.iter_mut().enumerate() {
            if r != c {
                let f = row[c];
                for (v, pv) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
            }
        }
    }
    (m.into_iter().map(|r| r[n..].to_vec()).collect(), det)
}

pub fn matmul(a: &Dense, b: &Dense) -> Dense {
    let inner = b.len();
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| (0..inner).map(|l| row[l] * b[l][j]).sum())
                .collect()
        })
        .collect()
}

pub fn matvec(a: &Dense, v: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(v).map(|(x, y)| x * y).sum()).collect()
}

pub fn add(a: &Dense, b: &Dense) -> Dense {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

pub fn diag(v: &[f64]) -> Dense {
    (0..v.len())
        .map(|i| (0..v.len()).map(|j| if i == j { v[i] } else { 0.0 }).collect())
        .collect()
}

pub fn transpose(a: &Dense) -> Dense {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn kernel_matrix(x1: &[f64], x2: &[f64], k: impl Fn(f64, f64) -> f64) -> Dense {
    x1.iter().map(|&a| x2.iter().map(|&b| k(a, b)).collect()).collect()
}
