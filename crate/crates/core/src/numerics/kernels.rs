//! Forward kernels over flat row-major buffers. The tape and the plain tensor
//! helpers both call into these so there is a single arithmetic path.

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const ROPE_BASE: f64 = 10_000.0;

/// `a[n,k] · b[k,m]`
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    let (n4, m4) = (n - n % 4, m - m % 4);
    for i in (0..n4).step_by(4) {
        for j in (0..m4).step_by(4) {
            let mut acc = [[0.0; 4]; 4];
            for p in 0..k {
                let bv = &b[p * m + j..p * m + j + 4];
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + p];
                    for c in 0..4 {
                        row[c] += av * bv[c];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i + r) * m + j..(i + r) * m + j + 4].copy_from_slice(row);
            }
        }
    }
    for i in 0..n {
        let cols = if i < n4 { m4..m } else { 0..m };
        if cols.is_empty() {
            continue;
        }
        let row = &mut out[i * m + cols.start..i * m + cols.end];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * m + cols.start..p * m + cols.end];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[n,k] · b[m,k]ᵀ`
pub fn matmul_t(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut bt = vec![0.0; k * m];
    for j in 0..m {
        for p in 0..k {
            bt[p * m + j] = b[j * k + p];
        }
    }
    matmul(a, &bt, n, k, m)
}

/// `a[n,k]ᵀ · c[n,m]`, accumulated into `out[k,m]`.
pub fn t_matmul_acc(a: &[f64], c: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let crow = &c[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &cv) in orow.iter_mut().zip(crow) {
                *o += av * cv;
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Row-wise normalisation without affine terms. Returns `(xhat, inv_std)`.
pub fn normalize_rows(x: &[f64], cols: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / cols;
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[r] = is;
        for (o, v) in xhat[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
    }
    (xhat, inv_std)
}

/// Row-wise softmax restricted to `allowed` entries; disallowed entries are 0.
/// A row with no allowed entry is all zeros.
pub fn masked_softmax_rows(x: &[f64], allowed: &[bool], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..x.len() / cols {
        let span = r * cols..(r + 1) * cols;
        let (row, ok) = (&x[span.clone()], &allowed[span.clone()]);
        let max = row
            .iter()
            .zip(ok)
            .filter(|(_, &a)| a)
            .map(|(v, _)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let o = &mut out[span];
        let mut sum = 0.0;
        for j in 0..cols {
            if ok[j] {
                let e = (row[j] - max).exp();
                o[j] = e;
                sum += e;
            }
        }
        for v in o.iter_mut() {
            *v /= sum;
        }
    }
    out
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let allowed = vec![true; logits.len()];
    masked_softmax_rows(logits, &allowed, logits.len())
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|v| v - lse).collect()
}

/// Rotary position embedding applied in place to each `head_dim` block of every row.
/// `sign = 1.0` rotates forward, `-1.0` applies the inverse (transpose) rotation.
pub fn rope_in_place(x: &mut [f64], cols: usize, positions: &[usize], head_dim: usize, sign: f64) {
    let half = head_dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64))
        .collect();
    let mut rot = vec![(0.0, 0.0); half];
    for (r, &pos) in positions.iter().enumerate() {
        for (slot, f) in rot.iter_mut().zip(&freqs) {
            let (s, c) = (pos as f64 * f).sin_cos();
            *slot = (s * sign, c);
        }
        let row = &mut x[r * cols..(r + 1) * cols];
        for head in row.chunks_mut(head_dim) {
            for (i, &(s, c)) in rot.iter().enumerate() {
                let (a, b) = (head[i], head[i + half]);
                head[i] = a * c - b * s;
                head[i + half] = a * s + b * c;
            }
        }
    }
}

/// Indices of the `k` largest entries; ties go to the lower index first.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k.min(values.len()));
    idx
}

/// Argmax with ties broken towards the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        let mut v = vec![0.0; 12];
        v[3] = 5.0;
        v[9] = 5.0;
        assert_eq!(argmax(&v), 3);
        v[7] = 6.0;
        assert_eq!(argmax(&v), 7);
    }

    #[test]
    fn top_k_tie_break() {
        assert_eq!(top_k_indices(&[1.0, 2.0, 2.0, 0.5], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[0.1, 2.0, 1.5, 0.0], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[1.0, 1.0], 5), vec![0, 1]);
    }

    #[test]
    fn rope_inverse_round_trip() {
        let orig: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut x = orig.clone();
        rope_in_place(&mut x, 8, &[3, 11], 4, 1.0);
        assert!(x.iter().zip(&orig).any(|(a, b)| (a - b).abs() > 1e-3));
        rope_in_place(&mut x, 8, &[3, 11], 4, -1.0);
        for (a, b) in x.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_ignores_disallowed() {
        let p = masked_softmax_rows(&[1.0, 100.0, 1.0], &[true, false, true], 3);
        assert_eq!(p, vec![0.5, 0.0, 0.5]);
        let empty = masked_softmax_rows(&[1.0, 2.0], &[false, false], 2);
        assert_eq!(empty, vec![0.0, 0.0]);
    }
}
