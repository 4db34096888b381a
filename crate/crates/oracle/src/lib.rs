//! Reference computations for testing `mstfgrn`.
//!
//! Everything here is plain `f64` loops over nested `Vec`s, written without
//! the engine's tape or kernels so that it can serve as an independent check.

pub type Matrix = Vec<Vec<f64>>;

/// Central-difference derivative of `f` along coordinate `i` of `x`.
pub fn central_difference<F>(f: &mut F, x: &[f64], i: usize, h: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let mut p = x.to_vec();
    p[i] = x[i] + h;
    let up = f(&p);
    p[i] = x[i] - h;
    let down = f(&p);
    (up - down) / (2.0 * h)
}

/// Central-difference gradient over every coordinate.
pub fn numeric_gradient<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    (0..x.len())
        .map(|i| central_difference(&mut f, x, i, h))
        .collect()
}

/// `|a - n| / max(|a|, |n|, floor)`.
///
/// The floor keeps coordinates whose true derivative is ~0 from turning
/// rounding noise into an unbounded relative error.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / scale
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let k = b.len();
    let n = if k == 0 { 0 } else { b[0].len() };
    a.iter()
        .map(|row| {
            assert_eq!(row.len(), k);
            (0..n)
                .map(|j| (0..k).map(|p| row[p] * b[p][j]).sum())
                .collect()
        })
        .collect()
}

pub fn transpose(a: &Matrix) -> Matrix {
    if a.is_empty() {
        return Vec::new();
    }
    (0..a[0].len())
        .map(|j| a.iter().map(|row| row[j]).collect())
        .collect()
}

pub fn vec_matmul(x: &[f64], w: &Matrix) -> Vec<f64> {
    matmul(&vec![x.to_vec()], w).remove(0)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn layer_norm(row: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    row.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| (v - mean) / (var + eps).sqrt() * g + b)
        .collect()
}

/// Dense GRU cell using the gate convention `h = z*h_prev + (1-z)*candidate`.
///
/// Weights act on the concatenated row vector `[x, h]` (or `[x, r*h]` for
/// the candidate), so each weight matrix is `(C + F) x F`.
pub struct DenseGru {
    pub w_z: Matrix,
    pub b_z: Vec<f64>,
    pub w_r: Matrix,
    pub b_r: Vec<f64>,
    pub w_h: Matrix,
    pub b_h: Vec<f64>,
}

impl DenseGru {
    pub fn step(&self, x: &[f64], h: &[f64]) -> Vec<f64> {
        let affine = |inp: &[f64], w: &Matrix, b: &[f64]| -> Vec<f64> {
            vec_matmul(inp, w)
                .into_iter()
                .zip(b)
                .map(|(v, b)| v + b)
                .collect()
        };
        let xh: Vec<f64> = x.iter().chain(h).copied().collect();
        let z: Vec<f64> = affine(&xh, &self.w_z, &self.b_z)
            .into_iter()
            .map(sigmoid)
            .collect();
        let r: Vec<f64> = affine(&xh, &self.w_r, &self.b_r)
            .into_iter()
            .map(sigmoid)
            .collect();
        let xrh: Vec<f64> = x
            .iter()
            .copied()
            .chain(r.iter().zip(h).map(|(r, h)| r * h))
            .collect();
        let cand: Vec<f64> = affine(&xrh, &self.w_h, &self.b_h)
            .into_iter()
            .map(f64::tanh)
            .collect();
        (0..h.len())
            .map(|j| z[j] * h[j] + (1.0 - z[j]) * cand[j])
            .collect()
    }
}

/// Single-head scaled dot-product self-attention over one node's `T x D`
/// sequence, followed by residual addition and layer normalisation.
pub struct AttentionRef<'a> {
    pub w_q: &'a Matrix,
    pub b_q: &'a [f64],
    pub w_k: &'a Matrix,
    pub b_k: &'a [f64],
    pub w_v: &'a Matrix,
    pub b_v: &'a [f64],
    pub gain: &'a [f64],
    pub bias: &'a [f64],
    pub eps: f64,
}

impl AttentionRef<'_> {
    /// Returns `(output, score matrix)`.
    pub fn apply(&self, h: &Matrix) -> (Matrix, Matrix) {
        let proj = |w: &Matrix, b: &[f64]| -> Matrix {
            matmul(h, w)
                .into_iter()
                .map(|row| row.into_iter().zip(b).map(|(v, b)| v + b).collect())
                .collect()
        };
        let q = proj(self.w_q, self.b_q);
        let k = proj(self.w_k, self.b_k);
        let v = proj(self.w_v, self.b_v);
        let dk = self.w_k[0].len() as f64;
        let scores: Matrix = matmul(&q, &transpose(&k))
            .into_iter()
            .map(|row| softmax(&row.into_iter().map(|s| s / dk.sqrt()).collect::<Vec<_>>()))
            .collect();
        let att = matmul(&scores, &v);
        let out = att
            .iter()
            .zip(h)
            .map(|(a, x)| {
                let res: Vec<f64> = a.iter().zip(x).map(|(a, x)| a + x).collect();
                layer_norm(&res, self.gain, self.bias, self.eps)
            })
            .collect();
        (out, scores)
    }
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn std_dev(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_cubic() {
        let g = numeric_gradient(|x| x[0].powi(3) + 2.0 * x[1], &[2.0, 5.0], 1e-5);
        assert!((g[0] - 12.0).abs() < 1e-6);
        assert!((g[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn gru_saturated_update_gate_keeps_state() {
        let gru = DenseGru {
            w_z: vec![vec![0.0]; 2],
            b_z: vec![50.0],
            w_r: vec![vec![0.0]; 2],
            b_r: vec![0.0],
            w_h: vec![vec![1.0]; 2],
            b_h: vec![0.0],
        };
        let h = gru.step(&[1.0], &[0.3]);
        assert!((h[0] - 0.3).abs() < 1e-9);
    }
}
