//! Raw loops behind the graph primitives. All buffers are row-major.

/// `c[m,n] = a[m,k] · b[k,n]`
pub(super) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, bj) in c_row.iter_mut().zip(b_row) {
                *cj += aip * bj;
            }
        }
    }
    c
}

/// Accumulates `da += dc · bᵀ` and `db += aᵀ · dc`.
#[allow(clippy::too_many_arguments)]
pub(super) fn matmul_backward(
    a: &[f64],
    b: &[f64],
    dc: &[f64],
    m: usize,
    k: usize,
    n: usize,
    da: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    if let Some(da) = da {
        for i in 0..m {
            let dc_row = &dc[i * n..(i + 1) * n];
            for p in 0..k {
                let b_row = &b[p * n..(p + 1) * n];
                da[i * k + p] += dot(dc_row, b_row);
            }
        }
    }
    if let Some(db) = db {
        for i in 0..m {
            let dc_row = &dc[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let db_row = &mut db[p * n..(p + 1) * n];
                for (d, g) in db_row.iter_mut().zip(dc_row) {
                    *d += aip * g;
                }
            }
        }
    }
}

#[inline]
pub(super) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy)]
pub(super) struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    /// Output frames `t` for which input index `t*stride + k - padding` is in range.
    #[inline]
    fn valid_range(&self, k: usize) -> (usize, usize) {
        let lo = if self.padding > k {
            (self.padding - k).div_ceil(self.stride)
        } else {
            0
        };
        let hi_num = self.t_in + self.padding;
        let hi = if hi_num > k {
            ((hi_num - k - 1) / self.stride + 1).min(self.t_out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

pub(super) fn conv1d(x: &[f64], w: &[f64], bias: Option<&[f64]>, geo: ConvGeometry) -> Vec<f64> {
    let ConvGeometry {
        c_in,
        c_out,
        t_in,
        t_out,
        kernel,
        stride,
        padding,
        groups,
    } = geo;
    let cin_g = c_in / groups;
    let cout_g = c_out / groups;
    let mut out = vec![0.0; c_out * t_out];
    for co in 0..c_out {
        let g = co / cout_g;
        let out_row = &mut out[co * t_out..(co + 1) * t_out];
        if let Some(b) = bias {
            out_row.fill(b[co]);
        }
        for cl in 0..cin_g {
            let ci = g * cin_g + cl;
            let x_row = &x[ci * t_in..(ci + 1) * t_in];
            let w_base = (co * cin_g + cl) * kernel;
            for k in 0..kernel {
                let wv = w[w_base + k];
                let (lo, hi) = geo.valid_range(k);
                for (t, o) in out_row.iter_mut().enumerate().take(hi).skip(lo) {
                    *o += wv * x_row[t * stride + k - padding];
                }
            }
        }
    }
    out
}

pub(super) fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    geo: ConvGeometry,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let ConvGeometry {
        c_in,
        c_out,
        t_in,
        t_out,
        kernel,
        stride,
        padding,
        groups,
    } = geo;
    let cin_g = c_in / groups;
    let cout_g = c_out / groups;
    if let Some(db) = db {
        for co in 0..c_out {
            db[co] += dout[co * t_out..(co + 1) * t_out].iter().sum::<f64>();
        }
    }
    for co in 0..c_out {
        let g = co / cout_g;
        let d_row = &dout[co * t_out..(co + 1) * t_out];
        for cl in 0..cin_g {
            let ci = g * cin_g + cl;
            let x_row = &x[ci * t_in..(ci + 1) * t_in];
            let w_base = (co * cin_g + cl) * kernel;
            for k in 0..kernel {
                let (lo, hi) = geo.valid_range(k);
                if let Some(dw) = dw.as_deref_mut() {
                    let mut acc = 0.0;
                    for t in lo..hi {
                        acc += d_row[t] * x_row[t * stride + k - padding];
                    }
                    dw[w_base + k] += acc;
                }
                if let Some(dx) = dx.as_deref_mut() {
                    let wv = w[w_base + k];
                    let dx_row = &mut dx[ci * t_in..(ci + 1) * t_in];
                    for t in lo..hi {
                        dx_row[t * stride + k - padding] += wv * d_row[t];
                    }
                }
            }
        }
    }
}

/// Normalizes each contiguous chunk of `chunk` elements to zero mean and unit
/// variance. Returns the normalized values and each chunk's `1/sqrt(var+eps)`.
pub(super) fn normalize_chunks(x: &[f64], chunk: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(x.len() / chunk);
    for (xs, ys) in x.chunks(chunk).zip(out.chunks_mut(chunk)) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        for (y, v) in ys.iter_mut().zip(xs) {
            *y = (v - mean) * inv;
        }
        inv_std.push(inv);
    }
    (out, inv_std)
}

pub(super) fn normalize_chunks_backward(
    y: &[f64],
    inv_std: &[f64],
    dy: &[f64],
    chunk: usize,
    dx: &mut [f64],
) {
    for (((ys, dys), dxs), inv) in y
        .chunks(chunk)
        .zip(dy.chunks(chunk))
        .zip(dx.chunks_mut(chunk))
        .zip(inv_std)
    {
        let n = ys.len() as f64;
        let mean_dy = dys.iter().sum::<f64>() / n;
        let mean_dy_y = dot(dys, ys) / n;
        for ((d, g), yv) in dxs.iter_mut().zip(dys).zip(ys) {
            *d += inv * (g - mean_dy - yv * mean_dy_y);
        }
    }
}

/// Numerically stable softmax over each row of length `width`.
pub(super) fn softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (xs, ys) in x.chunks(width).zip(out.chunks_mut(width)) {
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (y, v) in ys.iter_mut().zip(xs) {
            *y = (v - max).exp();
            total += *y;
        }
        for y in ys.iter_mut() {
            *y /= total;
        }
    }
    out
}

pub(super) fn log_softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (xs, ys) in x.chunks(width).zip(out.chunks_mut(width)) {
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (y, v) in ys.iter_mut().zip(xs) {
            *y = v - lse;
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub(super) struct AttnGeometry {
    pub frames: usize,
    pub dim: usize,
    pub heads: usize,
}

impl AttnGeometry {
    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Multi-head scaled dot-product attention over `[frames, dim]` inputs.
/// Returns the output and the per-head probability matrices `[heads, frames, frames]`.
pub(super) fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    geo: AttnGeometry,
) -> (Vec<f64>, Vec<f64>) {
    let AttnGeometry { frames, dim, heads } = geo;
    let dh = geo.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; heads * frames * frames];
    let mut out = vec![0.0; frames * dim];
    for h in 0..heads {
        let off = h * dh;
        let p = &mut probs[h * frames * frames..(h + 1) * frames * frames];
        for i in 0..frames {
            let qi = &q[i * dim + off..i * dim + off + dh];
            let row = &mut p[i * frames..(i + 1) * frames];
            for (j, s) in row.iter_mut().enumerate() {
                *s = dot(qi, &k[j * dim + off..j * dim + off + dh]) * scale;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                total += *s;
            }
            for s in row.iter_mut() {
                *s /= total;
            }
            let oi = &mut out[i * dim + off..i * dim + off + dh];
            for (j, pij) in row.iter().enumerate() {
                let vj = &v[j * dim + off..j * dim + off + dh];
                for (o, vv) in oi.iter_mut().zip(vj) {
                    *o += pij * vv;
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub(super) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    geo: AttnGeometry,
    mut dq: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
    mut dv: Option<&mut [f64]>,
) {
    let AttnGeometry { frames, dim, heads } = geo;
    let dh = geo.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dp = vec![0.0; frames];
    for h in 0..heads {
        let off = h * dh;
        let p = &probs[h * frames * frames..(h + 1) * frames * frames];
        for i in 0..frames {
            let doi = &dout[i * dim + off..i * dim + off + dh];
            let prow = &p[i * frames..(i + 1) * frames];
            for j in 0..frames {
                dp[j] = dot(doi, &v[j * dim + off..j * dim + off + dh]);
                if let Some(dv) = dv.as_deref_mut() {
                    let pij = prow[j];
                    for (d, g) in dv[j * dim + off..j * dim + off + dh].iter_mut().zip(doi) {
                        *d += pij * g;
                    }
                }
            }
            let weighted = dot(&dp, prow);
            for j in 0..frames {
                let ds = prow[j] * (dp[j] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                if let Some(dq) = dq.as_deref_mut() {
                    let kj = &k[j * dim + off..j * dim + off + dh];
                    for (d, kv) in dq[i * dim + off..i * dim + off + dh].iter_mut().zip(kj) {
                        *d += ds * kv;
                    }
                }
                if let Some(dk) = dk.as_deref_mut() {
                    let qi = &q[i * dim + off..i * dim + off + dh];
                    for (d, qv) in dk[j * dim + off..j * dim + off + dh].iter_mut().zip(qi) {
                        *d += ds * qv;
                    }
                }
            }
        }
    }
}

pub(super) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(super) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], geo: ConvGeometry) -> Vec<f64> {
        let cin_g = geo.c_in / geo.groups;
        let cout_g = geo.c_out / geo.groups;
        let mut out = vec![0.0; geo.c_out * geo.t_out];
        for co in 0..geo.c_out {
            for t in 0..geo.t_out {
                let mut acc = 0.0;
                for cl in 0..cin_g {
                    let ci = (co / cout_g) * cin_g + cl;
                    for k in 0..geo.kernel {
                        let pos = (t * geo.stride + k) as isize - geo.padding as isize;
                        if pos >= 0 && (pos as usize) < geo.t_in {
                            acc += w[(co * cin_g + cl) * geo.kernel + k]
                                * x[ci * geo.t_in + pos as usize];
                        }
                    }
                }
                out[co * geo.t_out + t] = acc;
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_definition_with_padding_and_groups() {
        let geo = ConvGeometry {
            c_in: 4,
            c_out: 6,
            t_in: 11,
            t_out: (11 + 2 * 3 - 4) / 2 + 1,
            kernel: 4,
            stride: 2,
            padding: 3,
            groups: 2,
        };
        let x: Vec<f64> = (0..44).map(|i| ((i * 7) % 13) as f64 - 6.0).collect();
        let w: Vec<f64> = (0..6 * 2 * 4)
            .map(|i| ((i * 5) % 11) as f64 * 0.1)
            .collect();
        assert_eq!(conv1d(&x, &w, None, geo), naive_conv(&x, &w, geo));
    }

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }
}
