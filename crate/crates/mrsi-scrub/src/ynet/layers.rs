//! Dense 1D layer primitives: feature maps, convolution as im2col + GEMM,
//! PReLU, inverted dropout, max-pooling and nearest-neighbour upsampling,
//! each paired with its exact backward pass.
//!
//! A feature map stores `channels x (batch * length)` in one row-major
//! matrix, column `s * len + t` holding sample `s` at position `t`. With that
//! layout a whole batch convolves as a single
//! `[c_out, c_in*k] . [c_in*k, batch*len]` matrix product, which is where
//! essentially all the training time goes, so everything funnels into
//! [`ndarray::ArrayBase::dot`].

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A `channels x (batch * length)` feature map.
#[derive(Clone, Debug)]
pub(crate) struct Feat {
    pub data: Array2<f64>,
    pub batch: usize,
    pub len: usize,
}

impl Feat {
    pub fn zeros(channels: usize, batch: usize, len: usize) -> Self {
        Feat { data: Array2::zeros((channels, batch * len)), batch, len }
    }

    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    /// Elementwise accumulate; shapes must match.
    pub fn add_assign(&mut self, other: &Feat) {
        debug_assert_eq!(self.data.dim(), other.data.dim());
        self.data += &other.data;
    }
}

/// One convolution layer: weights `[c_out, c_in * k]` (the column block for
/// input channel `c` holds taps `0..k`) plus a bias per output channel.
#[derive(Clone, Debug)]
pub(crate) struct Conv {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub c_in: usize,
    pub k: usize,
}

impl Conv {
    pub fn c_out(&self) -> usize {
        self.w.nrows()
    }
}

/// Unfold `x` into the `[c_in * k, batch * len]` patch matrix for a
/// same-padded (zero) convolution with odd kernel `k`. Row `c*k + j` of the
/// result is channel `c` shifted by `j - k/2`; positions that fall off a
/// sample's edge are zero, and samples never bleed into each other.
pub(crate) fn im2col(x: &Feat, k: usize) -> Array2<f64> {
    debug_assert_eq!(k % 2, 1, "same padding needs an odd kernel");
    let half = (k / 2) as isize;
    let (c_in, l) = (x.channels(), x.len);
    let mut col = Array2::zeros((c_in * k, x.batch * l));
    for c in 0..c_in {
        let src_row = x.data.row(c);
        let src = src_row.as_slice().expect("feature rows are contiguous");
        for j in 0..k {
            let shift = j as isize - half;
            let mut dst_row = col.row_mut(c * k + j);
            let dst = dst_row.as_slice_mut().expect("col rows are contiguous");
            let t0 = (-shift).max(0) as usize;
            let t1 = (l as isize - shift.max(0)) as usize;
            for s in 0..x.batch {
                let o = s * l;
                let src_lo = (o + t0).wrapping_add_signed(shift);
                dst[o + t0..o + t1].copy_from_slice(&src[src_lo..src_lo + (t1 - t0)]);
            }
        }
    }
    col
}

/// Fold a `[c_in * k, batch * len]` patch-gradient back onto the input grid:
/// the exact adjoint of [`im2col`] (scatter-add where im2col gathered).
fn col2im(grad_col: &Array2<f64>, c_in: usize, batch: usize, len: usize, k: usize) -> Feat {
    let half = (k / 2) as isize;
    let mut out = Feat::zeros(c_in, batch, len);
    for c in 0..c_in {
        let mut dst_row = out.data.row_mut(c);
        let dst = dst_row.as_slice_mut().expect("feature rows are contiguous");
        for j in 0..k {
            let shift = j as isize - half;
            let src_row = grad_col.row(c * k + j);
            let src = src_row.as_slice().expect("col rows are contiguous");
            let t0 = (-shift).max(0) as usize;
            let t1 = (len as isize - shift.max(0)) as usize;
            for s in 0..batch {
                let o = s * len;
                let dst_lo = (o + t0).wrapping_add_signed(shift);
                for (d, g) in dst[dst_lo..dst_lo + (t1 - t0)].iter_mut().zip(&src[o + t0..o + t1])
                {
                    *d += *g;
                }
            }
        }
    }
    out
}

pub(crate) fn conv_forward(conv: &Conv, x: &Feat) -> Feat {
    debug_assert_eq!(x.channels(), conv.c_in);
    let col = im2col(x, conv.k);
    let mut y = conv.w.dot(&col);
    for (mut row, &b) in y.rows_mut().into_iter().zip(conv.b.iter()) {
        row += b;
    }
    Feat { data: y, batch: x.batch, len: x.len }
}

/// Gradients of a convolution: `(dL/dw, dL/db, dL/dx)` given the layer input
/// and the gradient at its output. The patch matrix is recomputed rather than
/// cached; it is a copy, the GEMMs dominate.
pub(crate) fn conv_backward(
    conv: &Conv,
    x: &Feat,
    grad_y: &Feat,
) -> (Array2<f64>, Array1<f64>, Feat) {
    debug_assert_eq!(grad_y.channels(), conv.c_out());
    debug_assert_eq!(grad_y.len, x.len);
    let col = im2col(x, conv.k);
    let grad_w = grad_y.data.dot(&col.t());
    let grad_b = grad_y.data.sum_axis(Axis(1));
    let grad_col = conv.w.t().dot(&grad_y.data);
    let grad_x = col2im(&grad_col, conv.c_in, x.batch, x.len, conv.k);
    (grad_w, grad_b, grad_x)
}

/// PReLU with one learned slope per channel: `y = x` for `x > 0`, else
/// `a_c * x`.
pub(crate) fn prelu_forward(z: &Feat, slope: &Array1<f64>) -> Feat {
    debug_assert_eq!(z.channels(), slope.len());
    let mut y = z.data.clone();
    for (mut row, &a) in y.rows_mut().into_iter().zip(slope.iter()) {
        row.mapv_inplace(|v| if v > 0.0 { v } else { a * v });
    }
    Feat { data: y, batch: z.batch, len: z.len }
}

/// `(dL/dz, dL/da)` for PReLU given the pre-activation `z`.
pub(crate) fn prelu_backward(
    z: &Feat,
    slope: &Array1<f64>,
    grad_y: &Feat,
) -> (Feat, Array1<f64>) {
    let mut grad_z = grad_y.data.clone();
    let mut grad_a = Array1::zeros(slope.len());
    for (c, &a) in slope.iter().enumerate() {
        let zrow = z.data.row(c);
        let mut grow = grad_z.row_mut(c);
        let mut acc = 0.0;
        for (g, &zv) in grow.iter_mut().zip(zrow.iter()) {
            if zv <= 0.0 {
                acc += *g * zv;
                *g *= a;
            }
        }
        grad_a[c] = acc;
    }
    (Feat { data: grad_z, batch: grad_y.batch, len: grad_y.len }, grad_a)
}

/// Inverted dropout: each element survives with probability `1 - rate` and is
/// scaled by `1/(1 - rate)`, so the eval-time forward is the identity.
/// Returns the realized mask (entries 0 or the scale); the mask is drawn in
/// row-major element order so a seeded stream reproduces exactly.
pub(crate) fn dropout_forward(x: &Feat, rate: f64, rng: &mut ChaCha8Rng) -> (Feat, Array2<f64>) {
    debug_assert!((0.0..1.0).contains(&rate));
    let scale = 1.0 / (1.0 - rate);
    let mut mask = Array2::zeros(x.data.raw_dim());
    for m in mask.iter_mut() {
        *m = if rng.gen::<f64>() < rate { 0.0 } else { scale };
    }
    (Feat { data: &x.data * &mask, batch: x.batch, len: x.len }, mask)
}

pub(crate) fn dropout_backward(grad_y: &Feat, mask: &Array2<f64>) -> Feat {
    Feat { data: &grad_y.data * mask, batch: grad_y.batch, len: grad_y.len }
}

/// Which in-window position won each max-pool, for gradient routing.
#[derive(Clone, Debug)]
pub(crate) struct PoolCache {
    pub idx: Array2<u8>,
    pub in_len: usize,
}

/// Non-overlapping max-pool by `p` along the length axis; ties go to the
/// first position. Length must divide evenly.
pub(crate) fn maxpool_forward(x: &Feat, p: usize) -> (Feat, PoolCache) {
    debug_assert!(p >= 2 && p <= u8::MAX as usize);
    debug_assert_eq!(x.len % p, 0);
    let lo = x.len / p;
    let mut y = Feat::zeros(x.channels(), x.batch, lo);
    let mut idx = Array2::zeros((x.channels(), x.batch * lo));
    for c in 0..x.channels() {
        let src_row = x.data.row(c);
        let src = src_row.as_slice().expect("feature rows are contiguous");
        let mut dst_row = y.data.row_mut(c);
        let dst = dst_row.as_slice_mut().unwrap();
        let mut irow = idx.row_mut(c);
        let ir = irow.as_slice_mut().unwrap();
        for o in 0..x.batch * lo {
            let w = &src[o * p..o * p + p];
            let mut best = 0usize;
            for (r, &v) in w.iter().enumerate().skip(1) {
                if v > w[best] {
                    best = r;
                }
            }
            dst[o] = w[best];
            ir[o] = best as u8;
        }
    }
    (y, PoolCache { idx, in_len: x.len })
}

/// Route pooled gradients back to each window's argmax.
pub(crate) fn maxpool_backward(grad_y: &Feat, cache: &PoolCache, p: usize) -> Feat {
    let mut out = Feat::zeros(grad_y.channels(), grad_y.batch, cache.in_len);
    for c in 0..grad_y.channels() {
        let grow = grad_y.data.row(c);
        let g = grow.as_slice().unwrap();
        let irow = cache.idx.row(c);
        let ir = irow.as_slice().unwrap();
        let mut drow = out.data.row_mut(c);
        let d = drow.as_slice_mut().unwrap();
        for o in 0..g.len() {
            d[o * p + ir[o] as usize] += g[o];
        }
    }
    out
}

/// Nearest-neighbour upsample by `p` along the length axis.
pub(crate) fn upsample_forward(x: &Feat, p: usize) -> Feat {
    let lo = x.len * p;
    let mut y = Feat::zeros(x.channels(), x.batch, lo);
    for c in 0..x.channels() {
        let src_row = x.data.row(c);
        let src = src_row.as_slice().unwrap();
        let mut dst_row = y.data.row_mut(c);
        let dst = dst_row.as_slice_mut().unwrap();
        for (o, &v) in src.iter().enumerate() {
            dst[o * p..o * p + p].fill(v);
        }
    }
    y
}

/// Adjoint of nearest-neighbour upsampling: sum each group of `p` children.
pub(crate) fn upsample_backward(grad_y: &Feat, p: usize) -> Feat {
    debug_assert_eq!(grad_y.len % p, 0);
    let lo = grad_y.len / p;
    let mut out = Feat::zeros(grad_y.channels(), grad_y.batch, lo);
    for c in 0..grad_y.channels() {
        let grow = grad_y.data.row(c);
        let g = grow.as_slice().unwrap();
        let mut drow = out.data.row_mut(c);
        let d = drow.as_slice_mut().unwrap();
        for (o, dv) in d.iter_mut().enumerate() {
            *dv = g[o * p..o * p + p].iter().sum();
        }
    }
    out
}

/// Stack feature maps along the channel axis. All parts must agree on batch
/// and length.
pub(crate) fn concat(parts: &[&Feat]) -> Feat {
    let (batch, len) = (parts[0].batch, parts[0].len);
    let channels = parts.iter().map(|f| f.channels()).sum();
    let mut out = Feat::zeros(channels, batch, len);
    let mut row = 0;
    for f in parts {
        debug_assert_eq!((f.batch, f.len), (batch, len));
        for c in 0..f.channels() {
            out.data.row_mut(row).assign(&f.data.row(c));
            row += 1;
        }
    }
    out
}

/// Split a gradient back into the channel groups that [`concat`] joined.
pub(crate) fn split_rows(g: &Feat, sizes: &[usize]) -> Vec<Feat> {
    debug_assert_eq!(sizes.iter().sum::<usize>(), g.channels());
    let mut out = Vec::with_capacity(sizes.len());
    let mut row = 0;
    for &c in sizes {
        let part = g.data.slice(ndarray::s![row..row + c, ..]).to_owned();
        out.push(Feat { data: part, batch: g.batch, len: g.len });
        row += c;
    }
    out
}
