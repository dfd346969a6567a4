//! Raw forward and backward kernels over flat row-major buffers.
//!
//! Every output element is reduced in a fixed order, so the optional rayon
//! path produces the same bits as the serial path.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::dim_err;
use crate::{Result, Scalar};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Runs `f(chunk_index, chunk)` over consecutive chunks of `out`.
fn for_each_chunk<T: Scalar>(out: &mut [T], chunk: usize, f: impl Fn(usize, &mut [T]) + Sync + Send) {
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

// ---------------------------------------------------------------- matmul

/// `c[m,n] = a[m,k] · b[k,n]`
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for_each_chunk(&mut c, n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    });
    c
}

/// `c[m,k] = a[m,n] · b[k,n]ᵀ`
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * k];
    for_each_chunk(&mut c, k, |i, row| {
        let arow = &a[i * n..(i + 1) * n];
        for (p, cv) in row.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            *cv = acc;
        }
    });
    c
}

/// `c[k,n] = a[m,k]ᵀ · b[m,n]`
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * n];
    for_each_chunk(&mut c, n, |p, row| {
        for i in 0..m {
            let av = a[i * k + p];
            let brow = &b[i * n..(i + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    });
    c
}

// ---------------------------------------------------------------- softmax

/// Splits a shape around `axis` into (outer, len, inner).
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = T::neg_infinity();
            for j in 0..len {
                mx = mx.max(x[base + j * inner]);
            }
            let mut total = T::zero();
            for j in 0..len {
                let e = (x[base + j * inner] - mx).exp();
                y[base + j * inner] = e;
                total += e;
            }
            for j in 0..len {
                y[base + j * inner] /= total;
            }
        }
    }
    y
}

pub fn softmax_backward<T: Scalar>(y: &[T], dy: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = T::zero();
            for j in 0..len {
                dot += y[base + j * inner] * dy[base + j * inner];
            }
            for j in 0..len {
                let at = base + j * inner;
                dx[at] = y[at] * (dy[at] - dot);
            }
        }
    }
    dx
}

// ---------------------------------------------------------------- conv2d

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub oh: usize,
    pub ow: usize,
}

fn out_extent(input: usize, pad: usize, dil: usize, k: usize, stride: usize) -> Option<usize> {
    let span = dil * (k - 1) + 1;
    let padded = input + 2 * pad;
    (padded >= span).then(|| (padded - span) / stride + 1)
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, padding: usize, dilation: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(dim_err!(
                "conv2d expects x [N,C,H,W] and w [Cout,Cin,kh,kw], got {:?} and {:?}",
                x,
                w
            ));
        }
        if stride == 0 || dilation == 0 {
            return Err(dim_err!("conv2d stride and dilation must be >= 1"));
        }
        if x[1] != w[1] {
            return Err(dim_err!("conv2d channel mismatch: input {:?} vs kernel {:?}", x, w));
        }
        let oh = out_extent(x[2], padding, dilation, w[2], stride);
        let ow = out_extent(x[3], padding, dilation, w[3], stride);
        match (oh, ow) {
            (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => Ok(Self {
                n: x[0],
                cin: x[1],
                h: x[2],
                w: x[3],
                cout: w[0],
                kh: w[2],
                kw: w[3],
                stride,
                padding,
                dilation,
                oh,
                ow,
            }),
            _ => Err(dim_err!(
                "conv2d output extent < 1 for input {:?}, kernel {:?}, padding {}, dilation {}",
                x,
                w,
                padding,
                dilation
            )),
        }
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.oh, self.ow]
    }

    /// Output index range `[lo, hi)` whose taps at offset `off` land inside `extent`.
    fn valid(&self, off: isize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let last = extent as isize - 1 - off;
        if last < 0 {
            return (0, 0);
        }
        let hi = (last / s + 1).min(out as isize);
        if hi <= lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }

    fn tap_offset(&self, k: usize) -> isize {
        (k * self.dilation) as isize - self.padding as isize
    }
}

/// Accumulates `out[o] += wv * src[o*stride + off]` over the valid range.
#[inline]
fn axpy_strided<T: Scalar>(out: &mut [T], src: &[T], wv: T, lo: usize, hi: usize, stride: usize, off: isize) {
    // an empty range may come with an offset that points before `src`
    if lo >= hi {
        return;
    }
    if stride == 1 {
        let start = (lo as isize + off) as usize;
        let len = hi - lo;
        for (o, &s) in out[lo..hi].iter_mut().zip(&src[start..start + len]) {
            *o += wv * s;
        }
    } else {
        for o in lo..hi {
            out[o] += wv * src[(o as isize * stride as isize + off) as usize];
        }
    }
}

pub fn conv2d<T: Scalar>(x: &[T], w: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.oh * g.ow;
    let mut out = vec![T::zero(); g.n * g.cout * plane];
    for_each_chunk(&mut out, plane, |idx, o| {
        let (n, co) = (idx / g.cout, idx % g.cout);
        o.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..g.cin {
            let xplane = &x[(n * g.cin + ci) * g.h * g.w..][..g.h * g.w];
            for ky in 0..g.kh {
                let offy = g.tap_offset(ky);
                let (ylo, yhi) = g.valid(offy, g.h, g.oh);
                for kx in 0..g.kw {
                    let wv = w[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                    let offx = g.tap_offset(kx);
                    let (xlo, xhi) = g.valid(offx, g.w, g.ow);
                    for oy in ylo..yhi {
                        let iy = (oy as isize * g.stride as isize + offy) as usize;
                        axpy_strided(
                            &mut o[oy * g.ow..(oy + 1) * g.ow],
                            &xplane[iy * g.w..(iy + 1) * g.w],
                            wv,
                            xlo,
                            xhi,
                            g.stride,
                            offx,
                        );
                    }
                }
            }
        }
    });
    out
}

pub fn conv2d_backward_input<T: Scalar>(dy: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.h * g.w;
    let mut dx = vec![T::zero(); g.n * g.cin * plane];
    for_each_chunk(&mut dx, plane, |idx, dxp| {
        let (n, ci) = (idx / g.cin, idx % g.cin);
        for co in 0..g.cout {
            let dyp = &dy[(n * g.cout + co) * g.oh * g.ow..][..g.oh * g.ow];
            for ky in 0..g.kh {
                let offy = g.tap_offset(ky);
                let (ylo, yhi) = g.valid(offy, g.h, g.oh);
                for kx in 0..g.kw {
                    let wv = w[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                    let offx = g.tap_offset(kx);
                    let (xlo, xhi) = g.valid(offx, g.w, g.ow);
                    for oy in ylo..yhi {
                        let iy = (oy as isize * g.stride as isize + offy) as usize;
                        let dxrow = &mut dxp[iy * g.w..(iy + 1) * g.w];
                        let dyrow = &dyp[oy * g.ow..(oy + 1) * g.ow];
                        for (&d, ox) in dyrow[xlo..xhi].iter().zip(xlo..) {
                            let ix = (ox as isize * g.stride as isize + offx) as usize;
                            dxrow[ix] += wv * d;
                        }
                    }
                }
            }
        }
    });
    dx
}

pub fn conv2d_backward_weight<T: Scalar>(dy: &[T], x: &[T], g: &ConvGeom) -> Vec<T> {
    let per_out = g.cin * g.kh * g.kw;
    let mut dw = vec![T::zero(); g.cout * per_out];
    for_each_chunk(&mut dw, per_out, |co, dwc| {
        for ci in 0..g.cin {
            for ky in 0..g.kh {
                let offy = g.tap_offset(ky);
                let (ylo, yhi) = g.valid(offy, g.h, g.oh);
                for kx in 0..g.kw {
                    let offx = g.tap_offset(kx);
                    let (xlo, xhi) = g.valid(offx, g.w, g.ow);
                    let mut acc = T::zero();
                    for n in 0..g.n {
                        let dyp = &dy[(n * g.cout + co) * g.oh * g.ow..][..g.oh * g.ow];
                        let xp = &x[(n * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                        for oy in ylo..yhi {
                            let iy = (oy as isize * g.stride as isize + offy) as usize;
                            let dyrow = &dyp[oy * g.ow..(oy + 1) * g.ow];
                            let xrow = &xp[iy * g.w..(iy + 1) * g.w];
                            for (&d, ox) in dyrow[xlo..xhi].iter().zip(xlo..) {
                                let ix = (ox as isize * g.stride as isize + offx) as usize;
                                acc += d * xrow[ix];
                            }
                        }
                    }
                    dwc[(ci * g.kh + ky) * g.kw + kx] = acc;
                }
            }
        }
    });
    dw
}

pub fn conv2d_backward_bias<T: Scalar>(dy: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.oh * g.ow;
    let mut db = vec![T::zero(); g.cout];
    for (co, slot) in db.iter_mut().enumerate() {
        let mut acc = T::zero();
        for n in 0..g.n {
            for &v in &dy[(n * g.cout + co) * plane..][..plane] {
                acc += v;
            }
        }
        *slot = acc;
    }
    db
}

// ---------------------------------------------------------------- pooling

/// 2×2 stride-2 max pooling over `[N,C,H,W]`; returns values and flat argmax indices.
pub fn maxpool2x2<T: Scalar>(x: &[T], n: usize, c: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let first = base + (2 * oy) * w + 2 * ox;
                let mut best = first;
                for cand in [first + 1, first + w, first + w + 1] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

// ---------------------------------------------------------------- upsampling

/// Per destination index: (low source index, high source index, fraction).
pub fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = num_traits::Float::floor(pos) as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

#[inline]
fn lerp<T: Scalar>(a: T, b: T, f: T) -> T {
    a + f * (b - a)
}

pub fn upsample_bilinear<T: Scalar>(x: &[T], planes: usize, (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<T> {
    let rows = bilinear_taps(h, oh);
    let cols = bilinear_taps(w, ow);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for &(y0, y1, fy) in &rows {
            let fy = T::from_f64_lossy(fy);
            for &(x0, x1, fx) in &cols {
                let fx = T::from_f64_lossy(fx);
                let top = lerp(src[y0 * w + x0], src[y0 * w + x1], fx);
                let bot = lerp(src[y1 * w + x0], src[y1 * w + x1], fx);
                out.push(lerp(top, bot, fy));
            }
        }
    }
    out
}

pub fn upsample_bilinear_backward<T: Scalar>(dy: &[T], planes: usize, (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<T> {
    let rows = bilinear_taps(h, oh);
    let cols = bilinear_taps(w, ow);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let g = &dy[p * oh * ow..(p + 1) * oh * ow];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for (r, &(y0, y1, fy)) in rows.iter().enumerate() {
            let fy = T::from_f64_lossy(fy);
            for (c, &(x0, x1, fx)) in cols.iter().enumerate() {
                let fx = T::from_f64_lossy(fx);
                let gv = g[r * ow + c];
                let gt = (T::one() - fy) * gv;
                let gb = fy * gv;
                d[y0 * w + x0] += (T::one() - fx) * gt;
                d[y0 * w + x1] += fx * gt;
                d[y1 * w + x0] += (T::one() - fx) * gb;
                d[y1 * w + x1] += fx * gb;
            }
        }
    }
    dx
}

// ---------------------------------------------------------------- layout

/// Source indices of a permuted-axes view: `out[j] = x[index[j]]`.
pub fn transpose_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let total: usize = shape.iter().product();
    let mut index = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    for _ in 0..total {
        let src: usize = counter.iter().zip(perm).map(|(&c, &p)| c * strides[p]).sum();
        index.push(src);
        for d in (0..rank).rev() {
            counter[d] += 1;
            if counter[d] < out_shape[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    index
}

/// Source indices taking `[start, start+len)` along `axis`.
pub fn slice_index(shape: &[usize], axis: usize, start: usize, len: usize) -> Vec<usize> {
    let (outer, full, inner) = axis_split(shape, axis);
    let mut index = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        for j in start..start + len {
            let base = (o * full + j) * inner;
            index.extend(base..base + inner);
        }
    }
    index
}

/// Source indices mapping `[C,H,W]` to patch rows `[N, P·P·C]`.
///
/// Patches are enumerated row-major over the patch grid; within a patch the
/// channel varies fastest, then the column, then the row.
pub fn patchify_index(c: usize, h: usize, w: usize, p: usize) -> Vec<usize> {
    let (gh, gw) = (h / p, w / p);
    let mut index = Vec::with_capacity(c * h * w);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..p {
                for px in 0..p {
                    let (y, x) = (gy * p + py, gx * p + px);
                    for ch in 0..c {
                        index.push((ch * h + y) * w + x);
                    }
                }
            }
        }
    }
    index
}

/// Inverse permutation of `index`.
pub fn invert_index(index: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; index.len()];
    for (j, &i) in index.iter().enumerate() {
        inv[i] = j;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_case() {
        let c = matmul(&[1.0f64, 2., 3., 4.], &[5., 6., 7., 8.], 2, 2, 2);
        assert_eq!(c, vec![19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0f64, -2., 0.5, 3., 4., -1.];
        let b = [2.0f64, 1., 0., -1., 3., 5.];
        // a: 2x3, b: 3x2 ; bt: 2x3
        let ab = matmul(&a, &b, 2, 3, 2);
        let bt = [2.0f64, 0., 3., 1., -1., 5.];
        assert_eq!(matmul_nt(&a, &bt, 2, 3, 2), ab);
        // a is 2x3; aᵀ·x for x 2x2
        let x = [1.0f64, 2., 3., 4.];
        let at = [1.0f64, 3., -2., 4., 0.5, -1.];
        assert_eq!(matmul_tn(&a, &x, 2, 3, 2), matmul(&at, &x, 3, 2, 2));
    }

    #[test]
    fn conv_geometry_contract() {
        let g = ConvGeom::new(&[1, 1, 5, 5], &[1, 1, 3, 3], 1, 0, 2).unwrap();
        assert_eq!((g.oh, g.ow), (1, 1));
        assert!(ConvGeom::new(&[1, 1, 2, 2], &[1, 1, 3, 3], 1, 0, 1).is_err());
        assert!(ConvGeom::new(&[1, 2, 4, 4], &[1, 1, 3, 3], 1, 1, 1).is_err());
    }

    #[test]
    fn strided_conv_matches_direct_sum() {
        let x: Vec<f64> = (0..49).map(|v| v as f64 * 0.1 - 2.0).collect();
        let w: Vec<f64> = (0..9).map(|v| (v as f64 - 4.0) * 0.3).collect();
        let g = ConvGeom::new(&[1, 1, 7, 7], &[1, 1, 3, 3], 2, 1, 1).unwrap();
        let y = conv2d(&x, &w, &[0.5], &g);
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut acc = 0.5;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (oy * 2 + ky) as isize - 1;
                        let ix = (ox * 2 + kx) as isize - 1;
                        if (0..7).contains(&iy) && (0..7).contains(&ix) {
                            acc += w[ky * 3 + kx] * x[iy as usize * 7 + ix as usize];
                        }
                    }
                }
                assert!((y[oy * g.ow + ox] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn taps_entirely_in_padding_contribute_nothing() {
        // 1×1 input, 3×3 kernel, padding 1: only the centre tap sees data
        let g = ConvGeom::new(&[1, 1, 1, 1], &[1, 1, 3, 3], 1, 1, 1).unwrap();
        let w: Vec<f64> = (1..=9).map(f64::from).collect();
        assert_eq!(conv2d(&[2.0], &w, &[0.25], &g), vec![10.25]);
        assert_eq!(conv2d_backward_input(&[1.0], &w, &g), vec![5.0]);
        let dw = conv2d_backward_weight(&[1.0], &[2.0], &g);
        assert_eq!(dw, vec![0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn transpose_index_2d() {
        assert_eq!(transpose_index(&[2, 3], &[1, 0]), vec![0, 3, 1, 4, 2, 5]);
    }

    #[test]
    fn patchify_is_a_permutation() {
        let idx = patchify_index(3, 4, 6, 2);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..72).collect::<Vec<_>>());
        // first patch row starts with pixel (0,0) channels 0..3
        assert_eq!(&idx[..3], &[0, 24, 48]);
        // then pixel (0,1)
        assert_eq!(idx[3], 1);
    }
}
