//! im2col / col2im kernels and the blocked matmul used by the conv ops.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};

use crate::exec::{self, Parallelism};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvCfg {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvCfg {
    pub fn new(kernel: usize, stride: usize, pad: usize, dilation: usize) -> Self {
        ConvCfg {
            kernel,
            stride,
            pad,
            dilation,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let eff = self.dilation * (self.kernel - 1) + 1;
        (
            (h + 2 * self.pad - eff) / self.stride + 1,
            (w + 2 * self.pad - eff) / self.stride + 1,
        )
    }
}

/// Transposed-conv geometry: out = (in-1)*stride - 2*pad + kernel + out_pad.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvTCfg {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl ConvTCfg {
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h - 1) * self.stride + self.kernel + self.out_pad - 2 * self.pad,
            (w - 1) * self.stride + self.kernel + self.out_pad - 2 * self.pad,
        )
    }
}

/// `a (m,k) . b (k,n)`, column-blocked across workers; each block writes a
/// disjoint slice of the output so the result is order-independent.
pub fn matmul(par: Parallelism, a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let (m, _) = a.dim();
    let (_, n) = b.dim();
    if !par.is_parallel() || n < 128 {
        return a.dot(&b);
    }
    let mut out = Array2::<f64>::zeros((m, n));
    let nblocks = rayon_threads().min(n.div_ceil(64)).max(1);
    let block = n.div_ceil(nblocks);
    // SAFETY-free split: use ndarray's axis chunking with rayon scoped tasks.
    let col_chunks: Vec<_> = out.axis_chunks_iter_mut(ndarray::Axis(1), block).collect();
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        col_chunks
            .into_par_iter()
            .enumerate()
            .for_each(|(i, mut chunk)| {
                let lo = i * block;
                let hi = (lo + chunk.ncols()).min(n);
                chunk.assign(&a.dot(&b.slice(s![.., lo..hi])));
            });
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, mut chunk) in col_chunks.into_iter().enumerate() {
            let lo = i * block;
            let hi = (lo + chunk.ncols()).min(n);
            chunk.assign(&a.dot(&b.slice(s![.., lo..hi])));
        }
    }
    out
}

fn rayon_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Unfold `input (C,H,W)` into a `(C*k*k, Ho*Wo)` matrix.
pub fn im2col(par: Parallelism, input: ArrayView3<f64>, cfg: ConvCfg) -> Array2<f64> {
    let (c, h, w) = input.dim();
    let (ho, wo) = cfg.out_size(h, w);
    let k = cfg.kernel;
    let mut cols = Array2::<f64>::zeros((c * k * k, ho * wo));
    let row_len = ho * wo;
    let data = cols.as_slice_mut().expect("contiguous");
    exec::for_each_chunk_mut(par, data, row_len, |off, row| {
        let r = off / row_len;
        let ch = r / (k * k);
        let ki = (r / k) % k;
        let kj = r % k;
        for (idx, v) in row.iter_mut().enumerate() {
            let oy = idx / wo;
            let ox = idx % wo;
            let iy = (oy * cfg.stride + ki * cfg.dilation) as isize - cfg.pad as isize;
            let ix = (ox * cfg.stride + kj * cfg.dilation) as isize - cfg.pad as isize;
            *v = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                input[[ch, iy as usize, ix as usize]]
            } else {
                0.0
            };
        }
    });
    cols
}

/// Adjoint of [`im2col`]: fold `(C*k*k, Ho*Wo)` columns back into `(C,H,W)`,
/// accumulating overlaps. Parallel over channels (disjoint output planes).
pub fn col2im(
    par: Parallelism,
    cols: ArrayView2<f64>,
    c: usize,
    h: usize,
    w: usize,
    cfg: ConvCfg,
) -> Array3<f64> {
    let (ho, wo) = cfg.out_size(h, w);
    let k = cfg.kernel;
    let mut out = Array3::<f64>::zeros((c, h, w));
    let plane = h * w;
    let data = out.as_slice_mut().expect("contiguous");
    exec::for_each_chunk_mut(par, data, plane, |off, dst| {
        let ch = off / plane;
        for ki in 0..k {
            for kj in 0..k {
                let row = cols.row(ch * k * k + ki * k + kj);
                for oy in 0..ho {
                    let iy = (oy * cfg.stride + ki * cfg.dilation) as isize - cfg.pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * cfg.stride + kj * cfg.dilation) as isize - cfg.pad as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        dst[iy as usize * w + ix as usize] += row[oy * wo + ox];
                    }
                }
            }
        }
    });
    out
}

/// Scatter `(Cout*k*k, H*W)` transposed-conv columns into the upsampled
/// output `(Cout, Ho, Wo)`. Parallel over output channels.
pub fn col2im_transposed(
    par: Parallelism,
    cols: ArrayView2<f64>,
    c_out: usize,
    in_h: usize,
    in_w: usize,
    cfg: ConvTCfg,
) -> Array3<f64> {
    let (ho, wo) = cfg.out_size(in_h, in_w);
    let k = cfg.kernel;
    let mut out = Array3::<f64>::zeros((c_out, ho, wo));
    let plane = ho * wo;
    let data = out.as_slice_mut().expect("contiguous");
    exec::for_each_chunk_mut(par, data, plane, |off, dst| {
        let ch = off / plane;
        for ki in 0..k {
            for kj in 0..k {
                let row = cols.row(ch * k * k + ki * k + kj);
                for y in 0..in_h {
                    let oy = (y * cfg.stride + ki) as isize - cfg.pad as isize;
                    if oy < 0 || oy as usize >= ho {
                        continue;
                    }
                    for x in 0..in_w {
                        let ox = (x * cfg.stride + kj) as isize - cfg.pad as isize;
                        if ox < 0 || ox as usize >= wo {
                            continue;
                        }
                        dst[oy as usize * wo + ox as usize] += row[y * in_w + x];
                    }
                }
            }
        }
    });
    out
}

/// Adjoint gather for the transposed conv: from a `(Cout, Ho, Wo)` map build
/// the `(Cout*k*k, H*W)` matrix whose scatter by [`col2im_transposed`] it is.
pub fn im2col_transposed(
    par: Parallelism,
    grad_out: ArrayView3<f64>,
    in_h: usize,
    in_w: usize,
    cfg: ConvTCfg,
) -> Array2<f64> {
    let (c_out, ho, wo) = grad_out.dim();
    let k = cfg.kernel;
    let mut cols = Array2::<f64>::zeros((c_out * k * k, in_h * in_w));
    let row_len = in_h * in_w;
    let data = cols.as_slice_mut().expect("contiguous");
    exec::for_each_chunk_mut(par, data, row_len, |off, row| {
        let r = off / row_len;
        let ch = r / (k * k);
        let ki = (r / k) % k;
        let kj = r % k;
        for (idx, v) in row.iter_mut().enumerate() {
            let y = idx / in_w;
            let x = idx % in_w;
            let oy = (y * cfg.stride + ki) as isize - cfg.pad as isize;
            let ox = (x * cfg.stride + kj) as isize - cfg.pad as isize;
            *v = if oy >= 0 && ox >= 0 && (oy as usize) < ho && (ox as usize) < wo {
                grad_out[[ch, oy as usize, ox as usize]]
            } else {
                0.0
            };
        }
    });
    cols
}
