//! Raw forward/backward kernels over flat BCHW slices.

use rayon::prelude::*;

use super::Scalar;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_plane(&self) -> usize {
        self.in_ch * self.height * self.width
    }

    fn out_plane(&self) -> usize {
        self.out_ch * self.out_h * self.out_w
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let ncols = g.col_cols();
    for c in 0..g.in_ch {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oi in 0..g.out_h {
                    let ii = (oi * s + ki) as isize - p;
                    let seg = &mut dst[oi * g.out_w..(oi + 1) * g.out_w];
                    if ii < 0 || ii >= g.height as isize {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ii as usize * g.width..(ii as usize + 1) * g.width];
                    for (oj, v) in seg.iter_mut().enumerate() {
                        let jj = (oj * s + kj) as isize - p;
                        *v = if jj < 0 || jj >= g.width as isize {
                            T::zero()
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let ncols = g.col_cols();
    for c in 0..g.in_ch {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oi in 0..g.out_h {
                    let ii = (oi * s + ki) as isize - p;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * g.width..(ii as usize + 1) * g.width];
                    for oj in 0..g.out_w {
                        let jj = (oj * s + kj) as isize - p;
                        if jj >= 0 && jj < g.width as isize {
                            dst[jj as usize] += src[oi * g.out_w + oj];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.out_plane()];
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    out.par_chunks_mut(g.out_plane())
        .zip(x.par_chunks(g.in_plane()))
        .for_each_init(
            || vec![T::zero(); rows * ncols],
            |cols, (dst, src)| {
                im2col(src, g, cols);
                for (o, row) in dst.chunks_mut(ncols).enumerate() {
                    row.fill(bias[o]);
                }
                T::gemm(
                    g.out_ch,
                    rows,
                    ncols,
                    T::one(),
                    w,
                    (rows as isize, 1),
                    cols,
                    (ncols as isize, 1),
                    T::one(),
                    dst,
                    (ncols as isize, 1),
                );
            },
        );
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    g: &ConvGeom,
    need_input: bool,
) -> ConvGrads<T> {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let per_sample: Vec<(Option<Vec<T>>, Vec<T>)> = dout
        .par_chunks(g.out_plane())
        .zip(x.par_chunks(g.in_plane()))
        .map(|(dy, src)| {
            let mut cols = vec![T::zero(); rows * ncols];
            im2col(src, g, &mut cols);
            let mut dw = vec![T::zero(); g.out_ch * rows];
            T::gemm(
                g.out_ch,
                ncols,
                rows,
                T::one(),
                dy,
                (ncols as isize, 1),
                &cols,
                (1, ncols as isize),
                T::zero(),
                &mut dw,
                (rows as isize, 1),
            );
            let dx = need_input.then(|| {
                T::gemm(
                    rows,
                    g.out_ch,
                    ncols,
                    T::one(),
                    w,
                    (1, rows as isize),
                    dy,
                    (ncols as isize, 1),
                    T::zero(),
                    &mut cols,
                    (ncols as isize, 1),
                );
                let mut dx = vec![T::zero(); g.in_plane()];
                col2im(&cols, g, &mut dx);
                dx
            });
            (dx, dw)
        })
        .collect();

    let mut weight = vec![T::zero(); g.out_ch * rows];
    let mut bias = vec![T::zero(); g.out_ch];
    let mut input = need_input.then(|| Vec::with_capacity(g.batch * g.in_plane()));
    for (dx, dw) in per_sample {
        for (acc, v) in weight.iter_mut().zip(&dw) {
            *acc += *v;
        }
        if let (Some(all), Some(dx)) = (input.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
    }
    for dy in dout.chunks(g.out_plane()) {
        for (o, row) in dy.chunks(ncols).enumerate() {
            bias[o] += row.iter().copied().sum::<T>();
        }
    }
    ConvGrads {
        input,
        weight,
        bias,
    }
}

pub(crate) fn upsample_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            let srow = &src[(i / f) * w..(i / f + 1) * w];
            let drow = &mut dst[i * ow..(i + 1) * ow];
            for (j, v) in drow.iter_mut().enumerate() {
                *v = srow[j / f];
            }
        }
    }
    out
}

pub(crate) fn upsample_backward<T: Scalar>(dout: &[T], planes: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let (oh, ow) = (h * f, w * f);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dout[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                dst[(i / f) * w + j / f] += src[i * ow + j];
            }
        }
    }
    dx
}

/// Per-(sample, group) statistics saved by the group-norm forward pass.
pub(crate) struct GroupStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn group_norm_forward<T: Scalar>(
    x: &[T],
    dims: [usize; 4],
    groups: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, GroupStats<T>) {
    let [b, c, h, w] = dims;
    let cpg = c / groups;
    let span = cpg * h * w;
    let n = T::from_f64(span as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut mean = Vec::with_capacity(b * groups);
    let mut rstd = Vec::with_capacity(b * groups);
    for (gi, (src, dst)) in x.chunks(span).zip(out.chunks_mut(span)).enumerate() {
        let mu = src.iter().copied().sum::<T>() / n;
        let var = src.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
        let r = T::one() / (var + eps).sqrt();
        let g0 = (gi % groups) * cpg;
        for (ci, (s, d)) in src.chunks(h * w).zip(dst.chunks_mut(h * w)).enumerate() {
            let (ga, be) = (gamma[g0 + ci], beta[g0 + ci]);
            for (sv, dv) in s.iter().zip(d.iter_mut()) {
                *dv = ga * ((*sv - mu) * r) + be;
            }
        }
        mean.push(mu);
        rstd.push(r);
    }
    (out, GroupStats { mean, rstd })
}

pub(crate) struct NormGrads<T> {
    pub input: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub(crate) fn group_norm_backward<T: Scalar>(
    x: &[T],
    dims: [usize; 4],
    groups: usize,
    gamma: &[T],
    stats: &GroupStats<T>,
    dout: &[T],
) -> NormGrads<T> {
    let [_, c, h, w] = dims;
    let cpg = c / groups;
    let hw = h * w;
    let span = cpg * hw;
    let n = T::from_f64(span as f64);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (gi, ((src, dy), dst)) in x
        .chunks(span)
        .zip(dout.chunks(span))
        .zip(dx.chunks_mut(span))
        .enumerate()
    {
        let (mu, r) = (stats.mean[gi], stats.rstd[gi]);
        let g0 = (gi % groups) * cpg;
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for ci in 0..cpg {
            let ga = gamma[g0 + ci];
            let mut dg = T::zero();
            let mut db = T::zero();
            for idx in ci * hw..(ci + 1) * hw {
                let xhat = (src[idx] - mu) * r;
                dg += dy[idx] * xhat;
                db += dy[idx];
                let dxh = dy[idx] * ga;
                sum_dxhat += dxh;
                sum_dxhat_xhat += dxh * xhat;
            }
            dgamma[g0 + ci] += dg;
            dbeta[g0 + ci] += db;
        }
        let mean_dxhat = sum_dxhat / n;
        let mean_dxhat_xhat = sum_dxhat_xhat / n;
        for ci in 0..cpg {
            let ga = gamma[g0 + ci];
            for idx in ci * hw..(ci + 1) * hw {
                let xhat = (src[idx] - mu) * r;
                dst[idx] = r * (dy[idx] * ga - mean_dxhat - xhat * mean_dxhat_xhat);
            }
        }
    }
    NormGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    }
}
