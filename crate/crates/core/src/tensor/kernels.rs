// Dense kernels. Every output element is reduced in a fixed order, and
// parallel splits only ever partition output rows, so results are
// bit-identical regardless of thread count.

use rayon::prelude::*;

const PAR_THRESHOLD: usize = 1 << 15;

/// `out[m,n] = a[m,k] · b[k,n]`
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if n == 0 {
        return out;
    }
    let row = |(i, dst): (usize, &mut [f64])| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (d, &bv) in dst.iter_mut().zip(br) {
                *d += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// `out[m,n] = a[m,k] · b[n,k]ᵀ`
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if n == 0 {
        return out;
    }
    let row = |(i, dst): (usize, &mut [f64])| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, d) in dst.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            *d = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// `out[k,n] = a[m,k]ᵀ · b[m,n]`
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    if n == 0 {
        return out;
    }
    let row = |(p, dst): (usize, &mut [f64])| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let br = &b[i * n..(i + 1) * n];
            for (d, &bv) in dst.iter_mut().zip(br) {
                *d += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.width + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    /// Input coordinate hit by output position `o` and kernel tap `t`, if inside.
    #[inline]
    fn src(&self, o: usize, t: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + t) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

pub fn conv2d_forward(x: &[f64], w: &[f64], b: &[f64], g: ConvGeom) -> Vec<f64> {
    let (oh, ow) = g.out_hw();
    let in_sz = g.in_ch * g.height * g.width;
    let out_sz = g.out_ch * oh * ow;
    let kk = g.kernel * g.kernel;
    let mut out = vec![0.0; g.batch * out_sz];
    out.par_chunks_mut(out_sz.max(1))
        .enumerate()
        .for_each(|(n, dst)| {
            let xs = &x[n * in_sz..(n + 1) * in_sz];
            for co in 0..g.out_ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[co];
                        for ci in 0..g.in_ch {
                            let wbase = (co * g.in_ch + ci) * kk;
                            let xbase = ci * g.height * g.width;
                            for ky in 0..g.kernel {
                                let Some(iy) = g.src(oy, ky, g.height) else {
                                    continue;
                                };
                                for kx in 0..g.kernel {
                                    let Some(ix) = g.src(ox, kx, g.width) else {
                                        continue;
                                    };
                                    acc += w[wbase + ky * g.kernel + kx]
                                        * xs[xbase + iy * g.width + ix];
                                }
                            }
                        }
                        dst[(co * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        });
    out
}

/// Returns `(dx, dw, db)` for upstream gradient `dy`.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = g.out_hw();
    let in_sz = g.in_ch * g.height * g.width;
    let out_sz = g.out_ch * oh * ow;
    let kk = g.kernel * g.kernel;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.out_ch];
    for n in 0..g.batch {
        let xs = &x[n * in_sz..(n + 1) * in_sz];
        let dys = &dy[n * out_sz..(n + 1) * out_sz];
        let dxs = &mut dx[n * in_sz..(n + 1) * in_sz];
        for co in 0..g.out_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gy = dys[(co * oh + oy) * ow + ox];
                    if gy == 0.0 {
                        continue;
                    }
                    db[co] += gy;
                    for ci in 0..g.in_ch {
                        let wbase = (co * g.in_ch + ci) * kk;
                        let xbase = ci * g.height * g.width;
                        for ky in 0..g.kernel {
                            let Some(iy) = g.src(oy, ky, g.height) else {
                                continue;
                            };
                            for kx in 0..g.kernel {
                                let Some(ix) = g.src(ox, kx, g.width) else {
                                    continue;
                                };
                                let xi = xbase + iy * g.width + ix;
                                let wi = wbase + ky * g.kernel + kx;
                                dw[wi] += gy * xs[xi];
                                dxs[xi] += gy * w[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}
