//! Slice-level forward and backward kernels.
//!
//! Every reduction accumulates in `f64` and rounds once into the storage
//! type. Loop orders are fixed, so results are bit-reproducible.

use crate::real::Real;

/// Dot product with eight independent partial sums.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l].wide() * y[l].wide();
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x.wide() * y.wide();
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn axpy<T: Real>(acc: &mut [f64], g: f64, x: &[T]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += g * v.wide();
    }
}

pub(crate) struct LinearShape {
    pub batch: usize,
    pub inputs: usize,
    pub outputs: usize,
}

pub(crate) fn linear_forward<T: Real>(s: &LinearShape, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let mut y = Vec::with_capacity(s.batch * s.outputs);
    for i in 0..s.batch {
        let xr = &x[i * s.inputs..(i + 1) * s.inputs];
        for o in 0..s.outputs {
            let wr = &w[o * s.inputs..(o + 1) * s.inputs];
            y.push(T::cast(dot(xr, wr) + b[o].wide()));
        }
    }
    y
}

pub(crate) fn linear_backward_input<T: Real>(s: &LinearShape, dy: &[T], w: &[T]) -> Vec<T> {
    let mut dx = Vec::with_capacity(s.batch * s.inputs);
    let mut acc = vec![0.0f64; s.inputs];
    for i in 0..s.batch {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for o in 0..s.outputs {
            let g = dy[i * s.outputs + o].wide();
            if g != 0.0 {
                axpy(&mut acc, g, &w[o * s.inputs..(o + 1) * s.inputs]);
            }
        }
        dx.extend(acc.iter().map(|&a| T::cast(a)));
    }
    dx
}

pub(crate) fn linear_backward_params<T: Real>(
    s: &LinearShape,
    dy: &[T],
    x: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut dw = vec![0.0f64; s.outputs * s.inputs];
    let mut db = vec![0.0f64; s.outputs];
    for i in 0..s.batch {
        let xr = &x[i * s.inputs..(i + 1) * s.inputs];
        for o in 0..s.outputs {
            let g = dy[i * s.outputs + o].wide();
            if g != 0.0 {
                db[o] += g;
                axpy(&mut dw[o * s.inputs..(o + 1) * s.inputs], g, xr);
            }
        }
    }
    (
        dw.into_iter().map(T::cast).collect(),
        db.into_iter().map(T::cast).collect(),
    )
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvShape {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvShape {
    fn pad(&self) -> (isize, isize) {
        (((self.kh - 1) / 2) as isize, ((self.kw - 1) / 2) as isize)
    }

    /// Valid kernel offsets `(lo, hi)` along one axis for output index `i`.
    #[inline]
    fn span(i: usize, pad: isize, k: usize, n: usize) -> (usize, usize) {
        let start = i as isize - pad;
        let lo = (-start).max(0) as usize;
        let hi = ((n as isize - start).min(k as isize)).max(0) as usize;
        (lo, hi)
    }
}

/// Same-padded cross-correlation.
pub(crate) fn conv2d_forward<T: Real>(s: &ConvShape, x: &[T], k: &[T], b: &[T]) -> Vec<T> {
    let (ph, pw) = s.pad();
    let plane = s.h * s.w;
    let mut y = vec![T::zero(); s.batch * s.cout * plane];
    for n in 0..s.batch {
        for o in 0..s.cout {
            let out = &mut y[(n * s.cout + o) * plane..(n * s.cout + o + 1) * plane];
            for i in 0..s.h {
                let (ulo, uhi) = ConvShape::span(i, ph, s.kh, s.h);
                for j in 0..s.w {
                    let (vlo, vhi) = ConvShape::span(j, pw, s.kw, s.w);
                    let mut acc = b[o].wide();
                    for c in 0..s.cin {
                        let xb = &x[(n * s.cin + c) * plane..];
                        let kb = &k[(o * s.cin + c) * s.kh * s.kw..];
                        for u in ulo..uhi {
                            let xi = (i as isize + u as isize - ph) as usize;
                            for v in vlo..vhi {
                                let xj = (j as isize + v as isize - pw) as usize;
                                acc += xb[xi * s.w + xj].wide() * kb[u * s.kw + v].wide();
                            }
                        }
                    }
                    out[i * s.w + j] = T::cast(acc);
                }
            }
        }
    }
    y
}

/// Returns `(dx, dk, db)`; `dx` is skipped when `need_input` is false.
pub(crate) fn conv2d_backward<T: Real>(
    s: &ConvShape,
    dy: &[T],
    x: &[T],
    k: &[T],
    need_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (ph, pw) = s.pad();
    let plane = s.h * s.w;
    let ksz = s.kh * s.kw;
    let mut dx = need_input.then(|| vec![0.0f64; s.batch * s.cin * plane]);
    let mut dk = vec![0.0f64; s.cout * s.cin * ksz];
    let mut db = vec![0.0f64; s.cout];
    for n in 0..s.batch {
        for o in 0..s.cout {
            let g_plane = &dy[(n * s.cout + o) * plane..(n * s.cout + o + 1) * plane];
            for i in 0..s.h {
                let (ulo, uhi) = ConvShape::span(i, ph, s.kh, s.h);
                for j in 0..s.w {
                    let g = g_plane[i * s.w + j].wide();
                    if g == 0.0 {
                        continue;
                    }
                    db[o] += g;
                    let (vlo, vhi) = ConvShape::span(j, pw, s.kw, s.w);
                    for c in 0..s.cin {
                        let base = (n * s.cin + c) * plane;
                        let kbase = (o * s.cin + c) * ksz;
                        for u in ulo..uhi {
                            let xi = (i as isize + u as isize - ph) as usize;
                            for v in vlo..vhi {
                                let xj = (j as isize + v as isize - pw) as usize;
                                let xo = base + xi * s.w + xj;
                                dk[kbase + u * s.kw + v] += g * x[xo].wide();
                                if let Some(dx) = dx.as_mut() {
                                    dx[xo] += g * k[kbase + u * s.kw + v].wide();
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let cast = |v: Vec<f64>| v.into_iter().map(T::cast).collect::<Vec<T>>();
    (dx.map(cast), cast(dk), cast(db))
}

/// Per-channel statistics over `(B, H, W)` for a `(B, C, H, W)` tensor.
pub(crate) fn channel_stats<T: Real>(x: &[T], batch: usize, ch: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (batch * plane) as f64;
    let mut mean = vec![0.0f64; ch];
    for b in 0..batch {
        for c in 0..ch {
            let s: f64 = x[(b * ch + c) * plane..(b * ch + c + 1) * plane]
                .iter()
                .map(|v| v.wide())
                .sum();
            mean[c] += s;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0f64; ch];
    for b in 0..batch {
        for c in 0..ch {
            let m = mean[c];
            let s: f64 = x[(b * ch + c) * plane..(b * ch + c + 1) * plane]
                .iter()
                .map(|v| (v.wide() - m).powi(2))
                .sum();
            var[c] += s;
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

/// Normalizes with the given per-channel mean and variance.
/// Returns `(y, xhat, inv_std)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_apply<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    mean: &[f64],
    var: &[f64],
    eps: f64,
    batch: usize,
    plane: usize,
) -> (Vec<T>, Vec<f64>, Vec<f64>) {
    let ch = gamma.len();
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut y = Vec::with_capacity(x.len());
    let mut xhat = Vec::with_capacity(x.len());
    for b in 0..batch {
        for c in 0..ch {
            let (g, bt) = (gamma[c].wide(), beta[c].wide());
            for &v in &x[(b * ch + c) * plane..(b * ch + c + 1) * plane] {
                let h = (v.wide() - mean[c]) * inv_std[c];
                xhat.push(h);
                y.push(T::cast(g * h + bt));
            }
        }
    }
    (y, xhat, inv_std)
}

/// Returns `(dx, dgamma, dbeta)`. With `batch_stats` the input gradient
/// includes the paths through the batch mean and variance.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_backward<T: Real>(
    dy: &[T],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[T],
    batch: usize,
    plane: usize,
    batch_stats: bool,
    need_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let ch = gamma.len();
    let n = (batch * plane) as f64;
    let mut dgamma = vec![0.0f64; ch];
    let mut dbeta = vec![0.0f64; ch];
    for b in 0..batch {
        for c in 0..ch {
            let r = (b * ch + c) * plane..(b * ch + c + 1) * plane;
            for (g, h) in dy[r.clone()].iter().zip(&xhat[r]) {
                dgamma[c] += g.wide() * h;
                dbeta[c] += g.wide();
            }
        }
    }
    let dx = need_input.then(|| {
        let mut dx = Vec::with_capacity(dy.len());
        for b in 0..batch {
            for c in 0..ch {
                let r = (b * ch + c) * plane..(b * ch + c + 1) * plane;
                let scale = gamma[c].wide() * inv_std[c];
                for (g, h) in dy[r.clone()].iter().zip(&xhat[r]) {
                    let v = if batch_stats {
                        scale * (g.wide() - dbeta[c] / n - h * dgamma[c] / n)
                    } else {
                        scale * g.wide()
                    };
                    dx.push(T::cast(v));
                }
            }
        }
        dx
    });
    (
        dx,
        dgamma.into_iter().map(T::cast).collect(),
        dbeta.into_iter().map(T::cast).collect(),
    )
}
