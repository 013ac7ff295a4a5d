use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Zero-padding policy. `Same` pads so the output covers ceil(n / stride)
/// positions (bottom/right heavy when the total padding is odd); `Valid`
/// uses no padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pad {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    out_h: usize,
    out_w: usize,
    pad_top: isize,
    pad_left: isize,
}

fn conv_geom(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: Pad) -> Result<ConvGeom> {
    if stride == 0 {
        return Err(Error::InvalidArg("conv stride must be >= 1".into()));
    }
    match pad {
        Pad::Valid => {
            if h < kh || w < kw {
                return Err(Error::shape(
                    "conv2d(valid)",
                    format!("input >= {}x{}", kh, kw),
                    format!("{}x{}", h, w),
                ));
            }
            Ok(ConvGeom {
                out_h: (h - kh) / stride + 1,
                out_w: (w - kw) / stride + 1,
                pad_top: 0,
                pad_left: 0,
            })
        }
        Pad::Same => {
            let out_h = h.div_ceil(stride);
            let out_w = w.div_ceil(stride);
            let total_h = ((out_h - 1) * stride + kh).saturating_sub(h);
            let total_w = ((out_w - 1) * stride + kw).saturating_sub(w);
            Ok(ConvGeom {
                out_h,
                out_w,
                pad_top: (total_h / 2) as isize,
                pad_left: (total_w / 2) as isize,
            })
        }
    }
}

fn kernel_dims<T: Scalar>(k: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match k.dims() {
        [kh, kw, cin, cout] => Ok((*kh, *kw, *cin, *cout)),
        other => Err(Error::shape(
            "conv kernel",
            "[kh, kw, c_in, c_out]",
            format!("{:?}", other),
        )),
    }
}

/// 2-D cross-correlation of `x` (h, w, c_in) with `k` (kh, kw, c_in, c_out).
pub fn conv2d<T: Scalar>(x: &Grid<T>, k: &Tensor<T>, stride: usize, pad: Pad) -> Result<Grid<T>> {
    let (kh, kw, cin, cout) = kernel_dims(k)?;
    if x.c() != cin {
        return Err(Error::shape(
            "conv2d input channels",
            format!("{} (kernel {:?})", cin, k.dims()),
            x.shape_str(),
        ));
    }
    let g = conv_geom(x.h(), x.w(), kh, kw, stride, pad)?;
    let (h, w) = (x.h() as isize, x.w() as isize);
    let mut out = Grid::zeros(g.out_h, g.out_w, cout);
    let xd = x.data();
    let kd = k.data();
    let od = out.data_mut();
    let mut acc = vec![T::zero(); cout];
    for oy in 0..g.out_h {
        let ybase = (oy * stride) as isize - g.pad_top;
        for ox in 0..g.out_w {
            let xbase = (ox * stride) as isize - g.pad_left;
            acc.iter_mut().for_each(|a| *a = T::zero());
            for ky in 0..kh {
                let iy = ybase + ky as isize;
                if iy < 0 || iy >= h {
                    continue;
                }
                for kx in 0..kw {
                    let ix = xbase + kx as isize;
                    if ix < 0 || ix >= w {
                        continue;
                    }
                    let xoff = ((iy * w + ix) as usize) * cin;
                    let koff = ((ky * kw + kx) * cin) * cout;
                    for ci in 0..cin {
                        let xv = xd[xoff + ci];
                        let krow = &kd[koff + ci * cout..koff + (ci + 1) * cout];
                        for (a, &kv) in acc.iter_mut().zip(krow) {
                            *a += xv * kv;
                        }
                    }
                }
            }
            let obase = (oy * g.out_w + ox) * cout;
            od[obase..obase + cout].copy_from_slice(&acc);
        }
    }
    Ok(out)
}

/// Gradients of `conv2d` w.r.t. input and kernel given the output cotangent.
pub fn conv2d_backward<T: Scalar>(
    x: &Grid<T>,
    k: &Tensor<T>,
    stride: usize,
    pad: Pad,
    gout: &Grid<T>,
) -> Result<(Grid<T>, Tensor<T>)> {
    let (kh, kw, cin, cout) = kernel_dims(k)?;
    let g = conv_geom(x.h(), x.w(), kh, kw, stride, pad)?;
    if gout.shape() != (g.out_h, g.out_w, cout) {
        return Err(Error::shape(
            "conv2d_backward cotangent",
            format!("{}x{}x{}", g.out_h, g.out_w, cout),
            gout.shape_str(),
        ));
    }
    let (h, w) = (x.h() as isize, x.w() as isize);
    let mut gx = Grid::zeros(x.h(), x.w(), cin);
    let mut gk = Tensor::zeros(k.dims());
    let xd = x.data();
    let kd = k.data();
    let god = gout.data();
    let gxd = gx.data_mut();
    let gkd = gk.data_mut();
    for oy in 0..g.out_h {
        let ybase = (oy * stride) as isize - g.pad_top;
        for ox in 0..g.out_w {
            let xbase = (ox * stride) as isize - g.pad_left;
            let gorow = &god[(oy * g.out_w + ox) * cout..(oy * g.out_w + ox + 1) * cout];
            for ky in 0..kh {
                let iy = ybase + ky as isize;
                if iy < 0 || iy >= h {
                    continue;
                }
                for kx in 0..kw {
                    let ix = xbase + kx as isize;
                    if ix < 0 || ix >= w {
                        continue;
                    }
                    let xoff = ((iy * w + ix) as usize) * cin;
                    let koff = ((ky * kw + kx) * cin) * cout;
                    for ci in 0..cin {
                        let xv = xd[xoff + ci];
                        let krow = &kd[koff + ci * cout..koff + (ci + 1) * cout];
                        let gkrow = &mut gkd[koff + ci * cout..koff + (ci + 1) * cout];
                        let mut s = T::zero();
                        for co in 0..cout {
                            let go = gorow[co];
                            s += krow[co] * go;
                            gkrow[co] += xv * go;
                        }
                        gxd[xoff + ci] += s;
                    }
                }
            }
        }
    }
    Ok((gx, gk))
}

/// Exact adjoint of [`conv2d`] with the same kernel and stride: maps a
/// (h', w', c_out) grid back to the (h, w, c_in) domain, where valid
/// padding reconstructs h = (h' - 1) * stride + kh and same padding
/// reconstructs h = h' * stride. Satisfies
/// `<conv2d(x, k), y> == <x, conv2d_transpose(y, k)>` exactly in exact
/// arithmetic.
pub fn conv2d_transpose<T: Scalar>(
    y: &Grid<T>,
    k: &Tensor<T>,
    stride: usize,
    pad: Pad,
) -> Result<Grid<T>> {
    let (kh, kw, cin, cout) = kernel_dims(k)?;
    if y.c() != cout {
        return Err(Error::shape(
            "conv2d_transpose input channels",
            format!("{} (kernel {:?})", cout, k.dims()),
            y.shape_str(),
        ));
    }
    if stride == 0 {
        return Err(Error::InvalidArg("conv stride must be >= 1".into()));
    }
    let (out_h, out_w) = match pad {
        Pad::Valid => ((y.h() - 1) * stride + kh, (y.w() - 1) * stride + kw),
        Pad::Same => (y.h() * stride, y.w() * stride),
    };
    let g = conv_geom(out_h, out_w, kh, kw, stride, pad)?;
    debug_assert_eq!((g.out_h, g.out_w), (y.h(), y.w()));
    let mut out = Grid::zeros(out_h, out_w, cin);
    let (hh, ww) = (out_h as isize, out_w as isize);
    let yd = y.data();
    let kd = k.data();
    let od = out.data_mut();
    for oy in 0..y.h() {
        let ybase = (oy * stride) as isize - g.pad_top;
        for ox in 0..y.w() {
            let xbase = (ox * stride) as isize - g.pad_left;
            let yrow = &yd[(oy * y.w() + ox) * cout..(oy * y.w() + ox + 1) * cout];
            for ky in 0..kh {
                let iy = ybase + ky as isize;
                if iy < 0 || iy >= hh {
                    continue;
                }
                for kx in 0..kw {
                    let ix = xbase + kx as isize;
                    if ix < 0 || ix >= ww {
                        continue;
                    }
                    let ooff = ((iy * ww + ix) as usize) * cin;
                    let koff = ((ky * kw + kx) * cin) * cout;
                    for ci in 0..cin {
                        let krow = &kd[koff + ci * cout..koff + (ci + 1) * cout];
                        let mut s = T::zero();
                        for (yv, kv) in yrow.iter().zip(krow) {
                            s += *yv * *kv;
                        }
                        od[ooff + ci] += s;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `conv2d_transpose` w.r.t. its input and kernel.
/// The input gradient is `conv2d(gout, k)` with the same stride/padding.
pub fn conv2d_transpose_backward<T: Scalar>(
    y: &Grid<T>,
    k: &Tensor<T>,
    stride: usize,
    pad: Pad,
    gout: &Grid<T>,
) -> Result<(Grid<T>, Tensor<T>)> {
    let (kh, kw, cin, cout) = kernel_dims(k)?;
    let gy = conv2d(gout, k, stride, pad)?;
    if gy.shape() != y.shape() {
        return Err(Error::shape(
            "conv2d_transpose_backward cotangent",
            y.shape_str(),
            format!("adjoint-of {}", gout.shape_str()),
        ));
    }
    let g = conv_geom(gout.h(), gout.w(), kh, kw, stride, pad)?;
    let (hh, ww) = (gout.h() as isize, gout.w() as isize);
    let mut gk = Tensor::zeros(k.dims());
    let yd = y.data();
    let god = gout.data();
    let gkd = gk.data_mut();
    for oy in 0..y.h() {
        let ybase = (oy * stride) as isize - g.pad_top;
        for ox in 0..y.w() {
            let xbase = (ox * stride) as isize - g.pad_left;
            let yrow = &yd[(oy * y.w() + ox) * cout..(oy * y.w() + ox + 1) * cout];
            for ky in 0..kh {
                let iy = ybase + ky as isize;
                if iy < 0 || iy >= hh {
                    continue;
                }
                for kx in 0..kw {
                    let ix = xbase + kx as isize;
                    if ix < 0 || ix >= ww {
                        continue;
                    }
                    let goff = ((iy * ww + ix) as usize) * cin;
                    let koff = ((ky * kw + kx) * cin) * cout;
                    for ci in 0..cin {
                        let gv = god[goff + ci];
                        let gkrow = &mut gkd[koff + ci * cout..koff + (ci + 1) * cout];
                        for (gkv, yv) in gkrow.iter_mut().zip(yrow) {
                            *gkv += gv * *yv;
                        }
                    }
                }
            }
        }
    }
    Ok((gy, gk))
}

/// Add a per-output-channel bias in place.
pub fn add_channel_bias<T: Scalar>(g: &mut Grid<T>, bias: &[T]) -> Result<()> {
    if bias.len() != g.c() {
        return Err(Error::shape("add_channel_bias", g.c(), bias.len()));
    }
    let c = g.c();
    for row in g.data_mut().chunks_exact_mut(c) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
    Ok(())
}

/// Per-output-channel sums of the cotangent (bias gradient).
pub fn channel_sums<T: Scalar>(g: &Grid<T>) -> Vec<T> {
    let c = g.c();
    let mut sums = vec![T::zero(); c];
    for row in g.data().chunks_exact(c) {
        for (s, &v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    sums
}
