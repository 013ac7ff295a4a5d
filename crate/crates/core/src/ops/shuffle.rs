use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scalar::Scalar;

/// Rearrange channel depth into spatial resolution by factor `r`:
/// (h, w, c) -> (h*r, w*r, c/r^2). Bijective; the inverse is
/// [`pixel_unshuffle`]. Element mapping follows the sub-pixel convolution
/// convention: out(y*r+dy, x*r+dx, co) = in(y, x, co*r^2 + dy*r + dx).
pub fn pixel_shuffle<T: Scalar>(x: &Grid<T>, r: usize) -> Result<Grid<T>> {
    if r == 0 {
        return Err(Error::InvalidArg("pixel_shuffle factor must be >= 1".into()));
    }
    if r == 1 {
        return Ok(x.clone());
    }
    let r2 = r * r;
    if x.c() % r2 != 0 {
        return Err(Error::shape(
            "pixel_shuffle channels",
            format!("multiple of r^2 = {}", r2),
            x.shape_str(),
        ));
    }
    let (h, w, c) = x.shape();
    let co = c / r2;
    let mut out = Grid::zeros(h * r, w * r, co);
    let xd = x.data();
    let od = out.data_mut();
    let ow = w * r;
    for y in 0..h {
        for xx in 0..w {
            let ibase = (y * w + xx) * c;
            for dy in 0..r {
                let oy = y * r + dy;
                for dx in 0..r {
                    let ox = xx * r + dx;
                    let obase = (oy * ow + ox) * co;
                    let sub = dy * r + dx;
                    for ch in 0..co {
                        od[obase + ch] = xd[ibase + ch * r2 + sub];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`pixel_shuffle`]: (h, w, c) -> (h/r, w/r, c*r^2)
/// with h and w divisible by r.
pub fn pixel_unshuffle<T: Scalar>(x: &Grid<T>, r: usize) -> Result<Grid<T>> {
    if r == 0 {
        return Err(Error::InvalidArg("pixel_unshuffle factor must be >= 1".into()));
    }
    if r == 1 {
        return Ok(x.clone());
    }
    if x.h() % r != 0 || x.w() % r != 0 {
        return Err(Error::shape(
            "pixel_unshuffle spatial dims",
            format!("multiples of r = {}", r),
            x.shape_str(),
        ));
    }
    let (h, w, c) = x.shape();
    let r2 = r * r;
    let (oh, ow, oc) = (h / r, w / r, c * r2);
    let mut out = Grid::zeros(oh, ow, oc);
    let xd = x.data();
    let od = out.data_mut();
    for oy in 0..oh {
        for ox in 0..ow {
            let obase = (oy * ow + ox) * oc;
            for dy in 0..r {
                let iy = oy * r + dy;
                for dx in 0..r {
                    let ix = ox * r + dx;
                    let ibase = (iy * w + ix) * c;
                    let sub = dy * r + dx;
                    for ch in 0..c {
                        od[obase + ch * r2 + sub] = xd[ibase + ch];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Concatenate grids along the channel dimension; all parts must share
/// spatial dimensions; order is preserved.
pub fn concat_channels<T: Scalar>(parts: &[&Grid<T>]) -> Result<Grid<T>> {
    if parts.is_empty() {
        return Err(Error::InvalidArg("concat_channels of zero parts".into()));
    }
    let (h, w) = (parts[0].h(), parts[0].w());
    for p in parts {
        if (p.h(), p.w()) != (h, w) {
            return Err(Error::shape(
                "concat_channels spatial dims",
                format!("{}x{}", h, w),
                p.shape_str(),
            ));
        }
    }
    let c_total: usize = parts.iter().map(|p| p.c()).sum();
    let mut out = Grid::zeros(h, w, c_total);
    let od = out.data_mut();
    for pix in 0..h * w {
        let mut off = pix * c_total;
        for p in parts {
            let c = p.c();
            od[off..off + c].copy_from_slice(&p.data()[pix * c..(pix + 1) * c]);
            off += c;
        }
    }
    Ok(out)
}

/// Split a grid back into channel blocks of the given sizes
/// (the adjoint/inverse of [`concat_channels`]).
pub fn split_channels<T: Scalar>(g: &Grid<T>, sizes: &[usize]) -> Result<Vec<Grid<T>>> {
    let total: usize = sizes.iter().sum();
    if total != g.c() {
        return Err(Error::shape("split_channels", g.c(), total));
    }
    let (h, w, c) = g.shape();
    let mut outs: Vec<Grid<T>> = sizes.iter().map(|&s| Grid::zeros(h, w, s)).collect();
    for pix in 0..h * w {
        let mut off = pix * c;
        for (out, &s) in outs.iter_mut().zip(sizes) {
            let dst = pix * s;
            out.data_mut()[dst..dst + s].copy_from_slice(&g.data()[off..off + s]);
            off += s;
        }
    }
    Ok(outs)
}
