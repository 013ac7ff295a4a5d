//! Parameterized layers: convolutions, transposed convolutions, linear
//! maps and group normalization. Layer structs hold parameter handles
//! into a [`ParamStore`]; backward methods accumulate into a paired
//! [`GradStore`] and return the input cotangent.

use cgm_core::ops::conv::{add_channel_bias, channel_sums};
use cgm_core::{
    conv2d, conv2d_backward, conv2d_transpose, conv2d_transpose_backward, CounterRng, Error,
    GradStore, Grid, Pad, ParamId, ParamStore, Result, Scalar, Tensor,
};

use crate::act::{silu, silu_grad};

fn random_tensor<T: Scalar>(rng: &mut CounterRng, dims: &[usize], std: f64) -> Tensor<T> {
    let n: usize = dims.iter().product();
    Tensor::from_vec(
        dims,
        (0..n).map(|_| T::from_f64(rng.normal() * std)).collect(),
    )
    .unwrap()
}

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: Pad,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut CounterRng,
        name: &str,
        kh: usize,
        kw: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        pad: Pad,
        zero_init: bool,
    ) -> Result<Self> {
        let kernel = if zero_init {
            Tensor::zeros(&[kh, kw, cin, cout])
        } else {
            let std = (2.0 / (kh * kw * cin) as f64).sqrt();
            random_tensor(rng, &[kh, kw, cin, cout], std)
        };
        let kernel = store.add(format!("{name}.kernel"), kernel)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        Ok(Conv2dLayer {
            kernel,
            bias,
            stride,
            pad,
        })
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Grid<T>) -> Result<Grid<T>> {
        let mut out = conv2d(x, store.value(self.kernel), self.stride, self.pad)?;
        add_channel_bias(&mut out, store.value(self.bias).data())?;
        Ok(out)
    }

    /// Accumulates kernel/bias gradients and returns the input cotangent.
    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut GradStore<T>,
        x: &Grid<T>,
        gout: &Grid<T>,
    ) -> Result<Grid<T>> {
        let (gx, gk) = conv2d_backward(x, store.value(self.kernel), self.stride, self.pad, gout)?;
        grads.accumulate(self.kernel, &gk)?;
        grads.accumulate_slice(self.bias, &channel_sums(gout))?;
        Ok(gx)
    }
}

/// Transposed convolution holding a kernel in conv orientation
/// `[kh, kw, c_out, c_in]`: it is the exact adjoint of the matching
/// strided convolution, mapping c_in channels back to c_out channels and
/// doubling the resolution for stride 2.
#[derive(Debug, Clone)]
pub struct ConvTranspose2dLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: Pad,
}

impl ConvTranspose2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut CounterRng,
        name: &str,
        kh: usize,
        kw: usize,
        cout: usize,
        cin: usize,
        stride: usize,
        pad: Pad,
    ) -> Result<Self> {
        let std = (2.0 / (kh * kw * cin) as f64).sqrt();
        let kernel = store.add(
            format!("{name}.kernel"),
            random_tensor::<T>(rng, &[kh, kw, cout, cin], std),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        Ok(ConvTranspose2dLayer {
            kernel,
            bias,
            stride,
            pad,
        })
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Grid<T>) -> Result<Grid<T>> {
        let mut out = conv2d_transpose(x, store.value(self.kernel), self.stride, self.pad)?;
        add_channel_bias(&mut out, store.value(self.bias).data())?;
        Ok(out)
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut GradStore<T>,
        x: &Grid<T>,
        gout: &Grid<T>,
    ) -> Result<Grid<T>> {
        let (gx, gk) =
            conv2d_transpose_backward(x, store.value(self.kernel), self.stride, self.pad, gout)?;
        grads.accumulate(self.kernel, &gk)?;
        grads.accumulate_slice(self.bias, &channel_sums(gout))?;
        Ok(gx)
    }
}

/// Dense map on vectors, weight dims `[n_in, n_out]`.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub n_in: usize,
    pub n_out: usize,
}

impl LinearLayer {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut CounterRng,
        name: &str,
        n_in: usize,
        n_out: usize,
        zero_init: bool,
    ) -> Result<Self> {
        let weight = if zero_init {
            Tensor::zeros(&[n_in, n_out])
        } else {
            random_tensor(rng, &[n_in, n_out], (1.0 / n_in as f64).sqrt())
        };
        let weight = store.add(format!("{name}.weight"), weight)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[n_out]))?;
        Ok(LinearLayer {
            weight,
            bias,
            n_in,
            n_out,
        })
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.n_in {
            return Err(Error::shape("LinearLayer::forward", self.n_in, x.len()));
        }
        let w = store.value(self.weight).data();
        let b = store.value(self.bias).data();
        let mut out = b.to_vec();
        for (i, &xv) in x.iter().enumerate() {
            let row = &w[i * self.n_out..(i + 1) * self.n_out];
            for (o, &wv) in out.iter_mut().zip(row) {
                *o += xv * wv;
            }
        }
        Ok(out)
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut GradStore<T>,
        x: &[T],
        gout: &[T],
    ) -> Result<Vec<T>> {
        let w = store.value(self.weight).data();
        let mut gx = vec![T::zero(); self.n_in];
        for (i, gxv) in gx.iter_mut().enumerate() {
            let row = &w[i * self.n_out..(i + 1) * self.n_out];
            let mut s = T::zero();
            for (&wv, &gv) in row.iter().zip(gout) {
                s += wv * gv;
            }
            *gxv = s;
            let gw_row: Vec<T> = gout.iter().map(|&g| x[i] * g).collect();
            let gw = grads.grad_mut(self.weight);
            for (a, b) in gw.data_mut()[i * self.n_out..(i + 1) * self.n_out]
                .iter_mut()
                .zip(gw_row)
            {
                *a += b;
            }
        }
        grads.accumulate_slice(self.bias, gout)?;
        Ok(gx)
    }
}

/// Per-group statistics saved by the group norm forward.
#[derive(Debug, Clone)]
pub struct GnStats<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

impl<T: Scalar> GnStats<T> {
    pub fn byte_size(&self) -> usize {
        (self.mean.len() + self.inv_std.len()) * T::BYTES
    }
}

/// Group normalization over (spatial x channels-in-group) with learned
/// per-channel scale and bias. Groups = min(8, c), falling back to c
/// when 8 does not divide c.
#[derive(Debug, Clone)]
pub struct GroupNormLayer {
    pub scale: ParamId,
    pub bias: ParamId,
    pub groups: usize,
    pub channels: usize,
}

pub fn group_count(channels: usize) -> usize {
    let g = channels.min(8);
    if channels % g == 0 {
        g
    } else {
        channels
    }
}

const GN_EPS: f64 = 1e-5;

impl GroupNormLayer {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        let mut scale = Tensor::zeros(&[channels]);
        scale.fill(T::one());
        let scale = store.add(format!("{name}.scale"), scale)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[channels]))?;
        Ok(GroupNormLayer {
            scale,
            bias,
            groups: group_count(channels),
            channels,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Grid<T>,
    ) -> Result<(Grid<T>, GnStats<T>)> {
        if x.c() != self.channels {
            return Err(Error::shape("GroupNormLayer::forward", self.channels, x.c()));
        }
        let (h, w, c) = x.shape();
        let gsize = c / self.groups;
        let n_per_group = (h * w * gsize) as f64;
        let mut mean = vec![T::zero(); self.groups];
        let mut inv_std = vec![T::zero(); self.groups];
        let xd = x.data();
        for g in 0..self.groups {
            let mut sum = 0.0f64;
            let mut sumsq = 0.0f64;
            for pix in 0..h * w {
                let base = pix * c + g * gsize;
                for v in &xd[base..base + gsize] {
                    let f = v.as_f64();
                    sum += f;
                    sumsq += f * f;
                }
            }
            let mu = sum / n_per_group;
            let var = (sumsq / n_per_group - mu * mu).max(0.0);
            mean[g] = T::from_f64(mu);
            inv_std[g] = T::from_f64(1.0 / (var + GN_EPS).sqrt());
        }
        let sc = store.value(self.scale).data();
        let bs = store.value(self.bias).data();
        let mut out = Grid::zeros(h, w, c);
        let od = out.data_mut();
        for pix in 0..h * w {
            for ch in 0..c {
                let g = ch / gsize;
                let i = pix * c + ch;
                od[i] = (xd[i] - mean[g]) * inv_std[g] * sc[ch] + bs[ch];
            }
        }
        Ok((out, GnStats { mean, inv_std }))
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut GradStore<T>,
        x: &Grid<T>,
        stats: &GnStats<T>,
        gout: &Grid<T>,
    ) -> Result<Grid<T>> {
        let (h, w, c) = x.shape();
        let gsize = c / self.groups;
        let n_per_group = T::from_f64((h * w * gsize) as f64);
        let sc = store.value(self.scale).data();
        let xd = x.data();
        let god = gout.data();

        let mut gscale = vec![T::zero(); c];
        let mut gbias = vec![T::zero(); c];
        // Per-group sums of dxhat and dxhat * xhat.
        let mut s1 = vec![T::zero(); self.groups];
        let mut s2 = vec![T::zero(); self.groups];
        for pix in 0..h * w {
            for ch in 0..c {
                let g = ch / gsize;
                let i = pix * c + ch;
                let xhat = (xd[i] - stats.mean[g]) * stats.inv_std[g];
                let go = god[i];
                gscale[ch] += go * xhat;
                gbias[ch] += go;
                let dxhat = go * sc[ch];
                s1[g] += dxhat;
                s2[g] += dxhat * xhat;
            }
        }
        grads.accumulate_slice(self.scale, &gscale)?;
        grads.accumulate_slice(self.bias, &gbias)?;

        let mut gx = Grid::zeros(h, w, c);
        let gxd = gx.data_mut();
        for pix in 0..h * w {
            for ch in 0..c {
                let g = ch / gsize;
                let i = pix * c + ch;
                let xhat = (xd[i] - stats.mean[g]) * stats.inv_std[g];
                let dxhat = god[i] * sc[ch];
                gxd[i] = stats.inv_std[g] * (dxhat - s1[g] / n_per_group - xhat * s2[g] / n_per_group);
            }
        }
        Ok(gx)
    }
}

/// norm -> silu fused helper used by the tail; returns intermediates
/// needed for backward.
pub fn norm_act_forward<T: Scalar>(
    norm: &GroupNormLayer,
    store: &ParamStore<T>,
    x: &Grid<T>,
) -> Result<(Grid<T>, Grid<T>, GnStats<T>)> {
    let (n, stats) = norm.forward(store, x)?;
    let a = n.map(silu);
    Ok((a, n, stats))
}

pub fn norm_act_backward<T: Scalar>(
    norm: &GroupNormLayer,
    store: &ParamStore<T>,
    grads: &mut GradStore<T>,
    x: &Grid<T>,
    n: &Grid<T>,
    stats: &GnStats<T>,
    ga: &Grid<T>,
) -> Result<Grid<T>> {
    let gn = ga.zip_map(n, |g, nv| g * silu_grad(nv))?;
    norm.backward(store, grads, x, stats, &gn)
}
