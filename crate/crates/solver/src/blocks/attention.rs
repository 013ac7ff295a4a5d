use cgm_core::{CounterRng, Error, GradStore, Grid, Pad, ParamStore, Result, Scalar};

use crate::act::{softmax_rows, softmax_rows_backward};
use crate::layers::Conv2dLayer;

/// Single-head spatial self-attention with a residual connection:
/// Q, K, V by 1x1 convs, scores softmax(Q K^T / sqrt(c)) over all h*w
/// positions, then a zero-initialized 1x1 output conv. Restricted to
/// low resolutions because the score matrix is (h*w)^2.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub wq: Conv2dLayer,
    pub wk: Conv2dLayer,
    pub wv: Conv2dLayer,
    pub wout: Conv2dLayer,
    pub channels: usize,
    pub max_side: usize,
}

#[derive(Debug)]
pub struct AttentionTape<T> {
    pub x: Grid<T>,
    pub q: Grid<T>,
    pub k: Grid<T>,
    pub v: Grid<T>,
    /// Row-softmaxed score matrix, n x n flattened.
    pub probs: Vec<T>,
    pub o: Grid<T>,
}

impl<T: Scalar> AttentionTape<T> {
    pub fn byte_size(&self) -> usize {
        self.x.byte_size()
            + self.q.byte_size()
            + self.k.byte_size()
            + self.v.byte_size()
            + self.probs.len() * T::BYTES
            + self.o.byte_size()
    }
}

/// out[i, :] += a[i, :] @ b where shapes are (n, c) x (c, c)... helpers
/// below operate on pixel-major (n, c) buffers.
fn matmul_nc_cn<T: Scalar>(a: &[T], b: &[T], n: usize, c: usize, scale: T) -> Vec<T> {
    // (n, c) x (n, c)^T -> (n, n)
    let mut out = vec![T::zero(); n * n];
    for i in 0..n {
        let arow = &a[i * c..(i + 1) * c];
        for j in 0..n {
            let brow = &b[j * c..(j + 1) * c];
            let mut s = T::zero();
            for (av, bv) in arow.iter().zip(brow) {
                s += *av * *bv;
            }
            out[i * n + j] = s * scale;
        }
    }
    out
}

fn matmul_nn_nc<T: Scalar>(p: &[T], v: &[T], n: usize, c: usize) -> Vec<T> {
    // (n, n) x (n, c) -> (n, c)
    let mut out = vec![T::zero(); n * c];
    for i in 0..n {
        let prow = &p[i * n..(i + 1) * n];
        let orow = &mut out[i * c..(i + 1) * c];
        for (j, &pv) in prow.iter().enumerate() {
            let vrow = &v[j * c..(j + 1) * c];
            for (o, &vv) in orow.iter_mut().zip(vrow) {
                *o += pv * vv;
            }
        }
    }
    out
}

fn matmul_nn_t_nc<T: Scalar>(p: &[T], g: &[T], n: usize, c: usize) -> Vec<T> {
    // (n, n)^T x (n, c) -> (n, c)
    let mut out = vec![T::zero(); n * c];
    for i in 0..n {
        let prow = &p[i * n..(i + 1) * n];
        let grow = &g[i * c..(i + 1) * c];
        for (j, &pv) in prow.iter().enumerate() {
            let orow = &mut out[j * c..(j + 1) * c];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += pv * gv;
            }
        }
    }
    out
}

impl AttentionBlock {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut CounterRng,
        name: &str,
        channels: usize,
        max_side: usize,
    ) -> Result<Self> {
        let mk = |store: &mut ParamStore<T>, rng: &mut CounterRng, suffix: &str, zero: bool| {
            Conv2dLayer::init(
                store,
                rng,
                &format!("{name}.{suffix}"),
                1,
                1,
                channels,
                channels,
                1,
                Pad::Same,
                zero,
            )
        };
        Ok(AttentionBlock {
            wq: mk(store, rng, "q", false)?,
            wk: mk(store, rng, "k", false)?,
            wv: mk(store, rng, "v", false)?,
            wout: mk(store, rng, "out", true)?,
            channels,
            max_side,
        })
    }

    fn check_resolution<T: Scalar>(&self, x: &Grid<T>) -> Result<()> {
        if x.h() > self.max_side || x.w() > self.max_side {
            return Err(Error::InvalidArg(format!(
                "attention resolution {}x{} above the configured cap {}x{}",
                x.h(),
                x.w(),
                self.max_side,
                self.max_side
            )));
        }
        Ok(())
    }

    fn compute<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Grid<T>,
    ) -> Result<(Grid<T>, AttentionTape<T>)> {
        self.check_resolution(x)?;
        let (h, w, c) = x.shape();
        let n = h * w;
        let q = self.wq.forward(store, x)?;
        let k = self.wk.forward(store, x)?;
        let v = self.wv.forward(store, x)?;
        let scale = T::from_f64(1.0 / (c as f64).sqrt());
        let mut probs = matmul_nc_cn(q.data(), k.data(), n, c, scale);
        softmax_rows(&mut probs, n, n);
        let o_vec = matmul_nn_nc(&probs, v.data(), n, c);
        let o = Grid::from_vec(h, w, c, o_vec)?;
        let out = x.add(&self.wout.forward(store, &o)?)?;
        Ok((
            out,
            AttentionTape {
                x: x.clone(),
                q,
                k,
                v,
                probs,
                o,
            },
        ))
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Grid<T>) -> Result<Grid<T>> {
        Ok(self.compute(store, x)?.0)
    }

    pub fn forward_tape<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Grid<T>,
    ) -> Result<(Grid<T>, AttentionTape<T>)> {
        self.compute(store, x)
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut GradStore<T>,
        tape: &AttentionTape<T>,
        gout: &Grid<T>,
    ) -> Result<Grid<T>> {
        let (h, w, c) = tape.x.shape();
        let n = h * w;
        let scale = T::from_f64(1.0 / (c as f64).sqrt());

        let go = self.wout.backward(store, grads, &tape.o, gout)?;
        // gP = gO V^T, gV = P^T gO
        let gp = matmul_nc_cn(go.data(), tape.v.data(), n, c, T::one());
        let gv_vec = matmul_nn_t_nc(&tape.probs, go.data(), n, c);
        let gs = softmax_rows_backward(&tape.probs, &gp, n, n);
        // gQ = gS K * scale, gK = gS^T Q * scale
        let mut gq_vec = matmul_nn_nc(&gs, tape.k.data(), n, c);
        gq_vec.iter_mut().for_each(|v| *v *= scale);
        let mut gk_vec = matmul_nn_t_nc(&gs, tape.q.data(), n, c);
        gk_vec.iter_mut().for_each(|v| *v *= scale);

        let gq = Grid::from_vec(h, w, c, gq_vec)?;
        let gk = Grid::from_vec(h, w, c, gk_vec)?;
        let gv = Grid::from_vec(h, w, c, gv_vec)?;
        let mut gx = gout.clone();
        gx.add_scaled_assign(&self.wq.backward(store, grads, &tape.x, &gq)?, T::one())?;
        gx.add_scaled_assign(&self.wk.backward(store, grads, &tape.x, &gk)?, T::one())?;
        gx.add_scaled_assign(&self.wv.backward(store, grads, &tape.x, &gv)?, T::one())?;
        Ok(gx)
    }
}
