use cgm_core::{CounterRng, GradStore, Grid, Pad, ParamStore, Result, Scalar};

use crate::act::{silu, silu_grad};
use crate::blocks::time::TIME_DIM;
use crate::layers::{Conv2dLayer, GnStats, GroupNormLayer, LinearLayer};

/// Residual block with time-conditioned channel modulation:
/// out = x + conv3x3(silu(norm(x))) * (1 + gamma(t)) + beta(t), where
/// gamma/beta come from zero-initialized linear maps of the time
/// embedding. With the convolution zero-initialized the block is exactly
/// the identity at init.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub norm: GroupNormLayer,
    pub conv: Conv2dLayer,
    pub film_gamma: LinearLayer,
    pub film_beta: LinearLayer,
    pub channels: usize,
}

#[derive(Debug)]
pub struct ResidualTape<T> {
    pub x: Grid<T>,
    pub stats: GnStats<T>,
    /// Norm output (pre-activation).
    pub normed: Grid<T>,
    /// silu(normed), the convolution input.
    pub act: Grid<T>,
    /// Convolution output before modulation.
    pub conv_out: Grid<T>,
}

impl<T: Scalar> ResidualTape<T> {
    pub fn byte_size(&self) -> usize {
        self.x.byte_size()
            + self.stats.byte_size()
            + self.normed.byte_size()
            + self.act.byte_size()
            + self.conv_out.byte_size()
    }
}

impl ResidualBlock {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut CounterRng,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        Ok(ResidualBlock {
            norm: GroupNormLayer::init(store, &format!("{name}.norm"), channels)?,
            conv: Conv2dLayer::init(
                store,
                rng,
                &format!("{name}.conv"),
                3,
                3,
                channels,
                channels,
                1,
                Pad::Same,
                true,
            )?,
            film_gamma: LinearLayer::init(store, rng, &format!("{name}.gamma"), TIME_DIM, channels, true)?,
            film_beta: LinearLayer::init(store, rng, &format!("{name}.beta"), TIME_DIM, channels, true)?,
            channels,
        })
    }

    /// The correction branch conv3x3(silu(norm(x))) * (1 + gamma) + beta,
    /// without the identity term. Exactly zero at init: this is what
    /// coupling modules add to the opposite stream.
    pub fn branch_tape<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Grid<T>,
        t_emb: &[T],
    ) -> Result<(Grid<T>, ResidualTape<T>)> {
        let (normed, stats) = self.norm.forward(store, x)?;
        let act = normed.map(silu);
        let conv_out = self.conv.forward(store, &act)?;
        let gamma = self.film_gamma.forward(store, t_emb)?;
        let beta = self.film_beta.forward(store, t_emb)?;
        let (h, w, c) = x.shape();
        let mut out = Grid::zeros(h, w, c);
        let od = out.data_mut();
        let cd = conv_out.data();
        for pix in 0..h * w {
            for ch in 0..c {
                let i = pix * c + ch;
                od[i] = cd[i] * (T::one() + gamma[ch]) + beta[ch];
            }
        }
        Ok((
            out,
            ResidualTape {
                x: x.clone(),
                stats,
                normed,
                act,
                conv_out,
            },
        ))
    }

    pub fn branch<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Grid<T>,
        t_emb: &[T],
    ) -> Result<Grid<T>> {
        Ok(self.branch_tape(store, x, t_emb)?.0)
    }

    /// Cotangent of the branch alone w.r.t. its input; accumulates
    /// parameter gradients plus the time-embedding cotangent.
    pub fn branch_backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut GradStore<T>,
        tape: &ResidualTape<T>,
        gout: &Grid<T>,
        t_emb: &[T],
        g_temb: &mut [T],
    ) -> Result<Grid<T>> {
        let (h, w, c) = tape.x.shape();
        let gamma = self.film_gamma.forward(store, t_emb)?;
        let god = gout.data();
        let cd = tape.conv_out.data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut dconv = Grid::zeros(h, w, c);
        let dcd = dconv.data_mut();
        for pix in 0..h * w {
            for ch in 0..c {
                let i = pix * c + ch;
                let go = god[i];
                dgamma[ch] += go * cd[i];
                dbeta[ch] += go;
                dcd[i] = go * (T::one() + gamma[ch]);
            }
        }
        let g1 = self.film_gamma.backward(store, grads, t_emb, &dgamma)?;
        let g2 = self.film_beta.backward(store, grads, t_emb, &dbeta)?;
        for ((acc, a), b) in g_temb.iter_mut().zip(g1).zip(g2) {
            *acc += a + b;
        }
        let dact = self.conv.backward(store, grads, &tape.act, &dconv)?;
        let dnorm = dact.zip_map(&tape.normed, |g, n| g * silu_grad(n))?;
        self.norm
            .backward(store, grads, &tape.x, &tape.stats, &dnorm)
    }

    /// Standalone residual form: x + branch(x).
    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Grid<T>,
        t_emb: &[T],
    ) -> Result<Grid<T>> {
        x.add(&self.branch(store, x, t_emb)?)
    }

    pub fn forward_tape<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Grid<T>,
        t_emb: &[T],
    ) -> Result<(Grid<T>, ResidualTape<T>)> {
        let (b, tape) = self.branch_tape(store, x, t_emb)?;
        Ok((x.add(&b)?, tape))
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut GradStore<T>,
        tape: &ResidualTape<T>,
        gout: &Grid<T>,
        t_emb: &[T],
        g_temb: &mut [T],
    ) -> Result<Grid<T>> {
        let gb = self.branch_backward(store, grads, tape, gout, t_emb, g_temb)?;
        gout.add(&gb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cgm_core::GradStore;

    fn setup(channels: usize) -> (ParamStore<f64>, ResidualBlock, CounterRng) {
        let mut rng = CounterRng::new(31);
        let mut store = ParamStore::<f64>::new();
        let block = ResidualBlock::init(&mut store, &mut rng, "res", channels).unwrap();
        (store, block, rng)
    }

    #[test]
    fn zero_init_makes_identity_plus_beta() {
        let (mut store, block, mut rng) = setup(8);
        let x = Grid::from_fn(4, 4, 8, |_, _, _| rng.normal());
        let t_emb: Vec<f64> = (0..TIME_DIM).map(|_| rng.normal()).collect();
        let out = block.forward(&store, &x, &t_emb).unwrap();
        assert_eq!(out.data(), x.data(), "zero-init block is the identity");

        // With a beta bias, the output is x + beta broadcast per channel.
        store.value_mut(block.film_beta.bias).data_mut()[2] = 0.75;
        let out2 = block.forward(&store, &x, &t_emb).unwrap();
        for pix in 0..16 {
            for ch in 0..8 {
                let expect = x.data()[pix * 8 + ch] + if ch == 2 { 0.75 } else { 0.0 };
                assert_eq!(out2.data()[pix * 8 + ch], expect);
            }
        }
    }

    #[test]
    fn output_shape_matches_input() {
        let (store, block, mut rng) = setup(8);
        let x = Grid::from_fn(6, 5, 8, |_, _, _| rng.normal());
        let t_emb: Vec<f64> = (0..TIME_DIM).map(|_| rng.normal()).collect();
        assert_eq!(block.forward(&store, &x, &t_emb).unwrap().shape(), x.shape());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (mut store, block, mut rng) = setup(4);
        // Randomize every parameter so the test exercises all paths.
        for t in store.values_mut() {
            for v in t.data_mut() {
                *v += rng.normal() * 0.3;
            }
        }
        let x = Grid::from_fn(4, 4, 4, |_, _, _| rng.normal());
        let t_emb: Vec<f64> = (0..TIME_DIM).map(|_| rng.normal()).collect();
        let ybar = Grid::from_fn(4, 4, 4, |_, _, _| rng.normal());
        let (_, tape) = block.forward_tape(&store, &x, &t_emb).unwrap();
        let mut grads = GradStore::zeros_like(&store);
        let mut g_temb = vec![0.0; TIME_DIM];
        let gx = block
            .backward(&store, &mut grads, &tape, &ybar, &t_emb, &mut g_temb)
            .unwrap();

        let h = 1e-6;
        // A few input coordinates.
        for i in [0usize, 5, 17, 63] {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fp = block.forward(&store, &xp, &t_emb).unwrap().dot_f64(&ybar).unwrap();
            let fm = block.forward(&store, &xm, &t_emb).unwrap().dot_f64(&ybar).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let an = gx.data()[i];
            assert!(
                (an - fd).abs() / an.abs().max(fd.abs()).max(1.0) <= 1e-6,
                "input {i}: {an} vs {fd}"
            );
        }
        // A few parameter coordinates across all tensors.
        for pid in [block.conv.kernel, block.norm.scale, block.film_gamma.weight] {
            for idx in [0usize, 3] {
                if idx >= store.value(pid).numel() {
                    continue;
                }
                let orig = store.value(pid).data()[idx];
                store.value_mut(pid).data_mut()[idx] = orig + h;
                let fp = block.forward(&store, &x, &t_emb).unwrap().dot_f64(&ybar).unwrap();
                store.value_mut(pid).data_mut()[idx] = orig - h;
                let fm = block.forward(&store, &x, &t_emb).unwrap().dot_f64(&ybar).unwrap();
                store.value_mut(pid).data_mut()[idx] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let an = grads.grad(pid).data()[idx];
                assert!(
                    (an - fd).abs() / an.abs().max(fd.abs()).max(1.0) <= 1e-6,
                    "param {} idx {idx}: {an} vs {fd}",
                    store.name(pid)
                );
            }
        }
        // Time-embedding cotangent.
        for i in [0usize, 9, 31] {
            let mut tp = t_emb.clone();
            tp[i] += h;
            let mut tm = t_emb.clone();
            tm[i] -= h;
            let fp = block.forward(&store, &x, &tp).unwrap().dot_f64(&ybar).unwrap();
            let fm = block.forward(&store, &x, &tm).unwrap().dot_f64(&ybar).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (g_temb[i] - fd).abs() / g_temb[i].abs().max(fd.abs()).max(1.0) <= 1e-6,
                "temb {i}: {} vs {fd}",
                g_temb[i]
            );
        }
    }
}
