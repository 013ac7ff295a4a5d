use cgm_core::{
    concat_channels, pixel_shuffle, pixel_unshuffle, split_channels, CounterRng, Error, GradStore,
    Grid, Pad, ParamStore, Result, Scalar,
};

use crate::blocks::PriorMaps;
use crate::layers::Conv2dLayer;

/// Multi-scale prior-informed injector. A feature map at 1/r of the full
/// resolution is lifted to the image domain with pixel shuffle, squeezed
/// to one channel, fused with the measurement back-projection and the
/// environment raster by concatenation and a 3x3 conv, then folded back
/// with pixel unshuffle and added as a residual correction:
///
///   out = x + S_down(conv2(concat(conv1(S_up(x)), backproj, env)))
///
/// conv2 is zero-initialized so the injector starts as the identity.
#[derive(Debug, Clone)]
pub struct InjectorBlock {
    pub conv_compress: Conv2dLayer,
    pub conv_fuse: Conv2dLayer,
    pub channels: usize,
    pub r: usize,
}

#[derive(Debug)]
pub struct InjectorTape<T> {
    pub x: Grid<T>,
    pub compressed: Grid<T>,
}

impl<T: Scalar> InjectorTape<T> {
    pub fn byte_size(&self) -> usize {
        self.x.byte_size() + self.compressed.byte_size()
    }
}

impl InjectorBlock {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut CounterRng,
        name: &str,
        channels: usize,
        r: usize,
    ) -> Result<Self> {
        if r == 0 || channels % (r * r) != 0 {
            return Err(Error::InvalidArg(format!(
                "injector channels {channels} not divisible by r^2 = {}",
                r * r
            )));
        }
        let c_up = channels / (r * r);
        Ok(InjectorBlock {
            conv_compress: Conv2dLayer::init(
                store,
                rng,
                &format!("{name}.compress"),
                1,
                1,
                c_up,
                1,
                1,
                Pad::Same,
                false,
            )?,
            conv_fuse: Conv2dLayer::init(
                store,
                rng,
                &format!("{name}.fuse"),
                3,
                3,
                4,
                c_up,
                1,
                Pad::Same,
                true,
            )?,
            channels,
            r,
        })
    }

    fn compute<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Grid<T>,
        priors: &PriorMaps<T>,
    ) -> Result<(Grid<T>, InjectorTape<T>)> {
        let lifted = pixel_shuffle(x, self.r)?;
        if (lifted.h(), lifted.w()) != (priors.backproj.h(), priors.backproj.w()) {
            return Err(Error::shape(
                "injector prior resolution",
                format!("{}x{}", lifted.h(), lifted.w()),
                priors.backproj.shape_str(),
            ));
        }
        let compressed = self.conv_compress.forward(store, &lifted)?;
        let fused_in = concat_channels(&[&compressed, &priors.backproj, &priors.env])?;
        let fused = self.conv_fuse.forward(store, &fused_in)?;
        let correction = pixel_unshuffle(&fused, self.r)?;
        let out = x.add(&correction)?;
        Ok((
            out,
            InjectorTape {
                x: x.clone(),
                compressed,
            },
        ))
    }

    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Grid<T>,
        priors: &PriorMaps<T>,
    ) -> Result<Grid<T>> {
        Ok(self.compute(store, x, priors)?.0)
    }

    pub fn forward_tape<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Grid<T>,
        priors: &PriorMaps<T>,
    ) -> Result<(Grid<T>, InjectorTape<T>)> {
        self.compute(store, x, priors)
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut GradStore<T>,
        tape: &InjectorTape<T>,
        gout: &Grid<T>,
        priors: &PriorMaps<T>,
    ) -> Result<Grid<T>> {
        // Adjoint of pixel_unshuffle is pixel_shuffle.
        let gfused = pixel_shuffle(gout, self.r)?;
        let fused_in = concat_channels(&[&tape.compressed, &priors.backproj, &priors.env])?;
        let gcat = self.conv_fuse.backward(store, grads, &fused_in, &gfused)?;
        // Channel 0 feeds back into the compression conv; the prior maps
        // are constants.
        let parts = split_channels(&gcat, &[1, 1, 2])?;
        let lifted = pixel_shuffle(&tape.x, self.r)?;
        let glifted = self
            .conv_compress
            .backward(store, grads, &lifted, &parts[0])?;
        let gx_path = pixel_unshuffle(&glifted, self.r)?;
        gout.add(&gx_path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn priors(h: usize, w: usize, rng: &mut CounterRng) -> PriorMaps<f64> {
        PriorMaps::new(
            Grid::from_fn(h, w, 1, |_, _, _| rng.normal()),
            Grid::from_fn(h, w, 2, |_, _, _| rng.uniform()),
        )
    }

    #[test]
    fn zero_init_is_identity_for_all_scales() {
        let mut rng = CounterRng::new(51);
        for r in [1usize, 2, 4] {
            let mut store = ParamStore::<f64>::new();
            let c = 16;
            let block = InjectorBlock::init(&mut store, &mut rng, "inj", c, r).unwrap();
            let (h, w) = (8, 8);
            let x = Grid::from_fn(h / r, w / r, c, |_, _, _| rng.normal());
            let p = priors(h, w, &mut rng);
            let out = block.forward(&store, &x, &p).unwrap();
            assert_eq!(out.shape(), x.shape(), "shape preserved at r={r}");
            assert_eq!(out.data(), x.data(), "identity at init for r={r}");
        }
    }

    #[test]
    fn divisibility_rejected_at_build() {
        let mut rng = CounterRng::new(52);
        let mut store = ParamStore::<f64>::new();
        assert!(InjectorBlock::init(&mut store, &mut rng, "inj", 6, 2).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = CounterRng::new(53);
        let mut store = ParamStore::<f64>::new();
        let block = InjectorBlock::init(&mut store, &mut rng, "inj", 8, 2).unwrap();
        for t in store.values_mut() {
            for v in t.data_mut() {
                *v += rng.normal() * 0.3;
            }
        }
        let (h, w) = (8, 8);
        let x = Grid::from_fn(h / 2, w / 2, 8, |_, _, _| rng.normal());
        let p = priors(h, w, &mut rng);
        let ybar = Grid::from_fn(h / 2, w / 2, 8, |_, _, _| rng.normal());
        let (_, tape) = block.forward_tape(&store, &x, &p).unwrap();
        let mut grads = GradStore::zeros_like(&store);
        let gx = block.backward(&store, &mut grads, &tape, &ybar, &p).unwrap();
        let hstep = 1e-6;
        for i in [0usize, 31, 77, 127] {
            let mut xp = x.clone();
            xp.data_mut()[i] += hstep;
            let mut xm = x.clone();
            xm.data_mut()[i] -= hstep;
            let fp = block.forward(&store, &xp, &p).unwrap().dot_f64(&ybar).unwrap();
            let fm = block.forward(&store, &xm, &p).unwrap().dot_f64(&ybar).unwrap();
            let fd = (fp - fm) / (2.0 * hstep);
            let an = gx.data()[i];
            assert!(
                (an - fd).abs() / an.abs().max(fd.abs()).max(1.0) <= 1e-6,
                "input {i}: {an} vs {fd}"
            );
        }
        for pid in [block.conv_compress.kernel, block.conv_fuse.kernel] {
            for idx in 0..store.value(pid).numel().min(6) {
                let orig = store.value(pid).data()[idx];
                store.value_mut(pid).data_mut()[idx] = orig + hstep;
                let fp = block.forward(&store, &x, &p).unwrap().dot_f64(&ybar).unwrap();
                store.value_mut(pid).data_mut()[idx] = orig - hstep;
                let fm = block.forward(&store, &x, &p).unwrap().dot_f64(&ybar).unwrap();
                store.value_mut(pid).data_mut()[idx] = orig;
                let fd = (fp - fm) / (2.0 * hstep);
                let an = grads.grad(pid).data()[idx];
                assert!(
                    (an - fd).abs() / an.abs().max(fd.abs()).max(1.0) <= 1e-6,
                    "param {} idx {idx}: {an} vs {fd}",
                    store.name(pid)
                );
            }
        }
    }
}
