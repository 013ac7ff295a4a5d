use cgm_core::{CounterRng, GradStore, ParamStore, Result, Scalar};

use crate::layers::LinearLayer;

/// Width of the step-index embedding.
pub const TIME_DIM: usize = 32;

/// Sinusoidal features of the step index projected by a learned linear
/// map. 16 frequency pairs span 1 .. 10^4 geometrically.
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    lin: LinearLayer,
}

fn sinusoid_features(t: usize) -> [f64; TIME_DIM] {
    let mut f = [0.0; TIME_DIM];
    let pairs = TIME_DIM / 2;
    for k in 0..pairs {
        let freq = 10f64.powf(4.0 * k as f64 / (pairs - 1) as f64);
        let arg = t as f64 * freq;
        f[2 * k] = arg.sin();
        f[2 * k + 1] = arg.cos();
    }
    f
}

impl TimeEmbedding {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut CounterRng,
        name: &str,
    ) -> Result<Self> {
        Ok(TimeEmbedding {
            lin: LinearLayer::init(store, rng, name, TIME_DIM, TIME_DIM, false)?,
        })
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, t: usize) -> Result<Vec<T>> {
        let feats: Vec<T> = sinusoid_features(t)
            .iter()
            .map(|&v| T::from_f64(v))
            .collect();
        self.lin.forward(store, &feats)
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut GradStore<T>,
        t: usize,
        g_emb: &[T],
    ) -> Result<()> {
        let feats: Vec<T> = sinusoid_features(t)
            .iter()
            .map(|&v| T::from_f64(v))
            .collect();
        self.lin.backward(store, grads, &feats, g_emb)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_distinct_for_small_t() {
        let mut rng = CounterRng::new(2);
        let mut store = ParamStore::<f64>::new();
        let emb = TimeEmbedding::init(&mut store, &mut rng, "temb").unwrap();
        let e1a = emb.forward(&store, 1).unwrap();
        let e1b = emb.forward(&store, 1).unwrap();
        assert_eq!(e1a, e1b);
        let e2 = emb.forward(&store, 2).unwrap();
        let e3 = emb.forward(&store, 3).unwrap();
        for (a, b) in [(&e1a, &e2), (&e1a, &e3), (&e2, &e3)] {
            let diff: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum();
            assert!(diff > 1e-6, "embeddings must differ");
        }
    }

    #[test]
    fn linear_map_gradcheck() {
        let mut rng = CounterRng::new(3);
        let mut store = ParamStore::<f64>::new();
        let emb = TimeEmbedding::init(&mut store, &mut rng, "temb").unwrap();
        let gout: Vec<f64> = (0..TIME_DIM).map(|_| rng.normal()).collect();
        let mut grads = GradStore::zeros_like(&store);
        emb.backward(&store, &mut grads, 2, &gout).unwrap();
        let wid = emb.lin.weight;
        let h = 1e-6;
        for idx in [0usize, 7, 100, TIME_DIM * TIME_DIM - 1] {
            let orig = store.value(wid).data()[idx];
            store.value_mut(wid).data_mut()[idx] = orig + h;
            let fp: f64 = emb
                .forward(&store, 2)
                .unwrap()
                .iter()
                .zip(&gout)
                .map(|(a, b)| a * b)
                .sum();
            store.value_mut(wid).data_mut()[idx] = orig - h;
            let fm: f64 = emb
                .forward(&store, 2)
                .unwrap()
                .iter()
                .zip(&gout)
                .map(|(a, b)| a * b)
                .sum();
            store.value_mut(wid).data_mut()[idx] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = grads.grad(wid).data()[idx];
            assert!(
                (an - fd).abs() / an.abs().max(fd.abs()).max(1.0) <= 1e-6,
                "weight {idx}: {an} vs {fd}"
            );
        }
    }
}
