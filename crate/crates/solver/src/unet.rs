//! The prior-informed invertible U-Net noise estimator. Reversible
//! coupling modules carry the heavy computation; resolution changes,
//! skip fusions and the head/tail are cached boundaries. Forward values
//! never depend on the caching mode.

use cgm_core::{
    concat_channels, split_channels, BytesGuard, CounterRng, Error, GradStore, Grid, Ledger,
    LedgerTag, Pad, ParamStore, Result, Scalar,
};

use crate::blocks::{
    AttentionBlock, Aux, Body, CouplingModule, CouplingTape, InjectorBlock, PriorMaps,
    ResidualBlock, TimeEmbedding, TIME_DIM,
};
use crate::layers::{
    norm_act_backward, norm_act_forward, Conv2dLayer, ConvTranspose2dLayer, GnStats,
    GroupNormLayer,
};

/// How much state a forward pass retains for the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheMode {
    /// Nothing retained; inference only.
    Infer,
    /// Every module tape retained (the memory-hungry oracle).
    CacheAll,
    /// Only boundary tensors retained; coupling internals are
    /// reconstructed from outputs during backward.
    CacheBoundary,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UNetConfig {
    pub base_channels: usize,
    /// Largest spatial side on which attention is allowed.
    pub attn_max_side: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            base_channels: 16,
            attn_max_side: 16,
        }
    }
}

/// Channel multipliers at full, half and quarter resolution.
const STAGE_MULT: [usize; 3] = [1, 2, 4];

#[derive(Debug, Clone)]
struct DownStage {
    modules: Vec<CouplingModule>,
    down: Conv2dLayer,
}

#[derive(Debug, Clone)]
struct UpStage {
    modules: Vec<CouplingModule>,
    up: ConvTranspose2dLayer,
    fuse: Conv2dLayer,
}

#[derive(Debug, Clone)]
pub struct InvUNet {
    pub cfg: UNetConfig,
    pub h: usize,
    pub w: usize,
    temb: TimeEmbedding,
    head: Conv2dLayer,
    down: Vec<DownStage>,
    up: Vec<UpStage>,
    tail_norm: GroupNormLayer,
    tail_conv: Conv2dLayer,
}

/// Cached boundary tensors in forward order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    HeadIn = 0,
    Skip0 = 1,
    Skip1 = 2,
    UpChain0Out = 3,
    Fuse1In = 4,
    UpChain1Out = 5,
    Fuse0In = 6,
}

const N_SLOTS: usize = 7;

struct BoundaryEntry<T> {
    grid: Grid<T>,
    _guard: BytesGuard,
}

struct TailTape<T> {
    input: Grid<T>,
    normed: Grid<T>,
    act: Grid<T>,
    stats: GnStats<T>,
    _guard: BytesGuard,
}

/// Saved state of one forward pass; consumed by [`InvUNet::backward`].
/// Boundary entries are freed one by one as the backward sweep uses them.
pub struct UNetTape<T> {
    pub t: usize,
    mode: CacheMode,
    bounds: Vec<Option<BoundaryEntry<T>>>,
    couplings: Vec<CouplingTape<T>>,
    tail: Option<TailTape<T>>,
}

impl<T: Scalar> UNetTape<T> {
    pub fn is_drained(&self) -> bool {
        self.bounds.iter().all(|b| b.is_none()) && self.couplings.is_empty() && self.tail.is_none()
    }
}

fn body_residual<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut CounterRng,
    name: &str,
    half: usize,
) -> Result<Body> {
    Ok(Body::Residual(ResidualBlock::init(store, rng, name, half)?))
}

impl InvUNet {
    /// Build the network for one spatial resolution, registering all
    /// parameters under `prefix`. Spatial dims must be divisible by 4
    /// (two downsampling stages); the bottleneck side must fit the
    /// attention cap; every injector site must divide its channels by
    /// r^2.
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut CounterRng,
        prefix: &str,
        cfg: UNetConfig,
        h: usize,
        w: usize,
    ) -> Result<Self> {
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::InvalidArg(format!(
                "map dims must be divisible by 4 for two downsampling stages, got {h}x{w}"
            )));
        }
        if cfg.base_channels < 2 || cfg.base_channels % 2 != 0 {
            return Err(Error::InvalidArg(format!(
                "base_channels must be even and >= 2, got {}",
                cfg.base_channels
            )));
        }
        let bottleneck_side = (h / 4).max(w / 4);
        if bottleneck_side > cfg.attn_max_side {
            return Err(Error::InvalidArg(format!(
                "bottleneck resolution {bottleneck_side} exceeds attention cap {}",
                cfg.attn_max_side
            )));
        }
        let base = cfg.base_channels;
        let temb = TimeEmbedding::init(store, rng, &format!("{prefix}.temb"))?;
        let head = Conv2dLayer::init(
            store,
            rng,
            &format!("{prefix}.head"),
            3,
            3,
            3,
            base,
            1,
            Pad::Same,
            false,
        )?;

        // Down stages: [residual-coupling, injector-coupling] + strided conv.
        let mut down = Vec::new();
        for (stage, rfac) in [(0usize, 1usize), (1, 2)] {
            let c = base * STAGE_MULT[stage];
            let half = c / 2;
            let p = format!("{prefix}.d{stage}");
            let m0 = CouplingModule::new(
                body_residual(store, rng, &format!("{p}.m0.g1"), half)?,
                body_residual(store, rng, &format!("{p}.m0.g2"), half)?,
                c,
            )?;
            let m1 = CouplingModule::new(
                Body::Injector(InjectorBlock::init(
                    store,
                    rng,
                    &format!("{p}.m1.g1"),
                    half,
                    rfac,
                )?),
                Body::Injector(InjectorBlock::init(
                    store,
                    rng,
                    &format!("{p}.m1.g2"),
                    half,
                    rfac,
                )?),
                c,
            )?;
            let downconv = Conv2dLayer::init(
                store,
                rng,
                &format!("{p}.down"),
                3,
                3,
                c,
                c * 2,
                2,
                Pad::Same,
                false,
            )?;
            down.push(DownStage {
                modules: vec![m0, m1],
                down: downconv,
            });
        }

        // Up stages: [residual, attention | residual, injector] couplings
        // + transposed conv + skip fusion. The first up stage sits at the
        // bottleneck resolution and carries the attention coupling.
        let mut up = Vec::new();
        for (stage, (mult, rfac)) in [(0usize, (STAGE_MULT[2], 4usize)), (1, (STAGE_MULT[1], 2))] {
            let c = base * mult;
            let half = c / 2;
            let p = format!("{prefix}.u{stage}");
            let m0 = CouplingModule::new(
                body_residual(store, rng, &format!("{p}.m0.g1"), half)?,
                body_residual(store, rng, &format!("{p}.m0.g2"), half)?,
                c,
            )?;
            let m1 = if stage == 0 {
                CouplingModule::new(
                    Body::Attention(AttentionBlock::init(
                        store,
                        rng,
                        &format!("{p}.m1.g1"),
                        half,
                        cfg.attn_max_side,
                    )?),
                    Body::Attention(AttentionBlock::init(
                        store,
                        rng,
                        &format!("{p}.m1.g2"),
                        half,
                        cfg.attn_max_side,
                    )?),
                    c,
                )?
            } else {
                CouplingModule::new(
                    body_residual(store, rng, &format!("{p}.m1.g1"), half)?,
                    body_residual(store, rng, &format!("{p}.m1.g2"), half)?,
                    c,
                )?
            };
            let m2 = CouplingModule::new(
                Body::Injector(InjectorBlock::init(
                    store,
                    rng,
                    &format!("{p}.m2.g1"),
                    half,
                    rfac,
                )?),
                Body::Injector(InjectorBlock::init(
                    store,
                    rng,
                    &format!("{p}.m2.g2"),
                    half,
                    rfac,
                )?),
                c,
            )?;
            let upconv = ConvTranspose2dLayer::init(
                store,
                rng,
                &format!("{p}.up"),
                3,
                3,
                c / 2,
                c,
                2,
                Pad::Same,
            )?;
            let fuse = Conv2dLayer::init(
                store,
                rng,
                &format!("{p}.fuse"),
                1,
                1,
                c,
                c / 2,
                1,
                Pad::Same,
                false,
            )?;
            up.push(UpStage {
                modules: vec![m0, m1, m2],
                up: upconv,
                fuse,
            });
        }

        let tail_norm = GroupNormLayer::init(store, &format!("{prefix}.tail.norm"), base)?;
        let tail_conv = Conv2dLayer::init(
            store,
            rng,
            &format!("{prefix}.tail.conv"),
            3,
            3,
            base,
            1,
            1,
            Pad::Same,
            true,
        )?;

        Ok(InvUNet {
            cfg,
            h,
            w,
            temb,
            head,
            down,
            up,
            tail_norm,
            tail_conv,
        })
    }

    fn run_chain<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        modules: &[CouplingModule],
        mut x: Grid<T>,
        aux: &Aux<'_, T>,
        mode: CacheMode,
        ledger: &Ledger,
        sink: &mut Vec<CouplingTape<T>>,
    ) -> Result<Grid<T>> {
        for m in modules {
            if mode == CacheMode::CacheAll {
                let (y, tape) = m.forward_tape(store, &x, aux, ledger)?;
                sink.push(tape);
                x = y;
            } else {
                x = m.forward(store, &x, aux)?;
            }
        }
        Ok(x)
    }

    /// Noise estimate for the noisy map at step `t`. Returns a tape when
    /// the mode retains state for backward.
    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x_noisy: &Grid<T>,
        priors: &PriorMaps<T>,
        t: usize,
        mode: CacheMode,
        ledger: &Ledger,
    ) -> Result<(Grid<T>, Option<UNetTape<T>>)> {
        if x_noisy.shape() != (self.h, self.w, 1) {
            return Err(Error::shape(
                "unet input",
                format!("{}x{}x1", self.h, self.w),
                x_noisy.shape_str(),
            ));
        }
        let t_emb = self.temb.forward(store, t)?;
        let aux = Aux {
            t_emb: &t_emb,
            priors,
        };
        let mut bounds: Vec<Option<BoundaryEntry<T>>> = (0..N_SLOTS).map(|_| None).collect();
        let mut couplings = Vec::new();
        let keep = mode != CacheMode::Infer;
        let save = |slot: Slot, grid: &Grid<T>, bounds: &mut Vec<Option<BoundaryEntry<T>>>| {
            if keep {
                bounds[slot as usize] = Some(BoundaryEntry {
                    grid: grid.clone(),
                    _guard: ledger.track(LedgerTag::BoundaryCache, grid.byte_size()),
                });
            }
        };

        let x_in = concat_channels(&[x_noisy, &priors.env])?;
        save(Slot::HeadIn, &x_in, &mut bounds);
        let h0 = self.head.forward(store, &x_in)?;

        let a0 = self.run_chain(
            store,
            &self.down[0].modules,
            h0,
            &aux,
            mode,
            ledger,
            &mut couplings,
        )?;
        save(Slot::Skip0, &a0, &mut bounds);
        let h1 = self.down[0].down.forward(store, &a0)?;

        let a1 = self.run_chain(
            store,
            &self.down[1].modules,
            h1,
            &aux,
            mode,
            ledger,
            &mut couplings,
        )?;
        save(Slot::Skip1, &a1, &mut bounds);
        let h2 = self.down[1].down.forward(store, &a1)?;

        let b2 = self.run_chain(
            store,
            &self.up[0].modules,
            h2,
            &aux,
            mode,
            ledger,
            &mut couplings,
        )?;
        save(Slot::UpChain0Out, &b2, &mut bounds);
        let u1 = self.up[0].up.forward(store, &b2)?;
        let f1_in = concat_channels(&[&u1, &a1])?;
        save(Slot::Fuse1In, &f1_in, &mut bounds);
        let f1 = self.up[0].fuse.forward(store, &f1_in)?;

        let b1 = self.run_chain(
            store,
            &self.up[1].modules,
            f1,
            &aux,
            mode,
            ledger,
            &mut couplings,
        )?;
        save(Slot::UpChain1Out, &b1, &mut bounds);
        let u0 = self.up[1].up.forward(store, &b1)?;
        let f0_in = concat_channels(&[&u0, &a0])?;
        save(Slot::Fuse0In, &f0_in, &mut bounds);
        let f0 = self.up[1].fuse.forward(store, &f0_in)?;

        let (act, normed, stats) = norm_act_forward(&self.tail_norm, store, &f0)?;
        let eps = self.tail_conv.forward(store, &act)?;

        let tape = match mode {
            CacheMode::Infer => None,
            CacheMode::CacheBoundary => Some(UNetTape {
                t,
                mode,
                bounds,
                couplings,
                tail: None,
            }),
            CacheMode::CacheAll => {
                let bytes =
                    f0.byte_size() + normed.byte_size() + act.byte_size() + stats.byte_size();
                Some(UNetTape {
                    t,
                    mode,
                    bounds,
                    couplings,
                    tail: Some(TailTape {
                        input: f0,
                        normed,
                        act,
                        stats,
                        _guard: ledger.track(LedgerTag::ModuleInternal, bytes),
                    }),
                })
            }
        };
        Ok((eps, tape))
    }

    #[allow(clippy::too_many_arguments)]
    fn chain_backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut GradStore<T>,
        modules: &[CouplingModule],
        tape: &mut UNetTape<T>,
        chain_output: Option<Grid<T>>,
        mut gy: Grid<T>,
        aux: &Aux<'_, T>,
        ledger: &Ledger,
        g_temb: &mut [T],
    ) -> Result<Grid<T>> {
        match tape.mode {
            CacheMode::CacheAll => {
                for m in modules.iter().rev() {
                    let mtape = tape
                        .couplings
                        .pop()
                        .ok_or_else(|| Error::InvalidArg("coupling tape underflow".into()))?;
                    gy = m.backward_cached(store, grads, &mtape, &gy, aux, g_temb)?;
                }
                Ok(gy)
            }
            CacheMode::CacheBoundary => {
                let mut y = chain_output.ok_or_else(|| {
                    Error::InvalidArg("missing chain output for inversion".into())
                })?;
                for m in modules.iter().rev() {
                    let (x, gx) =
                        m.backward_invertible(store, grads, &y, &gy, aux, ledger, g_temb)?;
                    y = x;
                    gy = gx;
                }
                Ok(gy)
            }
            CacheMode::Infer => Err(Error::InvalidArg(
                "backward requested for an inference-mode forward".into(),
            )),
        }
    }

    fn take_bound<T: Scalar>(tape: &mut UNetTape<T>, slot: Slot) -> Result<Grid<T>> {
        tape.bounds[slot as usize]
            .take()
            .map(|e| e.grid)
            .ok_or_else(|| Error::InvalidArg(format!("boundary cache slot {slot:?} missing")))
    }

    /// Exact gradient w.r.t. the noisy input map; parameter gradients
    /// accumulate into `grads`. Consumes the tape, freeing every cache
    /// entry as soon as it has been used.
    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut GradStore<T>,
        mut tape: UNetTape<T>,
        geps: &Grid<T>,
        priors: &PriorMaps<T>,
        ledger: &Ledger,
    ) -> Result<Grid<T>> {
        let t_emb = self.temb.forward(store, tape.t)?;
        let mut g_temb = vec![T::zero(); TIME_DIM];
        let aux = Aux {
            t_emb: &t_emb,
            priors,
        };

        // Tail: recompute from the fusion input unless fully cached.
        let f0_in = Self::take_bound(&mut tape, Slot::Fuse0In)?;
        let df0 = {
            let (input, normed, act, stats) = match tape.tail.take() {
                Some(tt) => (tt.input, tt.normed, tt.act, tt.stats),
                None => {
                    let f0 = self.up[1].fuse.forward(store, &f0_in)?;
                    let (act, normed, stats) = norm_act_forward(&self.tail_norm, store, &f0)?;
                    (f0, normed, act, stats)
                }
            };
            let _guard = ledger.track(
                LedgerTag::ModuleInternal,
                input.byte_size() + normed.byte_size() + act.byte_size(),
            );
            let dact = self.tail_conv.backward(store, grads, &act, geps)?;
            norm_act_backward(
                &self.tail_norm,
                store,
                grads,
                &input,
                &normed,
                &stats,
                &dact,
            )?
        };

        // Fusion 0 and the second up-chain.
        let df0_in = self.up[1].fuse.backward(store, grads, &f0_in, &df0)?;
        drop(f0_in);
        let base = self.cfg.base_channels;
        let mut parts = split_channels(&df0_in, &[base, base])?;
        let ga0_skip = parts.pop().unwrap();
        let du0 = parts.pop().unwrap();

        let b1 = Self::take_bound(&mut tape, Slot::UpChain1Out)?;
        let db1 = self.up[1].up.backward(store, grads, &b1, &du0)?;
        let chain_out = (tape.mode == CacheMode::CacheBoundary).then(|| b1.clone());
        drop(b1);
        let df1 = self.chain_backward(
            store,
            grads,
            &self.up[1].modules,
            &mut tape,
            chain_out,
            db1,
            &aux,
            ledger,
            &mut g_temb,
        )?;

        // Fusion 1 and the first up-chain.
        let f1_in = Self::take_bound(&mut tape, Slot::Fuse1In)?;
        let df1_in = self.up[0].fuse.backward(store, grads, &f1_in, &df1)?;
        drop(f1_in);
        let mut parts = split_channels(&df1_in, &[base * 2, base * 2])?;
        let ga1_skip = parts.pop().unwrap();
        let du1 = parts.pop().unwrap();

        let b2 = Self::take_bound(&mut tape, Slot::UpChain0Out)?;
        let db2 = self.up[0].up.backward(store, grads, &b2, &du1)?;
        let chain_out = (tape.mode == CacheMode::CacheBoundary).then(|| b2.clone());
        drop(b2);
        let dh2 = self.chain_backward(
            store,
            grads,
            &self.up[0].modules,
            &mut tape,
            chain_out,
            db2,
            &aux,
            ledger,
            &mut g_temb,
        )?;

        // Second down stage.
        let a1 = Self::take_bound(&mut tape, Slot::Skip1)?;
        let mut da1 = self.down[1].down.backward(store, grads, &a1, &dh2)?;
        da1.add_scaled_assign(&ga1_skip, T::one())?;
        let chain_out = (tape.mode == CacheMode::CacheBoundary).then(|| a1.clone());
        drop(a1);
        let dh1 = self.chain_backward(
            store,
            grads,
            &self.down[1].modules,
            &mut tape,
            chain_out,
            da1,
            &aux,
            ledger,
            &mut g_temb,
        )?;

        // First down stage.
        let a0 = Self::take_bound(&mut tape, Slot::Skip0)?;
        let mut da0 = self.down[0].down.backward(store, grads, &a0, &dh1)?;
        da0.add_scaled_assign(&ga0_skip, T::one())?;
        let chain_out = (tape.mode == CacheMode::CacheBoundary).then(|| a0.clone());
        drop(a0);
        let dh0 = self.chain_backward(
            store,
            grads,
            &self.down[0].modules,
            &mut tape,
            chain_out,
            da0,
            &aux,
            ledger,
            &mut g_temb,
        )?;

        // Head.
        let x_in = Self::take_bound(&mut tape, Slot::HeadIn)?;
        let dx_in = self.head.backward(store, grads, &x_in, &dh0)?;
        drop(x_in);
        let mut parts = split_channels(&dx_in, &[1, 2])?;
        let _genv = parts.pop().unwrap();
        let gx_noisy = parts.pop().unwrap();

        self.temb.backward(store, grads, tape.t, &g_temb)?;
        debug_assert!(tape.is_drained());
        Ok(gx_noisy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(
        h: usize,
        w: usize,
        base: usize,
        seed: u64,
        randomize: bool,
    ) -> (
        ParamStore<f64>,
        InvUNet,
        PriorMaps<f64>,
        Grid<f64>,
        CounterRng,
    ) {
        let mut rng = CounterRng::new(seed);
        let mut store = ParamStore::<f64>::new();
        let cfg = UNetConfig {
            base_channels: base,
            attn_max_side: 16,
        };
        let net = InvUNet::build(&mut store, &mut rng, "unet", cfg, h, w).unwrap();
        if randomize {
            for t in store.values_mut() {
                for v in t.data_mut() {
                    *v += rng.normal() * 0.05;
                }
            }
        }
        let priors = PriorMaps::new(
            Grid::from_fn(h, w, 1, |_, _, _| rng.normal() * 0.2),
            Grid::from_fn(h, w, 2, |_, _, _| rng.uniform()),
        );
        let x = Grid::from_fn(h, w, 1, |_, _, _| rng.normal() * 0.3);
        (store, net, priors, x, rng)
    }

    #[test]
    fn output_shape_and_zero_init_output() {
        let (store, net, priors, x, _) = setup(16, 16, 8, 71, false);
        let ledger = Ledger::new();
        let (eps, tape) = net
            .forward(&store, &x, &priors, 1, CacheMode::Infer, &ledger)
            .unwrap();
        assert!(tape.is_none());
        assert_eq!(eps.shape(), (16, 16, 1));
        // Zero-initialized tail conv makes the initial estimate exactly 0.
        assert!(eps.data().iter().all(|&v| v == 0.0));
        assert_eq!(ledger.live_bytes(), 0);
    }

    #[test]
    fn dims_not_divisible_by_four_rejected() {
        let mut rng = CounterRng::new(72);
        let mut store = ParamStore::<f64>::new();
        let cfg = UNetConfig {
            base_channels: 8,
            attn_max_side: 16,
        };
        assert!(InvUNet::build(&mut store, &mut rng, "u", cfg, 18, 16).is_err());
    }

    #[test]
    fn forward_values_identical_across_cache_modes() {
        let (store, net, priors, x, _) = setup(16, 16, 8, 73, true);
        let ledger = Ledger::new();
        let (e_infer, _) = net
            .forward(&store, &x, &priors, 2, CacheMode::Infer, &ledger)
            .unwrap();
        let (e_all, tape_all) = net
            .forward(&store, &x, &priors, 2, CacheMode::CacheAll, &ledger)
            .unwrap();
        let (e_bnd, tape_bnd) = net
            .forward(&store, &x, &priors, 2, CacheMode::CacheBoundary, &ledger)
            .unwrap();
        assert_eq!(e_infer.data(), e_all.data());
        assert_eq!(e_infer.data(), e_bnd.data());
        drop((tape_all, tape_bnd));
        assert_eq!(ledger.live_bytes(), 0);
    }

    #[test]
    fn cache_boundary_grads_match_cache_all() {
        let (store, net, priors, x, mut rng) = setup(16, 16, 8, 74, true);
        let ledger = Ledger::new();
        let geps = Grid::from_fn(16, 16, 1, |_, _, _| rng.normal());

        let (_, tape_all) = net
            .forward(&store, &x, &priors, 1, CacheMode::CacheAll, &ledger)
            .unwrap();
        let mut grads_all = GradStore::zeros_like(&store);
        let gx_all = net
            .backward(
                &store,
                &mut grads_all,
                tape_all.unwrap(),
                &geps,
                &priors,
                &ledger,
            )
            .unwrap();

        let (_, tape_bnd) = net
            .forward(&store, &x, &priors, 1, CacheMode::CacheBoundary, &ledger)
            .unwrap();
        let mut grads_bnd = GradStore::zeros_like(&store);
        let gx_bnd = net
            .backward(
                &store,
                &mut grads_bnd,
                tape_bnd.unwrap(),
                &geps,
                &priors,
                &ledger,
            )
            .unwrap();

        let rel = gx_all.linf_diff(&gx_bnd).unwrap() / gx_all.max_abs().max(1e-30);
        assert!(rel <= 1e-8, "input grad rel diff {rel}");
        for (i, (a, b)) in grads_all
            .tensors()
            .iter()
            .zip(grads_bnd.tensors())
            .enumerate()
        {
            let denom = a.max_abs().max(b.max_abs()).max(1e-30);
            let rel = a.linf_diff(b) / denom;
            assert!(rel <= 1e-8, "param tensor {i} rel diff {rel}");
        }
        assert_eq!(ledger.live_bytes(), 0, "all cache entries freed");
    }

    #[test]
    fn finite_difference_probe_of_parameters() {
        let (mut store, net, priors, x, mut rng) = setup(16, 16, 8, 75, true);
        let ledger = Ledger::new();
        let geps = Grid::from_fn(16, 16, 1, |_, _, _| rng.normal());
        let (_, tape) = net
            .forward(&store, &x, &priors, 1, CacheMode::CacheAll, &ledger)
            .unwrap();
        let mut grads = GradStore::zeros_like(&store);
        let gx = net
            .backward(&store, &mut grads, tape.unwrap(), &geps, &priors, &ledger)
            .unwrap();

        let h = 1e-5;
        let n_params = store.len();
        for probe in 0..10 {
            let pid = store.id_at(rng.below(n_params as u64) as usize);
            let numel = store.value(pid).numel();
            let idx = rng.below(numel as u64) as usize;
            let orig = store.value(pid).data()[idx];
            store.value_mut(pid).data_mut()[idx] = orig + h;
            let fp = net
                .forward(&store, &x, &priors, 1, CacheMode::Infer, &ledger)
                .unwrap()
                .0
                .dot_f64(&geps)
                .unwrap();
            store.value_mut(pid).data_mut()[idx] = orig - h;
            let fm = net
                .forward(&store, &x, &priors, 1, CacheMode::Infer, &ledger)
                .unwrap()
                .0
                .dot_f64(&geps)
                .unwrap();
            store.value_mut(pid).data_mut()[idx] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = grads.grad(pid).data()[idx];
            assert!(
                (an - fd).abs() / an.abs().max(fd.abs()).max(1.0) <= 1e-5,
                "probe {probe} param {} idx {idx}: {an} vs {fd}",
                store.name(pid)
            );
        }
        for i in [0usize, 100, 255] {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fp = net
                .forward(&store, &xp, &priors, 1, CacheMode::Infer, &ledger)
                .unwrap()
                .0
                .dot_f64(&geps)
                .unwrap();
            let fm = net
                .forward(&store, &xm, &priors, 1, CacheMode::Infer, &ledger)
                .unwrap()
                .0
                .dot_f64(&geps)
                .unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let an = gx.data()[i];
            assert!(
                (an - fd).abs() / an.abs().max(fd.abs()).max(1.0) <= 1e-5,
                "input {i}: {an} vs {fd}"
            );
        }
    }

    #[test]
    fn cache_boundary_uses_less_ledger_than_cache_all() {
        let (store, net, priors, x, mut rng) = setup(16, 16, 8, 76, true);
        let geps = Grid::from_fn(16, 16, 1, |_, _, _| rng.normal());

        let ledger_all = Ledger::new();
        let (_, tape) = net
            .forward(&store, &x, &priors, 1, CacheMode::CacheAll, &ledger_all)
            .unwrap();
        let peak_fwd_all = ledger_all.live_bytes();
        let mut grads = GradStore::zeros_like(&store);
        net.backward(
            &store,
            &mut grads,
            tape.unwrap(),
            &geps,
            &priors,
            &ledger_all,
        )
        .unwrap();

        let ledger_bnd = Ledger::new();
        let (_, tape) = net
            .forward(&store, &x, &priors, 1, CacheMode::CacheBoundary, &ledger_bnd)
            .unwrap();
        let mut grads = GradStore::zeros_like(&store);
        net.backward(
            &store,
            &mut grads,
            tape.unwrap(),
            &geps,
            &priors,
            &ledger_bnd,
        )
        .unwrap();

        assert!(ledger_bnd.peak_bytes() < peak_fwd_all);
        assert_eq!(ledger_all.live_bytes(), 0);
        assert_eq!(ledger_bnd.live_bytes(), 0);
    }
}
