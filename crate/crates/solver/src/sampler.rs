//! The multi-step invertible iterative sampler: noise schedule, the
//! per-step denoise / data-consistency / update operator, the invertible
//! two-stream state update with its exact inverse, measurement-based
//! initialization and the learned output fusion.

use cgm_core::{
    CounterRng, Error, Grid, Ledger, ParamId, ParamStore, Result, Scalar, Tensor,
};
use cgm_measure::{apply_at, dc_project, MeasurementOp, MeasurementVec};

use crate::act::sigmoid;
use crate::blocks::PriorMaps;
use crate::unet::{CacheMode, InvUNet, UNetConfig, UNetTape};

/// Cumulative noise schedule indexed by step: alpha_bar[0] = 1 (the final
/// state is noise-free) and strictly decreasing in t.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    alpha_bar: Vec<f64>,
}

impl Schedule {
    pub fn new(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::InvalidArg(
                "schedule needs at least one diffusion step".into(),
            ));
        }
        if alpha_bar[0] != 1.0 {
            return Err(Error::InvalidArg(format!(
                "schedule must start at alpha_bar[0] = 1, got {}",
                alpha_bar[0]
            )));
        }
        for (i, w) in alpha_bar.windows(2).enumerate() {
            if !(w[1] > 0.0 && w[1] <= 1.0) || w[1] >= w[0] {
                return Err(Error::InvalidArg(format!(
                    "schedule must be strictly decreasing in (0, 1]; violated at index {}",
                    i + 1
                )));
            }
        }
        Ok(Schedule { alpha_bar })
    }

    /// Default schedule: the tuned 3-step profile, or a linear ramp from
    /// 1 down to 0.05 for other step counts.
    pub fn default_for(steps: usize) -> Result<Self> {
        if steps == 3 {
            Schedule::new(vec![1.0, 0.75, 0.35, 0.05])
        } else {
            let mut ab = Vec::with_capacity(steps + 1);
            for t in 0..=steps {
                ab.push(1.0 - 0.95 * t as f64 / steps as f64);
            }
            Schedule::new(ab)
        }
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn values(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// Learnable per-step mixing weights and the two fusion scalars. The
/// mixing weight is bounded in [0.05, 0.95] through a sigmoid so the
/// inverse update never divides by a vanishing coefficient.
#[derive(Debug, Clone)]
pub struct StepScalars {
    /// Raw parameters of length T; mix weight v_t = 0.05 + 0.9 * sigmoid(raw).
    pub mix_raw: ParamId,
    /// Scale on the auxiliary channel at initialization (init 1).
    pub aux_init_scale: ParamId,
    /// Scale fusing the auxiliary channel into the output (init 1).
    pub fuse_scale: ParamId,
}

pub const MIX_FLOOR: f64 = 0.05;
pub const MIX_SPAN: f64 = 0.9;

impl StepScalars {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, steps: usize) -> Result<Self> {
        let mix_raw = store.add("sampler.mix_raw", Tensor::zeros(&[steps]))?;
        let aux_init_scale = store.add("sampler.aux_init_scale", Tensor::scalar(T::one()))?;
        let fuse_scale = store.add("sampler.fuse_scale", Tensor::scalar(T::one()))?;
        Ok(StepScalars {
            mix_raw,
            aux_init_scale,
            fuse_scale,
        })
    }

    /// v_t for t in 1..=T.
    pub fn mix_weight<T: Scalar>(&self, store: &ParamStore<T>, t: usize) -> T {
        let raw = store.value(self.mix_raw).data()[t - 1];
        T::from_f64(MIX_FLOOR) + T::from_f64(MIX_SPAN) * sigmoid(raw)
    }

    /// d v_t / d raw_t.
    pub fn mix_weight_grad<T: Scalar>(&self, store: &ParamStore<T>, t: usize) -> T {
        let raw = store.value(self.mix_raw).data()[t - 1];
        let s = sigmoid(raw);
        T::from_f64(MIX_SPAN) * s * (T::one() - s)
    }
}

/// The invertible iteration state: main estimate, auxiliary channel and
/// the step index.
#[derive(Debug, Clone)]
pub struct SamplerState<T> {
    pub x_hat: Grid<T>,
    pub h_aux: Grid<T>,
    pub t: usize,
}

impl<T: Scalar> SamplerState<T> {
    pub fn byte_size(&self) -> usize {
        self.x_hat.byte_size() + self.h_aux.byte_size()
    }
}

/// Everything a solve needs besides parameters: the sampling operator,
/// the measurements, and the conditioning maps (environment raster plus
/// the measurement back-projection).
#[derive(Debug, Clone)]
pub struct SolverInputs<T> {
    pub op: MeasurementOp,
    pub y: MeasurementVec<T>,
    pub priors: PriorMaps<T>,
}

impl<T: Scalar> SolverInputs<T> {
    pub fn new(op: MeasurementOp, y: MeasurementVec<T>, env: Grid<T>) -> Result<Self> {
        let backproj = apply_at(&op, &y)?;
        if env.shape() != (op.h(), op.w(), 2) {
            return Err(Error::shape(
                "environment raster",
                format!("{}x{}x2", op.h(), op.w()),
                env.shape_str(),
            ));
        }
        Ok(SolverInputs {
            op,
            y,
            priors: PriorMaps::new(backproj, env),
        })
    }
}

/// Noise-free estimate from the noisy state and the noise prediction:
/// (x_t - sqrt(1 - abar_t) * eps) / sqrt(abar_t).
pub fn estimate_x0<T: Scalar>(x_hat_t: &Grid<T>, eps: &Grid<T>, alpha_bar_t: f64) -> Result<Grid<T>> {
    if !(alpha_bar_t > 0.0 && alpha_bar_t <= 1.0) {
        return Err(Error::InvalidArg(format!(
            "alpha_bar must be in (0, 1], got {alpha_bar_t}"
        )));
    }
    let inv_sqrt = T::from_f64(1.0 / alpha_bar_t.sqrt());
    let coef = T::from_f64((1.0 - alpha_bar_t).sqrt());
    x_hat_t.zip_map(eps, |x, e| (x - coef * e) * inv_sqrt)
}

/// Deterministic update combining the data-consistent estimate with the
/// predicted noise: sqrt(abar_prev) * x0 + sqrt(1 - abar_prev) * eps.
pub fn ddim_update<T: Scalar>(x0_bar: &Grid<T>, eps: &Grid<T>, alpha_bar_prev: f64) -> Result<Grid<T>> {
    if !(alpha_bar_prev > 0.0 && alpha_bar_prev <= 1.0) {
        return Err(Error::InvalidArg(format!(
            "alpha_bar must be in (0, 1], got {alpha_bar_prev}"
        )));
    }
    let a = T::from_f64(alpha_bar_prev.sqrt());
    let b = T::from_f64((1.0 - alpha_bar_prev).sqrt());
    x0_bar.zip_map(eps, |x, e| a * x + b * e)
}

/// Mix the one-step operator output with the auxiliary channel:
/// x_next = (1 - v) * f + v * h.
pub fn mix_update<T: Scalar>(f_out: &Grid<T>, h_aux: &Grid<T>, v: T) -> Result<Grid<T>> {
    f_out.zip_map(h_aux, |f, h| (T::one() - v) * f + v * h)
}

/// Invert [`mix_update`] for the auxiliary channel given the mixed
/// output: h = (x_next - (1 - v) * f) / v.
pub fn mix_invert<T: Scalar>(x_next: &Grid<T>, f_out: &Grid<T>, v: T) -> Result<Grid<T>> {
    x_next.zip_map(f_out, |x, f| (x - (T::one() - v) * f) / v)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub unet: UNetConfig,
    pub steps: usize,
    /// Give every step its own network weights instead of a shared,
    /// step-conditioned network.
    pub per_step_weights: bool,
    /// Data-consistency step size; 1 is the orthogonal projection.
    pub eta: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            unet: UNetConfig::default(),
            steps: 3,
            per_step_weights: false,
            eta: 1.0,
        }
    }
}

/// The unrolled solver: T invertible steps around the noise estimator,
/// plus the learned scalars. Parameters live in an external store; this
/// struct holds structure and handles only.
#[derive(Debug, Clone)]
pub struct UnrolledSolver {
    pub cfg: SolverConfig,
    pub schedule: Schedule,
    pub scalars: StepScalars,
    unets: Vec<InvUNet>,
}

impl UnrolledSolver {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: SolverConfig,
        schedule: Schedule,
        h: usize,
        w: usize,
        seed: u64,
    ) -> Result<Self> {
        if schedule.steps() != cfg.steps {
            return Err(Error::InvalidArg(format!(
                "schedule has {} steps but config wants {}",
                schedule.steps(),
                cfg.steps
            )));
        }
        let mut rng = CounterRng::new(seed);
        let n_nets = if cfg.per_step_weights { cfg.steps } else { 1 };
        let mut unets = Vec::with_capacity(n_nets);
        for i in 0..n_nets {
            let prefix = if cfg.per_step_weights {
                format!("unet{}", i + 1)
            } else {
                "unet".to_string()
            };
            unets.push(InvUNet::build(
                store,
                &mut rng.substream(i as u64),
                &prefix,
                cfg.unet,
                h,
                w,
            )?);
        }
        let scalars = StepScalars::init(store, cfg.steps)?;
        Ok(UnrolledSolver {
            cfg,
            schedule,
            scalars,
            unets,
        })
    }

    pub fn unet_for(&self, t: usize) -> &InvUNet {
        if self.cfg.per_step_weights {
            &self.unets[t - 1]
        } else {
            &self.unets[0]
        }
    }

    pub fn unets(&self) -> &[InvUNet] {
        &self.unets
    }

    /// Initial state at t = T from the measurement back-projection.
    pub fn init_state<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        inputs: &SolverInputs<T>,
    ) -> SamplerState<T> {
        let s_init = store.value(self.scalars.aux_init_scale).value();
        SamplerState {
            x_hat: inputs.priors.backproj.clone(),
            h_aux: inputs.priors.backproj.scaled(s_init),
            t: self.cfg.steps,
        }
    }

    /// One-step operator F_t: noise prediction, noise-free estimate,
    /// data-consistency projection, deterministic update. Returns the
    /// denoised candidate and (when caching) the network tape.
    pub fn step_operator<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x_hat_t: &Grid<T>,
        t: usize,
        inputs: &SolverInputs<T>,
        mode: CacheMode,
        ledger: &Ledger,
    ) -> Result<(Grid<T>, Option<UNetTape<T>>)> {
        let (eps, tape) =
            self.unet_for(t)
                .forward(store, x_hat_t, &inputs.priors, t, mode, ledger)?;
        let x0 = estimate_x0(x_hat_t, &eps, self.schedule.alpha_bar(t))?;
        let x0_bar = dc_project(&inputs.op, &x0, &inputs.y, T::from_f64(self.cfg.eta))?;
        let d = ddim_update(&x0_bar, &eps, self.schedule.alpha_bar(t - 1))?;
        Ok((d, tape))
    }

    /// Invertible state update from t to t-1:
    /// x_{t-1} = (1 - v_t) F_t(x_t) + v_t h_t, h_{t-1} = x_t.
    pub fn step_forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        state: &SamplerState<T>,
        inputs: &SolverInputs<T>,
        ledger: &Ledger,
    ) -> Result<SamplerState<T>> {
        if state.t == 0 {
            return Err(Error::InvalidArg("step_forward at t = 0".into()));
        }
        let (d, _) = self.step_operator(store, &state.x_hat, state.t, inputs, CacheMode::Infer, ledger)?;
        let v = self.scalars.mix_weight(store, state.t);
        Ok(SamplerState {
            x_hat: mix_update(&d, &state.h_aux, v)?,
            h_aux: state.x_hat.clone(),
            t: state.t - 1,
        })
    }

    /// Exact inverse of [`Self::step_forward`]: the main channel is a
    /// stored copy; the auxiliary channel is recovered by re-evaluating
    /// the step operator and inverting the mix.
    pub fn step_inverse<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        state: &SamplerState<T>,
        inputs: &SolverInputs<T>,
        ledger: &Ledger,
    ) -> Result<SamplerState<T>> {
        let t = state.t + 1;
        let x_hat_t = state.h_aux.clone();
        let (d, _) = self.step_operator(store, &x_hat_t, t, inputs, CacheMode::Infer, ledger)?;
        let v = self.scalars.mix_weight(store, t);
        let h_aux_t = mix_invert(&state.x_hat, &d, v)?;
        Ok(SamplerState {
            x_hat: x_hat_t,
            h_aux: h_aux_t,
            t,
        })
    }

    /// Output fusion at t = 0: x0 + fuse_scale * h0.
    pub fn fuse_output<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        state: &SamplerState<T>,
    ) -> Result<Grid<T>> {
        if state.t != 0 {
            return Err(Error::InvalidArg(format!(
                "fuse_output requires t = 0, got t = {}",
                state.t
            )));
        }
        let s = store.value(self.scalars.fuse_scale).value();
        state.x_hat.zip_map(&state.h_aux, |x, h| x + s * h)
    }

    /// Full deterministic reconstruction: initialization, T invertible
    /// steps, output fusion.
    pub fn solve<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        inputs: &SolverInputs<T>,
    ) -> Result<Grid<T>> {
        let ledger = Ledger::new();
        let mut state = self.init_state(store, inputs);
        while state.t > 0 {
            state = self.step_forward(store, &state, inputs, &ledger)?;
        }
        self.fuse_output(store, &state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cgm_measure::{apply_a, make_mask};

    #[test]
    fn schedule_validation() {
        assert!(Schedule::new(vec![1.0, 0.75, 0.35, 0.05]).is_ok());
        assert!(Schedule::new(vec![0.9, 0.5]).is_err());
        assert!(Schedule::new(vec![1.0, 0.5, 0.6]).is_err());
        assert!(Schedule::new(vec![1.0, 0.5, 0.0]).is_err());
        assert!(Schedule::new(vec![1.0]).is_err());
        let s = Schedule::default_for(3).unwrap();
        assert_eq!(s.values(), &[1.0, 0.75, 0.35, 0.05]);
        let s1 = Schedule::default_for(1).unwrap();
        assert_eq!(s1.steps(), 1);
        assert_eq!(s1.values()[1], 0.05);
    }

    #[test]
    fn estimate_x0_scalar_cases() {
        let x = Grid::from_vec(1, 1, 1, vec![1.0f64]).unwrap();
        let e = Grid::from_vec(1, 1, 1, vec![0.5f64]).unwrap();
        // alpha_bar = 1: no-noise limit returns x.
        let r = estimate_x0(&x, &e, 1.0).unwrap();
        assert!((r.data()[0] - 1.0).abs() < 1e-15);
        // Hand evaluation at alpha_bar = 0.25.
        let r = estimate_x0(&x, &e, 0.25).unwrap();
        assert!((r.data()[0] - 1.1339745962155614).abs() < 1e-12);
        // eps = 0 scales by 1/sqrt(alpha_bar).
        let z = Grid::from_vec(1, 1, 1, vec![0.0f64]).unwrap();
        let r = estimate_x0(&x, &z, 0.25).unwrap();
        assert!((r.data()[0] - 2.0).abs() < 1e-15);
        assert!(estimate_x0(&x, &e, 0.0).is_err());
        assert!(estimate_x0(&x, &e, -0.5).is_err());
    }

    #[test]
    fn ddim_update_scalar_cases() {
        let x0 = Grid::from_vec(1, 1, 1, vec![1.1339745962155614f64]).unwrap();
        let e = Grid::from_vec(1, 1, 1, vec![0.5f64]).unwrap();
        // alpha_prev = 1 returns x0.
        let r = ddim_update(&x0, &e, 1.0).unwrap();
        assert!((r.data()[0] - x0.data()[0]).abs() < 1e-15);
        // Hand evaluation at alpha_prev = 0.75.
        let r = ddim_update(&x0, &e, 0.75).unwrap();
        assert!((r.data()[0] - 1.2320508075688772).abs() < 1e-12);
        // eps = 0 at alpha_prev = 0.25 halves the estimate.
        let z = Grid::from_vec(1, 1, 1, vec![0.0f64]).unwrap();
        let r = ddim_update(&x0, &z, 0.25).unwrap();
        assert!((r.data()[0] - 0.5 * x0.data()[0]).abs() < 1e-15);
    }

    #[test]
    fn mix_update_algebra() {
        let mut rng = CounterRng::new(7);
        let f = Grid::<f64>::zeros(4, 4, 1);
        let h = Grid::from_fn(4, 4, 1, |_, _, _| rng.normal());
        // v at the lower bound with a zero operator: x = 0.05 * h.
        let x = mix_update(&f, &h, 0.05).unwrap();
        assert!(x.linf_diff(&h.scaled(0.05)).unwrap() < 1e-15);
        // Inverse algebra with f = 0, v = 0.5: h = 2 * x.
        let back = mix_invert(&x, &f, 0.5).unwrap();
        assert!(back.linf_diff(&x.scaled(2.0)).unwrap() < 1e-15);
    }

    fn tiny_solver(
        h: usize,
        w: usize,
        steps: usize,
        seed: u64,
        randomize: bool,
    ) -> (ParamStore<f64>, UnrolledSolver, SolverInputs<f64>, Grid<f64>) {
        let mut store = ParamStore::<f64>::new();
        let cfg = SolverConfig {
            unet: UNetConfig {
                base_channels: 8,
                attn_max_side: 16,
            },
            steps,
            per_step_weights: false,
            eta: 1.0,
        };
        let solver = UnrolledSolver::build(
            &mut store,
            cfg,
            Schedule::default_for(steps).unwrap(),
            h,
            w,
            seed,
        )
        .unwrap();
        let mut rng = CounterRng::new(seed + 1000);
        if randomize {
            for t in store.values_mut() {
                for v in t.data_mut() {
                    *v += rng.normal() * 0.05;
                }
            }
        }
        let truth = Grid::from_fn(h, w, 1, |_, _, _| rng.uniform());
        let env = Grid::from_fn(h, w, 2, |_, _, _| rng.uniform());
        let op = make_mask(&mut rng, h, w, 0.2).unwrap();
        let y = apply_a(&op, &truth).unwrap();
        let inputs = SolverInputs::new(op, y, env).unwrap();
        (store, solver, inputs, truth)
    }

    #[test]
    fn init_state_matches_backprojection_and_scale() {
        let (mut store, solver, inputs, _) = tiny_solver(16, 16, 3, 81, false);
        let st = solver.init_state(&store, &inputs);
        assert_eq!(st.t, 3);
        assert_eq!(st.x_hat.data(), inputs.priors.backproj.data());
        // aux_init_scale = 1 makes the channels equal.
        assert_eq!(st.h_aux.data(), st.x_hat.data());
        // Changing the scale rescales only the auxiliary channel.
        store.value_mut(solver.scalars.fuse_scale);
        store
            .value_mut(solver.scalars.aux_init_scale)
            .data_mut()[0] = 2.0;
        let st2 = solver.init_state(&store, &inputs);
        assert_eq!(st2.h_aux.data(), st.x_hat.scaled(2.0).data());
    }

    #[test]
    fn full_sampling_ratio_keeps_truth_at_samples() {
        // With rho = 1 and a zero-initialized network the first step's
        // projection pins every pixel to the measurements.
        let h = 16;
        let (store, solver, _, _) = tiny_solver(h, h, 1, 82, false);
        let mut rng = CounterRng::new(5);
        let truth = Grid::from_fn(h, h, 1, |_, _, _| rng.uniform());
        let env = Grid::from_fn(h, h, 2, |_, _, _| rng.uniform());
        let op = make_mask(&mut rng, h, h, 1.0).unwrap();
        let y = apply_a(&op, &truth).unwrap();
        let inputs = SolverInputs::new(op.clone(), y.clone(), env).unwrap();
        let ledger = Ledger::new();
        let state = solver.init_state(&store, &inputs);
        assert_eq!(state.x_hat.data(), truth.data());
        let (d, _) = solver
            .step_operator(&store, &state.x_hat, 1, &inputs, CacheMode::Infer, &ledger)
            .unwrap();
        // alpha_bar_0 = 1, so d equals the projected estimate = truth.
        assert!(d.linf_diff(&truth).unwrap() <= 1e-6);
    }

    #[test]
    fn final_step_is_data_consistent() {
        let (store, solver, inputs, _) = tiny_solver(16, 16, 3, 83, true);
        let ledger = Ledger::new();
        let mut state = solver.init_state(&store, &inputs);
        while state.t > 1 {
            state = solver.step_forward(&store, &state, &inputs, &ledger).unwrap();
        }
        let (d0, _) = solver
            .step_operator(&store, &state.x_hat, 1, &inputs, CacheMode::Infer, &ledger)
            .unwrap();
        let sampled = apply_a(&inputs.op, &d0).unwrap();
        assert!(sampled.linf_diff(&inputs.y) <= 1e-6);
    }

    #[test]
    fn step_roundtrip_is_exact_in_f64() {
        let (store, solver, inputs, _) = tiny_solver(16, 16, 3, 84, true);
        let ledger = Ledger::new();
        let mut state = solver.init_state(&store, &inputs);
        for _ in 0..3 {
            let next = solver.step_forward(&store, &state, &inputs, &ledger).unwrap();
            let back = solver.step_inverse(&store, &next, &inputs, &ledger).unwrap();
            // Main channel recovered bit-exact (pure copy).
            assert_eq!(back.x_hat.data(), state.x_hat.data());
            let rel = back.h_aux.linf_diff(&state.h_aux).unwrap() / state.h_aux.max_abs().max(1e-30);
            assert!(rel <= 1e-10, "aux roundtrip rel err {rel} at t={}", state.t);
            state = next;
        }
    }

    #[test]
    fn solve_is_deterministic() {
        let (store, solver, inputs, _) = tiny_solver(16, 16, 3, 85, true);
        let a = solver.solve(&store, &inputs).unwrap();
        let b = solver.solve(&store, &inputs).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn fuse_output_scalar_behavior() {
        let (mut store, solver, inputs, _) = tiny_solver(16, 16, 3, 86, false);
        let ledger = Ledger::new();
        let mut state = solver.init_state(&store, &inputs);
        while state.t > 0 {
            state = solver.step_forward(&store, &state, &inputs, &ledger).unwrap();
        }
        // fuse_scale = 0 returns the main channel alone.
        store.value_mut(solver.scalars.fuse_scale).data_mut()[0] = 0.0;
        let out0 = solver.fuse_output(&store, &state).unwrap();
        assert_eq!(out0.data(), state.x_hat.data());
        // fuse_scale = 1 adds the channels elementwise.
        store.value_mut(solver.scalars.fuse_scale).data_mut()[0] = 1.0;
        let out1 = solver.fuse_output(&store, &state).unwrap();
        let expect = state.x_hat.add(&state.h_aux).unwrap();
        assert_eq!(out1.data(), expect.data());
    }

    #[test]
    fn untrained_solver_trace_oracle_at_one_step() {
        // Zero-initialized network => eps == 0 everywhere, so the whole
        // solve reduces to closed-form algebra the oracle can replay.
        let (store, solver, inputs, _) = tiny_solver(16, 16, 1, 87, false);
        let out = solver.solve(&store, &inputs).unwrap();

        let ab1 = solver.schedule.alpha_bar(1);
        let v = solver.scalars.mix_weight(&store, 1);
        let bp = &inputs.priors.backproj;
        // F_1 state: x0 = bp / sqrt(ab1), projected, then identity update.
        let x0 = bp.scaled(1.0 / ab1.sqrt());
        let x0_bar = dc_project(&inputs.op, &x0, &inputs.y, 1.0).unwrap();
        let x_hat0 = mix_update(&x0_bar, bp, v).unwrap();
        // h0 = x_hat_1 = bp; fuse with scale 1.
        let expect = x_hat0.add(bp).unwrap();
        assert!(out.linf_diff(&expect).unwrap() <= 1e-5);
        // Sampled pixels follow the traced composition.
        let sampled = apply_a(&inputs.op, &out).unwrap();
        let expect_sampled = apply_a(&inputs.op, &expect).unwrap();
        assert!(sampled.linf_diff(&expect_sampled) <= 1e-5);
    }
}
