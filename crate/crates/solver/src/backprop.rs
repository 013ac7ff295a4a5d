//! End-to-end differentiation of the unrolled solver in two modes:
//! CACHED retains every sampler state and full network tape, while
//! INVERTIBLE retains only the terminal state and reconstructs earlier
//! states through the exact step inverse, re-running each step's network
//! forward in boundary-caching mode and freeing everything immediately
//! after its gradients are taken.

use cgm_core::{
    BytesGuard, Error, GradStore, Grid, Ledger, LedgerTag, ParamStore, Result, Scalar,
};
use cgm_measure::dc_project_backward;

use crate::sampler::{mix_invert, mix_update, SamplerState, SolverInputs, UnrolledSolver};
use crate::unet::{CacheMode, UNetTape};

/// One recorded step of a cached forward, in execution order (t = T
/// first). Holds the pre-step state, the step operator output and the
/// full network tape.
struct StepRecord<T> {
    t: usize,
    x_hat_t: Grid<T>,
    h_aux_t: Grid<T>,
    d: Grid<T>,
    unet_tape: UNetTape<T>,
    _guard: BytesGuard,
}

/// Saved state of a cached (memory-hungry) forward pass.
pub struct SolveTapeCached<T> {
    steps: Vec<StepRecord<T>>,
    terminal: SamplerState<T>,
    _terminal_guard: BytesGuard,
}

impl<T: Scalar> SolveTapeCached<T> {
    pub fn terminal(&self) -> &SamplerState<T> {
        &self.terminal
    }

    /// The step operator outputs, t = T first (test instrumentation).
    pub fn step_outputs(&self) -> Vec<(usize, &Grid<T>)> {
        self.steps.iter().map(|s| (s.t, &s.d)).collect()
    }
}

/// Saved state of an invertible forward pass: just the terminal state.
pub struct TerminalTape<T> {
    terminal: SamplerState<T>,
    /// Optional per-step states recorded for the reconstruction
    /// self-check (diagnostics only, not used for gradients).
    check_states: Vec<SamplerState<T>>,
    _guard: BytesGuard,
}

impl<T: Scalar> TerminalTape<T> {
    pub fn terminal(&self) -> &SamplerState<T> {
        &self.terminal
    }
}

/// Outcome of the reconstruction self-check inside the invertible
/// backward pass.
#[derive(Debug, Clone, Default)]
pub struct DriftReport {
    pub checked: bool,
    pub max_rel_err: f64,
    pub flagged: bool,
}

pub const DRIFT_FLAG_THRESHOLD: f64 = 1e-3;

/// Forward pass retaining every sampler state and a full network tape
/// per step. Returns the prediction and the tape.
pub fn forward_cached<T: Scalar>(
    solver: &UnrolledSolver,
    store: &ParamStore<T>,
    inputs: &SolverInputs<T>,
    ledger: &Ledger,
) -> Result<(Grid<T>, SolveTapeCached<T>)> {
    let mut state = solver.init_state(store, inputs);
    let mut steps = Vec::with_capacity(solver.cfg.steps);
    while state.t > 0 {
        let t = state.t;
        let (d, tape) =
            solver.step_operator(store, &state.x_hat, t, inputs, CacheMode::CacheAll, ledger)?;
        let tape = tape.ok_or_else(|| Error::InvalidArg("missing unet tape".into()))?;
        let v = solver.scalars.mix_weight(store, t);
        let next = SamplerState {
            x_hat: mix_update(&d, &state.h_aux, v)?,
            h_aux: state.x_hat.clone(),
            t: t - 1,
        };
        let bytes = state.byte_size() + d.byte_size();
        steps.push(StepRecord {
            t,
            x_hat_t: state.x_hat,
            h_aux_t: state.h_aux,
            d,
            unet_tape: tape,
            _guard: ledger.track(LedgerTag::StepState, bytes),
        });
        state = next;
    }
    let pred = solver.fuse_output(store, &state)?;
    let guard = ledger.track(LedgerTag::StepState, state.byte_size() + pred.byte_size());
    Ok((
        pred,
        SolveTapeCached {
            steps,
            terminal: state,
            _terminal_guard: guard,
        },
    ))
}

/// Forward pass retaining only the terminal state. When `record_states`
/// is set, intermediate states are additionally stored for the
/// reconstruction self-check.
pub fn forward_terminal<T: Scalar>(
    solver: &UnrolledSolver,
    store: &ParamStore<T>,
    inputs: &SolverInputs<T>,
    ledger: &Ledger,
    record_states: bool,
) -> Result<(Grid<T>, TerminalTape<T>)> {
    let mut state = solver.init_state(store, inputs);
    let mut check_states = Vec::new();
    while state.t > 0 {
        if record_states {
            check_states.push(state.clone());
        }
        state = solver.step_forward(store, &state, inputs, ledger)?;
    }
    let pred = solver.fuse_output(store, &state)?;
    let guard = ledger.track(LedgerTag::StepState, state.byte_size() + pred.byte_size());
    Ok((
        pred,
        TerminalTape {
            terminal: state,
            check_states,
            _guard: guard,
        },
    ))
}

/// Cotangent bookkeeping for the fusion stage; returns the state
/// cotangents at t = 0.
fn fuse_backward<T: Scalar>(
    solver: &UnrolledSolver,
    store: &ParamStore<T>,
    grads: &mut GradStore<T>,
    terminal: &SamplerState<T>,
    gpred: &Grid<T>,
) -> Result<(Grid<T>, Grid<T>)> {
    let s = store.value(solver.scalars.fuse_scale).value();
    let gfuse = gpred.dot_f64(&terminal.h_aux)?;
    grads.add_value(solver.scalars.fuse_scale, 0, T::from_f64(gfuse));
    Ok((gpred.clone(), gpred.scaled(s)))
}

/// Shared per-step vector-Jacobian products. Consumes the step's network
/// tape; returns the cotangents for the pre-step state.
#[allow(clippy::too_many_arguments)]
fn step_backward_core<T: Scalar>(
    solver: &UnrolledSolver,
    store: &ParamStore<T>,
    grads: &mut GradStore<T>,
    t: usize,
    h_aux_t: &Grid<T>,
    d: &Grid<T>,
    unet_tape: UNetTape<T>,
    gx_next: &Grid<T>,
    gh_next: &Grid<T>,
    inputs: &SolverInputs<T>,
    ledger: &Ledger,
) -> Result<(Grid<T>, Grid<T>)> {
    let v = solver.scalars.mix_weight(store, t);
    // x_next = (1 - v) d + v h: scalar, aux-channel and operator paths.
    let gv = gx_next.dot_f64(&h_aux_t.sub(d)?)?;
    let dv_draw = solver.scalars.mix_weight_grad(store, t);
    grads.add_value(
        solver.scalars.mix_raw,
        t - 1,
        T::from_f64(gv) * dv_draw,
    );
    let gh_t = gx_next.scaled(v);
    let gd = gx_next.scaled(T::one() - v);

    // Through the one-step operator: ddim update, projection, estimate.
    let ab_t = solver.schedule.alpha_bar(t);
    let ab_prev = solver.schedule.alpha_bar(t - 1);
    let gx0_bar = gd.scaled(T::from_f64(ab_prev.sqrt()));
    let geps_direct = gd.scaled(T::from_f64((1.0 - ab_prev).sqrt()));
    let gx0 = dc_project_backward(&inputs.op, &gx0_bar, T::from_f64(solver.cfg.eta))?;
    let gx_from_x0 = gx0.scaled(T::from_f64(1.0 / ab_t.sqrt()));
    let mut geps = geps_direct;
    geps.add_scaled_assign(&gx0, T::from_f64(-(1.0 - ab_t).sqrt() / ab_t.sqrt()))?;

    let gx_unet = solver
        .unet_for(t)
        .backward(store, grads, unet_tape, &geps, &inputs.priors, ledger)?;

    // x_hat_t receives: copy into h_next, the estimate path and the
    // network path.
    let mut gx_t = gh_next.clone();
    gx_t.add_scaled_assign(&gx_from_x0, T::one())?;
    gx_t.add_scaled_assign(&gx_unet, T::one())?;
    Ok((gx_t, gh_t))
}

/// Gradient accumulation into the initialization scalar at t = T.
fn init_backward<T: Scalar>(
    solver: &UnrolledSolver,
    grads: &mut GradStore<T>,
    inputs: &SolverInputs<T>,
    gh_top: &Grid<T>,
) -> Result<()> {
    let g = gh_top.dot_f64(&inputs.priors.backproj)?;
    grads.add_value(solver.scalars.aux_init_scale, 0, T::from_f64(g));
    Ok(())
}

/// Backward from a cached tape.
pub fn backward_cached<T: Scalar>(
    solver: &UnrolledSolver,
    store: &ParamStore<T>,
    grads: &mut GradStore<T>,
    mut tape: SolveTapeCached<T>,
    gpred: &Grid<T>,
    inputs: &SolverInputs<T>,
    ledger: &Ledger,
) -> Result<()> {
    let (mut gx, mut gh) = fuse_backward(solver, store, grads, &tape.terminal, gpred)?;
    while let Some(rec) = tape.steps.pop() {
        let (gx_t, gh_t) = step_backward_core(
            solver,
            store,
            grads,
            rec.t,
            &rec.h_aux_t,
            &rec.d,
            rec.unet_tape,
            &gx,
            &gh,
            inputs,
            ledger,
        )?;
        let _ = rec.x_hat_t;
        gx = gx_t;
        gh = gh_t;
    }
    init_backward(solver, grads, inputs, &gh)?;
    Ok(())
}

/// Backward reconstructing states via the exact step inverse. Each
/// step's network forward is re-run in boundary-caching mode; the tape
/// doubles as the reconstruction evaluation, so the inverse costs one
/// extra forward per step in total.
pub fn backward_invertible<T: Scalar>(
    solver: &UnrolledSolver,
    store: &ParamStore<T>,
    grads: &mut GradStore<T>,
    tape: TerminalTape<T>,
    gpred: &Grid<T>,
    inputs: &SolverInputs<T>,
    ledger: &Ledger,
) -> Result<DriftReport> {
    let (mut gx, mut gh) = fuse_backward(solver, store, grads, &tape.terminal, gpred)?;
    let mut state = tape.terminal.clone();
    let mut report = DriftReport {
        checked: !tape.check_states.is_empty(),
        ..Default::default()
    };
    for t in 1..=solver.cfg.steps {
        // Reconstruct (x_t, h_t): the main channel is the stored aux
        // copy; evaluating F_t on it yields both the inverse and the
        // backward tape.
        let x_hat_t = state.h_aux.clone();
        let (d, unet_tape) = solver.step_operator(
            store,
            &x_hat_t,
            t,
            inputs,
            CacheMode::CacheBoundary,
            ledger,
        )?;
        let unet_tape = unet_tape.ok_or_else(|| Error::InvalidArg("missing unet tape".into()))?;
        let v = solver.scalars.mix_weight(store, t);
        let h_aux_t = mix_invert(&state.x_hat, &d, v)?;
        let _state_guard = ledger.track(
            LedgerTag::StepState,
            x_hat_t.byte_size() + h_aux_t.byte_size() + d.byte_size(),
        );

        if report.checked {
            // Compare against the recorded forward state.
            let fwd = &tape.check_states[solver.cfg.steps - t];
            let rel = h_aux_t.linf_diff(&fwd.h_aux)? / fwd.h_aux.max_abs().max(1e-30);
            report.max_rel_err = report.max_rel_err.max(rel);
            if rel > T::from_f64(DRIFT_FLAG_THRESHOLD).as_f64() {
                report.flagged = true;
            }
        }

        let (gx_t, gh_t) = step_backward_core(
            solver,
            store,
            grads,
            t,
            &h_aux_t,
            &d,
            unet_tape,
            &gx,
            &gh,
            inputs,
            ledger,
        )?;
        gx = gx_t;
        gh = gh_t;
        state = SamplerState {
            x_hat: x_hat_t,
            h_aux: h_aux_t,
            t,
        };
    }
    init_backward(solver, grads, inputs, &gh)?;
    Ok(report)
}
