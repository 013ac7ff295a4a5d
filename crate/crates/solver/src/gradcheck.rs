//! Named verification runners shared by the CLI and the acceptance
//! suite: finite-difference gradient checks for every block variety,
//! inversion round-trips, and the cached-vs-invertible gradient
//! equivalence check. The finite-difference side is an independent
//! oracle: it only evaluates forward passes.

use cgm_core::{
    CounterRng, GradStore, Grid, Ledger, ParamStore, Result,
};
use cgm_measure::{apply_a, make_mask};

use crate::backprop::{backward_cached, backward_invertible, forward_cached, forward_terminal};
use crate::blocks::{
    AttentionBlock, Aux, Body, CouplingModule, InjectorBlock, PriorMaps, ResidualBlock,
    TimeEmbedding, TIME_DIM,
};
use crate::sampler::{Schedule, SolverConfig, SolverInputs, UnrolledSolver};
use crate::unet::{CacheMode, UNetConfig};

/// One row of a verification table.
#[derive(Debug, Clone)]
pub struct CheckRow {
    pub name: String,
    pub observed: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckRow {
    fn new(name: impl Into<String>, observed: f64, tolerance: f64) -> Self {
        let pass = observed.is_finite() && observed <= tolerance;
        CheckRow {
            name: name.into(),
            observed,
            tolerance,
            pass,
        }
    }
}

fn rel_err(an: f64, fd: f64) -> f64 {
    (an - fd).abs() / an.abs().max(fd.abs()).max(1.0)
}

fn random_grid(rng: &mut CounterRng, h: usize, w: usize, c: usize) -> Grid<f64> {
    Grid::from_fn(h, w, c, |_, _, _| rng.normal())
}

fn randomize(store: &mut ParamStore<f64>, rng: &mut CounterRng, scale: f64) {
    for t in store.values_mut() {
        for v in t.data_mut() {
            *v += rng.normal() * scale;
        }
    }
}

/// Generic parameter finite-difference check: maximum relative error of
/// the analytic gradient over `n_probes` random parameter coordinates
/// against central differences of loss(store) = <forward, cotangent>.
fn fd_probe_params(
    store: &mut ParamStore<f64>,
    grads: &GradStore<f64>,
    rng: &mut CounterRng,
    n_probes: usize,
    mut forward_dot: impl FnMut(&ParamStore<f64>) -> f64,
) -> f64 {
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..n_probes {
        let pid = store.id_at(rng.below(store.len() as u64) as usize);
        let idx = rng.below(store.value(pid).numel() as u64) as usize;
        let an = grads.grad(pid).data()[idx];
        let orig = store.value(pid).data()[idx];
        store.value_mut(pid).data_mut()[idx] = orig + h;
        let fp = forward_dot(store);
        store.value_mut(pid).data_mut()[idx] = orig - h;
        let fm = forward_dot(store);
        store.value_mut(pid).data_mut()[idx] = orig;
        worst = worst.max(rel_err(an, (fp - fm) / (2.0 * h)));
    }
    worst
}

fn fd_probe_input(
    x: &Grid<f64>,
    gx: &Grid<f64>,
    rng: &mut CounterRng,
    n_probes: usize,
    mut forward_dot: impl FnMut(&Grid<f64>) -> f64,
) -> f64 {
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..n_probes {
        let idx = rng.below(x.len() as u64) as usize;
        let mut xp = x.clone();
        xp.data_mut()[idx] += h;
        let mut xm = x.clone();
        xm.data_mut()[idx] -= h;
        let fd = (forward_dot(&xp) - forward_dot(&xm)) / (2.0 * h);
        worst = worst.max(rel_err(gx.data()[idx], fd));
    }
    worst
}

fn priors_for(rng: &mut CounterRng, h: usize, w: usize) -> PriorMaps<f64> {
    PriorMaps::new(
        random_grid(rng, h, w, 1),
        Grid::from_fn(h, w, 2, |_, _, _| rng.uniform()),
    )
}

/// Finite-difference checks for every differentiable block. `cases`
/// controls how many randomized instances run per block variety.
pub fn run_gradient_checks(cases: usize) -> Result<Vec<CheckRow>> {
    let tol = 1e-6;
    let mut rows = Vec::new();
    let mut rng = CounterRng::new(0xC0FFEE);

    // Residual blocks.
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let mut store = ParamStore::<f64>::new();
        let block = ResidualBlock::init(&mut store, &mut rng, "res", 4)?;
        randomize(&mut store, &mut rng, 0.2);
        let x = random_grid(&mut rng, 5, 4, 4);
        let ybar = random_grid(&mut rng, 5, 4, 4);
        let t_emb: Vec<f64> = (0..TIME_DIM).map(|_| rng.normal()).collect();
        let (_, tape) = block.forward_tape(&store, &x, &t_emb)?;
        let mut grads = GradStore::zeros_like(&store);
        let mut g_temb = vec![0.0; TIME_DIM];
        let gx = block.backward(&store, &mut grads, &tape, &ybar, &t_emb, &mut g_temb)?;
        worst = worst.max(fd_probe_input(&x, &gx, &mut rng, 4, |xv| {
            block.forward(&store, xv, &t_emb).unwrap().dot_f64(&ybar).unwrap()
        }));
        let xc = x.clone();
        let tc = t_emb.clone();
        worst = worst.max(fd_probe_params(&mut store, &grads, &mut rng, 6, |s| {
            block.forward(s, &xc, &tc).unwrap().dot_f64(&ybar).unwrap()
        }));
    }
    rows.push(CheckRow::new("residual block backward vs fd", worst, tol));

    // Attention blocks.
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let mut store = ParamStore::<f64>::new();
        let block = AttentionBlock::init(&mut store, &mut rng, "attn", 8, 16)?;
        randomize(&mut store, &mut rng, 0.2);
        let x = random_grid(&mut rng, 4, 4, 8);
        let ybar = random_grid(&mut rng, 4, 4, 8);
        let (_, tape) = block.forward_tape(&store, &x)?;
        let mut grads = GradStore::zeros_like(&store);
        let gx = block.backward(&store, &mut grads, &tape, &ybar)?;
        worst = worst.max(fd_probe_input(&x, &gx, &mut rng, 4, |xv| {
            block.forward(&store, xv).unwrap().dot_f64(&ybar).unwrap()
        }));
        let xc = x.clone();
        worst = worst.max(fd_probe_params(&mut store, &grads, &mut rng, 6, |s| {
            block.forward(s, &xc).unwrap().dot_f64(&ybar).unwrap()
        }));
    }
    rows.push(CheckRow::new("attention block backward vs fd", worst, tol));

    // Injector blocks at r = 2 on an 8x8 context.
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let mut store = ParamStore::<f64>::new();
        let block = InjectorBlock::init(&mut store, &mut rng, "inj", 8, 2)?;
        randomize(&mut store, &mut rng, 0.2);
        let priors = priors_for(&mut rng, 8, 8);
        let x = random_grid(&mut rng, 4, 4, 8);
        let ybar = random_grid(&mut rng, 4, 4, 8);
        let (_, tape) = block.forward_tape(&store, &x, &priors)?;
        let mut grads = GradStore::zeros_like(&store);
        let gx = block.backward(&store, &mut grads, &tape, &ybar, &priors)?;
        worst = worst.max(fd_probe_input(&x, &gx, &mut rng, 4, |xv| {
            block.forward(&store, xv, &priors).unwrap().dot_f64(&ybar).unwrap()
        }));
        let xc = x.clone();
        worst = worst.max(fd_probe_params(&mut store, &grads, &mut rng, 6, |s| {
            block.forward(s, &xc, &priors).unwrap().dot_f64(&ybar).unwrap()
        }));
    }
    rows.push(CheckRow::new("injector block backward vs fd", worst, tol));

    // Time embedding.
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let mut store = ParamStore::<f64>::new();
        let emb = TimeEmbedding::init(&mut store, &mut rng, "temb")?;
        let gout: Vec<f64> = (0..TIME_DIM).map(|_| rng.normal()).collect();
        let mut grads = GradStore::zeros_like(&store);
        emb.backward(&store, &mut grads, 2, &gout)?;
        let gc = gout.clone();
        worst = worst.max(fd_probe_params(&mut store, &grads, &mut rng, 6, |s| {
            emb.forward(s, 2)
                .unwrap()
                .iter()
                .zip(&gc)
                .map(|(a, b)| a * b)
                .sum()
        }));
    }
    rows.push(CheckRow::new("time embedding backward vs fd", worst, tol));

    // Coupling module composite.
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let mut store = ParamStore::<f64>::new();
        let g1 = ResidualBlock::init(&mut store, &mut rng, "c.g1", 4)?;
        let g2 = ResidualBlock::init(&mut store, &mut rng, "c.g2", 4)?;
        let m = CouplingModule::new(Body::Residual(g1), Body::Residual(g2), 8)?;
        randomize(&mut store, &mut rng, 0.2);
        let priors = priors_for(&mut rng, 4, 4);
        let t_emb: Vec<f64> = (0..TIME_DIM).map(|_| rng.normal()).collect();
        let aux = Aux {
            t_emb: &t_emb,
            priors: &priors,
        };
        let x = random_grid(&mut rng, 4, 4, 8);
        let ybar = random_grid(&mut rng, 4, 4, 8);
        let ledger = Ledger::new();
        let (_, tape) = m.forward_tape(&store, &x, &aux, &ledger)?;
        let mut grads = GradStore::zeros_like(&store);
        let mut g_temb = vec![0.0; TIME_DIM];
        let gx = m.backward_cached(&store, &mut grads, &tape, &ybar, &aux, &mut g_temb)?;
        worst = worst.max(fd_probe_input(&x, &gx, &mut rng, 4, |xv| {
            m.forward(&store, xv, &aux).unwrap().dot_f64(&ybar).unwrap()
        }));
        let xc = x.clone();
        worst = worst.max(fd_probe_params(&mut store, &grads, &mut rng, 6, |s| {
            m.forward(s, &xc, &aux).unwrap().dot_f64(&ybar).unwrap()
        }));
    }
    rows.push(CheckRow::new("coupling module backward vs fd", worst, tol));

    Ok(rows)
}

fn tiny_solver_f64(
    h: usize,
    steps: usize,
    seed: u64,
) -> Result<(ParamStore<f64>, UnrolledSolver, SolverInputs<f64>, Grid<f64>)> {
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
        Schedule::default_for(steps)?,
        h,
        h,
        seed,
    )?;
    let mut rng = CounterRng::new(seed ^ 0xABCD);
    randomize(&mut store, &mut rng, 0.05);
    let truth = Grid::from_fn(h, h, 1, |_, _, _| rng.uniform());
    let env = Grid::from_fn(h, h, 2, |_, _, _| rng.uniform());
    let op = make_mask(&mut rng, h, h, 0.15)?;
    let y = apply_a(&op, &truth)?;
    Ok((store, solver, SolverInputs::new(op, y, env)?, truth))
}

/// Cached vs invertible gradient agreement on a small solver, reported
/// as the worst per-tensor relative difference.
pub fn run_mode_equivalence_check() -> Result<CheckRow> {
    let (store, solver, inputs, truth) = tiny_solver_f64(16, 3, 0xE0)?;
    let ledger = Ledger::new();
    let (pred, tape) = forward_cached(&solver, &store, &inputs, &ledger)?;
    let gpred = pred.zip_map(&truth, |p, t| (p - t).signum())?;
    let mut ga = GradStore::zeros_like(&store);
    backward_cached(&solver, &store, &mut ga, tape, &gpred, &inputs, &ledger)?;
    let (_, term) = forward_terminal(&solver, &store, &inputs, &ledger, false)?;
    let mut gb = GradStore::zeros_like(&store);
    backward_invertible(&solver, &store, &mut gb, term, &gpred, &inputs, &ledger)?;
    let mut worst = 0.0f64;
    for (a, b) in ga.tensors().iter().zip(gb.tensors()) {
        let denom = a.max_abs().max(b.max_abs()).max(1e-30);
        worst = worst.max(a.linf_diff(b) / denom);
    }
    Ok(CheckRow::new(
        "invertible vs cached gradients (f64)",
        worst,
        1e-8,
    ))
}

/// Inversion round-trips: coupling modules in both dtypes and the
/// sampler step, reported as worst relative reconstruction error over
/// `cases` randomized instances each.
pub fn run_roundtrip_checks(cases: usize) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    let mut rng = CounterRng::new(0x5EED);

    // Coupling round-trip, f64.
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let mut store = ParamStore::<f64>::new();
        let g1 = ResidualBlock::init(&mut store, &mut rng, "c.g1", 4)?;
        let g2 = ResidualBlock::init(&mut store, &mut rng, "c.g2", 4)?;
        let m = CouplingModule::new(Body::Residual(g1), Body::Residual(g2), 8)?;
        randomize(&mut store, &mut rng, 0.2);
        let priors = priors_for(&mut rng, 8, 8);
        let t_emb: Vec<f64> = (0..TIME_DIM).map(|_| rng.normal()).collect();
        let aux = Aux {
            t_emb: &t_emb,
            priors: &priors,
        };
        let x = random_grid(&mut rng, 8, 8, 8);
        let y = m.forward(&store, &x, &aux)?;
        let back = m.inverse(&store, &y, &aux)?;
        worst = worst.max(back.linf_diff(&x)? / x.max_abs().max(1e-30));
    }
    rows.push(CheckRow::new("coupling round-trip rel err (f64)", worst, 1e-10));

    // Coupling round-trip, f32.
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let mut store = ParamStore::<f32>::new();
        let g1 = ResidualBlock::init(&mut store, &mut rng, "c.g1", 4)?;
        let g2 = ResidualBlock::init(&mut store, &mut rng, "c.g2", 4)?;
        let m = CouplingModule::new(Body::Residual(g1), Body::Residual(g2), 8)?;
        for t in store.values_mut() {
            for v in t.data_mut() {
                *v += (rng.normal() * 0.2) as f32;
            }
        }
        let priors = PriorMaps::new(
            Grid::from_fn(8, 8, 1, |_, _, _| rng.normal() as f32),
            Grid::from_fn(8, 8, 2, |_, _, _| rng.uniform() as f32),
        );
        let t_emb: Vec<f32> = (0..TIME_DIM).map(|_| rng.normal() as f32).collect();
        let aux = Aux {
            t_emb: &t_emb,
            priors: &priors,
        };
        let x = Grid::from_fn(8, 8, 8, |_, _, _| rng.normal() as f32);
        let y = m.forward(&store, &x, &aux)?;
        let back = m.inverse(&store, &y, &aux)?;
        worst = worst.max(back.linf_diff(&x)? / x.max_abs().max(1e-30));
    }
    rows.push(CheckRow::new("coupling round-trip rel err (f32)", worst, 1e-5));

    // Sampler step round-trip across t = 1..=3, f64. The main channel
    // must come back bit-exact; the tolerance covers the aux channel.
    let mut worst_aux = 0.0f64;
    let mut worst_main = 0.0f64;
    let runs = cases.div_ceil(3).max(1);
    for i in 0..runs {
        let (store, solver, inputs, _) = tiny_solver_f64(16, 3, 0x77 + i as u64)?;
        let ledger = Ledger::new();
        let mut state = solver.init_state(&store, &inputs);
        while state.t > 0 {
            let next = solver.step_forward(&store, &state, &inputs, &ledger)?;
            let back = solver.step_inverse(&store, &next, &inputs, &ledger)?;
            worst_main = worst_main.max(back.x_hat.linf_diff(&state.x_hat)?);
            worst_aux =
                worst_aux.max(back.h_aux.linf_diff(&state.h_aux)? / state.h_aux.max_abs().max(1e-30));
            state = next;
        }
    }
    rows.push(CheckRow::new(
        "sampler step main-channel round-trip (bit-exact)",
        worst_main,
        0.0,
    ));
    rows.push(CheckRow::new(
        "sampler step aux-channel round-trip rel err (f64)",
        worst_aux,
        1e-10,
    ));

    // Full-network forward agreement across cache modes (bitwise).
    let (store, solver, inputs, _) = tiny_solver_f64(16, 3, 0x99)?;
    let ledger = Ledger::new();
    let x = inputs.priors.backproj.clone();
    let (a, _) = solver
        .unet_for(1)
        .forward(&store, &x, &inputs.priors, 1, CacheMode::Infer, &ledger)?;
    let (b, tape) = solver.unet_for(1).forward(
        &store,
        &x,
        &inputs.priors,
        1,
        CacheMode::CacheBoundary,
        &ledger,
    )?;
    drop(tape);
    rows.push(CheckRow::new(
        "network forward mode-invariance (bitwise)",
        a.linf_diff(&b)?,
        0.0,
    ));

    Ok(rows)
}
