//! Checkpoint persistence: every parameter tensor plus the noise
//! schedule, written in the named-tensor container format and validated
//! shape-by-shape against the model on load.

use std::path::Path;

use cgm_core::{
    params::{read_named_tensors, write_named_tensors},
    Error, ParamStore, Result, Scalar, Tensor,
};

use crate::sampler::{Schedule, SolverConfig, UnrolledSolver};

const SCHEDULE_TENSOR: &str = "sampler.alpha_bar";

/// Write all solver parameters and the schedule.
pub fn save_solver<T: Scalar>(
    path: impl AsRef<Path>,
    solver: &UnrolledSolver,
    store: &ParamStore<T>,
) -> Result<()> {
    let mut tensors: Vec<(String, &Tensor<T>)> = store
        .iter()
        .map(|(name, t)| (name.to_string(), t))
        .collect();
    let sched: Vec<T> = solver
        .schedule
        .values()
        .iter()
        .map(|&v| T::from_f64(v))
        .collect();
    let sched_tensor = Tensor::from_vec(&[sched.len()], sched)?;
    tensors.push((SCHEDULE_TENSOR.to_string(), &sched_tensor));
    write_named_tensors(path, &tensors)
}

/// Rebuild a solver from a checkpoint: the architecture comes from the
/// config, every tensor shape is validated against it, and the schedule
/// stored in the file replaces the config default (and is re-validated,
/// rejecting non-monotone schedules at load time).
pub fn load_solver<T: Scalar>(
    path: impl AsRef<Path>,
    cfg: SolverConfig,
    h: usize,
    w: usize,
) -> Result<(UnrolledSolver, ParamStore<T>)> {
    let path = path.as_ref();
    let tensors = read_named_tensors::<T>(path)?;
    let sched = tensors
        .iter()
        .find(|(n, _)| n == SCHEDULE_TENSOR)
        .ok_or_else(|| Error::BadFile {
            path: path.display().to_string(),
            detail: format!("checkpoint is missing the {SCHEDULE_TENSOR} tensor"),
        })?;
    let schedule = Schedule::new(sched.1.data().iter().map(|v| v.as_f64()).collect())?;
    if schedule.steps() != cfg.steps {
        return Err(Error::InvalidArg(format!(
            "checkpoint schedule has {} steps but config wants {}",
            schedule.steps(),
            cfg.steps
        )));
    }

    let mut store = ParamStore::<T>::new();
    let solver = UnrolledSolver::build(&mut store, cfg, schedule, h, w, 0)?;
    let mut loaded = 0usize;
    for (name, tensor) in tensors {
        if name == SCHEDULE_TENSOR {
            continue;
        }
        store.load_value(&name, tensor)?;
        loaded += 1;
    }
    if loaded != store.len() {
        return Err(Error::BadFile {
            path: path.display().to_string(),
            detail: format!(
                "checkpoint holds {loaded} tensors but the model defines {}",
                store.len()
            ),
        });
    }
    Ok((solver, store))
}
