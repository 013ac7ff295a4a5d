use cgm_core::{CounterRng, Grid};

use crate::raycast::count_crossings;
use crate::scene::Scene;

const RX_HEIGHT_M: f64 = 1.5;

/// Ground-truth synthesis knobs. The defaults give log-distance path loss
/// with 15 dB per blocked crossing and spatially correlated 4 dB
/// shadowing.
#[derive(Debug, Clone, Copy)]
pub struct SynthParams {
    /// dB attenuation added per blocking building crossing.
    pub crossing_loss_db: f64,
    /// Standard deviation of the shadowing field in dB.
    pub shadow_sigma_db: f64,
    /// Gaussian correlation length of the shadowing field, in cells.
    pub shadow_filter_cells: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            crossing_loss_db: 15.0,
            shadow_sigma_db: 4.0,
            shadow_filter_cells: 4.0,
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut k = Vec::with_capacity(2 * radius + 1);
    for i in 0..=2 * radius {
        let d = i as f64 - radius as f64;
        k.push((-0.5 * (d / sigma) * (d / sigma)).exp());
    }
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Correlated shadowing: white noise filtered by a separable Gaussian and
/// rescaled so the interior standard deviation equals `sigma_db`.
fn shadow_field(rng: &mut CounterRng, h: usize, w: usize, sigma_db: f64, filter_cells: f64) -> Vec<f64> {
    if sigma_db == 0.0 {
        return vec![0.0; h * w];
    }
    let white: Vec<f64> = (0..h * w).map(|_| rng.normal()).collect();
    let k = gaussian_kernel(filter_cells);
    let radius = k.len() / 2;
    // Horizontal then vertical pass, zero extension at the edges.
    let mut tmp = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - radius as isize;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * white[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let yy = y as isize + i as isize - radius as isize;
                if yy >= 0 && (yy as usize) < h {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    // Filtering white noise scales its std by the L2 norm of the full
    // separable kernel, which is the squared 1-D norm.
    let l2: f64 = k.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = sigma_db / (l2 * l2);
    out.iter_mut().for_each(|v| *v *= scale);
    out
}

/// Synthesize the normalized ground-truth gain map for a scene:
/// loss_dB = 20 log10(max(d3d, 1 m)) + crossing_loss x crossings + shadow,
/// building interiors forced to the minimum gain, then min-max normalized
/// to [0, 1] and inverted so 1 is the strongest gain (attained at the BS
/// cell).
pub fn synthesize_cgm(scene: &Scene, rng: &mut CounterRng) -> Grid<f32> {
    synthesize_cgm_with(scene, rng, &SynthParams::default())
}

/// Raw dB loss per cell plus the building-interior flags (the BS cell is
/// never treated as interior, even on a rooftop site).
fn loss_field(scene: &Scene, rng: &mut CounterRng, params: &SynthParams) -> (Vec<f64>, Vec<bool>) {
    let (h, w) = (scene.h(), scene.w());
    let shadow = shadow_field(rng, h, w, params.shadow_sigma_db, params.shadow_filter_cells);
    let cell = scene.cell_size_m;
    let (by, bx, bz) = (scene.bs.y as f64, scene.bs.x as f64, scene.bs.height_m);

    let bs_cell = (scene.bs.y, scene.bs.x);
    let mut loss = vec![0.0f64; h * w];
    let mut is_interior = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if scene.is_building(y, x) && (y, x) != bs_cell {
                is_interior[i] = true;
                continue;
            }
            let dx = (x as f64 - bx) * cell;
            let dy = (y as f64 - by) * cell;
            let dz = bz - RX_HEIGHT_M;
            let d3d = (dx * dx + dy * dy + dz * dz).sqrt().max(1.0);
            loss[i] = 20.0 * d3d.log10()
                + params.crossing_loss_db * count_crossings(scene, y, x) as f64
                + shadow[i];
        }
    }
    (loss, is_interior)
}

pub fn synthesize_cgm_with(scene: &Scene, rng: &mut CounterRng, params: &SynthParams) -> Grid<f32> {
    let (h, w) = (scene.h(), scene.w());
    let (mut loss, is_interior) = loss_field(scene, rng, params);

    // The BS cell is the reference point and carries the grid maximum.
    let bs_idx = scene.bs.y * w + scene.bs.x;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..h * w {
        if is_interior[i] || i == bs_idx {
            continue;
        }
        lo = lo.min(loss[i]);
        hi = hi.max(loss[i]);
    }
    if !lo.is_finite() || !hi.is_finite() {
        // Degenerate single-cell coverage; emit a delta at the BS.
        let mut g = Grid::<f32>::zeros(h, w, 1);
        g.set(scene.bs.y, scene.bs.x, 0, 1.0);
        return g;
    }
    loss[bs_idx] = loss[bs_idx].min(lo);
    lo = lo.min(loss[bs_idx]);
    let span = (hi - lo).max(1e-12);

    Grid::from_fn(h, w, 1, |y, x, _| {
        let i = y * w + x;
        if is_interior[i] {
            0.0
        } else {
            (((hi - loss[i]) / span).clamp(0.0, 1.0)) as f32
        }
    })
}
