use cgm_core::{CounterRng, Error, Grid, Result};

/// Building heights span this range (meters); 0 means free space.
pub const MIN_BUILDING_M: f64 = 6.6;
pub const MAX_BUILDING_M: f64 = 19.8;

/// Rooftops above this height can host the base station.
const ROOFTOP_BS_THRESHOLD_M: f64 = 16.5;
const BS_ABOVE_ROOFTOP_M: f64 = 3.0;
const FREE_SPACE_BS_HEIGHT_M: f64 = 19.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseStation {
    pub height_m: f64,
    pub x: usize,
    pub y: usize,
}

/// A synthetic urban scene: per-cell building heights plus the base
/// station site.
#[derive(Debug, Clone)]
pub struct Scene {
    /// h x w x 1 grid of building heights in meters (0 = free space).
    pub buildings: Grid<f32>,
    pub bs: BaseStation,
    pub cell_size_m: f64,
    /// Set when fewer than the requested number of buildings could be
    /// placed within the retry budget.
    pub truncated: bool,
}

impl Scene {
    pub fn h(&self) -> usize {
        self.buildings.h()
    }

    pub fn w(&self) -> usize {
        self.buildings.w()
    }

    pub fn building_height(&self, y: usize, x: usize) -> f64 {
        self.buildings.at(y, x, 0) as f64
    }

    pub fn is_building(&self, y: usize, x: usize) -> bool {
        self.buildings.at(y, x, 0) > 0.0
    }
}

struct Rect {
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
    height_m: f64,
}

impl Rect {
    fn overlaps(&self, other: &Rect) -> bool {
        self.x0 < other.x0 + other.w
            && other.x0 < self.x0 + self.w
            && self.y0 < other.y0 + other.h
            && other.y0 < self.y0 + self.h
    }

    fn center(&self) -> (usize, usize) {
        (self.y0 + self.h / 2, self.x0 + self.w / 2)
    }
}

/// Generate a scene with up to `n_buildings` non-overlapping axis-aligned
/// rectangular buildings. If placement fails after a bounded number of
/// retries the scene is returned with fewer buildings and `truncated`
/// set. The base station goes 3 m above the tallest rooftop when that
/// rooftop exceeds 16.5 m, otherwise onto a free-space cell at 19.5 m.
pub fn generate_scene(rng: &mut CounterRng, h: usize, w: usize, n_buildings: usize) -> Result<Scene> {
    if h < 16 || w < 16 {
        return Err(Error::InvalidArg(format!(
            "scene must be at least 16x16 cells, got {h}x{w}"
        )));
    }
    let mut rects: Vec<Rect> = Vec::with_capacity(n_buildings);
    let max_side = (h.min(w) / 4).clamp(3, 14);
    let mut attempts = 0usize;
    let budget = 50 * n_buildings.max(1);
    while rects.len() < n_buildings && attempts < budget {
        attempts += 1;
        let bh = 3 + rng.below((max_side - 2) as u64) as usize;
        let bw = 3 + rng.below((max_side - 2) as u64) as usize;
        if bh + 2 >= h || bw + 2 >= w {
            continue;
        }
        let y0 = 1 + rng.below((h - bh - 1) as u64) as usize;
        let x0 = 1 + rng.below((w - bw - 1) as u64) as usize;
        let height_m = rng.uniform_in(MIN_BUILDING_M, MAX_BUILDING_M);
        let cand = Rect {
            y0,
            x0,
            h: bh,
            w: bw,
            height_m,
        };
        if rects.iter().any(|r| r.overlaps(&cand)) {
            continue;
        }
        rects.push(cand);
    }
    let truncated = rects.len() < n_buildings;

    let mut buildings = Grid::<f32>::zeros(h, w, 1);
    for r in &rects {
        for y in r.y0..r.y0 + r.h {
            for x in r.x0..r.x0 + r.w {
                buildings.set(y, x, 0, r.height_m as f32);
            }
        }
    }

    let tallest = rects
        .iter()
        .max_by(|a, b| a.height_m.partial_cmp(&b.height_m).unwrap());
    let bs = match tallest {
        Some(top) if top.height_m > ROOFTOP_BS_THRESHOLD_M => {
            let (y, x) = top.center();
            BaseStation {
                height_m: top.height_m + BS_ABOVE_ROOFTOP_M,
                x,
                y,
            }
        }
        _ => {
            // Free-space cell at a fixed mast height.
            let (y, x) = loop {
                let y = rng.below(h as u64) as usize;
                let x = rng.below(w as u64) as usize;
                if buildings.at(y, x, 0) == 0.0 {
                    break (y, x);
                }
            };
            BaseStation {
                height_m: FREE_SPACE_BS_HEIGHT_M,
                x,
                y,
            }
        }
    };

    Ok(Scene {
        buildings,
        bs,
        cell_size_m: 1.0,
        truncated,
    })
}
