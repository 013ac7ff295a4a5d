use cgm_core::Grid;

use crate::scene::{Scene, MAX_BUILDING_M};

/// Two-channel conditioning raster: channel 0 is the building height
/// normalized by the tallest allowed building, channel 1 the Euclidean
/// distance to the base station cell normalized by the grid diagonal.
/// Both channels lie in [0, 1].
pub fn env_raster(scene: &Scene) -> Grid<f32> {
    let (h, w) = (scene.h(), scene.w());
    let diag = (((h - 1) * (h - 1) + (w - 1) * (w - 1)) as f64).sqrt().max(1.0);
    let (by, bx) = (scene.bs.y as f64, scene.bs.x as f64);
    Grid::from_fn(h, w, 2, |y, x, ch| {
        if ch == 0 {
            (scene.building_height(y, x) / MAX_BUILDING_M).min(1.0) as f32
        } else {
            let dy = y as f64 - by;
            let dx = x as f64 - bx;
            ((dy * dy + dx * dx).sqrt() / diag) as f32
        }
    })
}
