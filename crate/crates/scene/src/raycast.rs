use crate::scene::Scene;

const RX_HEIGHT_M: f64 = 1.5;

/// Count the distinct building cells touched by the 2-D supercover line
/// from the base station cell center to the center of `(ty, tx)` whose
/// building height exceeds the line-of-sight ray height inside the cell.
/// The ray height interpolates linearly from the antenna height down to a
/// 1.5 m receiver; a cell blocks when its height exceeds the lowest ray
/// height over the segment portion inside it (a single point for
/// corner-touched cells).
///
/// Cell centers sit at half-integer coordinates, so the per-axis boundary
/// crossing parameters are ratios of half-integers to the integer span;
/// comparing them by cross-multiplication is exact in f64 and corner
/// crossings are detected reliably.
pub fn count_crossings(scene: &Scene, ty: usize, tx: usize) -> usize {
    assert!(ty < scene.h() && tx < scene.w(), "target outside grid");
    let (by, bx) = (scene.bs.y, scene.bs.x);
    if (by, bx) == (ty, tx) {
        return 0;
    }
    let z0 = scene.bs.height_m;
    let z1 = RX_HEIGHT_M;
    let z_at = |t: f64| z0 + (z1 - z0) * t;

    // Integer spans and step directions.
    let span_x = tx as isize - bx as isize;
    let span_y = ty as isize - by as isize;
    let sx: isize = span_x.signum();
    let sy: isize = span_y.signum();
    let nx = span_x.unsigned_abs() as f64;
    let ny = span_y.unsigned_abs() as f64;

    let (mut cx, mut cy) = (bx as isize, by as isize);
    let mut crossings = 0usize;
    let mut check = |x: isize, y: isize, z_min: f64| {
        let bh = scene.building_height(y as usize, x as usize);
        if bh > 0.0 && bh > z_min {
            crossings += 1;
        }
    };

    // Ordinal of the next boundary crossing per axis (1-based); the k-th
    // x boundary lies at parameter (k - 0.5) / nx.
    let mut kx = 1.0f64;
    let mut ky = 1.0f64;
    let mut t_prev = 0.0f64;
    loop {
        let have_x = kx <= nx;
        let have_y = ky <= ny;
        #[derive(PartialEq)]
        enum Step {
            X,
            Y,
            Corner,
            End,
        }
        let step = match (have_x, have_y) {
            (false, false) => Step::End,
            (true, false) => Step::X,
            (false, true) => Step::Y,
            (true, true) => {
                // (kx - 0.5) / nx vs (ky - 0.5) / ny, cross-multiplied.
                let a = (kx - 0.5) * ny;
                let b = (ky - 0.5) * nx;
                if a < b {
                    Step::X
                } else if b < a {
                    Step::Y
                } else {
                    Step::Corner
                }
            }
        };
        let t_next = match step {
            Step::End => 1.0,
            Step::X | Step::Corner => (kx - 0.5) / nx,
            Step::Y => (ky - 0.5) / ny,
        };
        check(cx, cy, z_at(t_prev).min(z_at(t_next)));
        match step {
            Step::End => break,
            Step::X => {
                cx += sx;
                kx += 1.0;
            }
            Step::Y => {
                cy += sy;
                ky += 1.0;
            }
            Step::Corner => {
                // The segment passes exactly through a lattice corner; the
                // two diagonal-adjacent cells are touched at that point.
                let zc = z_at(t_next);
                check(cx + sx, cy, zc);
                check(cx, cy + sy, zc);
                cx += sx;
                cy += sy;
                kx += 1.0;
                ky += 1.0;
            }
        }
        t_prev = t_next;
    }
    crossings
}
