//! The sampling operator A, its adjoint A^T, and the data-consistency
//! projection onto the affine set {X : A(X) = Y}.
//!
//! The mask is stored as an ordered list of distinct flattened cell
//! indices, which makes A A^T = I structural rather than numerical:
//! gathering after scattering always returns the original measurement
//! vector bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use cgm_core::{CounterRng, Error, Grid, Result, Scalar};

/// Mask file layout, little-endian: magic "CGMM", u32 h, u32 w, u32 m,
/// then m u32 cell indices (strictly increasing).
pub const MASK_MAGIC: &[u8; 4] = b"CGMM";

/// Index-set sampling operator on h x w single-channel grids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeasurementOp {
    h: usize,
    w: usize,
    indices: Vec<u32>,
}

/// Measurement values aligned with [`MeasurementOp::indices`].
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementVec<T> {
    values: Vec<T>,
}

impl<T: Scalar> MeasurementVec<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("MeasurementVec::new".into()));
        }
        Ok(MeasurementVec { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn linf_diff(&self, other: &MeasurementVec<T>) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn cast<U: Scalar>(&self) -> MeasurementVec<U> {
        MeasurementVec {
            values: self.values.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

impl MeasurementOp {
    /// Build from explicit indices; they must be strictly increasing and
    /// in range, which guarantees distinctness and therefore A A^T = I.
    pub fn new(h: usize, w: usize, indices: Vec<u32>) -> Result<Self> {
        let n = (h * w) as u32;
        if indices.is_empty() {
            return Err(Error::InvalidArg("measurement mask with zero samples".into()));
        }
        for win in indices.windows(2) {
            if win[0] >= win[1] {
                return Err(Error::InvalidArg(
                    "mask indices must be strictly increasing".into(),
                ));
            }
        }
        if *indices.last().unwrap() >= n {
            return Err(Error::InvalidArg(format!(
                "mask index {} out of range for {}x{}",
                indices.last().unwrap(),
                h,
                w
            )));
        }
        Ok(MeasurementOp { h, w, indices })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Sampling ratio m / (h*w).
    pub fn ratio(&self) -> f64 {
        self.indices.len() as f64 / (self.h * self.w) as f64
    }

    fn check_grid<T: Scalar>(&self, x: &Grid<T>, context: &str) -> Result<()> {
        if x.shape() != (self.h, self.w, 1) {
            return Err(Error::shape(
                context,
                format!("{}x{}x1", self.h, self.w),
                x.shape_str(),
            ));
        }
        Ok(())
    }
}

/// Sample m = max(1, round(rho * h * w)) distinct uniform cell indices.
pub fn make_mask(rng: &mut CounterRng, h: usize, w: usize, rho: f64) -> Result<MeasurementOp> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidArg(format!(
            "sampling ratio must be in (0, 1], got {rho}"
        )));
    }
    let n = h * w;
    let m = ((rho * n as f64).round() as usize).clamp(1, n);
    let indices = rng.distinct_sorted(n, m);
    MeasurementOp::new(h, w, indices)
}

/// Y = A(X): gather the masked cells.
pub fn apply_a<T: Scalar>(op: &MeasurementOp, x: &Grid<T>) -> Result<MeasurementVec<T>> {
    op.check_grid(x, "apply_a")?;
    let d = x.data();
    Ok(MeasurementVec {
        values: op.indices.iter().map(|&i| d[i as usize]).collect(),
    })
}

/// A^T(y): scatter the measurements into an otherwise-zero grid
/// (the back-projection).
pub fn apply_at<T: Scalar>(op: &MeasurementOp, y: &MeasurementVec<T>) -> Result<Grid<T>> {
    if y.len() != op.len() {
        return Err(Error::shape("apply_at", op.len(), y.len()));
    }
    let mut out = Grid::zeros(op.h, op.w, 1);
    let d = out.data_mut();
    for (&i, &v) in op.indices.iter().zip(&y.values) {
        d[i as usize] = v;
    }
    Ok(out)
}

/// Data-consistency correction: X0 - eta * A^T(A(X0) - Y). With eta = 1
/// this is the orthogonal projection onto {X : A(X) = Y}, i.e. sampled
/// cells are replaced by Y and the rest pass through.
pub fn dc_project<T: Scalar>(
    op: &MeasurementOp,
    x0: &Grid<T>,
    y: &MeasurementVec<T>,
    eta: T,
) -> Result<Grid<T>> {
    op.check_grid(x0, "dc_project")?;
    if y.len() != op.len() {
        return Err(Error::shape("dc_project measurements", op.len(), y.len()));
    }
    let mut out = x0.clone();
    let d = out.data_mut();
    for (&i, &yv) in op.indices.iter().zip(&y.values) {
        let i = i as usize;
        let residual = d[i] - yv;
        d[i] = d[i] - eta * residual;
    }
    Ok(out)
}

/// Backward of [`dc_project`] w.r.t. X0: maps the output cotangent g to
/// (I - eta * A^T A) g. The measurements are constants.
pub fn dc_project_backward<T: Scalar>(
    op: &MeasurementOp,
    gout: &Grid<T>,
    eta: T,
) -> Result<Grid<T>> {
    op.check_grid(gout, "dc_project_backward")?;
    let mut gx = gout.clone();
    let d = gx.data_mut();
    for &i in &op.indices {
        let i = i as usize;
        d[i] = d[i] - eta * d[i];
    }
    Ok(gx)
}

pub fn write_mask(path: impl AsRef<Path>, op: &MeasurementOp) -> Result<()> {
    let path = path.as_ref();
    let pstr = path.display().to_string();
    let mut buf = Vec::with_capacity(16 + op.indices.len() * 4);
    buf.extend_from_slice(MASK_MAGIC);
    buf.extend_from_slice(&(op.h as u32).to_le_bytes());
    buf.extend_from_slice(&(op.w as u32).to_le_bytes());
    buf.extend_from_slice(&(op.indices.len() as u32).to_le_bytes());
    for &i in &op.indices {
        buf.extend_from_slice(&i.to_le_bytes());
    }
    let file = File::create(path).map_err(|e| Error::io(pstr.clone(), e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&buf)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(pstr, e))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<MeasurementOp> {
    let path = path.as_ref();
    let pstr = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(pstr.clone(), e))?;
    let mut r = BufReader::new(file);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::io(pstr.clone(), e))?;
    if bytes.len() < 16 || &bytes[0..4] != MASK_MAGIC {
        return Err(Error::BadFile {
            path: pstr,
            detail: "bad magic, expected \"CGMM\"".into(),
        });
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let m = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + 4 * m {
        return Err(Error::BadFile {
            path: pstr,
            detail: format!("truncated mask: expected {} index bytes", 4 * m),
        });
    }
    let indices: Vec<u32> = bytes[16..]
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    MeasurementOp::new(h, w, indices)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_mask(h: usize, w: usize) -> MeasurementOp {
        MeasurementOp::new(h, w, (0..(h * w) as u32).collect()).unwrap()
    }

    #[test]
    fn mask_count_follows_rounding() {
        let mut rng = CounterRng::new(7);
        let op = make_mask(&mut rng, 64, 64, 0.01).unwrap();
        assert_eq!(op.len(), 41); // round(0.01 * 4096)
    }

    #[test]
    fn full_ratio_covers_all_cells() {
        let mut rng = CounterRng::new(7);
        let op = make_mask(&mut rng, 4, 4, 1.0).unwrap();
        assert_eq!(op.indices(), (0..16).collect::<Vec<u32>>().as_slice());
    }

    #[test]
    fn fixed_seed_reproduces_mask() {
        let a = make_mask(&mut CounterRng::new(9), 32, 32, 0.1).unwrap();
        let b = make_mask(&mut CounterRng::new(9), 32, 32, 0.1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_ratio_rejected() {
        let mut rng = CounterRng::new(1);
        assert!(make_mask(&mut rng, 4, 4, 0.0).is_err());
        assert!(make_mask(&mut rng, 4, 4, 1.5).is_err());
    }

    #[test]
    fn gather_examples() {
        let x = Grid::from_vec(2, 2, 1, vec![3.0f64, 1.0, 2.0, 5.0]).unwrap();
        let op = MeasurementOp::new(2, 2, vec![0]).unwrap();
        assert_eq!(apply_a(&op, &x).unwrap().values(), &[3.0]);
        let full = full_mask(2, 2);
        assert_eq!(apply_a(&full, &x).unwrap().values(), x.data());
    }

    #[test]
    fn scatter_example() {
        let op = MeasurementOp::new(2, 2, vec![0]).unwrap();
        let y = MeasurementVec::new(vec![9.0f64]).unwrap();
        let g = apply_at(&op, &y).unwrap();
        assert_eq!(g.data(), &[9.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gather_after_scatter_is_identity_exactly() {
        let mut rng = CounterRng::new(21);
        let op = make_mask(&mut rng, 8, 8, 0.3).unwrap();
        let y = MeasurementVec::new((0..op.len()).map(|_| rng.normal()).collect()).unwrap();
        let round = apply_a(&op, &apply_at(&op, &y).unwrap()).unwrap();
        assert_eq!(round.values(), y.values());
    }

    #[test]
    fn adjoint_identity_exact() {
        let mut rng = CounterRng::new(22);
        let op = make_mask(&mut rng, 6, 6, 0.4).unwrap();
        let x = Grid::from_fn(6, 6, 1, |_, _, _| rng.normal());
        let y = MeasurementVec::new((0..op.len()).map(|_| rng.normal()).collect()).unwrap();
        let ax = apply_a(&op, &x).unwrap();
        let aty = apply_at(&op, &y).unwrap();
        let lhs: f64 = ax.values().iter().zip(y.values()).map(|(a, b)| a * b).sum();
        let rhs = x.dot_f64(&aty).unwrap();
        // Gather/scatter share the index order, so sums match term by term.
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn dc_replaces_sampled_cells_and_keeps_rest() {
        let mut rng = CounterRng::new(23);
        let op = make_mask(&mut rng, 5, 5, 0.3).unwrap();
        let x0 = Grid::from_fn(5, 5, 1, |_, _, _| rng.normal());
        let y = MeasurementVec::new((0..op.len()).map(|_| rng.normal()).collect()).unwrap();
        let proj = dc_project(&op, &x0, &y, 1.0).unwrap();
        let sampled = apply_a(&op, &proj).unwrap();
        assert!(sampled.linf_diff(&y) <= 1e-12);
        let mut on_mask = vec![false; 25];
        for &i in op.indices() {
            on_mask[i as usize] = true;
        }
        for i in 0..25 {
            if !on_mask[i] {
                assert_eq!(proj.data()[i], x0.data()[i]);
            }
        }
    }

    #[test]
    fn dc_idempotent_and_matches_closed_form() {
        let mut rng = CounterRng::new(24);
        for _ in 0..10 {
            let op = make_mask(&mut rng, 7, 6, 0.25).unwrap();
            let x0 = Grid::from_fn(7, 6, 1, |_, _, _| rng.normal());
            let y = MeasurementVec::new((0..op.len()).map(|_| rng.normal()).collect()).unwrap();
            let once = dc_project(&op, &x0, &y, 1.0).unwrap();
            let twice = dc_project(&op, &once, &y, 1.0).unwrap();
            assert!(once.linf_diff(&twice).unwrap() <= 1e-10);
            // Closed form: A^dag Y + (I - A^dag A) X0, i.e. literal replacement.
            let mut closed = x0.clone();
            for (&i, &v) in op.indices().iter().zip(y.values()) {
                closed.data_mut()[i as usize] = v;
            }
            assert!(once.linf_diff(&closed).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn dc_eta_zero_is_identity() {
        let mut rng = CounterRng::new(25);
        let op = make_mask(&mut rng, 4, 4, 0.5).unwrap();
        let x0 = Grid::from_fn(4, 4, 1, |_, _, _| rng.normal());
        let y = MeasurementVec::new(vec![0.0; op.len()]).unwrap();
        let out = dc_project(&op, &x0, &y, 0.0).unwrap();
        assert_eq!(out.data(), x0.data());
    }

    #[test]
    fn dc_backward_zeroes_sampled_cells_at_eta_one() {
        let mut rng = CounterRng::new(26);
        let op = make_mask(&mut rng, 4, 4, 0.5).unwrap();
        let g = Grid::from_fn(4, 4, 1, |_, _, _| rng.normal());
        let gx = dc_project_backward(&op, &g, 1.0).unwrap();
        for &i in op.indices() {
            assert_eq!(gx.data()[i as usize], 0.0);
        }
        let off: Vec<usize> = (0..16).filter(|i| !op.indices().contains(&(*i as u32))).collect();
        for i in off {
            assert_eq!(gx.data()[i], g.data()[i]);
        }
    }

    #[test]
    fn mask_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.cgmm");
        let mut rng = CounterRng::new(31);
        let op = make_mask(&mut rng, 16, 16, 0.2).unwrap();
        write_mask(&path, &op).unwrap();
        assert_eq!(read_mask(&path).unwrap(), op);
    }

    #[test]
    fn mask_file_bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cgmm");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x01\x00\x00\x00\x01\x00\x00\x00").unwrap();
        assert!(read_mask(&path).unwrap_err().to_string().contains("CGMM"));
    }

    #[test]
    fn non_increasing_indices_rejected() {
        assert!(MeasurementOp::new(2, 2, vec![1, 1]).is_err());
        assert!(MeasurementOp::new(2, 2, vec![2, 1]).is_err());
        assert!(MeasurementOp::new(2, 2, vec![4]).is_err());
    }
}
