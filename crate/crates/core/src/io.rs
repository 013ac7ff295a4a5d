use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scalar::{Dtype, Scalar};

/// Grid file layout, all integers little-endian:
/// magic "CGMG", version u16 = 1, dtype u8 (0 = f32, 1 = f64),
/// h u32, w u32, c u32, then h*w*c little-endian reals row-major
/// channel-minor. write o read is the identity on Grid, bit-exact.
pub const GRID_MAGIC: &[u8; 4] = b"CGMG";
pub const GRID_VERSION: u16 = 1;

/// A grid of either stored dtype, as read from disk.
#[derive(Debug, Clone)]
pub enum DynGrid {
    F32(Grid<f32>),
    F64(Grid<f64>),
}

impl DynGrid {
    pub fn dtype(&self) -> Dtype {
        match self {
            DynGrid::F32(_) => Dtype::F32,
            DynGrid::F64(_) => Dtype::F64,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        match self {
            DynGrid::F32(g) => g.shape(),
            DynGrid::F64(g) => g.shape(),
        }
    }

    /// Convert (casting if needed) into the requested element type.
    pub fn into_grid<T: Scalar>(self) -> Grid<T> {
        match self {
            DynGrid::F32(g) => g.cast(),
            DynGrid::F64(g) => g.cast(),
        }
    }
}

pub fn write_grid<T: Scalar>(path: impl AsRef<Path>, grid: &Grid<T>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(17 + grid.byte_size());
    buf.extend_from_slice(GRID_MAGIC);
    buf.extend_from_slice(&GRID_VERSION.to_le_bytes());
    buf.push(T::DTYPE.code());
    buf.extend_from_slice(&(grid.h() as u32).to_le_bytes());
    buf.extend_from_slice(&(grid.w() as u32).to_le_bytes());
    buf.extend_from_slice(&(grid.c() as u32).to_le_bytes());
    for v in grid.data() {
        v.write_le(&mut buf);
    }
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&buf)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<DynGrid> {
    let path = path.as_ref();
    let pstr = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(pstr.clone(), e))?;
    let mut r = BufReader::new(file);
    let mut header = [0u8; 19];
    r.read_exact(&mut header)
        .map_err(|e| Error::io(pstr.clone(), e))?;
    if &header[0..4] != GRID_MAGIC {
        return Err(Error::BadFile {
            path: pstr,
            detail: format!(
                "bad magic {:?}, expected \"CGMG\" (header: {:02x?})",
                String::from_utf8_lossy(&header[0..4]),
                &header
            ),
        });
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != GRID_VERSION {
        return Err(Error::BadFile {
            path: pstr,
            detail: format!("unsupported version {} (expected {})", version, GRID_VERSION),
        });
    }
    let dtype = Dtype::from_code(header[6]).ok_or_else(|| Error::BadFile {
        path: pstr.clone(),
        detail: format!("unknown dtype code {} (header: {:02x?})", header[6], &header),
    })?;
    let h = u32::from_le_bytes(header[7..11].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(header[11..15].try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(header[15..19].try_into().unwrap()) as usize;
    let n = h * w * c;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)
        .map_err(|e| Error::io(pstr.clone(), e))?;
    let want = n * dtype.size();
    if payload.len() != want {
        return Err(Error::BadFile {
            path: pstr,
            detail: format!(
                "truncated payload: expected {} bytes for {}x{}x{} {}, got {}",
                want,
                h,
                w,
                c,
                dtype.name(),
                payload.len()
            ),
        });
    }
    match dtype {
        Dtype::F32 => {
            let data: Vec<f32> = payload.chunks_exact(4).map(f32::read_le).collect();
            Ok(DynGrid::F32(Grid::from_vec(h, w, c, data)?))
        }
        Dtype::F64 => {
            let data: Vec<f64> = payload.chunks_exact(8).map(f64::read_le).collect();
            Ok(DynGrid::F64(Grid::from_vec(h, w, c, data)?))
        }
    }
}

/// Read a grid, converting to `T` if the stored dtype differs.
pub fn read_grid_as<T: Scalar>(path: impl AsRef<Path>) -> Result<Grid<T>> {
    Ok(read_grid(path)?.into_grid())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    #[test]
    fn f32_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.cgmg");
        let mut rng = CounterRng::new(12);
        let g = Grid::<f32>::from_fn(33, 17, 3, |_, _, _| rng.normal() as f32);
        write_grid(&path, &g).unwrap();
        match read_grid(&path).unwrap() {
            DynGrid::F32(r) => assert_eq!(r, g),
            _ => panic!("wrong dtype"),
        }
    }

    #[test]
    fn f64_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g64.cgmg");
        let mut rng = CounterRng::new(13);
        let g = Grid::<f64>::from_fn(5, 7, 2, |_, _, _| rng.normal());
        write_grid(&path, &g).unwrap();
        match read_grid(&path).unwrap() {
            DynGrid::F64(r) => assert_eq!(r, g),
            _ => panic!("wrong dtype"),
        }
    }

    #[test]
    fn wrong_magic_names_expected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cgmg");
        std::fs::write(&path, b"XXXX\x01\x00\x00\x01\x00\x00\x00\x01\x00\x00\x00\x01\x00\x00\x00").unwrap();
        let err = read_grid(&path).unwrap_err().to_string();
        assert!(err.contains("CGMG"), "error should name expected magic: {err}");
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.cgmg");
        let g = Grid::<f32>::filled(4, 4, 1, 1.0);
        write_grid(&path, &g).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = read_grid(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn bad_dtype_code_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dt.cgmg");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"CGMG");
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.push(9);
        for _ in 0..3 {
            bytes.extend_from_slice(&1u32.to_le_bytes());
        }
        bytes.extend_from_slice(&[0; 4]);
        std::fs::write(&path, &bytes).unwrap();
        let err = read_grid(&path).unwrap_err().to_string();
        assert!(err.contains("dtype"), "{err}");
    }
}
