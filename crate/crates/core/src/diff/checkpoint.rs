//! Trained-model files.
//!
//! Layout (little endian): `FSNF`, u32 version, the occupancy network, a u8
//! flag followed by the skinning network when present, then a u64 byte count
//! and the skinning grid in its own binary format. A network is stored as
//! u32 layer count `L`, `L` u32 widths, f64 softplus sharpness, f64 input
//! shift and scale per input, u64 parameter count and the f64 parameters.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::mlp::Mlp;
use crate::shape::OccupancyMlp;
use crate::skinning::{SkinningMlp, SkinningVoxelGrid};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FSNF";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub occupancy: OccupancyMlp,
    /// Absent when the grid itself was optimized.
    pub skinning: Option<SkinningMlp>,
    pub grid: SkinningVoxelGrid,
}

fn write_mlp(w: &mut impl Write, mlp: &Mlp) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(mlp.sizes().len() as u32)?;
    for &s in mlp.sizes() {
        w.write_u32::<LittleEndian>(s as u32)?;
    }
    w.write_f64::<LittleEndian>(mlp.beta())?;
    for v in mlp.input_shift().iter().chain(mlp.input_scale()) {
        w.write_f64::<LittleEndian>(*v)?;
    }
    w.write_u64::<LittleEndian>(mlp.num_params() as u64)?;
    for v in mlp.params() {
        w.write_f64::<LittleEndian>(*v)?;
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read, n: usize) -> std::io::Result<Vec<f64>> {
    let mut out = vec![0.0; n];
    r.read_f64_into::<LittleEndian>(&mut out)?;
    Ok(out)
}

fn read_mlp(r: &mut impl Read) -> Result<Mlp> {
    let fmt = |e: std::io::Error| Error::Format(format!("checkpoint network: {e}"));
    let layers = r.read_u32::<LittleEndian>().map_err(fmt)? as usize;
    if !(2..=64).contains(&layers) {
        return Err(Error::Format(format!("checkpoint network: {layers} layer widths")));
    }
    let mut sizes = Vec::with_capacity(layers);
    for _ in 0..layers {
        sizes.push(r.read_u32::<LittleEndian>().map_err(fmt)? as usize);
    }
    if sizes.iter().any(|&s| s == 0 || s > 1 << 16) {
        return Err(Error::Format(format!("checkpoint network: widths {sizes:?}")));
    }
    let beta = r.read_f64::<LittleEndian>().map_err(fmt)?;
    let shift = read_f64s(r, sizes[0]).map_err(fmt)?;
    let scale = read_f64s(r, sizes[0]).map_err(fmt)?;
    let n = r.read_u64::<LittleEndian>().map_err(fmt)? as usize;
    let expected: usize = sizes.windows(2).map(|p| p[0] * p[1] + p[1]).sum();
    if n != expected {
        return Err(Error::dims("checkpoint network parameters", expected, n));
    }
    let params = read_f64s(r, n).map_err(fmt)?;
    Mlp::from_parts(sizes, beta, shift, scale, params)
}

impl Checkpoint {
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        write_mlp(&mut w, self.occupancy.mlp())?;
        match &self.skinning {
            Some(s) => {
                w.write_u8(1)?;
                write_mlp(&mut w, s.mlp())?;
            }
            None => w.write_u8(0)?,
        }
        let grid = self.grid.to_bytes();
        w.write_u64::<LittleEndian>(grid.len() as u64)?;
        w.write_all(&grid)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let fmt = |e: std::io::Error| Error::Format(format!("checkpoint: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("checkpoint: bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(fmt)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("checkpoint: unsupported version {version}")));
        }
        let occupancy = OccupancyMlp::from_mlp(read_mlp(&mut r)?)?;
        let skinning = match r.read_u8().map_err(fmt)? {
            0 => None,
            1 => Some(SkinningMlp::from_mlp(read_mlp(&mut r)?)?),
            f => return Err(Error::Format(format!("checkpoint: bad skinning flag {f}"))),
        };
        let len = r.read_u64::<LittleEndian>().map_err(fmt)?;
        let grid = SkinningVoxelGrid::read_from(r.take(len))?;
        if let Some(s) = &skinning {
            if s.mlp().output_dim() != grid.num_bones() {
                return Err(Error::dims("checkpoint grid bones", s.mlp().output_dim(), grid.num_bones()));
            }
        }
        Ok(Checkpoint {
            occupancy,
            skinning,
            grid,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(bytes.as_slice()).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            e => e,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{Aabb, Vec3};
    use crate::skinning::distill;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let bbox = Aabb::new(Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let occupancy = OccupancyMlp::new(&[8, 8], 10.0, 2, &bbox, &mut rng).unwrap();
        let skinning = SkinningMlp::with_hidden(&[8], 3, 1.0, &bbox, &mut rng).unwrap();
        let grid = distill(&skinning, [3, 4, 2], &bbox).unwrap();
        Checkpoint {
            occupancy,
            skinning: Some(skinning),
            grid,
        }
    }

    #[test]
    fn roundtrip_preserves_networks() {
        let ck = sample();
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"FSNF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back.occupancy, ck.occupancy);
        assert_eq!(back.skinning, ck.skinning);
        assert_eq!(back.grid.to_bytes(), ck.grid.to_bytes());

        let bare = Checkpoint { skinning: None, ..ck };
        assert_eq!(Checkpoint::read_from(bare.to_bytes().as_slice()).unwrap().skinning, None);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::read_from(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read_from(bad.as_slice()).is_err());
        let mut bad = bytes;
        bad[4] = 9;
        assert!(Checkpoint::read_from(bad.as_slice()).is_err());
    }
}
