//! Checkpoint files.
//!
//! Layout (integers little-endian): magic `MRCK`, version `u32 = 1`,
//! entry count `u32`, then per entry: name length `u16`, UTF-8 name,
//! rank `u8`, extents `u32 × rank`, payload `f64 × numel`.
//!
//! The training step and configuration fingerprint travel as two reserved
//! entries whose names start with `@`: `@step` (rank 0) and `@fingerprint`
//! (rank 1, four 16-bit limbs, most significant first).

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MRCK";
const VERSION: u32 = 1;
const STEP_KEY: &str = "@step";
const FINGERPRINT_KEY: &str = "@fingerprint";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub params: ParamSet,
    pub fingerprint: u64,
}

impl Checkpoint {
    pub fn file_name(step: u64) -> String {
        format!("step_{step:07}.mrck")
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.step >= 1 << 53 {
            return Err(Error::Invalid(format!(
                "step {} not representable",
                self.step
            )));
        }
        let limbs: Vec<f64> = (0..4)
            .rev()
            .map(|i| ((self.fingerprint >> (16 * i)) & 0xffff) as f64)
            .collect();
        let meta = [
            (STEP_KEY.to_string(), Tensor::scalar(self.step as f64)),
            (FINGERPRINT_KEY.to_string(), Tensor::vector(limbs)),
        ];
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&((self.params.len() + meta.len()) as u32).to_le_bytes());
        let entries = meta.iter().map(|(k, v)| (k, v)).chain(self.params.iter());
        for (name, t) in entries {
            if name.len() > u16::MAX as usize || t.rank() > u8::MAX as usize {
                return Err(Error::Invalid(format!("entry {name:?} cannot be encoded")));
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path,
        };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(
                path,
                format!("unsupported version {version}"),
            ));
        }
        let count = r.u32()?;
        let mut params = ParamSet::new();
        let mut step = None;
        let mut fingerprint = None;
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(path, "entry name is not UTF-8"))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let shape: Vec<usize> = (0..rank)
                .map(|_| r.u32().map(|e| e as usize))
                .collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let data: Vec<f64> = r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::format(path, e.to_string()))?;
            match name.as_str() {
                STEP_KEY => step = Some(t.item() as u64),
                FINGERPRINT_KEY => {
                    fingerprint = Some(t.data().iter().fold(0u64, |acc, &l| (acc << 16) | l as u64))
                }
                _ => {
                    if params.insert(name.clone(), t).is_some() {
                        return Err(Error::format(path, format!("duplicate entry {name:?}")));
                    }
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes"));
        }
        Ok(Checkpoint {
            step: step.ok_or_else(|| Error::format(path, "missing @step entry"))?,
            params,
            fingerprint: fingerprint
                .ok_or_else(|| Error::format(path, "missing @fingerprint entry"))?,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let out = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::format(self.path, "truncated"))?;
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn write_checkpoint(dir: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(Checkpoint::file_name(ckpt.step));
    fs::write(&path, ckpt.to_bytes()?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

/// Checkpoint files in `dir`, as `(step, path)` sorted by step.
pub fn list_checkpoints(dir: impl AsRef<Path>) -> Result<Vec<(u64, PathBuf)>> {
    let dir = dir.as_ref();
    let mut out: Vec<(u64, PathBuf)> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| {
            let name = p.file_name()?.to_str()?;
            let step = name
                .strip_prefix("step_")?
                .strip_suffix(".mrck")?
                .parse()
                .ok()?;
            Some((step, p))
        })
        .collect();
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_checkpoint() -> impl Strategy<Value = Checkpoint> {
        let entry = (
            "[a-z]{1,6}(\\.[a-z0-9]{1,5})?",
            prop::collection::vec(1usize..4, 0..4),
            any::<u64>(),
        );
        (
            0u64..(1 << 53),
            any::<u64>(),
            prop::collection::vec(entry, 0..5),
        )
            .prop_map(|(step, fingerprint, entries)| {
                let params = entries
                    .into_iter()
                    .map(|(name, shape, seed)| {
                        let n: usize = shape.iter().product();
                        let data = (0..n)
                            .map(|i| f64::from_bits(seed.rotate_left(i as u32 * 7)) % 1e6)
                            .map(|v| if v.is_finite() { v } else { 0.5 })
                            .collect();
                        (name, Tensor::new(shape, data).unwrap())
                    })
                    .collect();
                Checkpoint {
                    step,
                    params,
                    fingerprint,
                }
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn write_read_write_is_byte_identical(ckpt in arb_checkpoint()) {
            let bytes = ckpt.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
            prop_assert_eq!(back.step, ckpt.step);
            prop_assert_eq!(back.fingerprint, ckpt.fingerprint);
            prop_assert_eq!(back.params.fingerprint(), ckpt.params.fingerprint());
        }
    }

    #[test]
    fn header_layout() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::new(vec![2], vec![1.5, -2.0]).unwrap());
        let bytes = Checkpoint {
            step: 3,
            params,
            fingerprint: 0x0102_0304_0506_0708,
        }
        .to_bytes()
        .unwrap();
        assert_eq!(&bytes[..4], b"MRCK");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        // last entry: "w", rank 1, extent 2, then two f64
        let tail = &bytes[bytes.len() - (2 + 1 + 1 + 4 + 16)..];
        assert_eq!(&tail[..2], &1u16.to_le_bytes());
        assert_eq!(tail[2], b'w');
        assert_eq!(tail[3], 1);
        assert_eq!(&tail[4..8], &2u32.to_le_bytes());
        assert_eq!(&tail[8..16], &1.5f64.to_le_bytes());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let p = Path::new("bad.mrck");
        assert!(Checkpoint::from_bytes(b"XXXX", p).is_err());
        let good = Checkpoint {
            step: 1,
            params: ParamSet::new(),
            fingerprint: 9,
        }
        .to_bytes()
        .unwrap();
        assert!(Checkpoint::from_bytes(&good[..good.len() - 1], p).is_err());
    }

    #[test]
    fn listing_sorts_by_step() {
        let dir = tempfile::tempdir().unwrap();
        for step in [20, 0, 100] {
            let c = Checkpoint {
                step,
                params: ParamSet::new(),
                fingerprint: 0,
            };
            write_checkpoint(dir.path(), &c).unwrap();
        }
        fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let steps: Vec<u64> = list_checkpoints(dir.path())
            .unwrap()
            .into_iter()
            .map(|c| c.0)
            .collect();
        assert_eq!(steps, vec![0, 20, 100]);
    }
}
