//! Checkpoint archive.
//!
//! ```text
//! magic            4 bytes  "VLEC"
//! format_version   u32 LE
//! manifest_len     u64 LE, then manifest_len bytes of UTF-8 TOML
//! tensor_count     u64 LE
//! per tensor:      name_len u32 LE, name bytes,
//!                  rank u32 LE, rank × u64 LE dims,
//!                  prod(dims) × f32 LE
//! ```
//!
//! The manifest holds the training config under `[config]` and the run
//! state (step counters, RNG position) under `[state]`. Tensor names are
//! `param/<name>`, `adam.m/<name>` and `adam.v/<name>`.

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::ConvCodec;
use crate::error::{Result, VleError};
use crate::tensor::Tensor;
use crate::training::config::TrainConfig;
use crate::training::optim::Adam;

pub const MAGIC: &[u8; 4] = b"VLEC";
pub const FORMAT_VERSION: u32 = 1;

/// Exact position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub codec: ConvCodec<f32>,
    pub optimizer: Adam<f32>,
    pub rng: RngState,
    pub global_step: u64,
}

#[derive(Serialize, Deserialize)]
struct State {
    format_version: u32,
    global_step: u64,
    optimizer_step: u64,
    rng_seed: String,
    rng_stream: u64,
    /// Decimal string: TOML integers stop at 64 bits.
    rng_word_pos: String,
    parameter_count: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: TrainConfig,
    state: State,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            config: self.config.clone(),
            state: State {
                format_version: FORMAT_VERSION,
                global_step: self.global_step,
                optimizer_step: self.optimizer.step,
                rng_seed: hex(&self.rng.seed),
                rng_stream: self.rng.stream,
                rng_word_pos: self.rng.word_pos.to_string(),
                parameter_count: self.codec.parameter_count() as u64,
            },
        };
        let text = toml::to_string(&manifest).expect("manifest serializes");

        let params = self.codec.params();
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(text.len() as u64).to_le_bytes());
        buf.extend_from_slice(text.as_bytes());
        buf.extend_from_slice(&(3 * params.names().len() as u64).to_le_bytes());
        for (name, t) in params.iter() {
            put_tensor(&mut buf, &format!("param/{name}"), t);
        }
        for (name, t) in params.names().iter().zip(&self.optimizer.first_moment) {
            put_tensor(&mut buf, &format!("adam.m/{name}"), t);
        }
        for (name, t) in params.names().iter().zip(&self.optimizer.second_moment) {
            put_tensor(&mut buf, &format!("adam.v/{name}"), t);
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(VleError::CorruptCheckpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(VleError::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let manifest_len = r.len_u64()?;
        let text = std::str::from_utf8(r.take(manifest_len)?)
            .map_err(|_| VleError::CorruptCheckpoint("manifest is not UTF-8".into()))?;
        let manifest: Manifest =
            toml::from_str(text).map_err(|e| VleError::CorruptCheckpoint(format!("manifest: {}", e.message())))?;
        manifest.config.validate()?;

        let count = r.len_u64()?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            tensors.push(r.tensor()?);
        }
        if r.pos != bytes.len() {
            return Err(VleError::CorruptCheckpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if count % 3 != 0 {
            return Err(VleError::CorruptCheckpoint(format!("unexpected tensor count {count}")));
        }
        let n = count / 3;
        let mut params = Vec::with_capacity(n);
        let mut first = Vec::with_capacity(n);
        let mut second = Vec::with_capacity(n);
        for (i, (name, t)) in tensors.into_iter().enumerate() {
            let (prefix, bucket) = match i / n {
                0 => ("param/", &mut params),
                1 => ("adam.m/", &mut first),
                _ => ("adam.v/", &mut second),
            };
            let stripped = name
                .strip_prefix(prefix)
                .ok_or_else(|| VleError::CorruptCheckpoint(format!("unexpected tensor {name}")))?;
            bucket.push((stripped.to_string(), t));
        }
        let codec = ConvCodec::from_params(manifest.config.codec_config(), params.clone())
            .map_err(|e| VleError::CorruptCheckpoint(format!("parameters: {e}")))?;
        for (moments, label) in [(&first, "adam.m"), (&second, "adam.v")] {
            for ((name, t), (pname, p)) in moments.iter().zip(&params) {
                if name != pname || t.shape() != p.shape() {
                    return Err(VleError::CorruptCheckpoint(format!("{label}/{name} does not match {pname}")));
                }
            }
        }
        let state = manifest.state;
        let seed = unhex(&state.rng_seed).ok_or_else(|| VleError::CorruptCheckpoint("rng seed".into()))?;
        let word_pos = state
            .rng_word_pos
            .parse()
            .map_err(|_| VleError::CorruptCheckpoint("rng word position".into()))?;
        let optimizer = Adam {
            config: manifest.config.adam_config(),
            step: state.optimizer_step,
            first_moment: first.into_iter().map(|(_, t)| t).collect(),
            second_moment: second.into_iter().map(|(_, t)| t).collect(),
        };
        Ok(Checkpoint {
            config: manifest.config,
            codec,
            optimizer,
            rng: RngState {
                seed,
                stream: state.rng_stream,
                word_pos,
            },
            global_step: state.global_step,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| VleError::CorruptCheckpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len_u64(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&v| v <= self.bytes.len())
            .ok_or_else(|| VleError::CorruptCheckpoint(format!("implausible length {v}")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let name_len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| VleError::CorruptCheckpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(VleError::CorruptCheckpoint(format!("tensor {name} has rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.len_u64()?);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&c| c.saturating_mul(4) <= self.bytes.len())
            .ok_or_else(|| VleError::CorruptCheckpoint(format!("tensor {name} is too large")))?;
        let raw = self.take(count * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok((name, Tensor::from_vec(&dims, data)?))
    }
}

/// Write atomically: temp file in the same directory, then rename.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&ckpt.to_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| VleError::Io(e.error))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::trainer::Trainer;

    fn sample() -> Checkpoint {
        let cfg = TrainConfig {
            base_channels: 4,
            residual_blocks_per_level: 1,
            levels: 2,
            image_size: 8,
            ..TrainConfig::masked()
        };
        let mut ckpt = Trainer::new(cfg).unwrap().checkpoint();
        ckpt.optimizer.step = 7;
        ckpt.optimizer.first_moment[0].data_mut()[0] = 0.25;
        ckpt.rng.word_pos = (1u128 << 70) + 3;
        ckpt
    }

    #[test]
    fn bytes_round_trip_bitwise() {
        let ckpt = sample();
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes(), ckpt.to_bytes());
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"VLEC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), FORMAT_VERSION);
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let manifest = std::str::from_utf8(&bytes[16..16 + mlen]).unwrap();
        assert!(manifest.contains("[config]") && manifest.contains("[state]"));
    }

    #[test]
    fn truncated_and_versioned_files_fail() {
        let bytes = sample().to_bytes();
        for cut in [3, 10, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(VleError::CorruptCheckpoint(_))), "cut {cut}");
        }
        let mut bumped = bytes.clone();
        bumped[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&bumped), Err(VleError::CheckpointVersion { found: 2, .. })));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(VleError::CorruptCheckpoint(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/ckpt.vle");
        let ckpt = sample();
        save_checkpoint(&ckpt, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
    }

    #[test]
    fn rng_state_restores_stream_position() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        rng.set_stream(5);
        let _: u64 = rng.random();
        let state = RngState::capture(&rng);
        let mut restored = state.restore();
        let a: [u64; 4] = rng.random();
        let b: [u64; 4] = restored.random();
        assert_eq!(a, b);
    }
}
