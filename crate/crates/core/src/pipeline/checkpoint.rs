//! Binary checkpoints: named parameter tensors, optimizer state, rng state,
//! and stage metadata, serialized byte-stably.
//!
//! Layout: magic "LENS", u32 version, u32 entry count, then per entry
//! u32 name length + UTF-8 name, u32 rank, rank × u64 dims, raw
//! little-endian f32 payload. Footer: 32-byte config hash, u64 rng state,
//! stage tag (u32 length + UTF-8), and a trailing u64 FNV-1a content
//! checksum so any corrupted byte is rejected at load.

use std::io::{Read, Write};
use std::path::Path;

use crate::numerics::{AdamW, Params, Tensor};
use crate::{LensError, Result};

const MAGIC: &[u8; 4] = b"LENS";
const VERSION: u32 = 1;

/// Training stage a checkpoint was produced by; stages enforce ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Bootstrap,
    Align,
    Rl,
}

impl Stage {
    pub fn tag(&self) -> &'static str {
        match self {
            Stage::Bootstrap => "bootstrap",
            Stage::Align => "align",
            Stage::Rl => "rl",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "bootstrap" => Ok(Stage::Bootstrap),
            "align" => Ok(Stage::Align),
            "rl" => Ok(Stage::Rl),
            other => Err(LensError::Checkpoint(format!("unknown stage tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: Stage,
    pub params: Params,
    pub opt: AdamW,
    pub rng_state: u64,
    pub config_hash: [u8; 32],
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

struct Entry<'a> {
    name: String,
    dims: Vec<u64>,
    data: &'a [f32],
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries: Vec<Entry> = Vec::new();
        for (name, t) in self.params.iter() {
            entries.push(Entry {
                name: name.clone(),
                dims: t.shape().iter().map(|&d| d as u64).collect(),
                data: t.data(),
            });
        }
        let (ms, vs) = self.opt.moments();
        for (name, m) in ms {
            entries.push(Entry {
                name: format!("opt/m/{name}"),
                dims: vec![m.len() as u64],
                data: m,
            });
        }
        for (name, v) in vs {
            entries.push(Entry {
                name: format!("opt/v/{name}"),
                dims: vec![v.len() as u64],
                data: v,
            });
        }
        let step = [self.opt.step as f32];
        entries.push(Entry {
            name: "opt/step".into(),
            dims: vec![1],
            data: &step,
        });

        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for e in &entries {
            buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(e.name.as_bytes());
            buf.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for d in &e.dims {
                buf.extend_from_slice(&d.to_le_bytes());
            }
            for x in e.data {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        buf.extend_from_slice(&self.config_hash);
        buf.extend_from_slice(&self.rng_state.to_le_bytes());
        let tag = self.stage.tag();
        buf.extend_from_slice(&(tag.len() as u32).to_le_bytes());
        buf.extend_from_slice(tag.as_bytes());
        buf.extend_from_slice(&fnv1a(&buf).to_le_bytes());

        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    /// Load and verify. The stored config hash must equal `expected_hash`
    /// unless `override_hash` is set.
    pub fn load(path: &Path, expected_hash: Option<[u8; 32]>, override_hash: bool) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        let bad = |msg: &str| LensError::Checkpoint(format!("{}: {msg}", path.display()));
        if buf.len() < 20 {
            return Err(bad("truncated header"));
        }
        let (body, tail) = buf.split_at(buf.len() - 8);
        let stored_sum = u64::from_le_bytes(tail.try_into().unwrap());
        if fnv1a(body) != stored_sum {
            return Err(bad("content checksum mismatch (corrupted file)"));
        }
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > body.len() {
                return Err(bad("unexpected end of file"));
            }
            let s = &body[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        let mut params = Params::new();
        let mut opt = AdamW::new();
        let mut moments: Vec<(String, Vec<f32>)> = Vec::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| bad("non-utf8 entry name"))?;
            let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            if rank > 4 {
                return Err(bad(&format!("implausible rank {rank} for {name}")));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
            }
            let numel: usize = dims.iter().product();
            let raw = take(&mut pos, numel * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if name == "opt/step" {
                opt.step = data[0] as u64;
            } else if let Some(pname) = name.strip_prefix("opt/m/") {
                moments.push((format!("m/{pname}"), data));
            } else if let Some(pname) = name.strip_prefix("opt/v/") {
                moments.push((format!("v/{pname}"), data));
            } else {
                params.insert(&name, Tensor::from_vec(&dims, data)?);
            }
        }
        // pair up moment buffers
        let mut ms: std::collections::BTreeMap<String, Vec<f32>> = Default::default();
        let mut vs: std::collections::BTreeMap<String, Vec<f32>> = Default::default();
        for (key, data) in moments {
            if let Some(n) = key.strip_prefix("m/") {
                ms.insert(n.to_string(), data);
            } else if let Some(n) = key.strip_prefix("v/") {
                vs.insert(n.to_string(), data);
            }
        }
        for (name, m) in ms {
            let v = vs.remove(&name).ok_or_else(|| bad("unpaired moment buffer"))?;
            opt.insert_moments(&name, m, v);
        }
        let config_hash: [u8; 32] = take(&mut pos, 32)?
            .try_into()
            .map_err(|_| bad("bad footer"))?;
        let rng_state = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let tag_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let tag = String::from_utf8(take(&mut pos, tag_len)?.to_vec())
            .map_err(|_| bad("non-utf8 stage tag"))?;
        if pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        let stage = Stage::from_tag(&tag)?;
        if let Some(expect) = expected_hash {
            if expect != config_hash && !override_hash {
                return Err(LensError::Checkpoint(format!(
                    "{}: config hash mismatch (pass the override flag to load anyway)",
                    path.display()
                )));
            }
        }
        Ok(Self {
            stage,
            params,
            opt,
            rng_state,
            config_hash,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("lens-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn sample_checkpoint() -> Checkpoint {
        let mut rng = Rng::new(3);
        let mut params = Params::new();
        params.insert("a/w", Tensor::randn(&[3, 4], 1.0, &mut rng));
        params.insert("b/w", Tensor::randn(&[5], 1.0, &mut rng));
        let mut opt = AdamW::new();
        opt.step = 7;
        opt.insert_moments("a/w", vec![0.5; 12], vec![0.25; 12]);
        Checkpoint {
            stage: Stage::Align,
            params,
            opt,
            rng_state: 0xDEADBEEF,
            config_hash: [9u8; 32],
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ck = sample_checkpoint();
        let p1 = tmp("ck1.bin");
        let p2 = tmp("ck2.bin");
        ck.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1, Some([9u8; 32]), false).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        // tensors round-trip exactly
        assert_eq!(
            ck.params.get("a/w").data(),
            loaded.params.get("a/w").data()
        );
        assert_eq!(loaded.opt.step, 7);
        assert_eq!(loaded.rng_state, 0xDEADBEEF);
        assert_eq!(loaded.stage, Stage::Align);
    }

    #[test]
    fn corrupting_one_byte_fails_loading() {
        let ck = sample_checkpoint();
        let p = tmp("ck3.bin");
        ck.save(&p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&p, &bytes).unwrap();
        assert!(Checkpoint::load(&p, None, false).is_err());
    }

    #[test]
    fn truncation_fails_loading() {
        let ck = sample_checkpoint();
        let p = tmp("ck4.bin");
        ck.save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 9]).unwrap();
        assert!(Checkpoint::load(&p, None, false).is_err());
    }

    #[test]
    fn config_hash_mismatch_requires_override() {
        let ck = sample_checkpoint();
        let p = tmp("ck5.bin");
        ck.save(&p).unwrap();
        assert!(Checkpoint::load(&p, Some([1u8; 32]), false).is_err());
        assert!(Checkpoint::load(&p, Some([1u8; 32]), true).is_ok());
        assert!(Checkpoint::load(&p, Some([9u8; 32]), false).is_ok());
    }

    #[test]
    fn unknown_stage_tag_is_rejected() {
        assert!(Stage::from_tag("warmup").is_err());
        assert_eq!(Stage::from_tag("rl").unwrap(), Stage::Rl);
    }
}
