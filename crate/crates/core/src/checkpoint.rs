//! Binary checkpoint format.
//!
//! ```text
//! "LCAC" | u32 version=1 | u32 param-count
//! per param: u16 name-len | name | u8 dtype=1 (f32) | u8 rank | u32 dims… | f32 payload
//! optimizer: f32 base_lr | f32 lr | f32 momentum | f32 weight_decay
//!            | u32 n | n × (u32 epoch, f32 multiplier)
//!            | u32 velocity-count | velocity records (same layout as params)
//! u64 epoch | 32-byte rng state
//! u32 len | UTF-8 model description (key=value lines)
//! ```
//!
//! All integers and floats are little-endian. The trailing model description
//! lets a checkpoint be rebuilt without the original run config.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lca::LcaConfig;
use crate::model::{build_model, BackboneConfig, HeadKind, Model, ModelConfig};
use crate::optim::OptimState;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LCAC";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub optim: OptimState<f32>,
    /// Completed training epochs.
    pub epoch: u64,
    pub rng: Rng,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn tensor(&mut self, name: &str, t: &Tensor<f32>) {
        self.u16(name.len() as u16);
        self.buf.extend_from_slice(name.as_bytes());
        self.u8(DTYPE_F32);
        self.u8(t.rank() as u8);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for &v in t.data() {
            self.f32(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                "checkpoint",
                format!("truncated while reading {field} at byte {}", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }
    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }
    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
    fn f32(&mut self, field: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn tensor(&mut self, section: &str) -> Result<(String, Tensor<f32>)> {
        let len = self.u16(section)? as usize;
        let name = std::str::from_utf8(self.take(len, section)?)
            .map_err(|_| Error::format("checkpoint", format!("{section} name is not UTF-8")))?
            .to_string();
        let field = format!("{section} `{name}`");
        let dtype = self.u8(&field)?;
        if dtype != DTYPE_F32 {
            return Err(Error::format("checkpoint", format!("{field} has dtype {dtype}, expected 1 (f32)")));
        }
        let rank = self.u8(&field)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32(&field)? as usize);
        }
        let numel: usize = shape.iter().product();
        let bytes = self.take(numel * 4, &field)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::format("checkpoint", format!("{field}: {e}")))?;
        Ok((name, t))
    }
}

/// `key=value` description of a model architecture.
pub fn describe_model(cfg: &ModelConfig, frozen_backbone: bool) -> String {
    let b = &cfg.backbone;
    let channels: Vec<String> = b.channels.iter().map(|c| c.to_string()).collect();
    format!(
        "backbone={}\nchannels={}\ninput_size={}x{}\nhead={}\nlca.embed_dim={}\nlca.include_one_by_k={}\nnum_classes={}\ntrain.freeze_backbone={}\n",
        b.kind,
        channels.join(","),
        b.input_size.0,
        b.input_size.1,
        cfg.head,
        cfg.lca.embed_dim,
        cfg.lca.include_one_by_k,
        cfg.num_classes,
        frozen_backbone,
    )
}

fn parse_description(text: &str) -> Result<(ModelConfig, bool)> {
    let bad = |key: &str, msg: String| Error::format("checkpoint model description", format!("{key}: {msg}"));
    let mut map = std::collections::HashMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(line, "missing `=`".into()))?;
        map.insert(k.trim(), v.trim());
    }
    let get = |key: &str| map.get(key).copied().ok_or_else(|| bad(key, "missing".into()));
    let num = |key: &str, v: &str| v.parse::<usize>().map_err(|e| bad(key, e.to_string()));
    let flag = |key: &str, v: &str| v.parse::<bool>().map_err(|e| bad(key, e.to_string()));

    let kind = get("backbone")?.parse().map_err(|e| bad("backbone", e))?;
    let channels = get("channels")?
        .split(',')
        .map(|c| num("channels", c))
        .collect::<Result<Vec<_>>>()?;
    let size = get("input_size")?;
    let (h, w) = size
        .split_once('x')
        .ok_or_else(|| bad("input_size", format!("expected HxW, got `{size}`")))?;
    let backbone = BackboneConfig {
        kind,
        channels,
        input_size: (num("input_size", h)?, num("input_size", w)?),
    };
    let head: HeadKind = get("head")?.parse().map_err(|e| bad("head", e))?;
    let lca = LcaConfig {
        in_channels: backbone.feature_shape()[0],
        embed_dim: num("lca.embed_dim", get("lca.embed_dim")?)?,
        include_one_by_k: flag("lca.include_one_by_k", get("lca.include_one_by_k")?)?,
    };
    let cfg = ModelConfig {
        backbone,
        head,
        lca,
        num_classes: num("num_classes", get("num_classes")?)?,
    };
    let frozen = flag("train.freeze_backbone", get("train.freeze_backbone")?)?;
    Ok((cfg, frozen))
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u32(self.model.params.len() as u32);
        for p in self.model.params.iter() {
            w.tensor(&p.name, &p.value);
        }

        let o = &self.optim;
        w.f32(o.base_lr);
        w.f32(o.lr);
        w.f32(o.momentum);
        w.f32(o.weight_decay);
        w.u32(o.schedule.len() as u32);
        for &(e, m) in &o.schedule {
            w.u32(e);
            w.f32(m);
        }
        w.u32(o.velocity.len() as u32);
        for (p, v) in self.model.params.iter().zip(&o.velocity) {
            w.tensor(&p.name, v);
        }

        w.u64(self.epoch);
        w.buf.extend_from_slice(&self.rng.to_bytes());

        let frozen = self.model.params.iter().any(|p| !p.trainable);
        let desc = describe_model(self.model.config(), frozen);
        w.u32(desc.len() as u32);
        w.buf.extend_from_slice(desc.as_bytes());
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::format("checkpoint", format!("bad magic {magic:?}, expected \"LCAC\"")));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                what: "checkpoint",
                version,
            });
        }
        let count = r.u32("param-count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            tensors.push(r.tensor("parameter")?);
        }

        let base_lr = r.f32("optimizer base_lr")?;
        let lr = r.f32("optimizer lr")?;
        let momentum = r.f32("optimizer momentum")?;
        let weight_decay = r.f32("optimizer weight_decay")?;
        let n_sched = r.u32("optimizer schedule")? as usize;
        let mut schedule = Vec::with_capacity(n_sched.min(1024));
        for _ in 0..n_sched {
            schedule.push((r.u32("optimizer schedule")?, r.f32("optimizer schedule")?));
        }
        let n_vel = r.u32("optimizer velocity-count")? as usize;
        let mut velocity = Vec::with_capacity(n_vel.min(1024));
        for _ in 0..n_vel {
            velocity.push(r.tensor("velocity")?);
        }

        let epoch = r.u64("epoch")?;
        let rng = Rng::from_bytes(r.take(32, "rng state")?.try_into().unwrap());

        let desc_len = r.u32("model description")? as usize;
        let desc = std::str::from_utf8(r.take(desc_len, "model description")?)
            .map_err(|_| Error::format("checkpoint", "model description is not UTF-8"))?;
        if r.pos != bytes.len() {
            return Err(Error::format(
                "checkpoint",
                format!("{} trailing bytes", bytes.len() - r.pos),
            ));
        }

        let (cfg, frozen) = parse_description(desc)?;
        // Values below are overwritten, the seed only fills placeholders.
        let mut model: Model<f32> = build_model(&cfg, &mut Rng::seed_from_u64(0))?;
        model.freeze_backbone(frozen);
        if tensors.len() != model.params.len() {
            return Err(Error::format(
                "checkpoint",
                format!("{} parameters stored, model needs {}", tensors.len(), model.params.len()),
            ));
        }
        for ((name, t), p) in tensors.into_iter().zip(model.params.iter_mut()) {
            if name != p.name || t.shape() != p.value.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!(
                        "parameter `{name}` {:?} does not match expected `{}` {:?}",
                        t.shape(),
                        p.name,
                        p.value.shape()
                    ),
                ));
            }
            p.value = t;
        }
        if velocity.len() != model.params.len() {
            return Err(Error::format(
                "checkpoint",
                format!("{} velocities for {} parameters", velocity.len(), model.params.len()),
            ));
        }
        let mut vel = Vec::with_capacity(velocity.len());
        for ((name, t), p) in velocity.into_iter().zip(model.params.iter()) {
            if name != p.name || t.shape() != p.value.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!("velocity `{name}` {:?} does not match parameter `{}`", t.shape(), p.name),
                ));
            }
            vel.push(t);
        }

        Ok(Checkpoint {
            model,
            optim: OptimState {
                base_lr,
                lr,
                momentum,
                weight_decay,
                schedule,
                velocity: vel,
            },
            epoch,
            rng,
        })
    }
}

/// Writes through a sibling temp file and an atomic rename.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.encode();
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&fs::read(path)?)
}
