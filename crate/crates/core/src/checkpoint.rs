//! Binary checkpoints of the full training state.
//!
//! Layout (little-endian): magic `BIDTCKPT`, schema version (u32), SHA-256 of
//! the training config (32 bytes), the config as TOML, then the trainer state
//! field by field, then a SHA-256 of everything before it. Floats are stored
//! as raw IEEE-754 bits so a reload continues bit-exactly.

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::agent::{HybridActor, Normalizer, TwinCritic};
use crate::binio::{Reader, Writer};
use crate::dataset::ReplaySampler;
use crate::error::{Error, Result};
use crate::nn::{AdamState, MlpNet, TargetNet};
use crate::policy::{BasePolicy, BasePolicyParams, PolicyForm};
use crate::rng::{RngState, SimRng};
use crate::trainer::{TrainConfig, Trainer};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BIDTCKPT";
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

type W = Writer<Vec<u8>>;

fn io(e: std::io::Error) -> Error {
    Error::io("<checkpoint buffer>", e)
}

fn put_net(w: &mut W, net: &MlpNet) -> Result<()> {
    w.usizes(net.widths()).map_err(io)?;
    w.f64s(net.params()).map_err(io)
}

fn get_net(r: &mut Reader<&[u8]>, field: &str) -> Result<MlpNet> {
    let widths = r.usizes(field)?;
    let params = r.f64s(field)?;
    MlpNet::from_params(widths, params).map_err(|e| Error::load(field, e.to_string()))
}

fn put_norm(w: &mut W, n: &Normalizer) -> Result<()> {
    w.f64s(&n.mean).map_err(io)?;
    w.f64s(&n.inv_std).map_err(io)
}

fn get_norm(r: &mut Reader<&[u8]>, field: &str) -> Result<Normalizer> {
    let mean = r.f64s(field)?;
    let inv_std = r.f64s(field)?;
    if mean.len() != inv_std.len() {
        return Err(Error::load(field, "mean and scale lengths differ"));
    }
    Ok(Normalizer { mean, inv_std })
}

fn put_adam(w: &mut W, a: &AdamState) -> Result<()> {
    w.f64s(&a.m).map_err(io)?;
    w.f64s(&a.v).map_err(io)?;
    w.u64(a.step).map_err(io)?;
    for v in [a.lr, a.beta1, a.beta2, a.eps] {
        w.f64(v).map_err(io)?;
    }
    Ok(())
}

fn get_adam(r: &mut Reader<&[u8]>, field: &str) -> Result<AdamState> {
    Ok(AdamState {
        m: r.f64s(field)?,
        v: r.f64s(field)?,
        step: r.u64(field)?,
        lr: r.f64(field)?,
        beta1: r.f64(field)?,
        beta2: r.f64(field)?,
        eps: r.f64(field)?,
    })
}

fn put_rng(w: &mut W, rng: &SimRng) -> Result<()> {
    let s = RngState::capture(rng);
    w.bytes(&s.seed).map_err(io)?;
    w.u64(s.stream).map_err(io)?;
    w.u128(s.word_pos).map_err(io)
}

fn get_rng(r: &mut Reader<&[u8]>, field: &str) -> Result<SimRng> {
    let seed: [u8; 32] = r.bytes(field, 32)?.try_into().expect("32 bytes");
    Ok(RngState {
        seed,
        stream: r.u64(field)?,
        word_pos: r.u128(field)?,
    }
    .restore())
}

fn put_policy(w: &mut W, p: &BasePolicy) -> Result<()> {
    let form = toml::to_string(&p.form).map_err(|e| Error::Config(e.to_string()))?;
    w.str(&form).map_err(io)?;
    w.u32(p.params.names.len() as u32).map_err(io)?;
    for n in &p.params.names {
        w.str(n).map_err(io)?;
    }
    w.f64s(&p.params.values).map_err(io)?;
    match &p.params.bounds {
        None => w.u32(0).map_err(io),
        Some(b) => {
            w.u32(1).map_err(io)?;
            let flat: Vec<f64> = b.iter().flat_map(|(lo, hi)| [*lo, *hi]).collect();
            w.f64s(&flat).map_err(io)
        }
    }
}

fn get_policy(r: &mut Reader<&[u8]>) -> Result<BasePolicy> {
    let form: PolicyForm = toml::from_str(&r.str("policy.form")?)
        .map_err(|e| Error::load("policy.form", e.to_string()))?;
    let n = r.u32("policy.names")?;
    if n > 1 << 16 {
        return Err(Error::load(
            "policy.names",
            format!("implausible count {n}"),
        ));
    }
    let names = (0..n)
        .map(|_| r.str("policy.names"))
        .collect::<Result<Vec<_>>>()?;
    let values = r.f64s("policy.values")?;
    let bounds = match r.u32("policy.bounds")? {
        0 => None,
        1 => {
            let flat = r.f64s("policy.bounds")?;
            if flat.len() % 2 != 0 {
                return Err(Error::load("policy.bounds", "odd number of bound values"));
            }
            Some(flat.chunks(2).map(|c| (c[0], c[1])).collect())
        }
        other => return Err(Error::load("policy.bounds", format!("bad flag {other}"))),
    };
    let p = BasePolicy {
        form,
        params: BasePolicyParams {
            values,
            names,
            bounds,
        },
    };
    p.params
        .validate()
        .map_err(|e| Error::load("policy", e.to_string()))?;
    Ok(p)
}

impl Trainer {
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(Vec::new());
        w.bytes(CHECKPOINT_MAGIC).map_err(io)?;
        w.u32(CHECKPOINT_SCHEMA_VERSION).map_err(io)?;
        w.bytes(&self.config.digest()?).map_err(io)?;
        w.str(&self.config.to_toml()?).map_err(io)?;
        w.u64(self.step).map_err(io)?;
        match self.last_checkpoint {
            None => w.u32(0).map_err(io)?,
            Some(s) => {
                w.u32(1).map_err(io)?;
                w.u64(s).map_err(io)?;
            }
        }
        w.f64(self.reward_scale).map_err(io)?;
        put_policy(&mut w, &self.actor.base)?;
        w.f64s(&self.default_params).map_err(io)?;
        w.f64(self.actor.rel_std_bounds.0).map_err(io)?;
        w.f64(self.actor.rel_std_bounds.1).map_err(io)?;
        put_norm(&mut w, &self.actor.norm)?;
        put_net(&mut w, &self.actor.variance_net)?;
        put_norm(&mut w, &self.critic.norm)?;
        w.u32(self.critic.heads.len() as u32).map_err(io)?;
        for h in &self.critic.heads {
            put_net(&mut w, h)?;
        }
        for t in &self.critic.targets {
            put_net(&mut w, t.net())?;
        }
        for a in &self.critic_opt {
            put_adam(&mut w, a)?;
        }
        put_adam(&mut w, &self.policy_opt)?;
        put_adam(&mut w, &self.variance_opt)?;
        put_rng(&mut w, &self.rng)?;
        w.u64(self.sampler.len() as u64).map_err(io)?;
        put_rng(&mut w, &self.sampler.rng)?;
        let mut out = w.into_inner();
        let digest: [u8; 32] = Sha256::digest(&out).into();
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.bytes("magic", 8)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::load("magic", "not a checkpoint file"));
        }
        let version = r.u32("schema_version")?;
        if version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: CHECKPOINT_SCHEMA_VERSION,
            });
        }
        if bytes.len() < 32 {
            return Err(Error::load("checksum", "file too short"));
        }
        let (payload, footer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(payload).as_slice() != footer {
            return Err(Error::load(
                "checksum",
                "checkpoint contents do not match checksum",
            ));
        }
        let mut r = Reader::new(&payload[12..]);
        let digest = r.bytes("config_digest", 32)?;
        let config = TrainConfig::from_toml(&r.str("config")?)
            .map_err(|e| Error::load("config", e.to_string()))?;
        if config.digest()?.as_slice() != digest.as_slice() {
            return Err(Error::load(
                "config_digest",
                "embedded config does not match its hash",
            ));
        }
        let step = r.u64("step")?;
        let last_checkpoint = match r.u32("last_checkpoint")? {
            0 => None,
            1 => Some(r.u64("last_checkpoint")?),
            other => return Err(Error::load("last_checkpoint", format!("bad flag {other}"))),
        };
        let reward_scale = r.f64("reward_scale")?;
        let base = get_policy(&mut r)?;
        let default_params = r.f64s("default_params")?;
        let rel_std_bounds = (r.f64("rel_std_bounds")?, r.f64("rel_std_bounds")?);
        let actor_norm = get_norm(&mut r, "actor.norm")?;
        let variance_net = get_net(&mut r, "actor.variance_net")?;
        let critic_norm = get_norm(&mut r, "critic.norm")?;
        let heads_n = r.u32("critic.heads")?;
        if !(1..=2).contains(&heads_n) {
            return Err(Error::load(
                "critic.heads",
                format!("expected 1 or 2 heads, got {heads_n}"),
            ));
        }
        let heads = (0..heads_n)
            .map(|_| get_net(&mut r, "critic.heads"))
            .collect::<Result<Vec<_>>>()?;
        let targets = (0..heads_n)
            .map(|_| get_net(&mut r, "critic.targets").map(TargetNet))
            .collect::<Result<Vec<_>>>()?;
        let critic_opt = (0..heads_n)
            .map(|_| get_adam(&mut r, "critic_opt"))
            .collect::<Result<Vec<_>>>()?;
        let policy_opt = get_adam(&mut r, "policy_opt")?;
        let variance_opt = get_adam(&mut r, "variance_opt")?;
        let rng = get_rng(&mut r, "rng")?;
        let sampler_len = r.u64("sampler.len")? as usize;
        let sampler = ReplaySampler::with_rng(sampler_len, get_rng(&mut r, "sampler.rng")?);
        if default_params.len() != base.num_params() {
            return Err(Error::load("default_params", "length differs from policy"));
        }
        Ok(Trainer {
            config,
            actor: HybridActor {
                base,
                variance_net,
                norm: actor_norm,
                rel_std_bounds,
            },
            critic: TwinCritic {
                heads,
                targets,
                norm: critic_norm,
            },
            default_params,
            critic_opt,
            policy_opt,
            variance_opt,
            step,
            reward_scale,
            rng,
            sampler,
            last_checkpoint,
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let bytes = self.to_checkpoint_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        f.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}
