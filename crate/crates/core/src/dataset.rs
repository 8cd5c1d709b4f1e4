//! Behavior-policy data collection and the on-disk transition store.
//!
//! # File layout (all integers and floats little-endian)
//!
//! ```text
//! header:
//!   magic            8 bytes  "BIDTDATA"
//!   schema_version   u32
//!   actor fields     u32 count, then count x (u32 len + utf-8 name)
//!   critic extras    u32 count, then count x (u32 len + utf-8 name)
//!   config digest    32 bytes (SHA-256 of the campaign config set)
//!   base policy      u32 len + utf-8 TOML of the collecting policy
//!   noise            3 x f64 (sigma_beta, clip_lo, clip_hi)
//!   episode count    u64
//!   transition count u64
//!   record size      u32 (always 256)
//! body: transition count x record
//!   episode_id u64 | step_index u64 | done u64
//!   action f64 | behavior_mean f64 | reward f64
//!   actor_obs 7 x f64 | critic extras 6 x f64
//!   next_actor_obs 7 x f64 | next critic extras 6 x f64
//! footer:
//!   SHA-256 of header + body   32 bytes
//!   end magic                  8 bytes "BIDTEND!"
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::mdp::{ActorObservation, CampaignConfig, CriticObservation, Transition};
use crate::policy::{behavior_sample, BasePolicy, BehaviorNoiseSpec};
use crate::rng::{derive_seed, derive_seed3, rng_from_seed, SimRng};
use crate::sim::{ConfigSet, EnvState};

pub const DATASET_MAGIC: &[u8; 8] = b"BIDTDATA";
pub const DATASET_END_MAGIC: &[u8; 8] = b"BIDTEND!";
pub const DATASET_SCHEMA_VERSION: u32 = 1;
pub const RECORD_SIZE: usize = 256;
const FOOTER_SIZE: usize = 40;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHeader {
    pub schema_version: u32,
    pub actor_fields: Vec<String>,
    pub critic_extra_fields: Vec<String>,
    pub config_digest: [u8; 32],
    pub policy: BasePolicy,
    pub noise: BehaviorNoiseSpec,
    pub episode_count: u64,
    pub transition_count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub transitions: Vec<Transition>,
}

/// SHA-256 of the TOML serialization of a config set.
pub fn configs_digest(configs: &[CampaignConfig]) -> Result<[u8; 32]> {
    let text = ConfigSet::new(configs.to_vec()).to_toml()?;
    Ok(Sha256::digest(text.as_bytes()).into())
}

/// Rolls out the behavior policy for `n_episodes` episodes. Each episode picks
/// a config uniformly at random; episodes run in parallel but land in the
/// file in episode order.
pub fn collect(
    configs: &[CampaignConfig],
    policy: &BasePolicy,
    noise: &BehaviorNoiseSpec,
    n_episodes: u64,
    seed: u64,
) -> Result<Dataset> {
    if configs.is_empty() {
        return Err(Error::Config("no campaign configs to collect from".into()));
    }
    if n_episodes == 0 {
        return Err(Error::InvalidArgument("n_episodes must be >= 1".into()));
    }
    noise.validate()?;
    policy.params.validate()?;
    for c in configs {
        c.validate()?;
    }
    let shared: Vec<std::sync::Arc<CampaignConfig>> =
        configs.iter().cloned().map(std::sync::Arc::new).collect();

    let episodes: Vec<Result<Vec<Transition>>> = (0..n_episodes)
        .into_par_iter()
        .map(|e| {
            collect_episode(&shared, policy, noise, e, seed).map_err(|source| Error::Episode {
                episode: e,
                source: Box::new(source),
            })
        })
        .collect();
    let mut transitions = Vec::new();
    for ep in episodes {
        transitions.extend(ep?);
    }
    Ok(Dataset {
        header: DatasetHeader {
            schema_version: DATASET_SCHEMA_VERSION,
            actor_fields: ActorObservation::FIELD_NAMES
                .iter()
                .map(|s| s.to_string())
                .collect(),
            critic_extra_fields: CriticObservation::EXTRA_FIELD_NAMES
                .iter()
                .map(|s| s.to_string())
                .collect(),
            config_digest: configs_digest(configs)?,
            policy: policy.clone(),
            noise: *noise,
            episode_count: n_episodes,
            transition_count: transitions.len() as u64,
        },
        transitions,
    })
}

fn collect_episode(
    configs: &[std::sync::Arc<CampaignConfig>],
    policy: &BasePolicy,
    noise: &BehaviorNoiseSpec,
    episode: u64,
    seed: u64,
) -> Result<Vec<Transition>> {
    let mut pick = rng_from_seed(derive_seed3(seed, 0xE1, episode));
    let config = &configs[pick.random_range(0..configs.len())];
    let env_seed: u64 = pick.random();
    let mut noise_rng = rng_from_seed(derive_seed3(seed, 0xE2, episode));
    let mut env = EnvState::reset(std::sync::Arc::clone(config), env_seed)?;
    let mut out = Vec::with_capacity(config.horizon);
    while !env.is_terminal() {
        let actor_obs = env.observe();
        let critic_obs = env.observe_critic();
        let behavior_mean = policy.forward(&actor_obs)?;
        let action = behavior_sample(policy, &actor_obs, noise, &mut noise_rng)?;
        let step_index = env.step_index;
        let outcome = env.step(action)?;
        out.push(Transition {
            actor_obs,
            critic_obs,
            action,
            behavior_mean,
            reward: outcome.reward,
            next_actor_obs: env.observe(),
            next_critic_obs: env.observe_critic(),
            done: outcome.done,
            episode_id: episode,
            step_index,
        });
    }
    Ok(out)
}

fn encode_header(h: &DatasetHeader) -> Result<Vec<u8>> {
    let policy = toml::to_string(&h.policy)
        .map_err(|e| Error::Config(format!("serializing policy: {e}")))?;
    let mut w = Writer::new(Vec::new());
    let io = |e: std::io::Error| Error::io("<memory>", e);
    w.bytes(DATASET_MAGIC).map_err(io)?;
    w.u32(h.schema_version).map_err(io)?;
    for fields in [&h.actor_fields, &h.critic_extra_fields] {
        w.u32(fields.len() as u32).map_err(io)?;
        for f in fields {
            w.str(f).map_err(io)?;
        }
    }
    w.bytes(&h.config_digest).map_err(io)?;
    w.str(&policy).map_err(io)?;
    for v in [h.noise.sigma_beta, h.noise.clip_lo, h.noise.clip_hi] {
        w.f64(v).map_err(io)?;
    }
    w.u64(h.episode_count).map_err(io)?;
    w.u64(h.transition_count).map_err(io)?;
    w.u32(RECORD_SIZE as u32).map_err(io)?;
    Ok(w.into_inner())
}

fn encode_record(t: &Transition, out: &mut Vec<u8>) {
    let start = out.len();
    out.extend_from_slice(&t.episode_id.to_le_bytes());
    out.extend_from_slice(&(t.step_index as u64).to_le_bytes());
    out.extend_from_slice(&(t.done as u64).to_le_bytes());
    let mut put = |v: f64| out.extend_from_slice(&v.to_le_bytes());
    put(t.action);
    put(t.behavior_mean);
    put(t.reward);
    for obs in [&t.critic_obs, &t.next_critic_obs] {
        for v in obs.to_array() {
            put(v);
        }
    }
    debug_assert_eq!(out.len() - start, RECORD_SIZE);
}

fn decode_record(buf: &[u8]) -> Result<Transition> {
    let word = |i: usize| -> [u8; 8] { buf[i * 8..i * 8 + 8].try_into().expect("8 bytes") };
    let u = |i: usize| u64::from_le_bytes(word(i));
    let f = |i: usize| f64::from_le_bytes(word(i));
    let done = match u(2) {
        0 => false,
        1 => true,
        other => {
            return Err(Error::load(
                "record.done",
                format!("expected 0 or 1, got {other}"),
            ))
        }
    };
    let obs_at = |base: usize| {
        let mut a = [0.0; CriticObservation::LEN];
        for (k, v) in a.iter_mut().enumerate() {
            *v = f(base + k);
        }
        CriticObservation::from_array(&a)
    };
    let critic_obs = obs_at(6);
    let next_critic_obs = obs_at(6 + CriticObservation::LEN);
    Ok(Transition {
        actor_obs: critic_obs.actor,
        critic_obs,
        action: f(3),
        behavior_mean: f(4),
        reward: f(5),
        next_actor_obs: next_critic_obs.actor,
        next_critic_obs,
        done,
        episode_id: u(0),
        step_index: u(1) as usize,
    })
}

fn decode_header<R: Read>(r: &mut Reader<R>) -> Result<DatasetHeader> {
    let magic = r.bytes("magic", 8)?;
    if magic != DATASET_MAGIC {
        return Err(Error::load(
            "magic",
            format!("not a dataset file (found {magic:?})"),
        ));
    }
    let schema_version = r.u32("schema_version")?;
    if schema_version != DATASET_SCHEMA_VERSION {
        return Err(Error::UnsupportedVersion {
            found: schema_version,
            expected: DATASET_SCHEMA_VERSION,
        });
    }
    let mut read_fields = |field: &str| -> Result<Vec<String>> {
        let n = r.u32(field)?;
        if n > 1024 {
            return Err(Error::load(field, format!("implausible field count {n}")));
        }
        (0..n).map(|_| r.str(field)).collect()
    };
    let actor_fields = read_fields("actor_fields")?;
    let critic_extra_fields = read_fields("critic_extra_fields")?;
    if actor_fields != ActorObservation::FIELD_NAMES
        || critic_extra_fields != CriticObservation::EXTRA_FIELD_NAMES
    {
        return Err(Error::load(
            "feature_layout",
            "feature layout differs from this build",
        ));
    }
    let config_digest: [u8; 32] = r.bytes("config_digest", 32)?.try_into().expect("32 bytes");
    let policy_text = r.str("policy")?;
    let policy: BasePolicy =
        toml::from_str(&policy_text).map_err(|e| Error::load("policy", e.to_string()))?;
    let noise = BehaviorNoiseSpec {
        sigma_beta: r.f64("noise.sigma_beta")?,
        clip_lo: r.f64("noise.clip_lo")?,
        clip_hi: r.f64("noise.clip_hi")?,
    };
    let episode_count = r.u64("episode_count")?;
    let transition_count = r.u64("transition_count")?;
    let record_size = r.u32("record_size")?;
    if record_size as usize != RECORD_SIZE {
        return Err(Error::load(
            "record_size",
            format!("expected {RECORD_SIZE}, got {record_size}"),
        ));
    }
    Ok(DatasetHeader {
        schema_version,
        actor_fields,
        critic_extra_fields,
        config_digest,
        policy,
        noise,
        episode_count,
        transition_count,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Header and body bytes, i.e. everything covered by the footer checksum.
    fn encode_payload(&self) -> Result<Vec<u8>> {
        if self.header.transition_count != self.transitions.len() as u64 {
            return Err(Error::Contract("header transition count is stale".into()));
        }
        let mut out = encode_header(&self.header)?;
        out.reserve(self.transitions.len() * RECORD_SIZE + FOOTER_SIZE);
        for t in &self.transitions {
            encode_record(t, &mut out);
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = self.encode_payload()?;
        let digest: [u8; 32] = Sha256::digest(&out).into();
        out.extend_from_slice(&digest);
        out.extend_from_slice(DATASET_END_MAGIC);
        Ok(out)
    }

    /// Content hash (hex SHA-256 of header and body).
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.encode_payload()?)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = decode_header(&mut Reader::new(bytes))?;
        if bytes.len() < FOOTER_SIZE {
            return Err(Error::load("checksum", "file too short for footer"));
        }
        let (payload, footer) = bytes.split_at(bytes.len() - FOOTER_SIZE);
        let digest: [u8; 32] = Sha256::digest(payload).into();
        if footer[..32] != digest || &footer[32..] != DATASET_END_MAGIC {
            return Err(Error::load(
                "checksum",
                "footer checksum does not match contents (truncated or corrupted file)",
            ));
        }
        let mut r = Reader::new(payload);
        decode_header(&mut r)?;
        let body_len = payload.len() - encode_header(&header)?.len();
        let expected = header.transition_count as usize * RECORD_SIZE;
        if body_len != expected {
            return Err(Error::load(
                "transition_count",
                format!(
                    "header declares {} records but body holds {body_len} bytes",
                    header.transition_count
                ),
            ));
        }
        let body = &payload[payload.len() - body_len..];
        let transitions = body
            .chunks_exact(RECORD_SIZE)
            .map(decode_record)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            header,
            transitions,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// One line per record: every field, space separated.
    pub fn export_text<W: Write>(&self, mut out: W) -> Result<()> {
        let io = |e| Error::io("<export>", e);
        let mut cols = vec![
            "episode_id",
            "step_index",
            "done",
            "action",
            "behavior_mean",
            "reward",
        ];
        let critic = CriticObservation::field_names();
        cols.extend(critic.iter().copied());
        let next: Vec<String> = critic.iter().map(|n| format!("next_{n}")).collect();
        writeln!(out, "# {} {}", cols.join(" "), next.join(" ")).map_err(io)?;
        for t in &self.transitions {
            write!(
                out,
                "{} {} {} {:?} {:?} {:?}",
                t.episode_id, t.step_index, t.done as u8, t.action, t.behavior_mean, t.reward
            )
            .map_err(io)?;
            for v in t
                .critic_obs
                .to_array()
                .iter()
                .chain(t.next_critic_obs.to_array().iter())
            {
                write!(out, " {v:?}").map_err(io)?;
            }
            writeln!(out).map_err(io)?;
        }
        Ok(())
    }

    /// Undiscounted return of every episode, in file order.
    pub fn episode_returns(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut current: Option<(u64, f64)> = None;
        for t in &self.transitions {
            match &mut current {
                Some((id, acc)) if *id == t.episode_id => *acc += t.reward,
                _ => {
                    if let Some((_, acc)) = current.take() {
                        out.push(acc);
                    }
                    current = Some((t.episode_id, t.reward));
                }
            }
        }
        if let Some((_, acc)) = current {
            out.push(acc);
        }
        out
    }
}

/// Outcome of [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub header: DatasetHeader,
    pub records_read: u64,
    pub episodes_seen: u64,
    pub digest: String,
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

struct HashingReader<R> {
    inner: R,
    hasher: Sha256,
}

impl<R: Read> Read for HashingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }
}

/// Streams through a dataset file checking the checksum and every record
/// invariant without holding the records in memory. Structural errors in the
/// header are returned as `Err`; record-level problems are listed in the
/// report.
pub fn validate(path: &Path) -> Result<ValidationReport> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len() as usize;
    let mut hashing = HashingReader {
        inner: BufReader::new(file),
        hasher: Sha256::new(),
    };
    let header = decode_header(&mut Reader::new(&mut hashing))?;
    let header_len = encode_header(&header)?.len();
    let mut violations = Vec::new();
    let expected_len = header_len + header.transition_count as usize * RECORD_SIZE + FOOTER_SIZE;
    if file_len != expected_len {
        violations.push(format!(
            "checksum: file is {file_len} bytes, header implies {expected_len} (truncated or padded)"
        ));
    }
    let available = file_len.saturating_sub(header_len + FOOTER_SIZE) / RECORD_SIZE;
    let to_read = available.min(header.transition_count as usize);

    let mut buf = vec![0u8; RECORD_SIZE];
    let mut prev: Option<Transition> = None;
    let mut episodes = 0u64;
    let mut seen_episode_ids = std::collections::HashSet::new();
    for i in 0..to_read {
        hashing
            .read_exact(&mut buf)
            .map_err(|e| Error::load("record", format!("record {i}: {e}")))?;
        let t = match decode_record(&buf) {
            Ok(t) => t,
            Err(e) => {
                violations.push(format!("record {i}: {e}"));
                prev = None;
                continue;
            }
        };
        if !(t.reward >= 0.0 && t.reward.is_finite()) {
            violations.push(format!(
                "record {i}: reward {} is negative or non-finite",
                t.reward
            ));
        }
        if !(t.behavior_mean > 0.0 && t.behavior_mean.is_finite()) {
            violations.push(format!(
                "record {i}: behavior_mean {} not > 0",
                t.behavior_mean
            ));
        }
        if !(t.action >= 0.0 && t.action.is_finite()) {
            violations.push(format!("record {i}: action {} invalid", t.action));
        }
        let new_episode = match &prev {
            Some(p) if p.episode_id == t.episode_id => {
                if p.done {
                    violations.push(format!(
                        "record {i}: episode {} continues after done",
                        t.episode_id
                    ));
                }
                if t.step_index != p.step_index + 1 {
                    violations.push(format!(
                        "record {i}: step {} follows step {}",
                        t.step_index, p.step_index
                    ));
                }
                if p.next_actor_obs != t.actor_obs {
                    violations.push(format!(
                        "record {i}: chain break in episode {}",
                        t.episode_id
                    ));
                }
                false
            }
            Some(p) => {
                if !p.done {
                    violations.push(format!(
                        "record {i}: episode {} ended without done",
                        p.episode_id
                    ));
                }
                true
            }
            None => true,
        };
        if new_episode {
            episodes += 1;
            if t.step_index != 0 {
                violations.push(format!(
                    "record {i}: episode {} starts at step {}",
                    t.episode_id, t.step_index
                ));
            }
            if !seen_episode_ids.insert(t.episode_id) {
                violations.push(format!(
                    "record {i}: episode {} is not contiguous",
                    t.episode_id
                ));
            }
        }
        prev = Some(t);
    }
    if let Some(p) = &prev {
        if !p.done {
            violations.push(format!("final episode {} ended without done", p.episode_id));
        }
    }
    if episodes != header.episode_count && violations.is_empty() {
        violations.push(format!(
            "header declares {} episodes, found {episodes}",
            header.episode_count
        ));
    }
    let digest = hex::encode(hashing.hasher.clone().finalize());
    if file_len == expected_len {
        let mut footer = [0u8; FOOTER_SIZE];
        hashing
            .inner
            .read_exact(&mut footer)
            .map_err(|e| Error::load("footer", e.to_string()))?;
        if hex::encode(&footer[..32]) != digest || &footer[32..] != DATASET_END_MAGIC {
            violations.push("checksum: footer does not match contents".into());
        }
    }
    Ok(ValidationReport {
        header,
        records_read: to_read as u64,
        episodes_seen: episodes,
        digest,
        violations,
    })
}

/// Uniform sampling with replacement over stored transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplaySampler {
    len: usize,
    pub rng: SimRng,
}

impl ReplaySampler {
    pub fn new(len: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::InvalidArgument(
                "cannot sample from an empty dataset".into(),
            ));
        }
        Ok(Self {
            len,
            rng: rng_from_seed(derive_seed(seed, 0x5A3F)),
        })
    }

    pub fn with_rng(len: usize, rng: SimRng) -> Self {
        Self { len, rng }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn sample_indices(&mut self, n: usize) -> Result<Vec<usize>> {
        if n == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        Ok((0..n).map(|_| self.rng.random_range(0..self.len)).collect())
    }

    pub fn sample_batch(&mut self, data: &Dataset, n: usize) -> Result<Vec<Transition>> {
        if data.len() != self.len {
            return Err(Error::Contract(
                "sampler built for a different dataset".into(),
            ));
        }
        Ok(self
            .sample_indices(n)?
            .into_iter()
            .map(|i| data.transitions[i])
            .collect())
    }
}

/// Writes a dataset and returns its digest.
pub fn save_with_digest(data: &Dataset, path: &Path) -> Result<String> {
    let bytes = data.to_bytes()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(
        &bytes[bytes.len() - FOOTER_SIZE..bytes.len() - 8],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::RewardMode;

    fn toy_config(horizon: usize) -> CampaignConfig {
        CampaignConfig {
            id: 0,
            budget: 50.0,
            horizon,
            audience_size: 100.0 * horizon as f64,
            opportunity_density: vec![100.0; horizon],
            value_per_conversion: 1.0,
            true_cvr_mean: 0.1,
            competitor_price_scale: 1.0,
            seed: 1,
            initial_bid: 8.0,
            cvr_spread: 0.5,
            price_spread: 0.5,
            reward_mode: RewardMode::Sampled,
            early_stop_rate: 0.0,
        }
    }

    fn policy() -> BasePolicy {
        BasePolicy::piecewise_poly(vec![0.0], 1, vec![0.0, -2.0, 0.0, -2.0]).unwrap()
    }

    #[test]
    fn single_toy_episode() {
        let d = collect(
            &[toy_config(5)],
            &policy(),
            &BehaviorNoiseSpec::default(),
            1,
            3,
        )
        .unwrap();
        assert!(d.len() <= 5 && !d.is_empty());
        assert!(d.transitions.last().unwrap().done);
        assert!(d.transitions[..d.len() - 1].iter().all(|t| !t.done));
    }

    #[test]
    fn bytes_round_trip_and_errors() {
        let d = collect(
            &[toy_config(6), toy_config(4)],
            &policy(),
            &BehaviorNoiseSpec::default(),
            5,
            9,
        )
        .unwrap();
        let bytes = d.to_bytes().unwrap();
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, d);

        let truncated = &bytes[..bytes.len() - 100];
        match Dataset::from_bytes(truncated) {
            Err(Error::Load { field, .. }) => assert_eq!(field, "checksum"),
            other => panic!("expected checksum error, got {other:?}"),
        }

        let mut bumped = bytes.clone();
        bumped[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            Dataset::from_bytes(&bumped),
            Err(Error::UnsupportedVersion {
                found: 2,
                expected: 1
            })
        ));

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        match Dataset::from_bytes(&bad_magic) {
            Err(Error::Load { field, .. }) => assert_eq!(field, "magic"),
            other => panic!("expected magic error, got {other:?}"),
        }
    }

    #[test]
    fn sampler_basics() {
        let d = collect(
            &[toy_config(1)],
            &policy(),
            &BehaviorNoiseSpec::default(),
            1,
            2,
        )
        .unwrap();
        assert_eq!(d.len(), 1);
        let mut s = ReplaySampler::new(1, 0).unwrap();
        assert_eq!(s.sample_batch(&d, 1).unwrap(), vec![d.transitions[0]]);
        assert!(matches!(
            s.sample_indices(0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(ReplaySampler::new(0, 0).is_err());

        let mut a = ReplaySampler::new(1000, 42).unwrap();
        let mut b = ReplaySampler::new(1000, 42).unwrap();
        for _ in 0..5 {
            assert_eq!(a.sample_indices(64).unwrap(), b.sample_indices(64).unwrap());
        }
    }

    #[test]
    fn episode_returns_sum_rewards() {
        let d = collect(
            &[toy_config(8)],
            &policy(),
            &BehaviorNoiseSpec::default(),
            3,
            4,
        )
        .unwrap();
        let returns = d.episode_returns();
        assert_eq!(returns.len(), 3);
        let total: f64 = d.transitions.iter().map(|t| t.reward).sum();
        assert!((returns.iter().sum::<f64>() - total).abs() < 1e-9);
    }
}
