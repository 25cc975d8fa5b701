//! Binary checkpoints.
//!
//! Layout: the magic `GOATCKPT`, one version byte, then a sequence of
//! little-endian fields. Integers are `u64`; reals are `f64`; every vector
//! or string is preceded by its `u64` length.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::policy::{Backend, CondKey, Conditioning, ContextKey, ParametricPolicy, RowInit};
use crate::seq::Vocabulary;
use crate::trainer::{Adam, AdamConfig, CollapseConfig, CollapseDetector, Trainer};

pub const MAGIC: &[u8; 8] = b"GOATCKPT";
pub const VERSION: u8 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u8),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
}

type CkResult<T> = std::result::Result<T, CheckpointError>;

fn invalid(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Invalid(msg.into())
}

/// Snapshot of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// JSON of the run config that produced this state.
    pub config_json: String,
    pub policy: ParametricPolicy,
    pub adam: Adam,
    pub step: u64,
    pub cursor: u64,
    /// Root seed of the rollout streams; stream `(step, b)` is derived from
    /// it, so together with `step` it is the full rng state.
    pub rng_seed: u64,
    pub collapse: CollapseDetector,
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer, config_json: String) -> Self {
        Self {
            config_json,
            policy: trainer.policy().clone(),
            adam: trainer.adam().clone(),
            step: trainer.step_count(),
            cursor: trainer.cursor() as u64,
            rng_seed: trainer.plan().seed,
            collapse: trainer.collapse_detector().clone(),
        }
    }

    /// A checkpoint of an untrained policy (e.g. a baseline reference).
    pub fn initial(config_json: String, policy: ParametricPolicy, adam: AdamConfig, collapse: CollapseConfig) -> crate::Result<Self> {
        Ok(Self {
            config_json,
            policy,
            adam: Adam::new(adam),
            step: 0,
            cursor: 0,
            rng_seed: 0,
            collapse: CollapseDetector::new(collapse)?,
        })
    }

    /// Continues training from this snapshot.
    pub fn resume(
        self,
        plan: crate::trainer::TrainPlan,
        reward: crate::RewardModel,
        corpus: Vec<crate::Prompt>,
    ) -> crate::Result<Trainer> {
        if plan.seed != self.rng_seed {
            return Err(crate::Error::Config("plan seed differs from the checkpoint's rng seed".into()));
        }
        let mut t = Trainer::new(plan, self.policy, reward, corpus)?;
        t.restore_progress(self.step, self.cursor as usize, self.adam, self.collapse);
        Ok(t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.0.push(VERSION);
        w.bytes(self.config_json.as_bytes());
        write_policy(&mut w, &self.policy);
        let AdamConfig { beta1, beta2, eps } = self.adam.config;
        w.f64(beta1);
        w.f64(beta2);
        w.f64(eps);
        w.u64(self.adam.t);
        w.u64(self.adam.moments.len() as u64);
        for (key, (m, v)) in &self.adam.moments {
            write_key(&mut w, key);
            w.f64s(m);
            w.f64s(v);
        }
        w.u64(self.step);
        w.u64(self.cursor);
        w.u64(self.rng_seed);
        let cfg = self.collapse.config();
        w.u64(cfg.window as u64);
        w.f64(cfg.ratio_threshold);
        let (baseline, warmup, recent) = self.collapse.state();
        match baseline {
            Some(b) => {
                w.u8(1);
                w.f64(b);
            }
            None => w.u8(0),
        }
        w.f64s(&warmup);
        w.f64s(&recent);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> CkResult<Self> {
        if bytes.len() < MAGIC.len() {
            return Err(if MAGIC.starts_with(bytes) { CheckpointError::Truncated } else { CheckpointError::BadMagic });
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Reader { buf: bytes, pos: MAGIC.len() };
        let version = r.u8()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let config_json =
            String::from_utf8(r.bytes()?.to_vec()).map_err(|_| invalid("config snapshot is not UTF-8"))?;
        let policy = read_policy(&mut r)?;
        let config = AdamConfig { beta1: r.f64()?, beta2: r.f64()?, eps: r.f64()? };
        let t = r.u64()?;
        let n = r.len()?;
        let width = policy.vocab().alphabet();
        let mut moments = BTreeMap::new();
        for _ in 0..n {
            let key = read_key(&mut r, &policy)?;
            let m = r.f64s()?;
            let v = r.f64s()?;
            if m.len() != width || v.len() != width {
                return Err(invalid("optimizer moment width does not match the vocabulary"));
            }
            if moments.insert(key, (m, v)).is_some() {
                return Err(invalid("duplicate optimizer row"));
            }
        }
        if moments.keys().any(|k| !policy.rows().any(|(pk, _)| pk == k)) {
            return Err(invalid("optimizer state references a row the policy does not have"));
        }
        let adam = Adam { config, t, moments };
        let step = r.u64()?;
        let cursor = r.u64()?;
        let rng_seed = r.u64()?;
        let window = r.u64()? as usize;
        let ratio_threshold = r.f64()?;
        let baseline = match r.u8()? {
            0 => None,
            1 => Some(r.f64()?),
            b => return Err(invalid(format!("bad baseline flag {b}"))),
        };
        let warmup = r.f64s()?;
        let recent = r.f64s()?;
        if warmup.len() > window || recent.len() > window {
            return Err(invalid("collapse buffers exceed the window"));
        }
        let collapse = CollapseDetector::restore(CollapseConfig { window, ratio_threshold }, baseline, warmup, recent)
            .map_err(|e| invalid(e.to_string()))?;
        if r.pos != bytes.len() {
            return Err(invalid(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config_json, policy, adam, step, cursor, rng_seed, collapse })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> crate::Result<()> {
    std::fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> crate::Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    Ok(Checkpoint::from_bytes(&bytes)?)
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, x: u8) {
        self.0.push(x);
    }
    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn f64(&mut self, x: f64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn f64s(&mut self, xs: &[f64]) {
        self.u64(xs.len() as u64);
        xs.iter().for_each(|&x| self.f64(x));
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> CkResult<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> CkResult<u8> {
        Ok(self.take(1)?[0])
    }
    fn u64(&mut self) -> CkResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> CkResult<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    /// A length prefix, checked against the remaining bytes so corrupt
    /// lengths fail as truncation instead of huge allocations.
    fn len(&mut self) -> CkResult<usize> {
        let n = self.u64()?;
        if n > (self.buf.len() - self.pos) as u64 {
            return Err(CheckpointError::Truncated);
        }
        Ok(n as usize)
    }
    fn f64s(&mut self) -> CkResult<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn bytes(&mut self) -> CkResult<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }
}

fn write_key(w: &mut Writer, key: &ContextKey) {
    let (tag, value) = key.cond.tag();
    w.u8(tag);
    w.u64(value as u64);
    w.u64(key.suffix.len() as u64);
    key.suffix.iter().for_each(|&t| w.u64(t as u64));
}

fn read_key(r: &mut Reader, policy: &ParametricPolicy) -> CkResult<ContextKey> {
    let tag = r.u8()?;
    let value = u32::try_from(r.u64()?).map_err(|_| invalid("condition value out of range"))?;
    let cond = CondKey::from_tag(tag, value).ok_or_else(|| invalid(format!("bad condition tag {tag}")))?;
    let expected_tag = match policy.conditioning() {
        Conditioning::Unconditional => 0,
        Conditioning::PromptId => 1,
        Conditioning::Aligned => 2,
    };
    if tag != expected_tag {
        return Err(invalid("row key does not match the policy's conditioning"));
    }
    let vocab = policy.vocab();
    if let CondKey::Aligned(t) = cond {
        if t > vocab.terminal() {
            return Err(invalid(format!("aligned token {t} outside vocabulary")));
        }
    }
    let n = r.len()?;
    let mut suffix = Vec::with_capacity(n);
    for _ in 0..n {
        let t = r.u64()?;
        if t >= vocab.size() as u64 {
            return Err(invalid(format!("row key token {t} is not an ordinary token")));
        }
        suffix.push(t as u32);
    }
    let cap = match policy.backend() {
        Backend::Tabular => policy.max_len() - 1,
        Backend::KGram { k } => k.min(policy.max_len() - 1),
    };
    if suffix.len() > cap {
        return Err(invalid("row key is longer than any reachable context"));
    }
    Ok(ContextKey { cond, suffix })
}

fn write_policy(w: &mut Writer, p: &ParametricPolicy) {
    w.u64(p.vocab().size() as u64);
    w.u64(p.max_len() as u64);
    match p.backend() {
        Backend::Tabular => {
            w.u8(0);
            w.u64(0);
        }
        Backend::KGram { k } => {
            w.u8(1);
            w.u64(k as u64);
        }
    }
    w.u8(match p.conditioning() {
        Conditioning::PromptId => 0,
        Conditioning::Unconditional => 1,
        Conditioning::Aligned => 2,
    });
    match p.init() {
        RowInit::Zeros => w.u8(0),
        RowInit::Gaussian { seed, sigma } => {
            w.u8(1);
            w.u64(*seed);
            w.f64(*sigma);
        }
        RowInit::NoisyCopy { noise, end_noise } => {
            w.u8(2);
            w.f64s(noise);
            w.f64(*end_noise);
        }
    }
    w.u64(p.row_count() as u64);
    for (key, row) in p.rows() {
        write_key(w, key);
        w.f64s(row);
    }
}

fn read_policy(r: &mut Reader) -> CkResult<ParametricPolicy> {
    let size = u32::try_from(r.u64()?).map_err(|_| invalid("vocabulary size out of range"))?;
    let vocab = Vocabulary::new(size).map_err(|e| invalid(e.to_string()))?;
    let max_len = usize::try_from(r.u64()?).map_err(|_| invalid("max_len out of range"))?;
    let backend = match (r.u8()?, r.u64()?) {
        (0, 0) => Backend::Tabular,
        (1, k) => Backend::KGram { k: usize::try_from(k).map_err(|_| invalid("k out of range"))? },
        (b, _) => return Err(invalid(format!("bad backend tag {b}"))),
    };
    let conditioning = match r.u8()? {
        0 => Conditioning::PromptId,
        1 => Conditioning::Unconditional,
        2 => Conditioning::Aligned,
        c => return Err(invalid(format!("bad conditioning tag {c}"))),
    };
    let init = match r.u8()? {
        0 => RowInit::Zeros,
        1 => RowInit::Gaussian { seed: r.u64()?, sigma: r.f64()? },
        2 => RowInit::NoisyCopy { noise: r.f64s()?, end_noise: r.f64()? },
        t => return Err(invalid(format!("bad row-init tag {t}"))),
    };
    let mut policy =
        ParametricPolicy::new(vocab, backend, conditioning, max_len, init).map_err(|e| invalid(e.to_string()))?;
    let n = r.len()?;
    let mut last: Option<ContextKey> = None;
    for _ in 0..n {
        let key = read_key(r, &policy)?;
        if last.as_ref().is_some_and(|l| *l >= key) {
            return Err(invalid("rows are not in strictly increasing key order"));
        }
        let row = r.f64s()?;
        if row.iter().any(|x| x.is_nan()) {
            return Err(invalid("NaN logit"));
        }
        policy.set_row(key.clone(), row).map_err(|e| invalid(e.to_string()))?;
        last = Some(key);
    }
    Ok(policy)
}
