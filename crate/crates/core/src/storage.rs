//! Episode container, downsampling and JSONL export.
//!
//! Byte layout (all integers little-endian):
//!
//! | field            | bytes                                              |
//! |------------------|----------------------------------------------------|
//! | magic            | `RCSE`                                             |
//! | version          | u16                                                |
//! | header length    | u32                                                |
//! | header           | UTF-8 JSON ([`EpisodeHeader`])                     |
//! | step block × N   | u32 length, then the block payload                 |
//! | checksum         | u64 XXH64 (seed 0) of every preceding byte         |
//!
//! A block payload is `step u64, timestamp_ns u64, reward f64, flags u8`
//! (bit 0 terminated, bit 1 truncated), then the observation and the action
//! encoded with [`crate::codec`] in header schema order. With
//! `compression = "zlib"` each payload is zlib-deflated.

use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value as Json};
use thiserror::Error;
use xxhash_rust::xxh64::xxh64;

use crate::codec::{decode_channels, encode_channels, CodecError, Reader};
use crate::space::{Channels, ElementKind, Image, ImageData, Leaf, SpaceDescriptor, Value};

pub const MAGIC: &[u8; 4] = b"RCSE";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an episode file (bad magic)")]
    BadMagic,
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("checksum mismatch: file is truncated or corrupt")]
    ChecksumMismatch,
    #[error("malformed episode: {0}")]
    Format(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("source rate {source_hz} Hz is not a multiple of target rate {target_hz} Hz")]
    NonDivisibleRate { source_hz: f64, target_hz: f64 },
    #[error("episode sink is full")]
    SinkFull,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Compression {
    #[default]
    None,
    Zlib,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub format_version: u16,
    pub task: String,
    pub seed: u64,
    pub control_rate_hz: f64,
    pub success: bool,
    pub step_count: u64,
    /// Hex SHA-256 of the chain configuration that produced the episode.
    pub config_digest: String,
    /// Action channels holding increments; every other channel is absolute.
    #[serde(default)]
    pub delta_channels: Vec<String>,
    #[serde(default)]
    pub compression: Compression,
    /// Set when writing was aborted mid-episode.
    #[serde(default)]
    pub partial: bool,
    pub observation_space: SpaceDescriptor,
    pub action_space: SpaceDescriptor,
    #[serde(default)]
    pub extra: BTreeMap<String, Json>,
}

impl EpisodeHeader {
    pub fn new(task: &str, seed: u64, control_rate_hz: f64, observation_space: SpaceDescriptor, action_space: SpaceDescriptor) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            task: task.to_string(),
            seed,
            control_rate_hz,
            success: false,
            step_count: 0,
            config_digest: String::new(),
            delta_channels: Vec::new(),
            compression: Compression::None,
            partial: false,
            observation_space,
            action_space,
            extra: BTreeMap::new(),
        }
    }

    pub fn period_ns(&self) -> u64 {
        period_ns(self.control_rate_hz)
    }
}

pub fn period_ns(rate_hz: f64) -> u64 {
    (1e9 / rate_hz).round() as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub timestamp_ns: u64,
    /// The observation the action was chosen from.
    pub observation: Channels,
    pub action: Channels,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub header: EpisodeHeader,
    pub steps: Vec<StepRecord>,
}

impl EpisodeRecord {
    pub fn new(header: EpisodeHeader) -> Self {
        Self { header, steps: Vec::new() }
    }

    /// Checks the step count, timestamp spacing and schema conformance.
    pub fn check(&self) -> Result<(), StorageError> {
        let fmt = |m: String| Err(StorageError::Format(m));
        if self.header.step_count != self.steps.len() as u64 {
            return fmt(format!("header says {} steps, found {}", self.header.step_count, self.steps.len()));
        }
        let period = self.header.period_ns();
        for (k, s) in self.steps.iter().enumerate() {
            if s.step != k as u64 {
                return fmt(format!("step {k} carries index {}", s.step));
            }
            if k > 0 {
                let dt = s.timestamp_ns as i128 - self.steps[k - 1].timestamp_ns as i128;
                if (dt - period as i128).abs() > 1 {
                    return fmt(format!("step {k}: timestamp gap {dt} ns, expected {period}"));
                }
            }
            self.header
                .observation_space
                .validate(&s.observation)
                .map_err(|e| StorageError::Format(format!("step {k} observation: {e}")))?;
            self.header.action_space.validate(&s.action).map_err(|e| StorageError::Format(format!("step {k} action: {e}")))?;
        }
        Ok(())
    }
}

fn encode_block(header: &EpisodeHeader, s: &StepRecord, out: &mut Vec<u8>) -> Result<(), StorageError> {
    out.extend_from_slice(&s.step.to_le_bytes());
    out.extend_from_slice(&s.timestamp_ns.to_le_bytes());
    out.extend_from_slice(&s.reward.to_le_bytes());
    out.push(s.terminated as u8 | (s.truncated as u8) << 1);
    encode_channels(&header.observation_space, &s.observation, out)?;
    encode_channels(&header.action_space, &s.action, out)?;
    Ok(())
}

fn decode_block(header: &EpisodeHeader, payload: &[u8]) -> Result<StepRecord, StorageError> {
    let mut r = Reader::new(payload);
    let step = r.u64("step")?;
    let timestamp_ns = r.u64("timestamp")?;
    let reward = r.f64("reward")?;
    let flags = r.u8("flags")?;
    if flags & !0b11 != 0 {
        return Err(StorageError::Format(format!("unknown flag bits {flags:#x}")));
    }
    let observation = decode_channels(&header.observation_space, &mut r)?;
    let action = decode_channels(&header.action_space, &mut r)?;
    r.finish()?;
    Ok(StepRecord { step, timestamp_ns, observation, action, reward, terminated: flags & 1 != 0, truncated: flags & 2 != 0 })
}

fn zlib(data: &[u8]) -> std::io::Result<Vec<u8>> {
    let mut enc = flate2::write::ZlibEncoder::new(Vec::new(), flate2::Compression::default());
    enc.write_all(data)?;
    enc.finish()
}

fn unzlib(data: &[u8]) -> std::io::Result<Vec<u8>> {
    let mut out = Vec::new();
    flate2::read::ZlibDecoder::new(data).read_to_end(&mut out)?;
    Ok(out)
}

pub fn encode_episode(record: &EpisodeRecord) -> Result<Vec<u8>, StorageError> {
    let header_json = serde_json::to_vec(&record.header).map_err(|e| StorageError::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + header_json.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    let mut block = Vec::new();
    for s in &record.steps {
        block.clear();
        encode_block(&record.header, s, &mut block)?;
        let payload = match record.header.compression {
            Compression::None => std::mem::take(&mut block),
            Compression::Zlib => zlib(&block)?,
        };
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&payload);
        if record.header.compression == Compression::None {
            block = payload;
        }
    }
    let sum = xxh64(&out, 0);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

pub fn decode_episode(bytes: &[u8]) -> Result<EpisodeRecord, StorageError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(StorageError::BadMagic);
    }
    if bytes.len() < 6 {
        return Err(StorageError::ChecksumMismatch);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(StorageError::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    if bytes.len() < 18 {
        return Err(StorageError::ChecksumMismatch);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if xxh64(body, 0) != u64::from_le_bytes(tail.try_into().unwrap()) {
        return Err(StorageError::ChecksumMismatch);
    }
    let mut r = Reader::new(&body[6..]);
    let header_len = r.u32("header length")? as usize;
    let header: EpisodeHeader = serde_json::from_slice(r.take(header_len, "header")?)
        .map_err(|e| StorageError::Format(format!("header: {e}")))?;
    if header.format_version != version {
        return Err(StorageError::Format("header version disagrees with preamble".into()));
    }
    let mut steps = Vec::with_capacity(header.step_count as usize);
    while r.remaining() > 0 {
        let len = r.u32("block length")? as usize;
        let payload = r.take(len, "step block")?;
        let step = match header.compression {
            Compression::None => decode_block(&header, payload)?,
            Compression::Zlib => decode_block(&header, &unzlib(payload)?)?,
        };
        steps.push(step);
    }
    if steps.len() as u64 != header.step_count {
        return Err(StorageError::Format(format!("header says {} steps, found {}", header.step_count, steps.len())));
    }
    Ok(EpisodeRecord { header, steps })
}

pub fn write_episode(record: &EpisodeRecord, path: &Path) -> Result<(), StorageError> {
    let bytes = encode_episode(record)?;
    let tmp = path.with_extension("rcse.tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_episode(path: &Path) -> Result<EpisodeRecord, StorageError> {
    decode_episode(&std::fs::read(path)?)
}

/// Keeps every `source/target`-th step starting at 0. Each kept step's
/// action becomes the action that reaches the next kept state: delta
/// channels are summed over the window, absolute channels come from the
/// window's last step. Rewards are summed; flags come from the last step.
pub fn downsample(record: &EpisodeRecord, target_hz: f64) -> Result<EpisodeRecord, StorageError> {
    let source_hz = record.header.control_rate_hz;
    let ratio = source_hz / target_hz;
    let factor = ratio.round();
    if !(target_hz > 0.0) || factor < 1.0 || (ratio - factor).abs() > 1e-9 {
        return Err(StorageError::NonDivisibleRate { source_hz, target_hz });
    }
    let factor = factor as usize;
    let mut header = record.header.clone();
    header.control_rate_hz = target_hz;
    let period = period_ns(target_hz);
    let steps: Vec<StepRecord> = record
        .steps
        .chunks(factor)
        .enumerate()
        .map(|(k, window)| {
            let first = &window[0];
            let last = window.last().unwrap();
            let mut action = last.action.clone();
            for name in &header.delta_channels {
                if let Some(sum) = sum_vectors(window.iter().filter_map(|s| s.action.get(name))) {
                    action.insert(name, sum);
                }
            }
            StepRecord {
                step: k as u64,
                timestamp_ns: k as u64 * period,
                observation: first.observation.clone(),
                action,
                reward: window.iter().map(|s| s.reward).sum(),
                terminated: last.terminated,
                truncated: last.truncated,
            }
        })
        .collect();
    header.step_count = steps.len() as u64;
    header.extra.insert("downsampled_from_hz".into(), json!(source_hz));
    Ok(EpisodeRecord { header, steps })
}

fn sum_vectors<'a>(mut values: impl Iterator<Item = &'a Value>) -> Option<Value> {
    let first = values.next()?;
    Some(match first {
        Value::Vector(v) => {
            let mut acc = v.clone();
            for other in values {
                if let Value::Vector(o) = other {
                    for (a, b) in acc.iter_mut().zip(o) {
                        *a += b;
                    }
                }
            }
            Value::Vector(acc)
        }
        Value::Scalar(x) => Value::Scalar(*x + values.filter_map(Value::as_scalar).sum::<f64>()),
        other => other.clone(),
    })
}

fn value_to_json(v: &Value) -> Json {
    match v {
        Value::Scalar(x) => json!(x),
        Value::Vector(xs) => json!(xs),
        Value::Discrete(k) => json!(k),
        Value::Dict(ch) => channels_to_json(ch),
        Value::Image(img) => {
            let bytes: Vec<u8> = match &img.data {
                ImageData::U8(b) => b.clone(),
                ImageData::F32(f) => f.iter().flat_map(|x| x.to_le_bytes()).collect(),
            };
            json!({
                "height": img.height,
                "width": img.width,
                "channels": img.channels,
                "element": img.data.kind(),
                "base64": base64::engine::general_purpose::STANDARD.encode(bytes),
            })
        }
    }
}

pub fn channels_to_json(ch: &Channels) -> Json {
    Json::Object(ch.iter().map(|(k, v)| (k.clone(), value_to_json(v))).collect::<Map<_, _>>())
}

fn json_to_value(leaf: &Leaf, v: &Json, path: &str) -> Result<Value, StorageError> {
    let bad = || StorageError::Format(format!("{path}: value does not match its schema"));
    Ok(match leaf {
        Leaf::Scalar { .. } => Value::Scalar(v.as_f64().ok_or_else(bad)?),
        Leaf::Vector { .. } => {
            Value::Vector(v.as_array().ok_or_else(bad)?.iter().map(|x| x.as_f64().ok_or_else(bad)).collect::<Result<_, _>>()?)
        }
        Leaf::Discrete { .. } => Value::Discrete(v.as_u64().ok_or_else(bad)?),
        Leaf::Dict { entries } => Value::Dict(json_to_channels(entries, v, path)?),
        Leaf::Image { height, width, channels, element } => {
            let b64 = v.get("base64").and_then(Json::as_str).ok_or_else(bad)?;
            let raw = base64::engine::general_purpose::STANDARD.decode(b64).map_err(|_| bad())?;
            let data = match element {
                ElementKind::U8 => ImageData::U8(raw),
                ElementKind::F32 => {
                    if raw.len() % 4 != 0 {
                        return Err(bad());
                    }
                    ImageData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
                }
            };
            Value::Image(Image { height: *height, width: *width, channels: *channels, data })
        }
    })
}

pub fn json_to_channels(space: &SpaceDescriptor, v: &Json, prefix: &str) -> Result<Channels, StorageError> {
    let obj = v.as_object().ok_or_else(|| StorageError::Format(format!("{prefix}: expected an object")))?;
    let mut out = Channels::new();
    for (name, leaf) in space.iter() {
        let path = if prefix.is_empty() { name.clone() } else { format!("{prefix}/{name}") };
        let value = obj.get(name).ok_or_else(|| StorageError::Format(format!("{path}: missing")))?;
        out.insert(name, json_to_value(leaf, value, &path)?);
    }
    Ok(out)
}

/// One header line, then one line per step. Images are base64 of their
/// little-endian bytes.
pub fn export_jsonl(record: &EpisodeRecord, path: &Path) -> Result<(), StorageError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let header = serde_json::to_value(&record.header).map_err(|e| StorageError::Format(e.to_string()))?;
    serde_json::to_writer(&mut w, &json!({ "type": "header", "header": header })).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    for s in &record.steps {
        let line = json!({
            "type": "step",
            "step": s.step,
            "timestamp_ns": s.timestamp_ns,
            "reward": s.reward,
            "terminated": s.terminated,
            "truncated": s.truncated,
            "observation": channels_to_json(&s.observation),
            "action": channels_to_json(&s.action),
        });
        serde_json::to_writer(&mut w, &line).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn import_jsonl(path: &Path) -> Result<EpisodeRecord, StorageError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = file.lines();
    let first = lines.next().ok_or_else(|| StorageError::Format("empty file".into()))??;
    let first: Json = serde_json::from_str(&first).map_err(|e| StorageError::Format(e.to_string()))?;
    let header: EpisodeHeader = serde_json::from_value(first.get("header").cloned().unwrap_or(Json::Null))
        .map_err(|e| StorageError::Format(format!("header: {e}")))?;
    let mut steps = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Json = serde_json::from_str(&line).map_err(|e| StorageError::Format(e.to_string()))?;
        let field = |k: &str| v.get(k).ok_or_else(|| StorageError::Format(format!("step line missing {k}")));
        steps.push(StepRecord {
            step: field("step")?.as_u64().ok_or_else(|| StorageError::Format("step".into()))?,
            timestamp_ns: field("timestamp_ns")?.as_u64().ok_or_else(|| StorageError::Format("timestamp_ns".into()))?,
            reward: field("reward")?.as_f64().ok_or_else(|| StorageError::Format("reward".into()))?,
            terminated: field("terminated")?.as_bool().unwrap_or(false),
            truncated: field("truncated")?.as_bool().unwrap_or(false),
            observation: json_to_channels(&header.observation_space, field("observation")?, "observation")?,
            action: json_to_channels(&header.action_space, field("action")?, "action")?,
        });
    }
    Ok(EpisodeRecord { header, steps })
}

/// Where finished episodes go.
pub trait EpisodeSink: Send {
    /// Stores a finished episode and returns where it went, if on disk.
    fn write(&mut self, record: &EpisodeRecord) -> Result<Option<PathBuf>, StorageError>;
}

/// Writes `episode_<seed>.rcse` files (or numbered files when several
/// episodes share a seed) into a directory.
pub struct DirSink {
    dir: PathBuf,
    numbered: bool,
    counter: u64,
}

impl DirSink {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, StorageError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir, numbered: false, counter: 0 })
    }

    pub fn numbered(dir: impl Into<PathBuf>) -> Result<Self, StorageError> {
        Ok(Self { numbered: true, ..Self::new(dir)? })
    }

    pub fn path_for(&self, record: &EpisodeRecord) -> PathBuf {
        let stem = if self.numbered {
            format!("episode_{:06}", self.counter)
        } else {
            format!("episode_{}", record.header.seed)
        };
        let ext = if record.header.partial { "rcse.partial" } else { "rcse" };
        self.dir.join(format!("{stem}.{ext}"))
    }
}

impl EpisodeSink for DirSink {
    fn write(&mut self, record: &EpisodeRecord) -> Result<Option<PathBuf>, StorageError> {
        let path = self.path_for(record);
        write_episode(record, &path)?;
        self.counter += 1;
        Ok(Some(path))
    }
}

/// Keeps episodes in memory; clones share the same list.
#[derive(Clone, Default)]
pub struct MemorySink {
    pub episodes: std::sync::Arc<std::sync::Mutex<Vec<EpisodeRecord>>>,
}

impl EpisodeSink for MemorySink {
    fn write(&mut self, record: &EpisodeRecord) -> Result<Option<PathBuf>, StorageError> {
        self.episodes.lock().unwrap().push(record.clone());
        Ok(None)
    }
}

/// Opens a sink from `file://dir`, a bare directory path, or `mem://`.
pub fn open_sink(uri: &str) -> Result<Box<dyn EpisodeSink>, StorageError> {
    if let Some(dir) = uri.strip_prefix("file://") {
        Ok(Box::new(DirSink::new(dir)?))
    } else if uri.starts_with("mem://") {
        Ok(Box::new(MemorySink::default()))
    } else if uri.contains("://") {
        Err(StorageError::Format(format!("unsupported episode sink {uri:?}")))
    } else {
        Ok(Box::new(DirSink::new(uri)?))
    }
}
