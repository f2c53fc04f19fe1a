//! Typed, named-channel spaces and the values that flow through wrapper chains.
//!
//! A [`SpaceDescriptor`] is an ordered tree of named leaves. Observations and
//! actions are [`Channels`] maps whose shape mirrors a descriptor. Channel
//! order is significant: binary encodings and schema digests follow it.

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{path}: {reason}")]
pub struct SpaceError {
    pub path: String,
    pub reason: String,
}

impl SpaceError {
    pub fn new(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Self { path: path.into(), reason: reason.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    U8,
    F32,
}

impl ElementKind {
    pub fn size(self) -> usize {
        match self {
            ElementKind::U8 => 1,
            ElementKind::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Leaf {
    Scalar { low: f64, high: f64, unit: String },
    Vector { dim: usize, low: Vec<f64>, high: Vec<f64> },
    Image { height: usize, width: usize, channels: usize, element: ElementKind },
    Discrete { n: u64 },
    Dict { entries: SpaceDescriptor },
}

impl Leaf {
    pub fn scalar(low: f64, high: f64, unit: &str) -> Self {
        Leaf::Scalar { low, high, unit: unit.to_string() }
    }

    pub fn vector(low: Vec<f64>, high: Vec<f64>) -> Self {
        Leaf::Vector { dim: low.len(), low, high }
    }

    pub fn uniform_vector(dim: usize, low: f64, high: f64) -> Self {
        Leaf::Vector { dim, low: vec![low; dim], high: vec![high; dim] }
    }

    pub fn image(height: usize, width: usize, channels: usize, element: ElementKind) -> Self {
        Leaf::Image { height, width, channels, element }
    }

    fn check(&self, path: &str) -> Result<(), SpaceError> {
        match self {
            Leaf::Scalar { low, high, .. } => {
                if !(low.is_finite() && high.is_finite()) || low > high {
                    return Err(SpaceError::new(path, "scalar bounds must be finite with low <= high"));
                }
            }
            Leaf::Vector { dim, low, high } => {
                if *dim == 0 || low.len() != *dim || high.len() != *dim {
                    return Err(SpaceError::new(path, "vector dim must be >= 1 and match bounds"));
                }
                if low.iter().zip(high).any(|(l, h)| !(l.is_finite() && h.is_finite()) || l > h) {
                    return Err(SpaceError::new(path, "vector bounds must be finite with low <= high"));
                }
            }
            Leaf::Image { height, width, channels, .. } => {
                if *height == 0 || *width == 0 || *channels == 0 {
                    return Err(SpaceError::new(path, "image dims must be >= 1"));
                }
            }
            Leaf::Discrete { n } => {
                if *n == 0 {
                    return Err(SpaceError::new(path, "discrete space needs n >= 1"));
                }
            }
            Leaf::Dict { entries } => entries.check_at(path)?,
        }
        Ok(())
    }

    fn validate(&self, path: &str, value: &Value) -> Result<(), SpaceError> {
        match (self, value) {
            (Leaf::Scalar { low, high, .. }, Value::Scalar(x)) => {
                if !x.is_finite() || x < low || x > high {
                    return Err(SpaceError::new(path, format!("{x} outside [{low}, {high}]")));
                }
            }
            (Leaf::Vector { dim, low, high }, Value::Vector(v)) => {
                if v.len() != *dim {
                    return Err(SpaceError::new(path, format!("expected dim {dim}, got {}", v.len())));
                }
                for (i, x) in v.iter().enumerate() {
                    if !x.is_finite() || *x < low[i] || *x > high[i] {
                        return Err(SpaceError::new(
                            format!("{path}[{i}]"),
                            format!("{x} outside [{}, {}]", low[i], high[i]),
                        ));
                    }
                }
            }
            (Leaf::Image { height, width, channels, element }, Value::Image(img)) => {
                if img.height != *height || img.width != *width || img.channels != *channels {
                    return Err(SpaceError::new(path, "image shape mismatch"));
                }
                if img.data.kind() != *element || img.data.len() != height * width * channels {
                    return Err(SpaceError::new(path, "image buffer mismatch"));
                }
            }
            (Leaf::Discrete { n }, Value::Discrete(k)) => {
                if k >= n {
                    return Err(SpaceError::new(path, format!("{k} outside 0..{n}")));
                }
            }
            (Leaf::Dict { entries }, Value::Dict(ch)) => entries.validate_at(path, ch)?,
            _ => return Err(SpaceError::new(path, "value kind does not match leaf kind")),
        }
        Ok(())
    }

    /// Clamps numeric values into bounds. Returns true if anything changed.
    fn clamp(&self, value: &mut Value) -> bool {
        match (self, value) {
            (Leaf::Scalar { low, high, .. }, Value::Scalar(x)) => {
                let c = x.clamp(*low, *high);
                let changed = c != *x;
                *x = c;
                changed
            }
            (Leaf::Vector { low, high, .. }, Value::Vector(v)) => {
                let mut changed = false;
                for (i, x) in v.iter_mut().enumerate() {
                    if i < low.len() {
                        let c = x.clamp(low[i], high[i]);
                        changed |= c != *x;
                        *x = c;
                    }
                }
                changed
            }
            (Leaf::Discrete { n }, Value::Discrete(k)) => {
                if *k >= *n {
                    *k = n - 1;
                    true
                } else {
                    false
                }
            }
            (Leaf::Dict { entries }, Value::Dict(ch)) => entries.clamp(ch),
            _ => false,
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Value {
        match self {
            Leaf::Scalar { low, high, .. } => Value::Scalar(uniform(rng, *low, *high)),
            Leaf::Vector { low, high, .. } => {
                Value::Vector(low.iter().zip(high).map(|(l, h)| uniform(rng, *l, *h)).collect())
            }
            Leaf::Image { height, width, channels, element } => {
                let n = height * width * channels;
                let data = match element {
                    ElementKind::U8 => ImageData::U8((0..n).map(|_| rng.gen()).collect()),
                    ElementKind::F32 => ImageData::F32((0..n).map(|_| rng.gen()).collect()),
                };
                Value::Image(Image { height: *height, width: *width, channels: *channels, data })
            }
            Leaf::Discrete { n } => Value::Discrete(rng.gen_range(0..*n)),
            Leaf::Dict { entries } => Value::Dict(entries.sample(rng)),
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, low: f64, high: f64) -> f64 {
    if low == high {
        low
    } else {
        low + (high - low) * rng.gen::<f64>()
    }
}

/// Ordered tree of named leaves. Names are unique among siblings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpaceDescriptor {
    entries: IndexMap<String, Leaf>,
}

impl SpaceDescriptor {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builder-style insert. Panics on a duplicate name, which is a programming error.
    pub fn with(mut self, name: &str, leaf: Leaf) -> Self {
        self.insert(name, leaf).expect("duplicate channel name");
        self
    }

    pub fn insert(&mut self, name: &str, leaf: Leaf) -> Result<(), SpaceError> {
        if self.entries.contains_key(name) {
            return Err(SpaceError::new(name, "duplicate channel name"));
        }
        leaf.check(name)?;
        self.entries.insert(name.to_string(), leaf);
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<Leaf> {
        self.entries.shift_remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Leaf> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Leaf)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Structural checks: bounds ordered, dims positive.
    pub fn check(&self) -> Result<(), SpaceError> {
        self.check_at("")
    }

    fn check_at(&self, prefix: &str) -> Result<(), SpaceError> {
        for (name, leaf) in &self.entries {
            leaf.check(&join(prefix, name))?;
        }
        Ok(())
    }

    pub fn validate(&self, channels: &Channels) -> Result<(), SpaceError> {
        self.validate_at("", channels)
    }

    fn validate_at(&self, prefix: &str, channels: &Channels) -> Result<(), SpaceError> {
        for (name, leaf) in &self.entries {
            let path = join(prefix, name);
            let value = channels.get(name).ok_or_else(|| SpaceError::new(&path, "missing channel"))?;
            leaf.validate(&path, value)?;
        }
        if let Some(extra) = channels.names().find(|n| !self.entries.contains_key(*n)) {
            return Err(SpaceError::new(join(prefix, extra), "channel not declared in space"));
        }
        Ok(())
    }

    /// Clamps every bounded channel into range; returns whether any value moved.
    pub fn clamp(&self, channels: &mut Channels) -> bool {
        let mut changed = false;
        for (name, leaf) in &self.entries {
            if let Some(v) = channels.get_mut(name) {
                changed |= leaf.clamp(v);
            }
        }
        changed
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Channels {
        let mut out = Channels::new();
        for (name, leaf) in &self.entries {
            out.insert(name, leaf.sample(rng));
        }
        out
    }

    /// First channel (depth-first, declaration order) where the two spaces differ.
    pub fn first_difference(&self, other: &SpaceDescriptor) -> Option<String> {
        for (name, leaf) in &self.entries {
            match other.entries.get(name) {
                None => return Some(name.clone()),
                Some(o) if o != leaf => return Some(name.clone()),
                _ => {}
            }
        }
        other.entries.keys().find(|k| !self.entries.contains_key(*k)).cloned()
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("space descriptors always serialize")
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_json().as_bytes()).into()
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}/{name}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ImageData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

impl ImageData {
    pub fn kind(&self) -> ElementKind {
        match self {
            ImageData::U8(_) => ElementKind::U8,
            ImageData::F32(_) => ElementKind::F32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ImageData::U8(v) => v.len(),
            ImageData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: ImageData,
}

impl Image {
    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            ImageData::U8(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            ImageData::F32(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Scalar(f64),
    Vector(Vec<f64>),
    Image(Image),
    Discrete(u64),
    Dict(Channels),
}

impl Value {
    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            Value::Scalar(x) => Some(*x),
            _ => None,
        }
    }

    pub fn as_vector(&self) -> Option<&[f64]> {
        match self {
            Value::Vector(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_discrete(&self) -> Option<u64> {
        match self {
            Value::Discrete(k) => Some(*k),
            _ => None,
        }
    }

    pub fn as_image(&self) -> Option<&Image> {
        match self {
            Value::Image(i) => Some(i),
            _ => None,
        }
    }

    pub fn as_dict(&self) -> Option<&Channels> {
        match self {
            Value::Dict(d) => Some(d),
            _ => None,
        }
    }
}

/// Ordered name → value map.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Channels(IndexMap<String, Value>);

impl Channels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, value: Value) -> Self {
        self.insert(name, value);
        self
    }

    pub fn insert(&mut self, name: &str, value: Value) -> Option<Value> {
        self.0.insert(name.to_string(), value)
    }

    pub fn remove(&mut self, name: &str) -> Option<Value> {
        self.0.shift_remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Value> {
        self.0.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Value)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn vector(&self, name: &str) -> Option<&[f64]> {
        self.get(name).and_then(Value::as_vector)
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.get(name).and_then(Value::as_scalar)
    }

    pub fn discrete(&self, name: &str) -> Option<u64> {
        self.get(name).and_then(Value::as_discrete)
    }

    pub fn dict(&self, name: &str) -> Option<&Channels> {
        self.get(name).and_then(Value::as_dict)
    }
}

/// Observation delivered to the agent. Every channel belongs to the same step.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub step: u64,
    pub channels: Channels,
}

impl Observation {
    pub fn new(step: u64, channels: Channels) -> Self {
        Self { step, channels }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Action {
    pub channels: Channels,
}

impl Action {
    pub fn new(channels: Channels) -> Self {
        Self { channels }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn joint_space() -> SpaceDescriptor {
        SpaceDescriptor::new()
            .with("joint_target", Leaf::uniform_vector(3, -1.0, 1.0))
            .with("gripper", Leaf::scalar(0.0, 1.0, ""))
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = joint_space();
        assert!(s.insert("gripper", Leaf::scalar(0.0, 1.0, "")).is_err());
    }

    #[test]
    fn inverted_bounds_rejected() {
        let mut s = SpaceDescriptor::new();
        let err = s.insert("x", Leaf::scalar(1.0, 0.0, "m")).unwrap_err();
        assert_eq!(err.path, "x");
        let err = s.insert("v", Leaf::Vector { dim: 0, low: vec![], high: vec![] }).unwrap_err();
        assert_eq!(err.path, "v");
    }

    #[test]
    fn validate_reports_path() {
        let s = joint_space();
        let ch = Channels::new()
            .with("joint_target", Value::Vector(vec![0.0, 2.0, 0.0]))
            .with("gripper", Value::Scalar(0.5));
        let err = s.validate(&ch).unwrap_err();
        assert_eq!(err.path, "joint_target[1]");

        let missing = Channels::new().with("gripper", Value::Scalar(0.5));
        assert_eq!(s.validate(&missing).unwrap_err().path, "joint_target");
    }

    #[test]
    fn clamp_pulls_into_bounds() {
        let s = joint_space();
        let mut ch = Channels::new()
            .with("joint_target", Value::Vector(vec![-3.0, 0.5, 1.5]))
            .with("gripper", Value::Scalar(0.2));
        assert!(s.clamp(&mut ch));
        assert_eq!(ch.vector("joint_target").unwrap(), &[-1.0, 0.5, 1.0]);
        assert!(s.validate(&ch).is_ok());
        assert!(!s.clamp(&mut ch));
    }

    #[test]
    fn samples_conform() {
        let s = joint_space()
            .with("img", Leaf::image(2, 3, 3, ElementKind::U8))
            .with("mode", Leaf::Discrete { n: 4 })
            .with("nested", Leaf::Dict { entries: joint_space() });
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            s.validate(&s.sample(&mut rng)).unwrap();
        }
    }

    #[test]
    fn digest_tracks_order_and_content() {
        let a = joint_space();
        let b = SpaceDescriptor::new()
            .with("gripper", Leaf::scalar(0.0, 1.0, ""))
            .with("joint_target", Leaf::uniform_vector(3, -1.0, 1.0));
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest(), joint_space().digest());
        let back: SpaceDescriptor = serde_json::from_str(&a.canonical_json()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn first_difference_names_channel() {
        let a = joint_space();
        let b = joint_space().with("cam0_rgb", Leaf::image(4, 4, 3, ElementKind::U8));
        assert_eq!(a.first_difference(&b).as_deref(), Some("cam0_rgb"));
        assert_eq!(a.first_difference(&a), None);
    }
}
