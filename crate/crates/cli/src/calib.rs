//! Tag-pose files for camera extrinsic calibration.
//!
//! One pose per line, `#` starts a comment:
//!
//! ```text
//! # camera  frame      x    y    z    qw  qx  qy  qz
//! front     base_T_tag 0.5  0.0  0.0  1   0   0   0
//! front     cam_T_tag  0.0  0.1  0.6  1   0   0   0
//! ```
//!
//! Every camera needs both frames.

use std::collections::BTreeMap;

use armstack::se3::{calibrate_camera, Pose};
use nalgebra::Vector3;

#[derive(Debug, Default)]
struct TagPair {
    base_t_tag: Option<Pose>,
    cam_t_tag: Option<Pose>,
}

pub fn parse(text: &str) -> Result<BTreeMap<String, (Pose, Pose)>, String> {
    let mut pairs: BTreeMap<String, TagPair> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |m: &str| format!("line {}: {m}: {raw:?}", i + 1);
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 9 {
            return Err(err("expected camera, frame and 7 numbers"));
        }
        let v: Vec<f64> =
            fields[2..].iter().map(|f| f.parse::<f64>()).collect::<Result<_, _>>().map_err(|_| err("not a number"))?;
        let norm = (v[3] * v[3] + v[4] * v[4] + v[5] * v[5] + v[6] * v[6]).sqrt();
        if !(norm > 1e-9) || v.iter().any(|x| !x.is_finite()) {
            return Err(err("degenerate quaternion"));
        }
        let pose = Pose::from_wxyz(v[3], v[4], v[5], v[6], Vector3::new(v[0], v[1], v[2]));
        let entry = pairs.entry(fields[0].to_string()).or_default();
        let slot = match fields[1] {
            "base_T_tag" => &mut entry.base_t_tag,
            "cam_T_tag" => &mut entry.cam_t_tag,
            _ => return Err(err("frame must be base_T_tag or cam_T_tag")),
        };
        if slot.replace(pose).is_some() {
            return Err(err("duplicate frame"));
        }
    }
    if pairs.is_empty() {
        return Err("no poses in file".into());
    }
    pairs
        .into_iter()
        .map(|(cam, p)| match (p.base_t_tag, p.cam_t_tag) {
            (Some(b), Some(c)) => Ok((cam, (b, c))),
            _ => Err(format!("camera {cam:?} needs both base_T_tag and cam_T_tag")),
        })
        .collect()
}

/// `base_T_cam` per camera.
pub fn calibrate(text: &str) -> Result<BTreeMap<String, Pose>, String> {
    Ok(parse(text)?.into_iter().map(|(cam, (b, c))| (cam, calibrate_camera(&b, &c))).collect())
}
