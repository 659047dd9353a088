//! Keypoint detection files.
//!
//! ```json
//! { "fps": 25, "joints": 8,
//!   "frames": [ { "crop": {"cx": 112, "cy": 112, "size": 224},
//!                 "keypoints": [[x_px, y_px, conf], null, ...] } ] }
//! ```
//!
//! A `null` keypoint marks an undetected joint (confidence 0). Pixels map
//! to normalized crop coordinates as `x = 2(x_px − cx)/size` and
//! `y = −2(y_px − cy)/size`, since image rows grow downwards.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Crop {
    pub cx: f64,
    pub cy: f64,
    pub size: f64,
}

impl Crop {
    pub fn to_normalized(&self, px: [f64; 2]) -> [f64; 2] {
        [2.0 * (px[0] - self.cx) / self.size, -2.0 * (px[1] - self.cy) / self.size]
    }

    pub fn to_pixels(&self, p: [f64; 2]) -> [f64; 2] {
        [self.cx + 0.5 * self.size * p[0], self.cy - 0.5 * self.size * p[1]]
    }
}

impl Default for Crop {
    fn default() -> Self {
        Self {
            cx: 112.0,
            cy: 112.0,
            size: 224.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointFrame {
    pub crop: Crop,
    pub keypoints: Vec<Option<[f64; 3]>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointFile {
    pub fps: f64,
    pub joints: usize,
    pub frames: Vec<KeypointFrame>,
}

/// Keypoints in normalized crop coordinates, indexed `[t][joint]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Observations {
    pub fps: f64,
    pub keypoints: Vec<Vec<[f64; 2]>>,
    pub confidence: Vec<Vec<f64>>,
}

impl KeypointFile {
    /// Pixel-space file for normalized keypoints, using one crop for every
    /// frame. Zero-confidence joints are written as `null`.
    pub fn from_normalized(fps: f64, keypoints: &[Vec<[f64; 2]>], confidence: &[Vec<f64>], crop: Crop) -> Self {
        let joints = keypoints.first().map_or(0, |k| k.len());
        let frames = keypoints
            .iter()
            .zip(confidence)
            .map(|(kp, cf)| KeypointFrame {
                crop,
                keypoints: kp
                    .iter()
                    .zip(cf)
                    .map(|(p, &c)| {
                        if c > 0.0 {
                            let px = crop.to_pixels(*p);
                            Some([px[0], px[1], c])
                        } else {
                            None
                        }
                    })
                    .collect(),
            })
            .collect();
        Self { fps, joints, frames }
    }

    pub fn to_observations(&self) -> Result<Observations> {
        if self.frames.is_empty() {
            return Err(Error::Parse("keypoint file has no frames".into()));
        }
        if !(self.fps > 0.0) {
            return Err(Error::Parse(format!("fps must be positive, got {}", self.fps)));
        }
        let mut keypoints = Vec::with_capacity(self.frames.len());
        let mut confidence = Vec::with_capacity(self.frames.len());
        for (f, frame) in self.frames.iter().enumerate() {
            let bad = |msg: String| Error::Frame { frame: f, msg };
            if frame.keypoints.len() != self.joints {
                return Err(bad(format!(
                    "expected {} joints, found {}",
                    self.joints,
                    frame.keypoints.len()
                )));
            }
            let c = frame.crop;
            if !(c.size > 0.0) || !c.cx.is_finite() || !c.cy.is_finite() || !c.size.is_finite() {
                return Err(bad("crop size must be positive and finite".into()));
            }
            let mut kp = Vec::with_capacity(self.joints);
            let mut cf = Vec::with_capacity(self.joints);
            for (j, entry) in frame.keypoints.iter().enumerate() {
                match entry {
                    None => {
                        kp.push([0.0, 0.0]);
                        cf.push(0.0);
                    }
                    Some([x, y, conf]) => {
                        if !x.is_finite() || !y.is_finite() || !(0.0..=1.0).contains(conf) {
                            return Err(bad(format!("joint {j}: invalid keypoint {:?}", [x, y, conf])));
                        }
                        kp.push(c.to_normalized([*x, *y]));
                        cf.push(*conf);
                    }
                }
            }
            keypoints.push(kp);
            confidence.push(cf);
        }
        Ok(Observations {
            fps: self.fps,
            keypoints,
            confidence,
        })
    }
}

/// Parses a keypoint file; frame-level problems are reported with the frame
/// index.
pub fn parse_keypoints(text: &str) -> Result<Observations> {
    let root: serde_json::Value = serde_json::from_str(text)?;
    let fps = root
        .get("fps")
        .and_then(|v| v.as_f64())
        .ok_or_else(|| Error::MissingField("fps".into()))?;
    let joints = root
        .get("joints")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::MissingField("joints".into()))? as usize;
    let frames = root
        .get("frames")
        .and_then(|v| v.as_array())
        .ok_or_else(|| Error::MissingField("frames".into()))?;
    let frames = frames
        .iter()
        .enumerate()
        .map(|(f, v)| {
            serde_json::from_value::<KeypointFrame>(v.clone()).map_err(|e| Error::Frame {
                frame: f,
                msg: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    KeypointFile { fps, joints, frames }.to_observations()
}

pub fn ingest_keypoints(path: impl AsRef<Path>) -> Result<Observations> {
    parse_keypoints(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_round_trip() {
        let c = Crop { cx: 100.0, cy: 50.0, size: 80.0 };
        let p = [0.25, -0.5];
        let back = c.to_normalized(c.to_pixels(p));
        assert!((back[0] - p[0]).abs() < 1e-15 && (back[1] - p[1]).abs() < 1e-15);
        assert_eq!(c.to_normalized([100.0, 10.0]), [0.0, 1.0]);
    }

    #[test]
    fn absent_joint_and_errors() {
        let text = r#"{"fps": 25, "joints": 2, "frames": [
            {"crop": {"cx": 0, "cy": 0, "size": 2}, "keypoints": [[0.5, -0.5, 1.0], null]}]}"#;
        let obs = parse_keypoints(text).unwrap();
        assert_eq!(obs.confidence[0], vec![1.0, 0.0]);
        assert_eq!(obs.keypoints[0][0], [0.5, 0.5]);
        let empty = r#"{"fps": 25, "joints": 2, "frames": []}"#;
        assert!(parse_keypoints(empty).is_err());
        let wrong = r#"{"fps": 25, "joints": 3, "frames": [
            {"crop": {"cx": 0, "cy": 0, "size": 2}, "keypoints": [[0, 0, 1], null]}]}"#;
        assert!(matches!(parse_keypoints(wrong), Err(Error::Frame { frame: 0, .. })));
        let malformed = r#"{"fps": 25, "joints": 1, "frames": [
            {"crop": {"cx": 0, "cy": 0, "size": 2}, "keypoints": [[0, 0, 1]]},
            {"crop": {"cx": 0}, "keypoints": [[0, 0, 1]]}]}"#;
        assert!(matches!(parse_keypoints(malformed), Err(Error::Frame { frame: 1, .. })));
        assert!(parse_keypoints("{not json").is_err());
    }
}
