//! Clip manifests: one JSON file describing a recorded conversation.
//!
//! Relative paths resolve against the manifest's directory. Frames live at
//! `<frames_dir>/<individual id>/<frame:05>.png`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::{load_condition_features, ConditionFeature, FeatureRole, EXPRESSION_FEATURE_DIM, SPEAKER_FEATURE_DIM};
use crate::data::blob::{write_atomic, TensorBlob};
use crate::encoding::{CameraIntrinsics, HeadPose};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadCamera {
    pub focal: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub principal_point: Option<[f64; 2]>,
}

/// Fixed camera for the torso field, given in torso-canonical space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorsoCamera {
    pub focal: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub principal_point: Option<[f64; 2]>,
    pub origin: [f64; 3],
    pub euler: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartCameras {
    pub head: HeadCamera,
    pub torso: TorsoCamera,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub id: String,
    pub part_cameras: PartCameras,
    pub t_near: f64,
    pub t_far: f64,
    pub pose_blob: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleSegment {
    pub start_s: f64,
    pub end_s: f64,
    pub speaker_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioRef {
    pub path: String,
    pub sample_rate: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBlobs {
    /// `T x 512` features of whoever is speaking at each frame.
    pub speaker_audio: String,
    /// Per individual, `T x 64` expression features used while listening.
    pub listener_expression: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipManifest {
    pub fps: f64,
    pub resolution: [usize; 2],
    pub num_frames: usize,
    pub frames_dir: String,
    pub background_image: String,
    pub audio: AudioRef,
    pub individuals: Vec<Individual>,
    pub role_segments: Vec<RoleSegment>,
    pub feature_blobs: FeatureBlobs,
    #[serde(skip)]
    pub root: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Speaker,
    Listener,
    Silent,
}

impl ClipManifest {
    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn duration_s(&self) -> f64 {
        self.num_frames as f64 / self.fps
    }

    pub fn frame_time(&self, frame: usize) -> f64 {
        frame as f64 / self.fps
    }

    pub fn frame_path(&self, id: &str, frame: usize) -> PathBuf {
        self.resolve(&self.frames_dir).join(id).join(format!("{frame:05}.png"))
    }

    pub fn individual(&self, id: &str) -> Result<&Individual> {
        self.individuals
            .iter()
            .find(|i| i.id == id)
            .ok_or_else(|| Error::UnknownIdentity {
                field: "individuals".into(),
                id: id.to_string(),
            })
    }

    pub fn ids(&self) -> Vec<String> {
        self.individuals.iter().map(|i| i.id.clone()).collect()
    }

    pub fn head_intrinsics(&self, ind: &Individual) -> CameraIntrinsics {
        intrinsics(self.resolution, ind.part_cameras.head.focal, ind.part_cameras.head.principal_point)
    }

    pub fn torso_intrinsics(&self, ind: &Individual) -> CameraIntrinsics {
        intrinsics(self.resolution, ind.part_cameras.torso.focal, ind.part_cameras.torso.principal_point)
    }

    pub fn torso_pose(&self, ind: &Individual) -> HeadPose {
        HeadPose {
            euler: ind.part_cameras.torso.euler,
            translation: ind.part_cameras.torso.origin,
        }
    }

    pub fn load_poses(&self, id: &str) -> Result<Vec<HeadPose>> {
        let ind = self.individual(id)?;
        load_pose_blob(&self.resolve(&ind.pose_blob))
    }

    pub fn load_speaker_features(&self) -> Result<ConditionFeature> {
        load_condition_features(
            &self.resolve(&self.feature_blobs.speaker_audio),
            FeatureRole::SpeakerAudio,
            Some(SPEAKER_FEATURE_DIM),
        )
    }

    pub fn load_expression_features(&self, id: &str) -> Result<ConditionFeature> {
        let rel = self
            .feature_blobs
            .listener_expression
            .get(id)
            .ok_or_else(|| Error::invalid(format!("feature_blobs.listener_expression.{id}"), "missing entry"))?;
        load_condition_features(&self.resolve(rel), FeatureRole::ListenerExpression, Some(EXPRESSION_FEATURE_DIM))
    }

    /// Canonical JSON: two-space indentation, field order as declared.
    pub fn to_canonical_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Json {
            field: "manifest".into(),
            source: e,
        })?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_canonical_json()?.as_bytes())
    }

    /// Structural checks that need no file access.
    pub fn validate_structure(&self) -> Result<()> {
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::invalid("fps", "must be positive"));
        }
        if self.resolution[0] == 0 || self.resolution[1] == 0 {
            return Err(Error::invalid("resolution", "width and height must be >= 1"));
        }
        if self.num_frames == 0 {
            return Err(Error::invalid("num_frames", "must be >= 1"));
        }
        if self.individuals.is_empty() {
            return Err(Error::invalid("individuals", "need at least one individual"));
        }
        for (k, ind) in self.individuals.iter().enumerate() {
            let at = |f: &str| format!("individuals[{k}].{f}");
            if ind.id.is_empty() || ind.id.contains(['/', '\\']) || ind.id == "." || ind.id == ".." {
                return Err(Error::invalid(at("id"), format!("`{}` is not a usable id", ind.id)));
            }
            if self.individuals[..k].iter().any(|o| o.id == ind.id) {
                return Err(Error::invalid(at("id"), format!("duplicate id `{}`", ind.id)));
            }
            if !(ind.t_near >= 0.0 && ind.t_near < ind.t_far && ind.t_far.is_finite()) {
                return Err(Error::invalid(at("t_near"), "need 0 <= t_near < t_far"));
            }
            self.head_intrinsics(ind).validate().map_err(|e| e.context(at("part_cameras.head")))?;
            self.torso_intrinsics(ind).validate().map_err(|e| e.context(at("part_cameras.torso")))?;
            self.torso_pose(ind).validate().map_err(|e| e.context(at("part_cameras.torso")))?;
        }
        for (k, seg) in self.role_segments.iter().enumerate() {
            let at = |f: &str| format!("role_segments[{k}].{f}");
            if !(seg.start_s.is_finite() && seg.end_s.is_finite() && seg.start_s >= 0.0 && seg.start_s < seg.end_s) {
                return Err(Error::invalid(at("start_s"), "need 0 <= start_s < end_s"));
            }
            if !self.individuals.iter().any(|i| i.id == seg.speaker_id) {
                return Err(Error::UnknownIdentity {
                    field: at("speaker_id"),
                    id: seg.speaker_id.clone(),
                });
            }
        }
        for (k, w) in self.role_segments.windows(2).enumerate() {
            if w[1].start_s < w[0].end_s {
                return Err(Error::invalid(
                    format!("role_segments[{}]", k + 1),
                    format!(
                        "segment {} [{}, {}) overlaps or precedes segment {} [{}, {})",
                        k + 1,
                        w[1].start_s,
                        w[1].end_s,
                        k,
                        w[0].start_s,
                        w[0].end_s
                    ),
                ));
            }
        }
        Ok(())
    }
}

fn intrinsics(res: [usize; 2], focal: f64, pp: Option<[f64; 2]>) -> CameraIntrinsics {
    let mut c = CameraIntrinsics::centered(focal, res[0], res[1]);
    if let Some(pp) = pp {
        c.principal_point = pp;
    }
    c
}

/// Segments are half-open `[start_s, end_s)`.
pub fn role_at(manifest: &ClipManifest, time_s: f64, individual_id: &str) -> Result<Role> {
    manifest.individual(individual_id)?;
    if !(time_s >= 0.0 && time_s <= manifest.duration_s()) {
        return Err(Error::invalid(
            "time_s",
            format!("{time_s} outside [0, {}]", manifest.duration_s()),
        ));
    }
    Ok(
        match manifest
            .role_segments
            .iter()
            .find(|s| s.start_s <= time_s && time_s < s.end_s)
        {
            Some(seg) if seg.speaker_id == individual_id => Role::Speaker,
            Some(_) => Role::Listener,
            None => Role::Silent,
        },
    )
}

pub fn load_pose_blob(path: &Path) -> Result<Vec<HeadPose>> {
    let blob = TensorBlob::load(path)?;
    poses_from_blob(&blob).map_err(|e| e.context(path.display()))
}

pub fn poses_from_blob(blob: &TensorBlob) -> Result<Vec<HeadPose>> {
    if blob.dims.len() != 2 {
        return Err(Error::dim("pose.ndim", 2, blob.dims.len()));
    }
    if blob.dims[1] != 6 {
        return Err(Error::dim("pose.dim", 6, blob.dims[1]));
    }
    blob.to_f64()
        .chunks_exact(6)
        .enumerate()
        .map(|(t, et)| {
            let p = HeadPose {
                euler: [et[0], et[1], et[2]],
                translation: [et[3], et[4], et[5]],
            };
            p.validate().map_err(|e| e.context(format!("pose[{t}]")))?;
            Ok(p)
        })
        .collect()
}

/// `T x 6` f32 blob. Angles are wrapped after the f32 rounding so stored
/// values stay inside (-pi, pi].
pub fn poses_to_blob(poses: &[HeadPose]) -> Result<TensorBlob> {
    let vals: Vec<f32> = poses
        .iter()
        .flat_map(|p| {
            let et = p.et();
            let mut out = [0f32; 6];
            for (k, v) in et.iter().enumerate() {
                out[k] = *v as f32;
                if k < 3 && (out[k] as f64) > std::f64::consts::PI {
                    out[k] = f32::from_bits(out[k].to_bits() - 1);
                }
            }
            out
        })
        .collect();
    TensorBlob::f32(vec![poses.len(), 6], vals)
}

pub fn save_pose_blob(path: &Path, poses: &[HeadPose]) -> Result<()> {
    poses_to_blob(poses)?.save(path)
}

/// Reads and fully validates a manifest, including every referenced file.
pub fn load_manifest(path: &Path) -> Result<ClipManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut m: ClipManifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        field: "manifest".into(),
        source: e,
    })?;
    m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    m.validate_structure()?;
    validate_files(&m)?;
    Ok(m)
}

fn require_file(m: &ClipManifest, field: &str, rel: &str) -> Result<PathBuf> {
    let p = m.resolve(rel);
    if !p.is_file() {
        return Err(Error::invalid(field, format!("missing file {}", p.display())));
    }
    Ok(p)
}

fn validate_files(m: &ClipManifest) -> Result<()> {
    require_file(m, "background_image", &m.background_image)?;
    require_file(m, "audio.path", &m.audio.path)?;
    require_file(m, "feature_blobs.speaker_audio", &m.feature_blobs.speaker_audio)?;
    let speaker = m.load_speaker_features()?;
    if speaker.frames() != m.num_frames {
        return Err(Error::dim("feature_blobs.speaker_audio", m.num_frames, speaker.frames()));
    }
    for (k, ind) in m.individuals.iter().enumerate() {
        let field = format!("individuals[{k}].pose_blob");
        require_file(m, &field, &ind.pose_blob)?;
        let poses = m.load_poses(&ind.id).map_err(|e| e.context(&field))?;
        if poses.len() != m.num_frames {
            return Err(Error::dim(field, m.num_frames, poses.len()));
        }
        let efield = format!("feature_blobs.listener_expression.{}", ind.id);
        let rel = m
            .feature_blobs
            .listener_expression
            .get(&ind.id)
            .ok_or_else(|| Error::invalid(&efield, "missing entry"))?;
        require_file(m, &efield, rel)?;
        let expr = m.load_expression_features(&ind.id)?;
        if expr.frames() != m.num_frames {
            return Err(Error::dim(efield, m.num_frames, expr.frames()));
        }
        for f in 0..m.num_frames {
            let p = m.frame_path(&ind.id, f);
            if !p.is_file() {
                return Err(Error::invalid(
                    format!("frames_dir.{}.{f:05}", ind.id),
                    format!("missing file {}", p.display()),
                ));
            }
        }
    }
    Ok(())
}

/// Role and condition frame for one individual at each video frame.
///
/// Silent frames use the listener role and hold the expression feature of
/// the most recent listening frame (or the current frame if none yet).
pub fn condition_schedule(m: &ClipManifest, id: &str) -> Result<Vec<(FeatureRole, usize)>> {
    let mut out = Vec::with_capacity(m.num_frames);
    let mut last_listen = None;
    for f in 0..m.num_frames {
        let entry = match role_at(m, m.frame_time(f), id)? {
            Role::Speaker => (FeatureRole::SpeakerAudio, f),
            Role::Listener => {
                last_listen = Some(f);
                (FeatureRole::ListenerExpression, f)
            }
            Role::Silent => (FeatureRole::ListenerExpression, last_listen.unwrap_or(f)),
        };
        out.push(entry);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> ClipManifest {
        let cam = PartCameras {
            head: HeadCamera {
                focal: 10.0,
                principal_point: None,
            },
            torso: TorsoCamera {
                focal: 10.0,
                principal_point: None,
                origin: [0.0, 0.0, -2.0],
                euler: [0.0; 3],
            },
        };
        let ind = |id: &str| Individual {
            id: id.into(),
            part_cameras: cam.clone(),
            t_near: 1.0,
            t_far: 3.0,
            pose_blob: format!("{id}.blob"),
        };
        ClipManifest {
            fps: 10.0,
            resolution: [4, 4],
            num_frames: 30,
            frames_dir: "frames".into(),
            background_image: "bg.png".into(),
            audio: AudioRef {
                path: "a.wav".into(),
                sample_rate: 8000,
            },
            individuals: vec![ind("a"), ind("b")],
            role_segments: vec![
                RoleSegment {
                    start_s: 0.0,
                    end_s: 1.0,
                    speaker_id: "a".into(),
                },
                RoleSegment {
                    start_s: 2.0,
                    end_s: 3.0,
                    speaker_id: "b".into(),
                },
            ],
            feature_blobs: FeatureBlobs {
                speaker_audio: "s.blob".into(),
                listener_expression: [("a".to_string(), "ea.blob".to_string()), ("b".into(), "eb.blob".into())]
                    .into_iter()
                    .collect(),
            },
            root: PathBuf::new(),
        }
    }

    #[test]
    fn roles_partition_timeline() {
        let m = manifest();
        assert_eq!(role_at(&m, 0.5, "a").unwrap(), Role::Speaker);
        assert_eq!(role_at(&m, 0.5, "b").unwrap(), Role::Listener);
        assert_eq!(role_at(&m, 1.5, "a").unwrap(), Role::Silent);
        assert_eq!(role_at(&m, 2.0, "b").unwrap(), Role::Speaker);
        assert!(role_at(&m, 0.5, "c").is_err());
        for k in 0..300 {
            let t = k as f64 * 0.01;
            let ra = role_at(&m, t, "a").unwrap();
            let rb = role_at(&m, t, "b").unwrap();
            let speakers = [ra, rb].iter().filter(|r| **r == Role::Speaker).count();
            assert!(speakers <= 1);
            assert_eq!(ra == Role::Silent, rb == Role::Silent);
        }
    }

    #[test]
    fn silent_frames_hold_last_expression() {
        let m = manifest();
        let s = condition_schedule(&m, "b").unwrap();
        assert_eq!(s[5], (FeatureRole::ListenerExpression, 5));
        assert_eq!(s[15], (FeatureRole::ListenerExpression, 9));
        assert_eq!(s[25], (FeatureRole::SpeakerAudio, 25));
        let s = condition_schedule(&m, "a").unwrap();
        assert_eq!(s[5], (FeatureRole::SpeakerAudio, 5));
        assert_eq!(s[12], (FeatureRole::ListenerExpression, 12));
    }

    #[test]
    fn overlap_names_both_segments() {
        let mut m = manifest();
        m.role_segments[1].start_s = 0.5;
        let err = m.validate_structure().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("segment 1") && msg.contains("segment 0"), "{msg}");
    }

    #[test]
    fn canonical_json_round_trip() {
        let m = manifest();
        let s = m.to_canonical_json().unwrap();
        let back: ClipManifest = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_canonical_json().unwrap(), s);
    }

    #[test]
    fn pose_blob_keeps_angles_in_range() {
        let p = HeadPose::new([std::f64::consts::PI, -3.0, 0.1], [1.0, 2.0, 3.0]).unwrap();
        let back = poses_from_blob(&poses_to_blob(&[p]).unwrap()).unwrap();
        assert!(back[0].euler[0] <= std::f64::consts::PI);
        assert!((back[0].euler[0] - std::f64::consts::PI).abs() < 1e-6);
    }
}
