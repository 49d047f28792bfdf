//! Motion feature representation, body-part partitioning, the binary motion
//! file format and a deterministic synthetic clip generator.
//!
//! Frames use the 263-dimensional layout of HumanML3D:
//!
//! | block          | start | len | owner            |
//! |----------------|-------|-----|------------------|
//! | root_rot_vel   | 0     | 1   | root             |
//! | root_lin_vel   | 1     | 2   | root             |
//! | root_height    | 3     | 1   | root             |
//! | joint position | 4     | 63  | joints 1..22     |
//! | joint rotation | 67    | 126 | joints 1..22     |
//! | joint velocity | 193   | 66  | joints 0..22     |
//! | foot contact   | 259   | 4   | l_ankle, l_foot, r_ankle, r_foot |

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const JOINT_COUNT: usize = 22;
pub const FEATURE_DIM: usize = 263;
pub const DEFAULT_FPS: f32 = 20.0;

const MOTION_MAGIC: &[u8; 4] = b"CMA1";
const MOTION_VERSION: u32 = 1;

/// SMPL joint names in HumanML3D order.
pub const JOINT_NAMES: [&str; JOINT_COUNT] = [
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
];

#[derive(Debug, Error)]
pub enum MotionError {
    #[error("motion must have at least one frame")]
    Empty,
    #[error("non-finite value at frame {frame}, feature {feature}")]
    NonFinite { frame: usize, feature: usize },
    #[error("expected {expected} columns, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("frame rate must be positive and finite, got {0}")]
    BadFps(f32),
    #[error("unknown body part `{0}`")]
    UnknownPart(String),
    #[error("bad magic in motion file: {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported motion file version {0}")]
    BadVersion(u32),
    #[error("truncated motion file: header declares {expected} bytes of payload, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MotionError + '_ {
    move |source| MotionError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Start/length of one contiguous block of the feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub start: usize,
    pub len: usize,
}

impl Block {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureLayout {
    pub joint_count: usize,
    pub feature_dim: usize,
    pub root_rot_vel: Block,
    pub root_lin_vel: Block,
    pub root_height: Block,
    pub positions: Block,
    pub rotations: Block,
    pub velocities: Block,
    pub foot_contact: Block,
}

impl FeatureLayout {
    /// Feature indices of the local position of `joint` (root has none).
    pub fn position_indices(&self, joint: usize) -> Option<std::ops::Range<usize>> {
        (1..self.joint_count).contains(&joint).then(|| {
            let s = self.positions.start + (joint - 1) * 3;
            s..s + 3
        })
    }

    pub fn rotation_indices(&self, joint: usize) -> Option<std::ops::Range<usize>> {
        (1..self.joint_count).contains(&joint).then(|| {
            let s = self.rotations.start + (joint - 1) * 6;
            s..s + 6
        })
    }

    pub fn velocity_indices(&self, joint: usize) -> Option<std::ops::Range<usize>> {
        (joint < self.joint_count).then(|| {
            let s = self.velocities.start + joint * 3;
            s..s + 3
        })
    }

    /// Foot-contact channels owned by `joint` (left/right ankle and foot).
    pub fn contact_index(&self, joint: usize) -> Option<usize> {
        let slot = match JOINT_NAMES[joint] {
            "left_ankle" => 0,
            "left_foot" => 1,
            "right_ankle" => 2,
            "right_foot" => 3,
            _ => return None,
        };
        Some(self.foot_contact.start + slot)
    }

    fn blocks(&self) -> [Block; 7] {
        [
            self.root_rot_vel,
            self.root_lin_vel,
            self.root_height,
            self.positions,
            self.rotations,
            self.velocities,
            self.foot_contact,
        ]
    }
}

/// The canonical HumanML3D layout.
pub fn standard_layout() -> FeatureLayout {
    let j = JOINT_COUNT;
    let layout = FeatureLayout {
        joint_count: j,
        feature_dim: FEATURE_DIM,
        root_rot_vel: Block { start: 0, len: 1 },
        root_lin_vel: Block { start: 1, len: 2 },
        root_height: Block { start: 3, len: 1 },
        positions: Block { start: 4, len: (j - 1) * 3 },
        rotations: Block { start: 4 + (j - 1) * 3, len: (j - 1) * 6 },
        velocities: Block { start: 4 + (j - 1) * 9, len: j * 3 },
        foot_contact: Block { start: 4 + (j - 1) * 9 + j * 3, len: 4 },
    };
    debug_assert_eq!(
        layout.blocks().iter().map(|b| b.len).sum::<usize>(),
        FEATURE_DIM
    );
    layout
}

/// Body part id. Ordering is contractual: LU, RU, LL, RL.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Part {
    LU,
    RU,
    LL,
    RL,
}

impl Part {
    pub const ALL: [Part; 4] = [Part::LU, Part::RU, Part::LL, Part::RL];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Part> {
        Part::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Part::LU => "LU",
            Part::RU => "RU",
            Part::LL => "LL",
            Part::RL => "RL",
        }
    }
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Part {
    type Err = MotionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "LU" => Ok(Part::LU),
            "RU" => Ok(Part::RU),
            "LL" => Ok(Part::LL),
            "RL" => Ok(Part::RL),
            _ => Err(MotionError::UnknownPart(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionScheme {
    pub joints: [Vec<&'static str>; 4],
    pub feature_indices: [Vec<usize>; 4],
}

impl PartitionScheme {
    pub fn joints_of(&self, part: Part) -> &[&'static str] {
        &self.joints[part.index()]
    }

    pub fn indices_of(&self, part: Part) -> &[usize] {
        &self.feature_indices[part.index()]
    }

    pub fn part_dim(&self, part: Part) -> usize {
        self.feature_indices[part.index()].len()
    }

    pub fn part_dims(&self) -> [usize; 4] {
        Part::ALL.map(|p| self.part_dim(p))
    }

    /// Parts whose joint list contains `joint`.
    pub fn parts_of_joint(&self, joint: &str) -> Vec<Part> {
        Part::ALL
            .into_iter()
            .filter(|p| self.joints[p.index()].contains(&joint))
            .collect()
    }
}

/// Four-part body partition with shared torso (upper) and pelvis (lower).
pub fn four_part_partition(layout: &FeatureLayout) -> PartitionScheme {
    let joints = [
        vec![
            "left_collar",
            "left_shoulder",
            "left_elbow",
            "left_wrist",
            "spine3",
            "spine2",
            "spine1",
            "head",
            "neck",
        ],
        vec![
            "right_collar",
            "right_shoulder",
            "right_elbow",
            "right_wrist",
            "spine3",
            "spine2",
            "spine1",
            "head",
            "neck",
        ],
        vec!["left_ankle", "left_foot", "left_hip", "pelvis", "left_knee"],
        vec!["right_ankle", "right_foot", "right_hip", "pelvis", "right_knee"],
    ];
    let feature_indices = joints.clone().map(|names| {
        let mut idx = Vec::new();
        for name in names {
            let j = JOINT_NAMES.iter().position(|n| *n == name).expect("known joint");
            if j == 0 {
                for b in [layout.root_rot_vel, layout.root_lin_vel, layout.root_height] {
                    idx.extend(b.range());
                }
            }
            idx.extend(layout.position_indices(j).into_iter().flatten());
            idx.extend(layout.rotation_indices(j).into_iter().flatten());
            idx.extend(layout.velocity_indices(j).into_iter().flatten());
            idx.extend(layout.contact_index(j));
        }
        idx.sort_unstable();
        idx.dedup();
        idx
    });
    PartitionScheme {
        joints,
        feature_indices,
    }
}

/// One motion clip: `len × 263` frames stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    frames: Vec<f32>,
    len: usize,
    dim: usize,
    pub fps: f32,
    pub text: Option<String>,
}

impl MotionSequence {
    pub fn new(frames: Vec<f32>, dim: usize, fps: f32) -> Result<Self, MotionError> {
        if dim == 0 || frames.is_empty() || !frames.len().is_multiple_of(dim) {
            if frames.is_empty() {
                return Err(MotionError::Empty);
            }
            return Err(MotionError::DimensionMismatch {
                expected: dim,
                actual: frames.len(),
            });
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(MotionError::BadFps(fps));
        }
        if let Some(i) = frames.iter().position(|v| !v.is_finite()) {
            return Err(MotionError::NonFinite {
                frame: i / dim,
                feature: i % dim,
            });
        }
        Ok(Self {
            len: frames.len() / dim,
            frames,
            dim,
            fps,
            text: None,
        })
    }

    pub fn zeros(len: usize, fps: f32) -> Result<Self, MotionError> {
        Self::new(vec![0.0; len * FEATURE_DIM], FEATURE_DIM, fps)
    }

    pub fn with_text(mut self, text: impl Into<String>) -> Self {
        self.text = Some(text.into());
        self
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * self.dim..(t + 1) * self.dim]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f32] {
        &mut self.frames[t * self.dim..(t + 1) * self.dim]
    }

    pub fn get(&self, t: usize, c: usize) -> f32 {
        self.frames[t * self.dim + c]
    }

    pub fn data(&self) -> &[f32] {
        &self.frames
    }

    /// Frames `range` as a new sequence (caption kept).
    pub fn slice_frames(&self, range: std::ops::Range<usize>) -> Result<Self, MotionError> {
        let data = self.frames[range.start * self.dim..range.end * self.dim].to_vec();
        let mut m = Self::new(data, self.dim, self.fps)?;
        m.text = self.text.clone();
        Ok(m)
    }

    fn require_standard(&self) -> Result<(), MotionError> {
        if self.dim != FEATURE_DIM {
            return Err(MotionError::DimensionMismatch {
                expected: FEATURE_DIM,
                actual: self.dim,
            });
        }
        Ok(())
    }
}

/// Columns of one body part, `len × D_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartMotion {
    pub part: Part,
    pub frames: Vec<f32>,
    pub len: usize,
    pub dim: usize,
}

impl PartMotion {
    pub fn get(&self, t: usize, c: usize) -> f32 {
        self.frames[t * self.dim + c]
    }
}

pub fn slice_part(
    m: &MotionSequence,
    part: Part,
    scheme: &PartitionScheme,
) -> Result<PartMotion, MotionError> {
    m.require_standard()?;
    let idx = scheme.indices_of(part);
    let mut frames = Vec::with_capacity(m.len() * idx.len());
    for t in 0..m.len() {
        let row = m.frame(t);
        frames.extend(idx.iter().map(|&i| row[i]));
    }
    Ok(PartMotion {
        part,
        frames,
        len: m.len(),
        dim: idx.len(),
    })
}

/// Same as [`slice_part`] but accepts a textual part id.
pub fn slice_part_named(
    m: &MotionSequence,
    part: &str,
    scheme: &PartitionScheme,
) -> Result<PartMotion, MotionError> {
    slice_part(m, part.parse()?, scheme)
}

/// Mean planar root speed in units/frame.
pub fn mean_root_speed(m: &MotionSequence) -> f64 {
    let lin = standard_layout().root_lin_vel.start;
    let total: f64 = (0..m.len())
        .map(|t| {
            let vx = m.get(t, lin) as f64;
            let vz = m.get(t, lin + 1) as f64;
            vx.hypot(vz)
        })
        .sum();
    total / m.len() as f64
}

pub fn write_motion(m: &MotionSequence, path: &Path) -> Result<(), MotionError> {
    let mut buf = Vec::with_capacity(20 + m.frames.len() * 4);
    buf.extend_from_slice(MOTION_MAGIC);
    buf.extend_from_slice(&MOTION_VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.len as u32).to_le_bytes());
    buf.extend_from_slice(&(m.dim as u32).to_le_bytes());
    buf.extend_from_slice(&m.fps.to_le_bytes());
    for v in &m.frames {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))?;
    let side = caption_path(path);
    match &m.text {
        Some(text) => fs::write(&side, text).map_err(io_err(&side))?,
        None if side.exists() => fs::remove_file(&side).map_err(io_err(&side))?,
        None => {}
    }
    Ok(())
}

pub fn read_motion(path: &Path) -> Result<MotionSequence, MotionError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut m = decode_motion(&bytes)?;
    let side = caption_path(path);
    if side.exists() {
        m.text = Some(fs::read_to_string(&side).map_err(io_err(&side))?);
    }
    Ok(m)
}

fn caption_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".txt");
    PathBuf::from(s)
}

pub fn decode_motion(bytes: &[u8]) -> Result<MotionSequence, MotionError> {
    if bytes.len() < 20 {
        let mut magic = [0u8; 4];
        let n = bytes.len().min(4);
        magic[..n].copy_from_slice(&bytes[..n]);
        if &magic != MOTION_MAGIC {
            return Err(MotionError::BadMagic(magic));
        }
        return Err(MotionError::Truncated {
            expected: 20,
            actual: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if &magic != MOTION_MAGIC {
        return Err(MotionError::BadMagic(magic));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != MOTION_VERSION {
        return Err(MotionError::BadVersion(version));
    }
    let len = u32_at(8) as usize;
    let dim = u32_at(12) as usize;
    let fps = f32::from_le_bytes(bytes[16..20].try_into().unwrap());
    let expected = len * dim * 4;
    let payload = &bytes[20..];
    if payload.len() != expected {
        return Err(MotionError::Truncated {
            expected,
            actual: payload.len(),
        });
    }
    let frames = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    MotionSequence::new(frames, dim, fps)
}

/// Parameters of the synthetic generator, exposed so tests can bound it.
#[derive(Debug, Clone)]
pub struct SyntheticParams {
    /// Angular frequency (radians/frame) of the four clip-level sources.
    pub freqs: [f64; 4],
    pub phases: [f64; 4],
}

pub const SYNTH_MIN_FREQ: f64 = 0.05;
pub const SYNTH_MAX_FREQ: f64 = 0.35;
pub const SYNTH_MIN_AMP: f64 = 0.2;
pub const SYNTH_MAX_AMP: f64 = 0.6;

/// Fixed per-channel amplitude and phase offset for source `k`. Shared by
/// every clip so the corpus has the cross-channel correlation of real motion.
pub fn synthetic_channel_mix(channel: usize, k: usize) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + (channel * 4 + k) as u64);
    let amp = rng.gen_range(SYNTH_MIN_AMP..SYNTH_MAX_AMP);
    let offset = rng.gen_range(0.0..std::f64::consts::TAU);
    (amp, offset)
}

pub fn synthetic_params(seed: u64) -> SyntheticParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut freqs = [0.0; 4];
    let mut phases = [0.0; 4];
    for k in 0..4 {
        freqs[k] = rng.gen_range(SYNTH_MIN_FREQ..SYNTH_MAX_FREQ);
        phases[k] = rng.gen_range(0.0..std::f64::consts::TAU);
    }
    SyntheticParams { freqs, phases }
}

/// Smooth deterministic clip: each channel is a sum of four sinusoids whose
/// frequencies and phases derive from `seed`.
pub fn synthetic_motion(seed: u64, len: usize) -> Result<MotionSequence, MotionError> {
    if len < 1 {
        return Err(MotionError::Empty);
    }
    let p = synthetic_params(seed);
    let mix: Vec<[(f64, f64); 4]> = (0..FEATURE_DIM)
        .map(|c| [0, 1, 2, 3].map(|k| synthetic_channel_mix(c, k)))
        .collect();
    let mut frames = Vec::with_capacity(len * FEATURE_DIM);
    for t in 0..len {
        for ch in &mix {
            let v: f64 = (0..4)
                .map(|k| ch[k].0 * (p.freqs[k] * t as f64 + p.phases[k] + ch[k].1).sin())
                .sum();
            frames.push(v as f32);
        }
    }
    Ok(MotionSequence::new(frames, FEATURE_DIM, DEFAULT_FPS)?
        .with_text(format!("synthetic clip {seed}")))
}
