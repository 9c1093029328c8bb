//! Wrist pose and camera frame streams, and zero-order-hold alignment of
//! every recorded stream onto a uniform grid.

use std::f64::consts::TAU;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::units::{Timestamp, CHANNEL_COUNT, FE_COUNT};

pub const POSE_HZ: u32 = 20;
pub const CAMERA_HZ: u32 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    Joints,
    Torque,
    RobotTargets,
    Contact,
    Pose,
    Camera,
    Event,
}

impl StreamKind {
    pub const ALL: [StreamKind; 7] = [
        StreamKind::Joints,
        StreamKind::Torque,
        StreamKind::RobotTargets,
        StreamKind::Contact,
        StreamKind::Pose,
        StreamKind::Camera,
        StreamKind::Event,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StreamKind::Joints => "joints",
            StreamKind::Torque => "torque",
            StreamKind::RobotTargets => "robot_targets",
            StreamKind::Contact => "contact",
            StreamKind::Pose => "pose",
            StreamKind::Camera => "camera",
            StreamKind::Event => "event",
        }
    }
}

/// Grid time `k / rate_hz`, rounded to the nearest nanosecond.
pub fn grid_time(k: u64, rate_hz: u32) -> Timestamp {
    let rate = u128::from(rate_hz);
    Timestamp(((u128::from(k) * 1_000_000_000 + rate / 2) / rate) as u64)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PoseError {
    #[error("quaternion has zero or non-finite norm")]
    DegenerateQuaternion,
    #[error("non-finite position")]
    NonFinitePosition,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub t: Timestamp,
    /// Meters.
    pub position: [f64; 3],
    /// Unit quaternion `(w, x, y, z)`.
    pub orientation: [f64; 4],
}

impl Pose {
    /// Builds a pose, re-normalizing the quaternion.
    pub fn new(t: Timestamp, position: [f64; 3], orientation: [f64; 4]) -> Result<Pose, PoseError> {
        if !position.iter().all(|v| v.is_finite()) {
            return Err(PoseError::NonFinitePosition);
        }
        let norm = orientation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 1e-12) {
            return Err(PoseError::DegenerateQuaternion);
        }
        Ok(Pose { t, position, orientation: orientation.map(|v| v / norm) })
    }

    pub fn identity(t: Timestamp) -> Pose {
        Pose { t, position: [0.0; 3], orientation: [1.0, 0.0, 0.0, 0.0] }
    }

    /// `[px, py, pz, qw, qx, qy, qz]`.
    pub fn to_array(&self) -> [f64; 7] {
        let [px, py, pz] = self.position;
        let [qw, qx, qy, qz] = self.orientation;
        [px, py, pz, qw, qx, qy, qz]
    }

    pub fn from_array(t: Timestamp, a: [f64; 7]) -> Result<Pose, PoseError> {
        Pose::new(t, [a[0], a[1], a[2]], [a[3], a[4], a[5], a[6]])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PathSpec {
    Static,
    /// Horizontal circle at `height`, with a gentle yaw oscillation.
    Circle {
        radius: f64,
        period_s: f64,
        height: f64,
    },
    /// Lissajous figure-eight in the horizontal plane.
    Figure8 {
        amplitude: f64,
        period_s: f64,
        height: f64,
    },
}

impl Default for PathSpec {
    fn default() -> Self {
        PathSpec::Circle { radius: 0.1, period_s: 8.0, height: 1.0 }
    }
}

/// Deterministic stand-in for an inside-out 6-DoF tracker.
#[derive(Debug, Clone)]
pub struct MockPoseSource {
    path: PathSpec,
    rate_hz: u32,
    phase: f64,
    yaw_amplitude: f64,
    next_k: u64,
}

impl MockPoseSource {
    /// `rate_hz` must be non-zero.
    pub fn new(seed: u64, rate_hz: u32, path: PathSpec) -> MockPoseSource {
        assert!(rate_hz > 0, "pose rate must be > 0");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phase = rng.gen_range(0.0..TAU);
        let yaw_amplitude = rng.gen_range(0.05..0.3);
        MockPoseSource { path, rate_hz, phase, yaw_amplitude, next_k: 0 }
    }

    pub fn sample(&self, t: Timestamp) -> Pose {
        let s = t.as_secs_f64();
        match self.path {
            PathSpec::Static => Pose::identity(t),
            PathSpec::Circle { radius, period_s, height } => {
                let a = TAU * s / period_s + self.phase;
                let yaw = self.yaw_amplitude * a.sin();
                Pose::new(t, [radius * a.cos(), radius * a.sin(), height], yaw_quat(yaw)).expect("finite path")
            }
            PathSpec::Figure8 { amplitude, period_s, height } => {
                let a = TAU * s / period_s + self.phase;
                let yaw = self.yaw_amplitude * (2.0 * a).sin();
                Pose::new(t, [amplitude * a.sin(), amplitude * (2.0 * a).sin() / 2.0, height], yaw_quat(yaw)).expect("finite path")
            }
        }
    }

    /// Emits every pose whose grid time is at or before `now`.
    pub fn poll(&mut self, now: Timestamp) -> Vec<Pose> {
        let mut out = Vec::new();
        loop {
            let t = grid_time(self.next_k, self.rate_hz);
            if t > now {
                break;
            }
            out.push(self.sample(t));
            self.next_k += 1;
        }
        out
    }
}

fn yaw_quat(yaw: f64) -> [f64; 4] {
    [(yaw / 2.0).cos(), 0.0, 0.0, (yaw / 2.0).sin()]
}

/// Poses on `[0, duration)` at `rate_hz`.
pub fn mock_pose_source(seed: u64, rate_hz: u32, path: PathSpec, duration: Timestamp) -> Vec<Pose> {
    let src = MockPoseSource::new(seed, rate_hz, path);
    (0..).map(|k| grid_time(k, rate_hz)).take_while(|t| *t < duration).map(|t| src.sample(t)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CameraFrameRef {
    pub frame_index: u64,
    pub t: Timestamp,
}

/// Frame index counter at a fixed rate.
#[derive(Debug, Clone)]
pub struct CameraClock {
    rate_hz: u32,
    next: u64,
}

impl CameraClock {
    pub fn new(rate_hz: u32) -> CameraClock {
        assert!(rate_hz > 0, "camera rate must be > 0");
        CameraClock { rate_hz, next: 0 }
    }

    pub fn poll(&mut self, now: Timestamp) -> Vec<CameraFrameRef> {
        let mut out = Vec::new();
        loop {
            let t = grid_time(self.next, self.rate_hz);
            if t > now {
                break;
            }
            out.push(CameraFrameRef { frame_index: self.next, t });
            self.next += 1;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub t: Timestamp,
    pub value: T,
}

/// Every recorded stream of an episode, each time-ordered.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StreamSet {
    pub joints: Vec<Stamped<[i64; CHANNEL_COUNT]>>,
    pub robot_targets: Vec<Stamped<Vec<f64>>>,
    pub torque: Vec<Stamped<[f64; FE_COUNT]>>,
    pub contact: Vec<Stamped<[bool; FE_COUNT]>>,
    pub pose: Vec<Pose>,
    pub camera: Vec<CameraFrameRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    pub rate_hz: u32,
    pub max_gap_ms: u64,
    /// Streams that must be non-empty. Non-empty optional streams are still
    /// held and gap-checked.
    pub require: Vec<StreamKind>,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig { rate_hz: POSE_HZ, max_gap_ms: 150, require: vec![StreamKind::Joints] }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AlignError {
    #[error("mandatory stream {0:?} is empty")]
    EmptyStream(StreamKind),
    #[error("stream {0:?} is not time-ordered")]
    Unordered(StreamKind),
    #[error("rate must be > 0")]
    ZeroRate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedSample {
    pub t: Timestamp,
    pub joints: [i64; CHANNEL_COUNT],
    pub robot_targets: Option<Vec<f64>>,
    pub tau: Option<[f64; FE_COUNT]>,
    pub contact: Option<[bool; FE_COUNT]>,
    pub pose: Option<Pose>,
    pub frame_index: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub samples: Vec<AlignedSample>,
    /// Grid rows omitted because some stream was missing or stale.
    pub dropped: usize,
}

/// Zero-order hold over one time-ordered stream.
struct Hold<'a, T> {
    items: &'a [T],
    stamp: fn(&T) -> Timestamp,
    cursor: usize,
}

impl<'a, T> Hold<'a, T> {
    fn new(items: &'a [T], stamp: fn(&T) -> Timestamp, kind: StreamKind) -> Result<Self, AlignError> {
        if items.windows(2).any(|w| stamp(&w[1]) < stamp(&w[0])) {
            return Err(AlignError::Unordered(kind));
        }
        Ok(Hold { items, stamp, cursor: 0 })
    }

    /// Latest sample at or before `t`. Query times must be non-decreasing.
    fn at(&mut self, t: Timestamp) -> Option<&'a T> {
        while self.cursor < self.items.len() && (self.stamp)(&self.items[self.cursor]) <= t {
            self.cursor += 1;
        }
        self.cursor.checked_sub(1).map(|i| &self.items[i])
    }
}

enum Held<'a, T> {
    Absent,
    Fresh(&'a T),
    Stale,
}

impl<'a, T> Held<'a, T> {
    fn fresh(self) -> Option<&'a T> {
        match self {
            Held::Fresh(v) => Some(v),
            _ => None,
        }
    }
}

fn hold<'a, T>(h: &mut Option<Hold<'a, T>>, t: Timestamp, max_gap: u64) -> Held<'a, T> {
    let Some(h) = h.as_mut() else { return Held::Absent };
    let stamp = h.stamp;
    match h.at(t) {
        Some(v) if t.0 - stamp(v).0 <= max_gap => Held::Fresh(v),
        _ => Held::Stale,
    }
}

pub fn align(streams: &StreamSet, cfg: &AlignConfig) -> Result<Alignment, AlignError> {
    if cfg.rate_hz == 0 {
        return Err(AlignError::ZeroRate);
    }
    let lengths = [
        (StreamKind::Joints, streams.joints.len()),
        (StreamKind::RobotTargets, streams.robot_targets.len()),
        (StreamKind::Torque, streams.torque.len()),
        (StreamKind::Contact, streams.contact.len()),
        (StreamKind::Pose, streams.pose.len()),
        (StreamKind::Camera, streams.camera.len()),
    ];
    for (kind, len) in lengths {
        if len == 0 && (cfg.require.contains(&kind) || kind == StreamKind::Joints) {
            return Err(AlignError::EmptyStream(kind));
        }
    }

    fn opt<T>(v: &[T], stamp: fn(&T) -> Timestamp, kind: StreamKind) -> Result<Option<Hold<'_, T>>, AlignError> {
        if v.is_empty() {
            Ok(None)
        } else {
            Hold::new(v, stamp, kind).map(Some)
        }
    }
    let mut joints = opt(&streams.joints, |s| s.t, StreamKind::Joints)?;
    let mut targets = opt(&streams.robot_targets, |s| s.t, StreamKind::RobotTargets)?;
    let mut torque = opt(&streams.torque, |s| s.t, StreamKind::Torque)?;
    let mut contact = opt(&streams.contact, |s| s.t, StreamKind::Contact)?;
    let mut pose = opt(&streams.pose, |p| p.t, StreamKind::Pose)?;
    let mut camera = opt(&streams.camera, |c| c.t, StreamKind::Camera)?;

    let first = streams.joints[0].t;
    let last = streams.joints[streams.joints.len() - 1].t;
    let rate = u128::from(cfg.rate_hz);
    // First k with grid_time(k) >= first.
    let mut k = ((u128::from(first.0) * rate) / 1_000_000_000) as u64;
    while grid_time(k, cfg.rate_hz) < first {
        k += 1;
    }
    let max_gap = cfg.max_gap_ms * 1_000_000;
    let mut out = Alignment::default();

    loop {
        let t = grid_time(k, cfg.rate_hz);
        if t > last {
            break;
        }
        k += 1;
        let j = hold(&mut joints, t, max_gap);
        let rt = hold(&mut targets, t, max_gap);
        let tq = hold(&mut torque, t, max_gap);
        let ct = hold(&mut contact, t, max_gap);
        let ps = hold(&mut pose, t, max_gap);
        let cam = hold(&mut camera, t, max_gap);
        let stale = [
            matches!(j, Held::Stale),
            matches!(rt, Held::Stale),
            matches!(tq, Held::Stale),
            matches!(ct, Held::Stale),
            matches!(ps, Held::Stale),
            matches!(cam, Held::Stale),
        ];
        if stale.iter().any(|s| *s) {
            out.dropped += 1;
            continue;
        }
        let Held::Fresh(j) = j else { unreachable!("joints stream is mandatory") };
        out.samples.push(AlignedSample {
            t,
            joints: j.value,
            robot_targets: rt.fresh().map(|s| s.value.clone()),
            tau: tq.fresh().map(|s| s.value),
            contact: ct.fresh().map(|s| s.value),
            pose: ps.fresh().copied(),
            frame_index: cam.fresh().map(|c| c.frame_index),
        });
    }
    Ok(out)
}

/// CSV column names for [`write_csv`].
pub fn csv_columns(joint_names: &[String]) -> Vec<String> {
    let mut cols = vec!["t_ns".to_string()];
    cols.extend((0..CHANNEL_COUNT).map(|i| format!("q{i}")));
    cols.extend((0..FE_COUNT).map(|i| format!("tau{i}")));
    cols.extend((0..FE_COUNT).map(|i| format!("contact{i}")));
    cols.extend(joint_names.iter().cloned());
    cols.extend(["px", "py", "pz", "qw", "qx", "qy", "qz", "frame_index"].map(String::from));
    cols
}

/// Writes aligned samples as CSV; absent optional fields are empty cells.
pub fn write_csv<W: Write>(samples: &[AlignedSample], joint_names: &[String], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(csv_columns(joint_names))?;
    for s in samples {
        let mut row = vec![s.t.0.to_string()];
        row.extend(s.joints.iter().map(|q| q.to_string()));
        match s.tau {
            Some(t) => row.extend(t.iter().map(|v| v.to_string())),
            None => row.extend(std::iter::repeat_n(String::new(), FE_COUNT)),
        }
        match s.contact {
            Some(c) => row.extend(c.iter().map(|v| u8::from(*v).to_string())),
            None => row.extend(std::iter::repeat_n(String::new(), FE_COUNT)),
        }
        match &s.robot_targets {
            Some(a) => row.extend(a.iter().map(|v| v.to_string())),
            None => row.extend(std::iter::repeat_n(String::new(), joint_names.len())),
        }
        match s.pose {
            Some(p) => row.extend(p.to_array().iter().map(|v| v.to_string())),
            None => row.extend(std::iter::repeat_n(String::new(), 7)),
        }
        row.push(s.frame_index.map(|f| f.to_string()).unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MS: u64 = 1_000_000;

    fn joints_at(rate_hz: u32, n: u64) -> Vec<Stamped<[i64; 6]>> {
        (0..n).map(|k| Stamped { t: grid_time(k, rate_hz), value: [k as i64; 6] }).collect()
    }

    #[test]
    fn grid_rounding() {
        assert_eq!(grid_time(1, 30), Timestamp(33_333_333));
        assert_eq!(grid_time(2, 30), Timestamp(66_666_667));
        assert_eq!(grid_time(3, 30), Timestamp(100_000_000));
    }

    #[test]
    fn static_path_is_identity() {
        let poses = mock_pose_source(1, 20, PathSpec::Static, Timestamp(1_000_000_000));
        assert_eq!(poses.len(), 20);
        assert!(poses.iter().all(|p| p.position == [0.0; 3] && p.orientation == [1.0, 0.0, 0.0, 0.0]));
        assert_eq!(poses[3].t, Timestamp(150 * MS));
    }

    #[test]
    fn same_seed_same_stream() {
        let a = mock_pose_source(9, 20, PathSpec::default(), Timestamp(5_000_000_000));
        let b = mock_pose_source(9, 20, PathSpec::default(), Timestamp(5_000_000_000));
        let c = mock_pose_source(10, 20, PathSpec::default(), Timestamp(5_000_000_000));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn circle_radius_and_unit_quaternions() {
        let path = PathSpec::Circle { radius: 0.1, period_s: 3.0, height: 0.9 };
        for p in mock_pose_source(4, 20, path, Timestamp(10_000_000_000)) {
            let r = (p.position[0].powi(2) + p.position[1].powi(2)).sqrt();
            assert!((r - 0.1).abs() <= 1e-9);
            let n: f64 = p.orientation.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn pose_renormalized_and_degenerate_rejected() {
        let p = Pose::new(Timestamp(0), [0.0; 3], [2.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(p.orientation, [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(Pose::new(Timestamp(0), [0.0; 3], [0.0; 4]), Err(PoseError::DegenerateQuaternion));
        assert!(Pose::new(Timestamp(0), [f64::NAN, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn polling_sources() {
        let mut cam = CameraClock::new(30);
        let mut total = 0;
        for cycle in 0..6000u64 {
            total += cam.poll(Timestamp::from_cycle(cycle)).len();
        }
        assert_eq!(total, 1800);
        let mut pose = MockPoseSource::new(0, 20, PathSpec::Static);
        let total: usize = (0..6000u64).map(|c| pose.poll(Timestamp::from_cycle(c)).len()).sum();
        assert_eq!(total, 1200);
    }

    #[test]
    fn zoh_at_grid_points() {
        let streams = StreamSet {
            joints: joints_at(100, 30),
            pose: mock_pose_source(0, 20, PathSpec::default(), Timestamp(300 * MS)),
            ..Default::default()
        };
        let a = align(&streams, &AlignConfig::default()).unwrap();
        assert_eq!(a.dropped, 0);
        let row = a.samples.iter().find(|s| s.t == Timestamp(100 * MS)).unwrap();
        assert_eq!(row.joints, [10; 6]);
        assert_eq!(row.pose.unwrap().t, Timestamp(100 * MS));
        assert!(a.samples.iter().all(|s| s.t.0 % (50 * MS) == 0));
    }

    #[test]
    fn single_stream_native_rate_is_identity() {
        let joints = joints_at(100, 250);
        let a = align(&StreamSet { joints: joints.clone(), ..Default::default() }, &AlignConfig { rate_hz: 100, ..Default::default() })
            .unwrap();
        assert_eq!(a.samples.len(), joints.len());
        for (s, j) in a.samples.iter().zip(&joints) {
            assert_eq!((s.t, s.joints), (j.t, j.value));
            assert!(s.pose.is_none() && s.tau.is_none());
        }
    }

    #[test]
    fn pose_gap_drops_rows() {
        let mut pose = mock_pose_source(0, 20, PathSpec::Static, Timestamp(3000 * MS));
        // Remove samples strictly between 1.0 s and 1.3 s: a 300 ms gap.
        pose.retain(|p| !(p.t > Timestamp(1000 * MS) && p.t < Timestamp(1300 * MS)));
        let streams = StreamSet { joints: joints_at(100, 300), pose: pose.clone(), ..Default::default() };
        let a = align(&streams, &AlignConfig::default()).unwrap();
        // Oracle: count grid rows whose latest pose is older than 150 ms.
        let expected = (0..60u64)
            .map(|k| k * 50 * MS)
            .filter(|t| {
                let latest = pose.iter().filter(|p| p.t.0 <= *t).map(|p| p.t.0).max().unwrap();
                t - latest > 150 * MS
            })
            .count();
        assert_eq!(expected, 2);
        assert_eq!(a.dropped, expected);
        assert_eq!(a.samples.len() + a.dropped, 60);
    }

    #[test]
    fn causal_alignment() {
        let streams = StreamSet {
            joints: joints_at(100, 500),
            pose: mock_pose_source(2, 20, PathSpec::default(), Timestamp(5000 * MS)),
            camera: (0..150).map(|k| CameraFrameRef { frame_index: k, t: grid_time(k, 30) }).collect(),
            ..Default::default()
        };
        let a = align(&streams, &AlignConfig { rate_hz: 30, ..Default::default() }).unwrap();
        for s in &a.samples {
            assert!(s.pose.unwrap().t <= s.t);
            assert!(grid_time(s.frame_index.unwrap(), 30) <= s.t);
            assert!(grid_time(s.joints[0] as u64, 100) <= s.t);
        }
    }

    #[test]
    fn errors() {
        assert_eq!(align(&StreamSet::default(), &AlignConfig::default()), Err(AlignError::EmptyStream(StreamKind::Joints)));
        let cfg = AlignConfig { require: vec![StreamKind::Joints, StreamKind::Pose], ..Default::default() };
        let s = StreamSet { joints: joints_at(100, 5), ..Default::default() };
        assert_eq!(align(&s, &cfg), Err(AlignError::EmptyStream(StreamKind::Pose)));
        let mut j = joints_at(100, 5);
        j.swap(1, 3);
        let s = StreamSet { joints: j, ..Default::default() };
        assert_eq!(align(&s, &AlignConfig::default()), Err(AlignError::Unordered(StreamKind::Joints)));
    }

    #[test]
    fn csv_layout() {
        let a = align(&StreamSet { joints: joints_at(100, 3), ..Default::default() }, &AlignConfig { rate_hz: 100, ..Default::default() })
            .unwrap();
        let mut buf = Vec::new();
        write_csv(&a.samples, &["j0".to_string()], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap().split(',').count(), 1 + 6 + 5 + 5 + 1 + 7 + 1);
        assert!(lines.next().unwrap().starts_with("0,0,0,0,0,0,0,,"));
    }
}
