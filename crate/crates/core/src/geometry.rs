//! Pinhole projection of radar points into depth images aligned with the
//! thermal camera.
//!
//! A radar point `p` is mapped to the camera frame by the extrinsic `T = [R|t]`
//! and onto the image by the intrinsic `K`; `(u, v)` is the projected pixel
//! after division by the camera-frame depth.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Matrix3x4, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::tensor::{NdArray, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl RadarPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Continuous pixel location plus camera-frame depth of a projected point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl Projection {
    /// Nearest pixel `(column, row)`.
    pub fn pixel(&self) -> (usize, usize) {
        ((self.u + 0.5).floor() as usize, (self.v + 0.5).floor() as usize)
    }
}

/// Thermal camera intrinsics plus the radar-to-camera extrinsic transform.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorRig {
    pub intrinsic: Matrix3<f64>,
    /// Radar frame to camera frame, `[R | t]`.
    pub extrinsic: Matrix3x4<f64>,
    pub width: usize,
    pub height: usize,
    /// Radar returns beyond this depth are discarded; also the depth
    /// normalization constant for the network input.
    pub max_range_m: f64,
}

impl SensorRig {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        extrinsic: Matrix3x4<f64>,
        width: usize,
        height: usize,
        max_range_m: f64,
    ) -> Result<Self> {
        let intrinsic = Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0);
        let rig = Self {
            intrinsic,
            extrinsic,
            width,
            height,
            max_range_m,
        };
        rig.validate()?;
        Ok(rig)
    }

    /// Rig used by the synthetic scene generator: focal length `0.875 * width`,
    /// centered principal point, radar mounted slightly above and beside the
    /// camera with a 2 degree yaw.
    pub fn synthetic(width: usize, height: usize) -> Self {
        let f = 0.875 * width as f64;
        let yaw = 2.0f64.to_radians();
        let (s, c) = yaw.sin_cos();
        #[rustfmt::skip]
        let extrinsic = Matrix3x4::new(
            c,   0.0, s,   0.06,
            0.0, 1.0, 0.0, -0.04,
            -s,  0.0, c,   0.02,
        );
        Self::new(
            f,
            f,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            extrinsic,
            width,
            height,
            10.0,
        )
        .expect("synthetic rig is valid")
    }

    pub fn fx(&self) -> f64 {
        self.intrinsic[(0, 0)]
    }
    pub fn fy(&self) -> f64 {
        self.intrinsic[(1, 1)]
    }
    pub fn cx(&self) -> f64 {
        self.intrinsic[(0, 2)]
    }
    pub fn cy(&self) -> f64 {
        self.intrinsic[(1, 2)]
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.extrinsic.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.extrinsic.column(3).into_owned()
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsic;
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(Error::Config(
                "intrinsic matrix must be upper-triangular with K[2][2] = 1".into(),
            ));
        }
        if !(self.fx() > 0.0 && self.fy() > 0.0) {
            return Err(Error::Config("focal lengths must be positive".into()));
        }
        let r = self.rotation();
        let residual = (r * r.transpose() - Matrix3::identity()).abs().max();
        if !(residual <= 1e-6) {
            return Err(Error::Config(format!(
                "extrinsic rotation is not orthonormal (max |R R^T - I| = {residual:e})"
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if !(self.max_range_m > 0.0) {
            return Err(Error::Config("max_range_m must be positive".into()));
        }
        Ok(())
    }

    /// Radar frame to camera frame.
    pub fn to_camera(&self, p: &RadarPoint) -> Vector3<f64> {
        self.extrinsic * Vector4::new(p.x, p.y, p.z, 1.0)
    }

    /// Camera frame to radar frame (inverse rigid transform).
    pub fn to_radar(&self, pc: &Vector3<f64>) -> RadarPoint {
        let p = self.rotation().transpose() * (pc - self.translation());
        RadarPoint::new(p.x, p.y, p.z)
    }

    /// Writes the calibration as `key = value` lines.
    pub fn to_calib_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "fx = {}", self.fx());
        let _ = writeln!(s, "fy = {}", self.fy());
        let _ = writeln!(s, "cx = {}", self.cx());
        let _ = writeln!(s, "cy = {}", self.cy());
        let ext: Vec<String> = (0..3)
            .flat_map(|r| (0..4).map(move |c| (r, c)))
            .map(|(r, c)| format!("{}", self.extrinsic[(r, c)]))
            .collect();
        let _ = writeln!(s, "extrinsic = {}", ext.join(" "));
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "height = {}", self.height);
        let _ = writeln!(s, "max_range_m = {}", self.max_range_m);
        s
    }

    pub fn parse_calib(text: &str, path: &Path) -> Result<Self> {
        let mut fx = None;
        let mut fy = None;
        let mut cx = None;
        let mut cy = None;
        let mut ext = None;
        let mut width = None;
        let mut height = None;
        let mut max_range = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(path, line_no, "expected `key = value`"))?;
            let (key, value) = (key.trim(), value.trim());
            let num = |v: &str| -> Result<f64> {
                v.parse::<f64>()
                    .map_err(|_| Error::parse(path, line_no, format!("bad number `{v}` for {key}")))
            };
            let int = |v: &str| -> Result<usize> {
                v.parse::<usize>()
                    .map_err(|_| Error::parse(path, line_no, format!("bad integer `{v}` for {key}")))
            };
            match key {
                "fx" => fx = Some(num(value)?),
                "fy" => fy = Some(num(value)?),
                "cx" => cx = Some(num(value)?),
                "cy" => cy = Some(num(value)?),
                "width" => width = Some(int(value)?),
                "height" => height = Some(int(value)?),
                "max_range_m" => max_range = Some(num(value)?),
                "extrinsic" => {
                    let vals = value
                        .split_whitespace()
                        .map(num)
                        .collect::<Result<Vec<_>>>()?;
                    if vals.len() != 12 {
                        return Err(Error::parse(
                            path,
                            line_no,
                            format!("extrinsic needs 12 values, got {}", vals.len()),
                        ));
                    }
                    ext = Some(Matrix3x4::from_row_slice(&vals));
                }
                other => {
                    return Err(Error::parse(path, line_no, format!("unknown key `{other}`")));
                }
            }
        }
        let missing = |k: &str| Error::parse(path, 0, format!("missing key `{k}`"));
        Self::new(
            fx.ok_or_else(|| missing("fx"))?,
            fy.ok_or_else(|| missing("fy"))?,
            cx.ok_or_else(|| missing("cx"))?,
            cy.ok_or_else(|| missing("cy"))?,
            ext.ok_or_else(|| missing("extrinsic"))?,
            width.ok_or_else(|| missing("width"))?,
            height.ok_or_else(|| missing("height"))?,
            max_range.ok_or_else(|| missing("max_range_m"))?,
        )
    }
}

/// Projects one radar point. Returns `None` when the point is behind the
/// camera or lands outside the image.
pub fn project_point(p: &RadarPoint, rig: &SensorRig) -> Option<Projection> {
    let uvw = rig.intrinsic * rig.to_camera(p);
    let depth = uvw.z;
    if !(depth > 0.0) {
        return None;
    }
    let u = uvw.x / depth;
    let v = uvw.y / depth;
    // A point is in frame when its nearest pixel exists.
    let in_frame = u >= -0.5
        && u < rig.width as f64 - 0.5
        && v >= -0.5
        && v < rig.height as f64 - 0.5;
    in_frame.then_some(Projection { u, v, depth })
}

/// Inverse of [`project_point`] for a known depth.
pub fn backproject(u: f64, v: f64, depth: f64, rig: &SensorRig) -> Result<RadarPoint> {
    if !(depth > 0.0) {
        return Err(Error::Parameter(format!(
            "backprojection depth must be positive, got {depth}"
        )));
    }
    let k_inv = rig
        .intrinsic
        .try_inverse()
        .ok_or_else(|| Error::Config("intrinsic matrix is singular".into()))?;
    let pc = k_inv * Vector3::new(u, v, 1.0) * depth;
    Ok(rig.to_radar(&pc))
}

/// Sparse depth map in meters (`0` = no return), same size as the thermal
/// image.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    pub pixels: NdArray,
}

impl DepthImage {
    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn get(&self, col: usize, row: usize) -> Real {
        self.pixels.data()[row * self.width() + col]
    }

    /// Depth divided by `max_range_m`, clamped to `[0, 1]`, replicated to
    /// three channels.
    pub fn to_network_input(&self, max_range_m: f64) -> NdArray {
        let scale = 1.0 / max_range_m as Real;
        self.pixels
            .map(|d| (d * scale).clamp(0.0, 1.0))
            .replicate_channels(3)
            .expect("depth image has one channel")
    }
}

/// Rasterizes a cloud at the nearest pixel of each in-frame projection,
/// keeping the nearest depth where points collide. Returns beyond
/// `max_range_m` are dropped.
pub fn project_cloud(points: &[RadarPoint], rig: &SensorRig) -> DepthImage {
    let (w, h) = (rig.width, rig.height);
    let mut depth = vec![0.0 as Real; w * h];
    for p in points {
        let Some(proj) = project_point(p, rig) else {
            continue;
        };
        if proj.depth > rig.max_range_m {
            continue;
        }
        let (col, row) = proj.pixel();
        let d = proj.depth as Real;
        let slot = &mut depth[row * w + col];
        if *slot == 0.0 || d < *slot {
            *slot = d;
        }
    }
    DepthImage {
        pixels: NdArray::new(vec![1, h, w], depth).expect("sized above"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_rig() -> SensorRig {
        SensorRig::new(100.0, 100.0, 320.0, 256.0, Matrix3x4::identity(), 640, 512, 10.0).unwrap()
    }

    #[test]
    fn optical_axis_point() {
        let p = project_point(&RadarPoint::new(0.0, 0.0, 2.0), &identity_rig()).unwrap();
        assert_eq!((p.u, p.v, p.depth), (320.0, 256.0, 2.0));
    }

    #[test]
    fn lateral_offset() {
        let p = project_point(&RadarPoint::new(1.0, 0.0, 2.0), &identity_rig()).unwrap();
        assert!((p.u - 370.0).abs() < 1e-12);
        assert!((p.v - 256.0).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_and_out_of_frame_are_culled() {
        let rig = identity_rig();
        assert!(project_point(&RadarPoint::new(0.0, 0.0, -1.0), &rig).is_none());
        assert!(project_point(&RadarPoint::new(0.0, 0.0, 0.0), &rig).is_none());
        assert!(project_point(&RadarPoint::new(100.0, 0.0, 1.0), &rig).is_none());
    }

    #[test]
    fn principal_point_backprojects_to_axis() {
        let p = backproject(320.0, 256.0, 1.0, &identity_rig()).unwrap();
        assert_eq!(p, RadarPoint::new(0.0, 0.0, 1.0));
        assert!(matches!(
            backproject(1.0, 1.0, 0.0, &identity_rig()),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn yawed_extrinsic_matches_hand_rotation() {
        // 90 degree yaw about the camera y axis: radar x -> camera -z,
        // radar z -> camera x.
        #[rustfmt::skip]
        let t = Matrix3x4::new(
            0.0, 0.0, 1.0, 0.0,
            0.0, 1.0, 0.0, 0.0,
            -1.0, 0.0, 0.0, 0.0,
        );
        let rig = SensorRig::new(100.0, 100.0, 320.0, 256.0, t, 640, 512, 10.0).unwrap();
        // radar (-2, 0, 0.5) -> camera (0.5, 0, 2) -> u = 320 + 100 * 0.25
        let p = project_point(&RadarPoint::new(-2.0, 0.0, 0.5), &rig).unwrap();
        assert!((p.u - 345.0).abs() < 1e-12);
        assert!((p.depth - 2.0).abs() < 1e-12);
        let back = backproject(p.u, p.v, p.depth, &rig).unwrap();
        assert!((back.x + 2.0).abs() < 1e-12 && (back.z - 0.5).abs() < 1e-12);
    }

    #[test]
    fn random_round_trip() {
        let rig = SensorRig::synthetic(160, 128);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let (u, v, d) = (
                rng.gen_range(0.0..159.0),
                rng.gen_range(0.0..127.0),
                rng.gen_range(0.5..9.0),
            );
            let p = backproject(u, v, d, &rig).unwrap();
            let q = project_point(&p, &rig).unwrap();
            assert!((q.u - u).abs() < 1e-6 && (q.v - v).abs() < 1e-6 && (q.depth - d).abs() < 1e-6);
        }
    }

    #[test]
    fn z_buffer_keeps_nearest() {
        let rig = identity_rig();
        let far = RadarPoint::new(0.0, 0.0, 5.0);
        let near = RadarPoint::new(0.0, 0.0, 3.0);
        let img = project_cloud(&[far, near], &rig);
        assert_eq!(img.get(320, 256), 3.0);
        let img = project_cloud(&[near, far], &rig);
        assert_eq!(img.get(320, 256), 3.0);
        assert_eq!(img.pixels.data().iter().filter(|&&d| d != 0.0).count(), 1);
    }

    #[test]
    fn empty_cloud_and_range_cut() {
        let rig = identity_rig();
        let img = project_cloud(&[], &rig);
        assert_eq!(img.pixels.shape(), &[1, 512, 640]);
        assert!(img.pixels.data().iter().all(|&d| d == 0.0));
        let img = project_cloud(&[RadarPoint::new(0.0, 0.0, 12.0)], &rig);
        assert!(img.pixels.data().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn network_input_is_normalized_three_channel() {
        let rig = identity_rig();
        let img = project_cloud(&[RadarPoint::new(0.0, 0.0, 5.0)], &rig);
        let x = img.to_network_input(rig.max_range_m);
        assert_eq!(x.shape(), &[3, 512, 640]);
        for c in 0..3 {
            assert_eq!(x.channel(c)[256 * 640 + 320], 0.5);
        }
    }

    #[test]
    fn calib_round_trip_and_errors() {
        let rig = SensorRig::synthetic(160, 128);
        let text = rig.to_calib_string();
        let back = SensorRig::parse_calib(&text, Path::new("calib.txt")).unwrap();
        assert_eq!(rig, back);

        let broken = text.replace("fy = ", "fy = abc");
        let err = SensorRig::parse_calib(&broken, Path::new("calib.txt")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");

        let skewed = text.replace("extrinsic = ", "extrinsic = 2 ");
        assert!(SensorRig::parse_calib(&skewed, Path::new("c")).is_err());
    }

    #[test]
    fn non_orthonormal_rotation_rejected() {
        let mut t = Matrix3x4::identity();
        t[(0, 0)] = 1.1;
        assert!(SensorRig::new(100.0, 100.0, 1.0, 1.0, t, 4, 4, 10.0).is_err());
        assert!(SensorRig::new(-1.0, 100.0, 1.0, 1.0, Matrix3x4::identity(), 4, 4, 10.0).is_err());
    }
}
