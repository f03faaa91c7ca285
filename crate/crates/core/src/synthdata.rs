//! Procedural paired thermal/radar scenes with ground truth, and the
//! on-disk dataset layout:
//!
//! ```text
//! <dir>/calib.txt
//! <dir>/splits.txt                 "<id> <train|val|test>" per line
//! <dir>/frames/<id>.thermal.pgm    16-bit binary PGM
//! <dir>/frames/<id>.radar.csv      "x,y,z" per line, radar frame, meters
//! <dir>/frames/<id>.boxes.txt      "x_min y_min x_max y_max" per line, pixels
//! ```
//!
//! Box coordinates put pixel `i` on `[i, i + 1)`. Generated values are
//! quantized to file precision, so a write/load round trip is exact.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, ImageFormat};
use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{RadarPoint, SensorRig};
use crate::mdn::BBox;
use crate::tensor::{NdArray, Real, Rng};

/// Camera height above the floor, meters.
const CAMERA_HEIGHT_M: f64 = 1.0;
const DEPTH_RANGE_M: (f64, f64) = (3.0, 9.0);
const BODY_HEIGHT_M: (f64, f64) = (1.5, 1.9);
const BODY_WIDTH_M: (f64, f64) = (0.4, 0.6);
/// Fraction of the normalized radius over which a blob fades out.
const EDGE_SOFTNESS: f64 = 0.25;
const MAX_BOX_OVERLAP: f64 = 0.3;
const PGM_MAX: f64 = 65535.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneGenConfig {
    pub width: usize,
    pub height: usize,
    pub humans_min: usize,
    pub humans_max: usize,
    pub background_level: f64,
    pub background_noise: f64,
    pub contrast_min: f64,
    pub contrast_max: f64,
    /// Chance that a frame contains hot non-human blobs.
    pub distractor_probability: f64,
    pub radar_points_per_human: usize,
    /// Standard deviation of radar range noise, meters.
    pub radar_depth_noise: f64,
    /// Ghost returns per human, pushed further along the viewing ray.
    pub multipath_points: usize,
    /// Uniform clutter returns per frame.
    pub clutter_points: usize,
    pub seed: u64,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        Self {
            width: 160,
            height: 128,
            humans_min: 1,
            humans_max: 4,
            background_level: 0.3,
            background_noise: 0.03,
            contrast_min: 0.15,
            contrast_max: 0.5,
            distractor_probability: 0.5,
            radar_points_per_human: 30,
            radar_depth_noise: 0.05,
            multipath_points: 6,
            clutter_points: 25,
            seed: 0,
        }
    }
}

impl SceneGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if self.humans_min > self.humans_max {
            return Err(Error::Config(format!(
                "humans_min {} exceeds humans_max {}",
                self.humans_min, self.humans_max
            )));
        }
        if !(0.0..=1.0).contains(&self.distractor_probability) {
            return Err(Error::Config("distractor_probability must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.background_level) {
            return Err(Error::Config("background_level must be in [0, 1]".into()));
        }
        if !(self.contrast_min >= 0.0 && self.contrast_min <= self.contrast_max) {
            return Err(Error::Config("need 0 <= contrast_min <= contrast_max".into()));
        }
        if !(self.background_noise >= 0.0 && self.radar_depth_noise >= 0.0) {
            return Err(Error::Config("noise levels must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneFrame {
    pub frame_id: String,
    /// `[1, H, W]` normalized intensity in `[0, 1]`.
    pub thermal: NdArray,
    pub radar: Vec<RadarPoint>,
    pub gt_boxes: Vec<BBox>,
}

fn quantize6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

fn quantize_intensity(v: f64) -> Real {
    ((v.clamp(0.0, 1.0) * PGM_MAX).round() / PGM_MAX) as Real
}

/// Upright fronto-parallel elliptical body in the camera frame.
struct Body {
    center: Vector3<f64>,
    half_width: f64,
    half_height: f64,
}

/// Image-space ellipse, pixel centers at integer coordinates.
struct Blob {
    u: f64,
    v: f64,
    a: f64,
    b: f64,
    contrast: f64,
}

impl Blob {
    fn coverage(&self, col: usize, row: usize) -> f64 {
        let du = (col as f64 - self.u) / self.a;
        let dv = (row as f64 - self.v) / self.b;
        let d = (du * du + dv * dv).sqrt();
        ((1.0 - d) / EDGE_SOFTNESS).clamp(0.0, 1.0)
    }

    fn bbox(&self) -> BBox {
        BBox::new(
            self.u - self.a + 0.5,
            self.v - self.b + 0.5,
            self.u + self.a + 0.5,
            self.v + self.b + 0.5,
        )
    }
}

fn place_body(cfg: &SceneGenConfig, rig: &SensorRig, taken: &[BBox], rng: &mut Rng) -> Option<(Body, Blob)> {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    for _ in 0..50 {
        let z = rng.gen_range(DEPTH_RANGE_M.0..DEPTH_RANGE_M.1);
        let body_h = rng.gen_range(BODY_HEIGHT_M.0..BODY_HEIGHT_M.1);
        let body_w = rng.gen_range(BODY_WIDTH_M.0..BODY_WIDTH_M.1);
        let a = rig.fx() * body_w / 2.0 / z;
        let b = rig.fy() * body_h / 2.0 / z;
        let y = CAMERA_HEIGHT_M - body_h / 2.0;
        let v = rig.fy() * y / z + rig.cy();
        // keep the whole box inside the image
        let (u_lo, u_hi) = (a - 0.5, w - 0.5 - a);
        if u_lo >= u_hi || v - b < -0.5 || v + b > h - 0.5 {
            continue;
        }
        let u = rng.gen_range(u_lo..u_hi);
        let x = (u - rig.cx()) * z / rig.fx();
        let blob = Blob {
            u,
            v,
            a,
            b,
            contrast: 0.0,
        };
        let bbox = blob.bbox();
        if taken.iter().any(|t| t.iou(&bbox) >= MAX_BOX_OVERLAP) {
            continue;
        }
        let body = Body {
            center: Vector3::new(x, y, z),
            half_width: body_w / 2.0,
            half_height: body_h / 2.0,
        };
        return Some((body, blob));
    }
    None
}

fn unit_disk(rng: &mut Rng) -> (f64, f64) {
    loop {
        let (s, t) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        if s * s + t * t <= 1.0 {
            return (s, t);
        }
    }
}

/// One scene: 1..=N humans at random depths, optional hot distractors,
/// noisy radar returns on body surfaces plus multipath ghosts and clutter.
pub fn generate_scene(cfg: &SceneGenConfig, rig: &SensorRig, frame_id: &str, rng: &mut Rng) -> Result<SceneFrame> {
    cfg.validate()?;
    if (rig.width, rig.height) != (cfg.width, cfg.height) {
        return Err(Error::Config(format!(
            "rig is {}x{} but scene is {}x{}",
            rig.width, rig.height, cfg.width, cfg.height
        )));
    }
    let n_humans = rng.gen_range(cfg.humans_min..=cfg.humans_max);
    let mut bodies = Vec::new();
    let mut blobs = Vec::new();
    let mut boxes = Vec::new();
    for _ in 0..n_humans {
        if let Some((body, mut blob)) = place_body(cfg, rig, &boxes, rng) {
            blob.contrast = rng.gen_range(cfg.contrast_min..=cfg.contrast_max);
            boxes.push(blob.bbox());
            bodies.push(body);
            blobs.push(blob);
        }
    }
    // Distractors: wide or round hot spots without radar support.
    if rng.gen_bool(cfg.distractor_probability) {
        for _ in 0..rng.gen_range(1..=2) {
            let a = rng.gen_range(4.0..14.0) * cfg.width as f64 / 160.0;
            let b = a * rng.gen_range(0.3..1.0);
            blobs.push(Blob {
                u: rng.gen_range(0.0..cfg.width as f64),
                v: rng.gen_range(0.0..cfg.height as f64 * 0.6),
                a,
                b,
                contrast: rng.gen_range(cfg.contrast_min..=cfg.contrast_max),
            });
        }
    }

    let (w, h) = (cfg.width, cfg.height);
    let noise = Normal::new(0.0, cfg.background_noise).expect("validated");
    let mut thermal = Vec::with_capacity(w * h);
    for row in 0..h {
        let ramp = 0.05 * (row as f64 / h as f64 - 0.5);
        for col in 0..w {
            let bg = cfg.background_level + ramp;
            let hot = blobs
                .iter()
                .map(|bl| bl.contrast * bl.coverage(col, row))
                .fold(0.0, f64::max);
            let n = if cfg.background_noise > 0.0 { noise.sample(rng) } else { 0.0 };
            thermal.push(quantize_intensity(bg + hot + n));
        }
    }

    let range_noise = Normal::new(0.0, cfg.radar_depth_noise).expect("validated");
    let mut cam_points: Vec<Vector3<f64>> = Vec::new();
    for body in &bodies {
        let surface = |rng: &mut Rng| {
            let (s, t) = unit_disk(rng);
            let mut p = body.center + Vector3::new(s * body.half_width, t * body.half_height, 0.0);
            p.z += rng.gen_range(0.0..0.1);
            p
        };
        for _ in 0..cfg.radar_points_per_human {
            let mut p = surface(rng);
            if cfg.radar_depth_noise > 0.0 {
                p *= 1.0 + range_noise.sample(rng) / p.norm();
            }
            cam_points.push(p);
        }
        for _ in 0..cfg.multipath_points {
            cam_points.push(surface(rng) * rng.gen_range(1.2..1.8));
        }
    }
    for _ in 0..cfg.clutter_points {
        cam_points.push(Vector3::new(
            rng.gen_range(-4.0..4.0),
            rng.gen_range(-1.5..CAMERA_HEIGHT_M),
            rng.gen_range(1.0..10.0),
        ));
    }
    let radar = cam_points
        .iter()
        .map(|p| {
            let r = rig.to_radar(p);
            RadarPoint::new(quantize6(r.x), quantize6(r.y), quantize6(r.z))
        })
        .collect();
    let gt_boxes = boxes
        .iter()
        .map(|b| {
            let b = b.clip(w as f64, h as f64);
            BBox::new(quantize6(b.x_min), quantize6(b.y_min), quantize6(b.x_max), quantize6(b.y_max))
        })
        .collect();
    Ok(SceneFrame {
        frame_id: frame_id.to_string(),
        thermal: NdArray::new(vec![1, h, w], thermal)?,
        radar,
        gt_boxes,
    })
}

pub fn frame_id(index: usize) -> String {
    format!("{index:05}")
}

/// Frames `0..count`, each from its own RNG stream of `cfg.seed`.
pub fn generate_frames(cfg: &SceneGenConfig, rig: &SensorRig, count: usize) -> Result<Vec<SceneFrame>> {
    (0..count)
        .map(|i| {
            let mut rng = Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            generate_scene(cfg, rig, &frame_id(i), &mut rng)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.64,
            val: 0.18,
            test: 0.18,
        }
    }
}

/// Seeded shuffle, then the first `round(n * train)` frames go to train,
/// the next `round(n * val)` to val and the rest to test.
pub fn assign_splits(n: usize, ratios: SplitRatios, seed: u64) -> Result<Vec<Split>> {
    let r = [ratios.train, ratios.val, ratios.test];
    let total: f64 = r.iter().sum();
    if r.iter().any(|&x| !(x >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {r:?} must be nonnegative and sum to 1")));
    }
    let n_train = ((n as f64 * ratios.train).round() as usize).min(n);
    let n_val = ((n as f64 * ratios.val).round() as usize).min(n - n_train);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut Rng::seed_from_u64(seed));
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_train {
            splits[i] = Split::Train;
        } else if rank < n_train + n_val {
            splits[i] = Split::Val;
        }
    }
    Ok(splits)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub rig: SensorRig,
    pub frames: Vec<SceneFrame>,
    /// Split of each frame, parallel to `frames`.
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn subset(&self, split: Split) -> Vec<&SceneFrame> {
        self.frames
            .iter()
            .zip(&self.splits)
            .filter(|(_, &s)| s == split)
            .map(|(f, _)| f)
            .collect()
    }
}

/// Generates `count` frames with the synthetic rig and assigns splits.
pub fn generate_dataset(cfg: &SceneGenConfig, count: usize, ratios: SplitRatios) -> Result<Dataset> {
    let rig = SensorRig::synthetic(cfg.width, cfg.height);
    let frames = generate_frames(cfg, &rig, count)?;
    let splits = assign_splits(count, ratios, cfg.seed)?;
    Ok(Dataset { rig, frames, splits })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_thermal_pgm(path: &Path, thermal: &NdArray) -> Result<()> {
    let (c, h, w) = thermal.dims3()?;
    if c != 1 {
        return Err(Error::Dimension(format!("thermal image must have 1 channel, got {c}")));
    }
    // The image crate's PNM encoder has no 16-bit path; the format is a
    // three-line header plus big-endian samples.
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    out.extend(
        thermal
            .data()
            .iter()
            .flat_map(|&v| (((v as f64).clamp(0.0, 1.0) * PGM_MAX).round() as u16).to_be_bytes()),
    );
    write_file(path, &out)
}

/// Reads an 8- or 16-bit grayscale PGM as `[1, H, W]` in `[0, 1]`.
pub fn read_thermal_pgm(path: &Path) -> Result<NdArray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Pnm)
        .map_err(|e| Error::parse(path, 1, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<Real> = match img {
        DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(|q| (q as f64 / PGM_MAX) as Real).collect(),
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|q| (q as f64 / 255.0) as Real).collect(),
        other => {
            return Err(Error::parse(path, 1, format!("expected grayscale PGM, got {:?}", other.color())))
        }
    };
    NdArray::new(vec![1, h, w], data)
}

pub fn format_radar_csv(points: &[RadarPoint]) -> String {
    let mut s = String::with_capacity(points.len() * 32);
    for p in points {
        let _ = writeln!(s, "{:.6},{:.6},{:.6}", p.x, p.y, p.z);
    }
    s
}

pub fn parse_radar_csv(text: &str, path: &Path) -> Result<Vec<RadarPoint>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut points = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::parse(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != 3 {
            return Err(Error::parse(path, line, format!("expected x,y,z, got {} fields", rec.len())));
        }
        let mut v = [0.0; 3];
        for (slot, field) in v.iter_mut().zip(rec.iter()) {
            *slot = field
                .parse()
                .map_err(|_| Error::parse(path, line, format!("bad number {field:?}")))?;
        }
        let p = RadarPoint::new(v[0], v[1], v[2]);
        if !p.is_finite() {
            return Err(Error::parse(path, line, "non-finite coordinate"));
        }
        points.push(p);
    }
    Ok(points)
}

pub fn read_radar_csv(path: &Path) -> Result<Vec<RadarPoint>> {
    parse_radar_csv(&read_text(path)?, path)
}

pub fn format_boxes(boxes: &[BBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        let _ = writeln!(s, "{:.6} {:.6} {:.6} {:.6}", b.x_min, b.y_min, b.x_max, b.y_max);
    }
    s
}

pub fn parse_boxes(text: &str, path: &Path) -> Result<Vec<BBox>> {
    let mut boxes = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::parse(path, n + 1, format!("bad number {t:?}"))))
            .collect::<Result<_>>()?;
        if v.len() != 4 {
            return Err(Error::parse(path, n + 1, format!("expected 4 values, got {}", v.len())));
        }
        let b = BBox::new(v[0], v[1], v[2], v[3]);
        if !b.is_valid() {
            return Err(Error::parse(path, n + 1, "degenerate box"));
        }
        boxes.push(b);
    }
    Ok(boxes)
}

pub fn read_boxes(path: &Path) -> Result<Vec<BBox>> {
    parse_boxes(&read_text(path)?, path)
}

/// Paths of one frame's files under `frames_dir`.
pub fn frame_paths(frames_dir: &Path, id: &str) -> [PathBuf; 3] {
    [
        frames_dir.join(format!("{id}.thermal.pgm")),
        frames_dir.join(format!("{id}.radar.csv")),
        frames_dir.join(format!("{id}.boxes.txt")),
    ]
}

/// Loads one frame; a missing boxes file means no ground truth.
pub fn load_frame(frames_dir: &Path, id: &str) -> Result<SceneFrame> {
    let [thermal, radar, boxes] = frame_paths(frames_dir, id);
    Ok(SceneFrame {
        frame_id: id.to_string(),
        thermal: read_thermal_pgm(&thermal)?,
        radar: read_radar_csv(&radar)?,
        gt_boxes: if boxes.exists() { read_boxes(&boxes)? } else { Vec::new() },
    })
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    if ds.frames.len() != ds.splits.len() {
        return Err(Error::Dataset("every frame needs a split".into()));
    }
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    write_file(&dir.join("calib.txt"), ds.rig.to_calib_string().as_bytes())?;
    let mut splits = String::new();
    for (f, s) in ds.frames.iter().zip(&ds.splits) {
        let _ = writeln!(splits, "{} {s}", f.frame_id);
        let [thermal, radar, boxes] = frame_paths(&frames_dir, &f.frame_id);
        write_thermal_pgm(&thermal, &f.thermal)?;
        write_file(&radar, format_radar_csv(&f.radar).as_bytes())?;
        write_file(&boxes, format_boxes(&f.gt_boxes).as_bytes())?;
    }
    write_file(&dir.join("splits.txt"), splits.as_bytes())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let calib = dir.join("calib.txt");
    if !calib.is_file() {
        return Err(Error::CalibrationNotFound(calib));
    }
    let rig = SensorRig::parse_calib(&read_text(&calib)?, &calib)?;
    let splits_path = dir.join("splits.txt");
    let text = read_text(&splits_path)?;
    let frames_dir = dir.join("frames");
    let mut frames = Vec::new();
    let mut splits = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [id, split] = parts[..] else {
            return Err(Error::parse(&splits_path, n + 1, "expected `<id> <split>`"));
        };
        let split: Split = split
            .parse()
            .map_err(|_| Error::parse(&splits_path, n + 1, format!("unknown split `{split}`")))?;
        let frame = load_frame(&frames_dir, id)?;
        let (_, h, w) = frame.thermal.dims3()?;
        if (w, h) != (rig.width, rig.height) {
            return Err(Error::Dataset(format!(
                "frame {id} is {w}x{h} but calibration says {}x{}",
                rig.width, rig.height
            )));
        }
        frames.push(frame);
        splits.push(split);
    }
    Ok(Dataset { rig, frames, splits })
}
