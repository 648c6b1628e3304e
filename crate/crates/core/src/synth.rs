//! Synthetic moving-sprite videos with exact analytic flow.
//!
//! Every video holds two sprites on a black background, half a frame apart,
//! moving with toroidal wrap-around. Classes differ only in their motion program; sprite shape,
//! intensity and start position are drawn from the same distribution for every
//! class, so a single frame carries no class information.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::par::Exec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Cross,
    Disk,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Cross, Shape::Disk];

    /// Whether offset `(dy, dx)` inside a `size x size` box is covered.
    pub fn covers(self, size: usize, dy: usize, dx: usize) -> bool {
        let s = size as f64;
        let (y, x) = (dy as f64 + 0.5 - s / 2.0, dx as f64 + 0.5 - s / 2.0);
        match self {
            Shape::Square => true,
            Shape::Cross => {
                let arm = (s / 6.0).max(0.5);
                y.abs() <= arm || x.abs() <= arm
            }
            Shape::Disk => y * y + x * x <= (s / 2.0) * (s / 2.0),
        }
    }
}

/// Integer velocity `(dx, dy)` in pixels per frame.
pub type Velocity = (i32, i32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Regions split by column: left / right halves.
    Columns,
    /// Regions split by row: top / bottom halves.
    Rows,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MotionProgram {
    Constant { velocity: Velocity },
    /// `first` moves the sprite whose center starts in the first half along
    /// `axis`, `second` the other one. Velocities run parallel to the split
    /// so neither sprite changes half.
    Regional { axis: Axis, first: Velocity, second: Velocity },
    /// Velocity changes once, at frame `at`.
    Switch { before: Velocity, after: Velocity, at: usize },
}

impl MotionProgram {
    pub fn is_stationary(&self) -> bool {
        matches!(self, MotionProgram::Constant { .. })
    }

    pub fn max_speed(&self) -> i32 {
        let m = |v: Velocity| v.0.abs().max(v.1.abs());
        match *self {
            MotionProgram::Constant { velocity } => m(velocity),
            MotionProgram::Regional { first, second, .. } => m(first).max(m(second)),
            MotionProgram::Switch { before, after, .. } => m(before).max(m(after)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassSpec {
    pub name: String,
    pub motion: MotionProgram,
    /// Class a horizontally mirrored video of this class belongs to.
    pub flip_partner: Option<String>,
}

fn class(name: &str, motion: MotionProgram, partner: Option<&str>) -> ClassSpec {
    ClassSpec {
        name: name.to_string(),
        motion,
        flip_partner: partner.map(str::to_string),
    }
}

/// Every named class the generator knows.
pub fn class_registry() -> Vec<ClassSpec> {
    use MotionProgram::*;
    let regional = |axis, first, second| Regional { axis, first, second };
    vec![
        class("ns_lr_a", regional(Axis::Columns, (0, 1), (0, -1)), Some("ns_lr_b")),
        class("ns_lr_b", regional(Axis::Columns, (0, -1), (0, 1)), Some("ns_lr_a")),
        class("ns_tb_a", regional(Axis::Rows, (1, 0), (-1, 0)), Some("ns_tb_b")),
        class("ns_tb_b", regional(Axis::Rows, (-1, 0), (1, 0)), Some("ns_tb_a")),
        class("st_right", Constant { velocity: (1, 0) }, Some("st_left")),
        class("st_left", Constant { velocity: (-1, 0) }, Some("st_right")),
        class("st_down", Constant { velocity: (0, 1) }, Some("st_down")),
        class("st_up", Constant { velocity: (0, -1) }, Some("st_up")),
        class("st_diag_a", Constant { velocity: (1, 1) }, Some("st_diag_b")),
        class("st_diag_b", Constant { velocity: (-1, 1) }, Some("st_diag_a")),
        class(
            "ns_switch_a",
            Switch {
                before: (1, 0),
                after: (-1, 0),
                at: 32,
            },
            Some("ns_switch_b"),
        ),
        class(
            "ns_switch_b",
            Switch {
                before: (-1, 0),
                after: (1, 0),
                at: 32,
            },
            Some("ns_switch_a"),
        ),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Suite {
    /// Four region-dependent classes.
    NonStationary,
    /// Four constant-velocity classes.
    Stationary,
    /// The four region-dependent classes plus two diagonal constant ones.
    Mixed,
}

impl Suite {
    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            Suite::NonStationary => &["ns_lr_a", "ns_lr_b", "ns_tb_a", "ns_tb_b"],
            Suite::Stationary => &["st_right", "st_left", "st_down", "st_up"],
            Suite::Mixed => &["ns_lr_a", "ns_lr_b", "ns_tb_a", "ns_tb_b", "st_diag_a", "st_diag_b"],
        }
    }

    pub fn classes(self) -> Vec<ClassSpec> {
        resolve_classes(self.class_names()).expect("suite names are registered")
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nonstationary" | "non-stationary" | "ns" => Ok(Suite::NonStationary),
            "stationary" | "st" => Ok(Suite::Stationary),
            "mixed" | "default" => Ok(Suite::Mixed),
            other => Err(Error::Invalid(format!("unknown suite '{other}'"))),
        }
    }
}

/// Looks up class names in the registry. Flip partners outside the list are dropped.
pub fn resolve_classes<S: AsRef<str>>(names: &[S]) -> Result<Vec<ClassSpec>> {
    let reg = class_registry();
    let mut out: Vec<ClassSpec> = names
        .iter()
        .map(|n| {
            reg.iter()
                .find(|c| c.name == n.as_ref())
                .cloned()
                .ok_or_else(|| Error::Invalid(format!("unknown class '{}'", n.as_ref())))
        })
        .collect::<Result<_>>()?;
    let present: Vec<String> = out.iter().map(|c| c.name.clone()).collect();
    for c in &mut out {
        if c.flip_partner.as_ref().is_some_and(|p| !present.contains(p)) {
            c.flip_partner = None;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn code(self) -> u32 {
        self as u32
    }

    fn from_code(c: u32) -> Result<Self> {
        match c {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            _ => Err(Error::Format(format!("unknown split code {c}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            frames: 64,
        }
    }
}

impl FromStr for Dims {
    type Err = Error;

    /// Parses `HxWxT`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split('x')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Invalid(format!("dims '{s}' must look like 16x16x64")))?;
        match parts[..] {
            [height, width, frames] => Ok(Dims { height, width, frames }),
            _ => Err(Error::Invalid(format!("dims '{s}' must look like 16x16x64"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitPlan {
    /// Exact number of videos per class in each split.
    Counts { train: usize, val: usize, test: usize },
    /// `count` videos per class divided 70/10/20.
    Fractions { count: usize },
}

impl SplitPlan {
    pub fn counts(self) -> (usize, usize, usize) {
        match self {
            SplitPlan::Counts { train, val, test } => (train, val, test),
            SplitPlan::Fractions { count } => {
                let train = (0.7 * count as f64).round() as usize;
                let val = (0.1 * count as f64).round() as usize;
                (train, val, count - train - val)
            }
        }
    }

    pub fn per_class(self) -> usize {
        let (a, b, c) = self.counts();
        a + b + c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateConfig {
    pub classes: Vec<ClassSpec>,
    pub split: SplitPlan,
    pub dims: Dims,
    pub sprite_size: usize,
    pub seed: u64,
}

impl GenerateConfig {
    pub fn new(classes: Vec<ClassSpec>, split: SplitPlan, seed: u64) -> Self {
        Self {
            classes,
            split,
            dims: Dims::default(),
            sprite_size: 5,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassInfo {
    pub name: String,
    pub stationary: bool,
    pub flip_partner: Option<usize>,
}

/// One video: frames `(t, c, h, w)` and flow `(t, 2, h, w)` with `(dx, dy)`
/// channels, both row-major. `flow[t]` is the displacement from frame `t` to
/// frame `t + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub label: usize,
    pub split: Split,
    pub frames: Vec<f32>,
    pub flow: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: Vec<ClassInfo>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Symmetric bound on raw flow values, the rescale parameter.
    pub flow_bound: f32,
    pub videos: Vec<Video>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn frame<'a>(&self, v: &'a Video, t: usize) -> &'a [f32] {
        let n = self.frame_len();
        &v.frames[t * n..(t + 1) * n]
    }

    pub fn flow_field<'a>(&self, v: &'a Video, t: usize) -> &'a [f32] {
        let n = 2 * self.height * self.width;
        &v.flow[t * n..(t + 1) * n]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.videos.len()).filter(|&i| self.videos[i].split == split).collect()
    }

    pub fn rescale(&self) -> FlowRescale {
        FlowRescale { bound: self.flow_bound }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_u32::<LittleEndian>(DATASET_VERSION)?;
        for n in [
            self.videos.len(),
            self.classes.len(),
            self.channels,
            self.height,
            self.width,
            self.frames,
        ] {
            w.write_u32::<LittleEndian>(n as u32)?;
        }
        w.write_f32::<LittleEndian>(self.flow_bound)?;
        for c in &self.classes {
            w.write_u32::<LittleEndian>(c.name.len() as u32)?;
            w.write_all(c.name.as_bytes())?;
            w.write_u8(u8::from(c.stationary))?;
            w.write_i32::<LittleEndian>(c.flip_partner.map_or(-1, |p| p as i32))?;
        }
        for v in &self.videos {
            w.write_u32::<LittleEndian>(v.label as u32)?;
            w.write_u32::<LittleEndian>(v.split.code())?;
            for &x in v.frames.iter().chain(&v.flow) {
                w.write_f32::<LittleEndian>(x)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let mut next = || -> Result<usize> { Ok(r.read_u32::<LittleEndian>()? as usize) };
        let (nv, nc, channels, height, width, frames) = (next()?, next()?, next()?, next()?, next()?, next()?);
        let flow_bound = r.read_f32::<LittleEndian>()?;
        let mut classes = Vec::with_capacity(nc);
        for _ in 0..nc {
            let len = r.read_u32::<LittleEndian>()? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("class name is not UTF-8".into()))?;
            let stationary = r.read_u8()? != 0;
            let partner = r.read_i32::<LittleEndian>()?;
            classes.push(ClassInfo {
                name,
                stationary,
                flip_partner: usize::try_from(partner).ok(),
            });
        }
        let flen = frames * channels * height * width;
        let wlen = frames * 2 * height * width;
        let mut videos = Vec::with_capacity(nv);
        for _ in 0..nv {
            let label = r.read_u32::<LittleEndian>()? as usize;
            if label >= nc {
                return Err(Error::Format(format!("label {label} with {nc} classes")));
            }
            let split = Split::from_code(r.read_u32::<LittleEndian>()?)?;
            let mut frames_buf = vec![0f32; flen];
            r.read_f32_into::<LittleEndian>(&mut frames_buf)?;
            let mut flow = vec![0f32; wlen];
            r.read_f32_into::<LittleEndian>(&mut flow)?;
            videos.push(Video {
                label,
                split,
                frames: frames_buf,
                flow,
            });
        }
        Ok(Dataset {
            classes,
            channels,
            height,
            width,
            frames,
            flow_bound,
            videos,
        })
    }
}

pub const DATASET_MAGIC: &[u8; 4] = b"LVID";
pub const DATASET_VERSION: u32 = 1;

/// Affine map of flow values from `[-bound, bound]` to `[0, 255]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowRescale {
    pub bound: f32,
}

impl FlowRescale {
    pub fn apply(&self, v: f32) -> f32 {
        if self.bound <= 0.0 {
            return 127.5;
        }
        (v + self.bound) / (2.0 * self.bound) * 255.0
    }

    pub fn inverse(&self, r: f32) -> f32 {
        r / 255.0 * 2.0 * self.bound - self.bound
    }

    /// Network input in `[-1, 1]`: the rescaled value re-centered.
    pub fn network_input(&self, v: f32) -> f32 {
        self.apply(v) / 127.5 - 1.0
    }
}

/// Rescales a whole flow field, returning the map and its inverse parameters.
pub fn flow_rescale(flow: &[f32], bound: f32) -> (Vec<f32>, FlowRescale) {
    let r = FlowRescale { bound };
    (flow.iter().map(|&v| r.apply(v)).collect(), r)
}

struct Sprite {
    shape: Shape,
    intensity: f32,
    /// Top-left corner at frame 0.
    row: i64,
    col: i64,
    /// Half of the frame holding the sprite center along the split axis.
    region: usize,
}

fn velocity_at(motion: &MotionProgram, region: usize, t: usize) -> Velocity {
    match *motion {
        MotionProgram::Constant { velocity } => velocity,
        MotionProgram::Regional { first, second, .. } => {
            if region == 0 {
                first
            } else {
                second
            }
        }
        MotionProgram::Switch { before, after, at } => {
            if t < at {
                before
            } else {
                after
            }
        }
    }
}

/// Two sprites half a frame apart along both axes, so each half of either
/// split holds one sprite center. The first corner is uniform on the torus,
/// which keeps per-pixel occupancy the same for every class.
fn place_sprites(spec: &ClassSpec, cfg: &GenerateConfig, rng: &mut ChaCha8Rng) -> Vec<Sprite> {
    let Dims { height, width, .. } = cfg.dims;
    let (h, w) = (height as i64, width as i64);
    let row = rng.gen_range(0..h);
    let col = rng.gen_range(0..w);
    let half = cfg.sprite_size as f64 / 2.0;
    [(row, col), (row + h / 2, col + w / 2)]
        .into_iter()
        .map(|(row, col)| {
            let region = match spec.motion {
                MotionProgram::Regional { axis, .. } => {
                    let (pos, extent) = match axis {
                        Axis::Columns => (col as f64 + half, w as f64),
                        Axis::Rows => (row as f64 + half, h as f64),
                    };
                    usize::from(pos.rem_euclid(extent) >= extent / 2.0)
                }
                _ => 0,
            };
            Sprite {
                shape: Shape::ALL[rng.gen_range(0..Shape::ALL.len())],
                intensity: rng.gen_range(0.6..=1.0),
                row: row.rem_euclid(h),
                col: col.rem_euclid(w),
                region,
            }
        })
        .collect()
}

fn render_video(spec: &ClassSpec, label: usize, split: Split, cfg: &GenerateConfig, rng: &mut ChaCha8Rng) -> Video {
    let Dims { height, width, frames } = cfg.dims;
    let size = cfg.sprite_size;
    let sprites = place_sprites(spec, cfg, rng);
    let plane = height * width;
    let mut out_frames = vec![0f32; frames * plane];
    let mut flow = vec![0f32; frames * 2 * plane];
    for sprite in &sprites {
        let (mut row, mut col) = (sprite.row, sprite.col);
        for t in 0..frames {
            let (vx, vy) = velocity_at(&spec.motion, sprite.region, t);
            for dy in 0..size {
                for dx in 0..size {
                    if !sprite.shape.covers(size, dy, dx) {
                        continue;
                    }
                    let y = (row + dy as i64).rem_euclid(height as i64) as usize;
                    let x = (col + dx as i64).rem_euclid(width as i64) as usize;
                    out_frames[t * plane + y * width + x] = sprite.intensity;
                    flow[(t * 2) * plane + y * width + x] = vx as f32;
                    flow[(t * 2 + 1) * plane + y * width + x] = vy as f32;
                }
            }
            row += vy as i64;
            col += vx as i64;
        }
    }
    Video {
        label,
        split,
        frames: out_frames,
        flow,
    }
}

/// Seeds stream `index` of the dataset seed.
pub fn video_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn generate(cfg: &GenerateConfig, exec: Exec) -> Result<Dataset> {
    let Dims { height, width, frames } = cfg.dims;
    if cfg.classes.is_empty() {
        return Err(Error::Invalid("no classes requested".into()));
    }
    if cfg.sprite_size == 0 || 2 * cfg.sprite_size > height || 2 * cfg.sprite_size > width {
        return Err(Error::Invalid(format!(
            "sprite of size {} does not fit half of a {height}x{width} frame",
            cfg.sprite_size
        )));
    }
    if frames < 40 {
        return Err(Error::Invalid(format!("videos need at least 40 frames, got {frames}")));
    }
    let per_class = cfg.split.per_class();
    if per_class == 0 {
        return Err(Error::Invalid("zero videos per class".into()));
    }
    let (n_train, n_val, _) = cfg.split.counts();
    let names: Vec<&str> = cfg.classes.iter().map(|c| c.name.as_str()).collect();
    let classes: Vec<ClassInfo> = cfg
        .classes
        .iter()
        .map(|c| ClassInfo {
            name: c.name.clone(),
            stationary: c.motion.is_stationary(),
            flip_partner: c.flip_partner.as_ref().and_then(|p| names.iter().position(|n| n == p)),
        })
        .collect();
    let total = per_class * cfg.classes.len();
    let videos = exec.map_range(total, |i| {
        let (label, j) = (i / per_class, i % per_class);
        let split = if j < n_train {
            Split::Train
        } else if j < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        let mut rng = video_rng(cfg.seed, i as u64);
        render_video(&cfg.classes[label], label, split, cfg, &mut rng)
    });
    let bound = cfg.classes.iter().map(|c| c.motion.max_speed()).max().unwrap_or(0) as f32;
    Ok(Dataset {
        classes,
        channels: 1,
        height,
        width,
        frames,
        flow_bound: bound,
        videos,
    })
}

/// Test accuracy of a softmax regression on single frames, trained on the
/// train split with every frame as an independent sample. Measures how much
/// class information a frame carries without temporal order.
pub fn appearance_baseline(ds: &Dataset, epochs: usize, seed: u64) -> f64 {
    let d = ds.frame_len() + 1;
    let k = ds.num_classes();
    let mut w = vec![0f64; k * d];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = ds.indices(Split::Train);
    let mut samples: Vec<(usize, usize)> = train
        .iter()
        .flat_map(|&v| (0..ds.frames).step_by(4).map(move |t| (v, t)))
        .collect();
    let lr = 0.05;
    let scores = |w: &[f64], x: &[f32]| -> Vec<f64> {
        (0..k)
            .map(|c| {
                let row = &w[c * d..(c + 1) * d];
                row[..d - 1].iter().zip(x).map(|(a, &b)| a * f64::from(b)).sum::<f64>() + row[d - 1]
            })
            .collect()
    };
    for _ in 0..epochs {
        for i in (1..samples.len()).rev() {
            samples.swap(i, rng.gen_range(0..=i));
        }
        for &(v, t) in &samples {
            let video = &ds.videos[v];
            let x = ds.frame(video, t);
            let p = crate::model::softmax(&scores(&w, x));
            for c in 0..k {
                let g = p[c] - f64::from(u8::from(c == video.label));
                let row = &mut w[c * d..(c + 1) * d];
                for (a, &b) in row[..d - 1].iter_mut().zip(x) {
                    *a -= lr * g * f64::from(b);
                }
                row[d - 1] -= lr * g;
            }
        }
    }
    let test = ds.indices(Split::Test);
    let mut correct = 0usize;
    let mut total = 0usize;
    for &v in &test {
        let video = &ds.videos[v];
        for t in 0..ds.frames {
            let s = scores(&w, ds.frame(video, t));
            correct += usize::from(crate::model::argmax(&s) == video.label);
            total += 1;
        }
    }
    correct as f64 / total.max(1) as f64
}
