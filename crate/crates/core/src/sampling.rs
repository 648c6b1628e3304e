//! Long-short term episode sampling.
//!
//! An episode is `n` clips of `l_t` frames each. Clip `c` frame `f` reads video
//! frame `start + c * s_s + f * s_t`, so a small `s_s` with `s_t = 1` covers a
//! short consecutive stretch while the largest strides span the whole video.
//! Every episode also draws its own crop origin.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::synth::{Dataset, Video};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct EpisodePlan {
    pub crop_row: usize,
    pub crop_col: usize,
    /// Frame spacing between consecutive clip starts.
    pub s_s: usize,
    /// Frame stride inside a clip.
    pub s_t: usize,
    pub start: usize,
    pub n: usize,
    pub l_t: usize,
    pub crop_rows: usize,
    pub crop_cols: usize,
}

impl EpisodePlan {
    pub fn frame_index(&self, clip: usize, frame: usize) -> usize {
        self.start + clip * self.s_s + frame * self.s_t
    }

    pub fn last_frame(&self) -> usize {
        self.frame_index(self.n - 1, self.l_t - 1)
    }

    /// Number of frames from the first touched to the last touched, inclusive.
    pub fn span(&self) -> usize {
        self.last_frame() - self.start + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplingConfig {
    pub n: usize,
    pub l_t: usize,
    pub crop_rows: usize,
    pub crop_cols: usize,
}

impl SamplingConfig {
    fn check(&self, meta: VideoMeta) -> Result<()> {
        if self.n == 0 || self.l_t == 0 || self.crop_rows == 0 || self.crop_cols == 0 {
            return Err(Error::Invalid(format!("sampling extents must be positive: {self:?}")));
        }
        if self.crop_rows > meta.rows || self.crop_cols > meta.cols {
            return Err(Error::Invalid(format!(
                "crop {}x{} larger than frame {}x{}",
                self.crop_rows, self.crop_cols, meta.rows, meta.cols
            )));
        }
        let required = self.n * self.l_t;
        if meta.frames < required {
            return Err(Error::VideoTooShort {
                frames: meta.frames,
                required,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VideoMeta {
    pub rows: usize,
    pub cols: usize,
    pub frames: usize,
}

impl From<&Dataset> for VideoMeta {
    fn from(d: &Dataset) -> Self {
        VideoMeta {
            rows: d.height,
            cols: d.width,
            frames: d.frames,
        }
    }
}

/// Largest inter-clip spacing for which some start frame exists with `s_t = 1`.
pub fn max_inter_stride(frames: usize, cfg: &SamplingConfig) -> usize {
    if cfg.n == 1 {
        return frames;
    }
    (frames - cfg.l_t) / (cfg.n - 1)
}

fn max_intra_stride(frames: usize, cfg: &SamplingConfig, s_s: usize) -> usize {
    if cfg.l_t == 1 {
        return 1;
    }
    let used = (cfg.n - 1) * s_s;
    (frames - 1 - used) / (cfg.l_t - 1)
}

/// Draws a random plan: `s_s` uniform in `[l_t, s_max]`, then `s_t` uniform in
/// `[1, min(s_s, feasible)]`, then the start frame and crop origin uniformly.
pub fn sample_plan(meta: VideoMeta, cfg: &SamplingConfig, rng: &mut impl Rng) -> Result<EpisodePlan> {
    cfg.check(meta)?;
    let m_t = meta.frames;
    let (s_s, s_t) = if cfg.n == 1 {
        let hi = max_intra_stride(m_t, cfg, 0);
        let s_t = rng.gen_range(1..=hi);
        (s_t, s_t)
    } else {
        let s_max = max_inter_stride(m_t, cfg);
        let s_s = rng.gen_range(cfg.l_t..=s_max);
        let hi = s_s.min(max_intra_stride(m_t, cfg, s_s));
        (s_s, rng.gen_range(1..=hi))
    };
    let slack = m_t - 1 - (cfg.n - 1) * s_s - (cfg.l_t - 1) * s_t;
    Ok(EpisodePlan {
        crop_row: rng.gen_range(0..=meta.rows - cfg.crop_rows),
        crop_col: rng.gen_range(0..=meta.cols - cfg.crop_cols),
        s_s,
        s_t,
        start: rng.gen_range(0..=slack),
        n: cfg.n,
        l_t: cfg.l_t,
        crop_rows: cfg.crop_rows,
        crop_cols: cfg.crop_cols,
    })
}

/// Consecutive-frame baseline: `s_t = 1`, `s_s = l_t`, random start and crop.
pub fn fixed_stride_plan(meta: VideoMeta, cfg: &SamplingConfig, rng: &mut impl Rng) -> Result<EpisodePlan> {
    cfg.check(meta)?;
    let span = cfg.n * cfg.l_t;
    Ok(EpisodePlan {
        crop_row: rng.gen_range(0..=meta.rows - cfg.crop_rows),
        crop_col: rng.gen_range(0..=meta.cols - cfg.crop_cols),
        s_s: cfg.l_t,
        s_t: 1,
        start: rng.gen_range(0..=meta.frames - span),
        n: cfg.n,
        l_t: cfg.l_t,
        crop_rows: cfg.crop_rows,
        crop_cols: cfg.crop_cols,
    })
}

/// Deterministic evaluation plan for intra-clip stride `stride`: clips tile
/// back to back (`s_s = l_t * s_t`) when the video allows, otherwise `s_s`
/// shrinks to the largest feasible value. Centered in time and space.
pub fn eval_plan(meta: VideoMeta, cfg: &SamplingConfig, stride: usize) -> Result<EpisodePlan> {
    cfg.check(meta)?;
    if stride == 0 {
        return Err(Error::Invalid("evaluation stride must be positive".into()));
    }
    let m_t = meta.frames;
    let mut s_t = stride.min(max_intra_stride(m_t, cfg, 0).max(1));
    let s_s = loop {
        let room = if cfg.n == 1 {
            s_t
        } else {
            (m_t - 1 - (cfg.l_t - 1) * s_t) / (cfg.n - 1)
        };
        let s_s = (cfg.l_t * s_t).min(room);
        if s_s >= s_t || s_t == 1 {
            break s_s.max(1);
        }
        s_t -= 1;
    };
    let slack = m_t - 1 - (cfg.n - 1) * s_s - (cfg.l_t - 1) * s_t;
    Ok(EpisodePlan {
        crop_row: (meta.rows - cfg.crop_rows) / 2,
        crop_col: (meta.cols - cfg.crop_cols) / 2,
        s_s,
        s_t,
        start: slack / 2,
        n: cfg.n,
        l_t: cfg.l_t,
        crop_rows: cfg.crop_rows,
        crop_cols: cfg.crop_cols,
    })
}

/// Channel-stacked clips of both modalities for one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode<T> {
    pub rgb: Vec<Tensor<T>>,
    pub flow: Vec<Tensor<T>>,
    pub label: usize,
    pub flipped: bool,
}

/// Cuts the clips described by `plan` out of `video`.
///
/// Appearance clips stack `l_t` frames of `C` channels; flow clips stack `l_t`
/// `(dx, dy)` fields mapped to `[-1, 1]` through the dataset's rescale. With
/// `flip` set and a flip partner available, both are mirrored horizontally,
/// `dx` changes sign and the label becomes the partner class.
pub fn realize_episode<T: Real>(plan: &EpisodePlan, ds: &Dataset, video: &Video, flip: bool) -> Result<Episode<T>> {
    if plan.last_frame() >= ds.frames {
        return Err(Error::OutOfRange(format!(
            "plan touches frame {} of a {}-frame video",
            plan.last_frame(),
            ds.frames
        )));
    }
    if plan.crop_row + plan.crop_rows > ds.height || plan.crop_col + plan.crop_cols > ds.width {
        return Err(Error::OutOfRange(format!(
            "crop at ({}, {}) of {}x{} exceeds {}x{}",
            plan.crop_row, plan.crop_col, plan.crop_rows, plan.crop_cols, ds.height, ds.width
        )));
    }
    let partner = ds.classes[video.label].flip_partner;
    let flip = flip && partner.is_some();
    let (rows, cols, c) = (plan.crop_rows, plan.crop_cols, ds.channels);
    let rescale = ds.rescale();
    let src_col = |x: usize| plan.crop_col + if flip { cols - 1 - x } else { x };
    let mut rgb = Vec::with_capacity(plan.n);
    let mut flow = Vec::with_capacity(plan.n);
    for clip in 0..plan.n {
        let mut a = Vec::with_capacity(plan.l_t * c * rows * cols);
        let mut b = Vec::with_capacity(plan.l_t * 2 * rows * cols);
        for f in 0..plan.l_t {
            let t = plan.frame_index(clip, f);
            let frame = ds.frame(video, t);
            for ch in 0..c {
                for y in 0..rows {
                    let row = &frame[(ch * ds.height + plan.crop_row + y) * ds.width..];
                    a.extend((0..cols).map(|x| T::of(f64::from(row[src_col(x)]))));
                }
            }
            let field = ds.flow_field(video, t);
            for ch in 0..2 {
                let sign = if flip && ch == 0 { -1.0 } else { 1.0 };
                for y in 0..rows {
                    let row = &field[(ch * ds.height + plan.crop_row + y) * ds.width..];
                    b.extend((0..cols).map(|x| T::of(f64::from(rescale.network_input(sign * row[src_col(x)])))));
                }
            }
        }
        rgb.push(Tensor::new(vec![plan.l_t * c, rows, cols], a)?);
        flow.push(Tensor::new(vec![plan.l_t * 2, rows, cols], b)?);
    }
    Ok(Episode {
        rgb,
        flow,
        label: if flip { partner.expect("checked") } else { video.label },
        flipped: flip,
    })
}
