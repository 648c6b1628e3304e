//! Input-gradient saliency and lattice-kernel pictures, written as binary PGM.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::cell::HiddenTransition;
use crate::error::{Error, Result};
use crate::model::{BackwardOptions, Modality, TwoStreamModel};
use crate::ops::NormMode;
use crate::params::zeros_like;
use crate::sampling::{eval_plan, realize_episode, EpisodePlan, SamplingConfig, VideoMeta};
use crate::synth::Dataset;
use crate::tensor::{ConvKernel, Real};

/// 8-bit grayscale raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    /// Maps values in `[0, 1]` to gray levels, replicating each value into a
    /// `scale x scale` block.
    pub fn from_unit(values: &[f32], width: usize, height: usize, scale: usize) -> Self {
        let scale = scale.max(1);
        let (w, h) = (width * scale, height * scale);
        let mut pixels = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let v = values[(y / scale) * width + x / scale].clamp(0.0, 1.0);
                pixels.push((v * 255.0).round() as u8);
            }
        }
        Self {
            width: w,
            height: h,
            pixels,
        }
    }

    pub fn write_pgm(&self, w: &mut impl Write) -> Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.pixels)?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_pgm(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// Per-frame gradient magnitude of a class score with respect to the inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMaps {
    pub plan: EpisodePlan,
    pub target: usize,
    /// Video frame index of each map, clip-major.
    pub frames: Vec<usize>,
    /// Maps of `plan.crop_rows x plan.crop_cols`, jointly scaled into `[0, 1]`.
    pub maps: Vec<Vec<f32>>,
}

impl SaliencyMaps {
    /// Mean saliency on sprite pixels over mean saliency on background pixels,
    /// pooled over all frames. `None` if either region is empty or the
    /// background carries no saliency at all.
    pub fn sprite_ratio(&self, ds: &Dataset, video: usize) -> Option<f64> {
        let p = &self.plan;
        let v = &ds.videos[video];
        let (mut on, mut n_on, mut off, mut n_off) = (0.0, 0usize, 0.0, 0usize);
        for (map, &t) in self.maps.iter().zip(&self.frames) {
            let frame = ds.frame(v, t);
            for y in 0..p.crop_rows {
                for x in 0..p.crop_cols {
                    let sprite = (0..ds.channels)
                        .any(|c| frame[(c * ds.height + p.crop_row + y) * ds.width + p.crop_col + x] > 0.0);
                    let s = f64::from(map[y * p.crop_cols + x]);
                    if sprite {
                        on += s;
                        n_on += 1;
                    } else {
                        off += s;
                        n_off += 1;
                    }
                }
            }
        }
        if n_on == 0 || n_off == 0 || off == 0.0 {
            return None;
        }
        Some((on / n_on as f64) / (off / n_off as f64))
    }

    pub fn images(&self, scale: usize) -> Vec<GrayImage> {
        self.maps
            .iter()
            .map(|m| GrayImage::from_unit(m, self.plan.crop_cols, self.plan.crop_rows, scale))
            .collect()
    }
}

/// Backpropagates the mean-over-steps score of `target` in both streams to
/// the input clips. A frame's map is the L2 norm over its appearance channels
/// and the two channels of the flow field leaving it.
pub fn saliency<T: Real>(
    model: &TwoStreamModel<T>,
    ds: &Dataset,
    video: usize,
    target: usize,
    sampling: &SamplingConfig,
) -> Result<SaliencyMaps> {
    if target >= model.num_classes() {
        return Err(Error::OutOfRange(format!(
            "class {target} of a {}-class model",
            model.num_classes()
        )));
    }
    let v = ds
        .videos
        .get(video)
        .ok_or_else(|| Error::OutOfRange(format!("video {video} of {}", ds.videos.len())))?;
    let plan = eval_plan(VideoMeta::from(ds), sampling, 1)?;
    let ep = realize_episode::<T>(&plan, ds, v, false)?;
    let opts = BackwardOptions {
        stems: false,
        inputs: true,
    };
    let mut scratch = zeros_like(model);
    let mut grads = Vec::new();
    for (m, clips) in [(Modality::Rgb, &ep.rgb), (Modality::Flow, &ep.flow)] {
        let trace = model.forward_stream(m, clips, NormMode::PerSample)?;
        let n = trace.scores.len();
        let seed: Vec<Vec<T>> = (0..n)
            .map(|_| {
                (0..model.num_classes())
                    .map(|k| if k == target { T::of(1.0 / n as f64) } else { T::zero() })
                    .collect()
            })
            .collect();
        grads.push(
            model
                .backward_stream(m, &trace, &seed, &mut scratch, opts)?
                .expect("input gradients requested"),
        );
    }
    let (rows, cols) = (plan.crop_rows, plan.crop_cols);
    let plane = rows * cols;
    let per_frame = [ds.channels, 2];
    let mut maps = Vec::with_capacity(plan.n * plan.l_t);
    let mut frames = Vec::with_capacity(plan.n * plan.l_t);
    for clip in 0..plan.n {
        for f in 0..plan.l_t {
            let mut sq = vec![0.0f64; plane];
            for (g, &ch) in grads.iter().zip(&per_frame) {
                let data = g[clip].data();
                for c in f * ch..(f + 1) * ch {
                    for (s, &x) in sq.iter_mut().zip(&data[c * plane..(c + 1) * plane]) {
                        *s += x.as_f64() * x.as_f64();
                    }
                }
            }
            maps.push(sq.into_iter().map(f64::sqrt).collect::<Vec<f64>>());
            frames.push(plan.frame_index(clip, f));
        }
    }
    let peak = maps.iter().flatten().copied().fold(0.0, f64::max);
    let maps = maps
        .into_iter()
        .map(|m| m.into_iter().map(|x| if peak > 0.0 { (x / peak) as f32 } else { 0.0 }).collect())
        .collect();
    Ok(SaliencyMaps {
        plan,
        target,
        frames,
        maps,
    })
}

/// Hidden-to-candidate kernel of `stream` at map location `(i, j)`. A
/// convolutional transition has the same kernel everywhere.
pub fn location_kernel<T: Real>(model: &TwoStreamModel<T>, stream: Modality, i: usize, j: usize) -> Result<ConvKernel<T>> {
    match &model.stream(stream).cell.hc {
        HiddenTransition::Lattice(bank) => bank.location_kernel(i, j),
        HiddenTransition::Conv(k) => Ok(k.clone()),
    }
}

/// One tile per output channel (the kernel averaged over input channels),
/// laid out on a `ceil(sqrt(channels))`-wide square grid, each tap upsampled
/// to `scale x scale` pixels. Values are min-max normalized over the whole
/// grid; a constant grid, and any unused tile, is mid-gray.
pub fn kernel_grid<T: Real>(kernel: &ConvKernel<T>, scale: usize) -> GrayImage {
    let (o, inp, kr, kc) = (kernel.out_channels, kernel.in_channels, kernel.rows, kernel.cols);
    let side = (1..).find(|s| s * s >= o).expect("a square fits");
    let tiles: Vec<Vec<f64>> = (0..o)
        .map(|k| {
            (0..kr * kc)
                .map(|t| (0..inp).map(|l| kernel.weight[kernel.index(k, l, t / kc, t % kc)].as_f64()).sum::<f64>() / inp as f64)
                .collect()
        })
        .collect();
    let lo = tiles.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let hi = tiles.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let norm = |v: f64| if hi > lo { ((v - lo) / (hi - lo)) as f32 } else { 0.5 };
    let (w, h) = (side * kc, side * kr);
    let mut unit = vec![0.5f32; w * h];
    for (k, tile) in tiles.iter().enumerate() {
        let (gy, gx) = (k / side, k % side);
        for t in 0..kr * kc {
            unit[(gy * kr + t / kc) * w + gx * kc + t % kc] = norm(tile[t]);
        }
    }
    GrayImage::from_unit(&unit, w, h, scale)
}

/// Parses `i,j;i,j;...` location lists.
pub fn parse_locations(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (a, b) = p
                .split_once(',')
                .ok_or_else(|| Error::Invalid(format!("location '{p}' must look like i,j")))?;
            let parse = |x: &str| {
                x.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Invalid(format!("location '{p}' must look like i,j")))
            };
            Ok((parse(a)?, parse(b)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::Variant;
    use crate::model::ModelConfig;
    use crate::par::Exec;
    use crate::params::Parameters;
    use crate::synth::{generate, GenerateConfig, SplitPlan, Suite};
    use crate::tensor::LatticeFilterBank;

    fn setup(variant: Variant) -> (TwoStreamModel<f64>, Dataset, SamplingConfig) {
        let ds = generate(
            &GenerateConfig::new(Suite::NonStationary.classes(), SplitPlan::Fractions { count: 2 }, 8),
            Exec::Sequential,
        )
        .unwrap();
        let cfg = ModelConfig {
            variant,
            rgb_channels: 3,
            flow_channels: 6,
            stem_channels: 3,
            hidden_channels: 5,
            input_rows: 14,
            input_cols: 14,
            num_classes: 4,
            share_gates: true,
            norm: true,
            fusion_weight: 0.5,
        };
        let s = SamplingConfig {
            n: 3,
            l_t: 3,
            crop_rows: 14,
            crop_cols: 14,
        };
        (TwoStreamModel::init(&cfg, 2).unwrap(), ds, s)
    }

    #[test]
    fn maps_match_the_crop_and_lie_in_unit_range() {
        let (m, ds, s) = setup(Variant::L2stm);
        let sal = saliency(&m, &ds, 0, 1, &s).unwrap();
        assert_eq!(sal.maps.len(), 9);
        assert!(sal.maps.iter().all(|x| x.len() == 14 * 14));
        let peak = sal.maps.iter().flatten().copied().fold(0.0f32, f32::max);
        assert_eq!(peak, 1.0);
        assert!(sal.maps.iter().flatten().all(|&x| (0.0..=1.0).contains(&x)));
        assert_eq!(sal.images(2)[0].width, 28);
    }

    #[test]
    fn zero_stems_and_classifiers_give_zero_saliency() {
        let (mut m, ds, s) = setup(Variant::Convlstm);
        for v in m.views_mut() {
            if v.name.contains(".stem.") || v.name.contains(".classifier.") {
                v.data.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let sal = saliency(&m, &ds, 0, 0, &s).unwrap();
        assert!(sal.maps.iter().flatten().all(|&x| x == 0.0));
        assert_eq!(sal.sprite_ratio(&ds, 0), None);
    }

    #[test]
    fn bad_target_is_rejected() {
        let (m, ds, s) = setup(Variant::L2stm);
        assert!(matches!(saliency(&m, &ds, 0, 4, &s), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn zero_kernel_is_mid_gray() {
        let k = ConvKernel::<f64>::zeros(5, 2, 3, 3).unwrap();
        let img = kernel_grid(&k, 4);
        assert_eq!((img.width, img.height), (3 * 3 * 4, 3 * 3 * 4));
        assert!(img.pixels.iter().all(|&p| p == 128));
    }

    #[test]
    fn grid_side_is_ceil_sqrt_of_channels() {
        for (o, side) in [(1, 1), (4, 2), (5, 3), (9, 3), (10, 4)] {
            let mut k = ConvKernel::<f64>::zeros(o, 1, 3, 3).unwrap();
            k.weight.iter_mut().enumerate().for_each(|(i, w)| *w = i as f64);
            let img = kernel_grid(&k, 1);
            assert_eq!((img.width, img.height), (3 * side, 3 * side));
            assert!(img.pixels.contains(&0) && img.pixels.contains(&255));
        }
    }

    #[test]
    fn tied_bank_gives_identical_location_images() {
        let (mut m, _, _) = setup(Variant::L2stm);
        let mut k = ConvKernel::<f64>::zeros(5, 5, 3, 3).unwrap();
        k.weight.iter_mut().enumerate().for_each(|(i, w)| *w = (i as f64 * 0.37).sin());
        if let HiddenTransition::Lattice(b) = &mut m.rgb.cell.hc {
            *b = LatticeFilterBank::tied(&k, 7, 7);
        }
        let first = kernel_grid(&location_kernel(&m, Modality::Rgb, 0, 0).unwrap(), 3);
        for (i, j) in [(0, 6), (3, 3), (6, 0)] {
            assert_eq!(kernel_grid(&location_kernel(&m, Modality::Rgb, i, j).unwrap(), 3), first);
        }
        assert!(location_kernel(&m, Modality::Rgb, 7, 0).is_err());
    }

    #[test]
    fn pgm_header_and_locations() {
        let img = GrayImage::from_unit(&[0.0, 1.0], 2, 1, 1);
        let mut buf = Vec::new();
        img.write_pgm(&mut buf).unwrap();
        assert_eq!(buf, b"P5\n2 1\n255\n\x00\xff");
        assert_eq!(parse_locations("0,0; 3,4").unwrap(), vec![(0, 0), (3, 4)]);
        assert!(parse_locations("1").is_err());
    }
}
