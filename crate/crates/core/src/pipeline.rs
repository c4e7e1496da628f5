//! Two-stage inference: vessel and lumen models run side by side, their
//! binarised outputs are cleaned up, and plaque is the difference.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::par;
use crate::polar::{self, PolarGrid};
use crate::tensor::Tensor;
use crate::unet::UNetModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CoordinateMode {
    Cartesian,
    #[default]
    Polar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PostProcess {
    None,
    /// Largest 4-connected component with holes filled.
    LargestComponentFill,
    /// Per-column radial fill plus circular median of the radius profile.
    #[default]
    RadialConsolidate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Eem,
    Lumen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub coordinate_mode: CoordinateMode,
    pub binarize_threshold: f64,
    pub postprocess: PostProcess,
    pub grid: PolarGrid,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            coordinate_mode: CoordinateMode::Polar,
            binarize_threshold: 0.5,
            postprocess: PostProcess::RadialConsolidate,
            grid: PolarGrid::desk(),
        }
    }
}

impl PipelineConfig {
    pub fn cartesian() -> Self {
        PipelineConfig {
            coordinate_mode: CoordinateMode::Cartesian,
            postprocess: PostProcess::LargestComponentFill,
            ..PipelineConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(Error::config(format!(
                "binarize threshold {} outside (0, 1)",
                self.binarize_threshold
            )));
        }
        if self.postprocess == PostProcess::RadialConsolidate && self.coordinate_mode != CoordinateMode::Polar {
            return Err(Error::config("radial consolidation needs polar mode"));
        }
        if self.coordinate_mode == CoordinateMode::Polar {
            self.grid.validate()?;
        }
        Ok(())
    }

    /// Input extent the models must accept for `height x width` frames.
    pub fn model_input_dims(&self, height: usize, width: usize) -> (usize, usize) {
        match self.coordinate_mode {
            CoordinateMode::Cartesian => (height, width),
            CoordinateMode::Polar => (self.grid.rows(), self.grid.cols()),
        }
    }

    /// Maps a `1 x H x W` frame into model space.
    pub fn model_input(&self, frame: &Tensor) -> Result<Tensor> {
        match self.coordinate_mode {
            CoordinateMode::Cartesian => Ok(frame.clone()),
            CoordinateMode::Polar => polar::to_polar(frame, &self.grid),
        }
    }

    /// Maps a ground-truth mask into model space.
    pub fn model_target(&self, mask: &BinaryMask) -> Result<BinaryMask> {
        match self.coordinate_mode {
            CoordinateMode::Cartesian => Ok(mask.clone()),
            CoordinateMode::Polar => polar::to_polar_mask(mask, &self.grid),
        }
    }
}

/// Output of the pipeline for one frame. Masks are in frame space; the
/// probability maps stay in model space.
#[derive(Debug, Clone, PartialEq)]
pub struct SegResult {
    pub eem_mask: BinaryMask,
    pub lumen_mask: BinaryMask,
    pub plaque_mask: BinaryMask,
    pub eem_prob: Tensor,
    pub lumen_prob: Tensor,
}

/// 1 where `prob > threshold`. Accepts `H x W` or `1 x H x W` maps.
pub fn binarize(prob: &Tensor, threshold: f64) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config(format!("binarize threshold {threshold} outside (0, 1)")));
    }
    let (h, w) = match *prob.shape() {
        [h, w] | [1, h, w] => (h, w),
        ref s => return Err(Error::shape(format!("cannot binarize a map of shape {s:?}"))),
    };
    BinaryMask::new(h, w, prob.data().iter().map(|&p| p as f64 > threshold).collect())
}

const NEIGHBOURS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

fn flood(mask: &BinaryMask, seeds: impl IntoIterator<Item = (usize, usize)>, value: bool, label: &mut [usize], id: usize) -> usize {
    let (h, w) = mask.dims();
    let mut queue: VecDeque<(usize, usize)> = VecDeque::new();
    let mut size = 0;
    for (y, x) in seeds {
        if mask.get(y, x) == value && label[y * w + x] == 0 {
            label[y * w + x] = id;
            queue.push_back((y, x));
        }
    }
    while let Some((y, x)) = queue.pop_front() {
        size += 1;
        for (dy, dx) in NEIGHBOURS {
            let (ny, nx) = (y as isize + dy, x as isize + dx);
            if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                continue;
            }
            let (ny, nx) = (ny as usize, nx as usize);
            if mask.get(ny, nx) == value && label[ny * w + nx] == 0 {
                label[ny * w + nx] = id;
                queue.push_back((ny, nx));
            }
        }
    }
    size
}

/// Keeps the largest 4-connected foreground component (the earliest in
/// raster order on ties) and fills every background region that does not
/// touch the border.
pub fn postprocess_cartesian(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = mask.dims();
    let mut label = vec![0usize; h * w];
    let mut best = (0usize, 0usize);
    let mut next = 1;
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) && label[y * w + x] == 0 {
                let size = flood(mask, [(y, x)], true, &mut label, next);
                if size > best.1 {
                    best = (next, size);
                }
                next += 1;
            }
        }
    }
    if best.1 == 0 {
        return BinaryMask::empty(h, w);
    }
    let kept = BinaryMask::from_fn(h, w, |y, x| label[y * w + x] == best.0);
    let mut outside = vec![0usize; h * w];
    let border = (0..w)
        .flat_map(|x| [(0, x), (h - 1, x)])
        .chain((0..h).flat_map(|y| [(y, 0), (y, w - 1)]));
    flood(&kept, border, false, &mut outside, 1);
    BinaryMask::from_fn(h, w, |y, x| outside[y * w + x] == 0)
}

/// Contiguous runs `[start, end)` of set rows in one column.
fn column_runs(mask: &BinaryMask, col: usize) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    for r in 0..mask.height() {
        match (mask.get(r, col), start) {
            (true, None) => start = Some(r),
            (false, Some(s)) => {
                runs.push((s, r));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, mask.height()));
    }
    runs
}

/// Filled radius of one column before smoothing.
fn consolidated_radius(mask: &BinaryMask, col: usize, region: Region) -> usize {
    let runs = column_runs(mask, col);
    match region {
        // innermost run wins ties
        Region::Lumen => runs
            .iter()
            .fold(None::<(usize, usize)>, |best, &run| match best {
                Some(b) if b.1 - b.0 >= run.1 - run.0 => Some(b),
                _ => Some(run),
            })
            .map_or(0, |run| run.1),
        Region::Eem => runs.last().map_or(0, |run| run.1),
    }
}

pub const MEDIAN_WINDOW: usize = 5;
const MEDIAN_MAX_PASSES: usize = 256;

fn circular_median_pass(profile: &[usize]) -> Vec<usize> {
    let n = profile.len();
    let half = MEDIAN_WINDOW / 2;
    (0..n)
        .map(|i| {
            let mut window: Vec<usize> = (0..MEDIAN_WINDOW).map(|k| profile[(i + n * half + k - half) % n]).collect();
            window.sort_unstable();
            window[half]
        })
        .collect()
}

/// Repeats the circular median until the profile is a root of it. A
/// profile that never settles falls back to its overall median, which is.
pub fn smooth_radius_profile(profile: &[usize]) -> Vec<usize> {
    if profile.len() < MEDIAN_WINDOW {
        return profile.to_vec();
    }
    let mut current = profile.to_vec();
    for _ in 0..MEDIAN_MAX_PASSES {
        let next = circular_median_pass(&current);
        if next == current {
            return current;
        }
        current = next;
    }
    let mut sorted = profile.to_vec();
    sorted.sort_unstable();
    vec![sorted[sorted.len() / 2]; profile.len()]
}

/// Star-convex consolidation of a polar mask (rows are radii).
pub fn postprocess_polar(polar_mask: &BinaryMask, region: Region) -> BinaryMask {
    let (rows, cols) = polar_mask.dims();
    let raw: Vec<usize> = (0..cols).map(|c| consolidated_radius(polar_mask, c, region)).collect();
    let smooth = smooth_radius_profile(&raw);
    BinaryMask::from_fn(rows, cols, |r, c| r < smooth[c])
}

fn check_model(model: &UNetModel, dims: (usize, usize), what: &str) -> Result<()> {
    let cfg = model.config();
    if (cfg.height, cfg.width) != dims {
        return Err(Error::config(format!(
            "{what} model expects {}x{} inputs but the pipeline produces {}x{}",
            cfg.height, cfg.width, dims.0, dims.1
        )));
    }
    Ok(())
}

fn frame_dims(frame: &Tensor) -> Result<(usize, usize)> {
    match *frame.shape() {
        [1, h, w] => Ok((h, w)),
        ref s => Err(Error::shape(format!("expected a 1xHxW frame, got {s:?}"))),
    }
}

fn finish_region(prob: &Tensor, region: Region, config: &PipelineConfig, h: usize, w: usize) -> Result<BinaryMask> {
    let raw = binarize(prob, config.binarize_threshold)?;
    let cleaned = match config.postprocess {
        PostProcess::None => raw,
        PostProcess::LargestComponentFill => postprocess_cartesian(&raw),
        PostProcess::RadialConsolidate => postprocess_polar(&raw, region),
    };
    match config.coordinate_mode {
        CoordinateMode::Cartesian => Ok(cleaned),
        CoordinateMode::Polar => polar::from_polar(&cleaned, &config.grid, h, w),
    }
}

/// Stage 2 from model-space probability maps (`1 x h x w` each).
pub fn assemble(eem_prob: Tensor, lumen_prob: Tensor, config: &PipelineConfig, height: usize, width: usize) -> Result<SegResult> {
    config.validate()?;
    let eem_mask = finish_region(&eem_prob, Region::Eem, config, height, width)?;
    let lumen_mask = finish_region(&lumen_prob, Region::Lumen, config, height, width)?.and(&eem_mask)?;
    let plaque_mask = eem_mask.minus(&lumen_mask)?;
    Ok(SegResult { eem_mask, lumen_mask, plaque_mask, eem_prob, lumen_prob })
}

/// Segments one `1 x H x W` frame.
pub fn segment_frame(frame: &Tensor, eem_model: &UNetModel, lumen_model: &UNetModel, config: &PipelineConfig) -> Result<SegResult> {
    let mut out = segment_frames(std::slice::from_ref(frame), eem_model, lumen_model, config)?;
    Ok(out.remove(0))
}

/// Frames evaluated per forward pass.
const INFERENCE_CHUNK: usize = 16;

/// Segments frames of one size, batching the forward passes.
pub fn segment_frames(frames: &[Tensor], eem_model: &UNetModel, lumen_model: &UNetModel, config: &PipelineConfig) -> Result<Vec<SegResult>> {
    config.validate()?;
    let Some(first) = frames.first() else {
        return Ok(Vec::new());
    };
    let (h, w) = frame_dims(first)?;
    let dims = config.model_input_dims(h, w);
    check_model(eem_model, dims, "EEM")?;
    check_model(lumen_model, dims, "lumen")?;
    let inputs = frames
        .iter()
        .map(|f| {
            if frame_dims(f)? != (h, w) {
                return Err(Error::shape("frames in one call must share a size"));
            }
            config.model_input(f)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut results = Vec::with_capacity(frames.len());
    for chunk in inputs.chunks(INFERENCE_CHUNK) {
        let batch = Tensor::stack(chunk)?;
        let (eem, lumen) = par::join(|| eem_model.predict(&batch), || lumen_model.predict(&batch));
        let (eem, lumen) = (eem?, lumen?);
        let stage2 = par::map_range(chunk.len(), |i| assemble(eem.sample(i)?, lumen.sample(i)?, config, h, w));
        for r in stage2 {
            results.push(r?);
        }
    }
    Ok(results)
}

/// Sizes derived from one frame's masks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameMeasure {
    pub eem_px: usize,
    pub lumen_px: usize,
    pub plaque_px: usize,
    pub eem_mm2: f64,
    pub lumen_mm2: f64,
    pub plaque_mm2: f64,
    pub burden_index: f64,
}

impl FrameMeasure {
    pub fn from_masks(eem: &BinaryMask, lumen: &BinaryMask, plaque: &BinaryMask, pixel_spacing_mm: f64) -> Self {
        let px_area = pixel_spacing_mm * pixel_spacing_mm;
        let (e, l, p) = (eem.count(), lumen.count(), plaque.count());
        FrameMeasure {
            eem_px: e,
            lumen_px: l,
            plaque_px: p,
            eem_mm2: e as f64 * px_area,
            lumen_mm2: l as f64 * px_area,
            plaque_mm2: p as f64 * px_area,
            burden_index: burden_from_areas(e as f64, l as f64),
        }
    }
}

/// `(EEM - lumen) / EEM`, with an empty EEM giving 0.
pub fn burden_from_areas(eem: f64, lumen: f64) -> f64 {
    if eem <= 0.0 {
        0.0
    } else {
        (eem - lumen) / eem
    }
}

pub fn measure(result: &SegResult, pixel_spacing_mm: f64) -> FrameMeasure {
    FrameMeasure::from_masks(&result.eem_mask, &result.lumen_mask, &result.plaque_mask, pixel_spacing_mm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseVolumes {
    pub eem_mm3: f64,
    pub lumen_mm3: f64,
    pub plaque_mm3: f64,
}

/// Rectangular-rule volume from per-frame areas.
pub fn volume(areas_mm2: &[f64], frame_spacing_mm: f64) -> Result<f64> {
    if areas_mm2.is_empty() {
        return Err(Error::config("volume of an empty frame list"));
    }
    Ok(areas_mm2.iter().sum::<f64>() * frame_spacing_mm)
}

pub fn case_volumes(frames: &[FrameMeasure], frame_spacing_mm: f64) -> Result<CaseVolumes> {
    let col = |f: fn(&FrameMeasure) -> f64| frames.iter().map(f).collect::<Vec<_>>();
    Ok(CaseVolumes {
        eem_mm3: volume(&col(|m| m.eem_mm2), frame_spacing_mm)?,
        lumen_mm3: volume(&col(|m| m.lumen_mm2), frame_spacing_mm)?,
        plaque_mm3: volume(&col(|m| m.plaque_mm2), frame_spacing_mm)?,
    })
}
