//! Synthetic IVUS-like cases with exact ground truth.
//!
//! Each frame is a dark lumen inside a bright, speckled plaque annulus,
//! surrounded by mid-grey adventitia. Vessel and lumen outlines are ellipses
//! whose parameters drift smoothly from frame to frame; the lumen size is
//! chosen so that the plaque burden stays inside the case's risk band.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::par;
use crate::pgm;
use crate::seed;
use crate::tensor::Tensor;

/// Plaque-burden risk band: below 0.50, 0.50 to 0.70, above 0.70.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BurdenBand {
    Low,
    Moderate,
    High,
}

pub const LOW_RISK_LIMIT: f64 = 0.50;
pub const HIGH_RISK_LIMIT: f64 = 0.70;

/// Frame-level band proportions of the first clinical client
/// (6,039 / 16,592 / 3,411 of 26,042 frames).
pub const DEFAULT_BAND_MIX: [f64; 3] = [6039.0 / 26042.0, 16592.0 / 26042.0, 3411.0 / 26042.0];

impl BurdenBand {
    pub const ALL: [BurdenBand; 3] = [BurdenBand::Low, BurdenBand::Moderate, BurdenBand::High];

    pub fn classify(index: f64) -> BurdenBand {
        if index < LOW_RISK_LIMIT {
            BurdenBand::Low
        } else if index <= HIGH_RISK_LIMIT {
            BurdenBand::Moderate
        } else {
            BurdenBand::High
        }
    }

    pub fn contains(self, index: f64) -> bool {
        BurdenBand::classify(index) == self
    }

    /// Range the generator draws per-frame burden from, kept clear of the
    /// band edges so rasterisation error cannot cross them.
    fn generation_range(self) -> (f64, f64) {
        match self {
            BurdenBand::Low => (0.32, 0.45),
            BurdenBand::Moderate => (0.54, 0.66),
            BurdenBand::High => (0.74, 0.84),
        }
    }

    fn ordinal(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub semi_x: f64,
    pub semi_y: f64,
    /// Rotation in radians.
    pub angle: f64,
}

impl Ellipse {
    /// Implicit value: below 1 inside, 1 on the outline.
    pub fn level(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.semi_x).powi(2) + (v / self.semi_y).powi(2)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.level(x, y) <= 1.0
    }

    pub fn boundary_point(&self, t: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let u = self.semi_x * t.cos();
        let v = self.semi_y * t.sin();
        (self.cx + u * c - v * s, self.cy + u * s + v * c)
    }

    fn half_extents(&self) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let (a, b) = (self.semi_x, self.semi_y);
        ((a * a * c * c + b * b * s * s).sqrt(), (a * a * s * s + b * b * c * c).sqrt())
    }

    pub fn rasterize(&self, height: usize, width: usize) -> BinaryMask {
        BinaryMask::from_fn(height, width, |y, x| self.contains(x as f64, y as f64))
    }
}

/// Outer (EEM) and inner (lumen) outlines of one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameGeometry {
    pub eem: Ellipse,
    pub lumen: Ellipse,
}

impl FrameGeometry {
    /// Lumen strictly inside the EEM, EEM inside the image.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let inside = (0..360).all(|i| {
            let (x, y) = self.lumen.boundary_point(i as f64 * PI / 180.0);
            self.eem.level(x, y) < 1.0
        });
        if !inside || self.lumen.semi_x <= 0.0 || self.lumen.semi_y <= 0.0 {
            return Err(Error::config("lumen ellipse is not strictly inside the EEM ellipse"));
        }
        let (hx, hy) = self.eem.half_extents();
        let fits = self.eem.cx - hx >= 0.0
            && self.eem.cy - hy >= 0.0
            && self.eem.cx + hx <= (width - 1) as f64
            && self.eem.cy + hy <= (height - 1) as f64;
        if !fits {
            return Err(Error::config("EEM ellipse leaves the image"));
        }
        Ok(())
    }
}

/// Mean grey levels of the three tissue classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Contrast {
    pub lumen: f64,
    pub plaque: f64,
    pub adventitia: f64,
}

impl Default for Contrast {
    fn default() -> Self {
        Contrast { lumen: 0.12, plaque: 0.78, adventitia: 0.45 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseParams {
    /// Multiplicative speckle amplitude; the factor is `1 + a (4 u1 u2 - 1)`.
    pub speckle: f64,
    /// Fractional intensity loss at the frame's inscribed radius.
    pub attenuation: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams { speckle: 0.6, attenuation: 0.3 }
    }
}

impl NoiseParams {
    pub fn none() -> Self {
        NoiseParams { speckle: 0.0, attenuation: 0.0 }
    }
}

/// Angular sectors (about the frame centre) where echoes outside the lumen
/// are suppressed, hiding the vessel outline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalDropout {
    /// `(centre, half width)` in degrees, counter-clockwise from +x.
    pub sectors_deg: Vec<(f64, f64)>,
    /// Fraction of intensity removed inside a sector.
    pub strength: f64,
    /// Per-case random shift of sector centres, in degrees.
    pub jitter_deg: f64,
}

impl SignalDropout {
    /// Loss on the left and right sides of the frame.
    pub fn lateral() -> Self {
        SignalDropout {
            sectors_deg: vec![(0.0, 14.0), (180.0, 14.0)],
            strength: 0.85,
            jitter_deg: 10.0,
        }
    }

    fn factor(&self, deg: f64, shift: f64) -> f64 {
        let hit = self.sectors_deg.iter().any(|&(c, hw)| {
            let d = (deg - c - shift).rem_euclid(360.0);
            d.min(360.0 - d) <= hw
        });
        if hit {
            1.0 - self.strength
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub height: usize,
    pub width: usize,
    pub pixel_spacing_mm: f64,
    pub frame_spacing_mm: f64,
    pub frames_min: usize,
    pub frames_max: usize,
    pub eem_semi_min: f64,
    pub eem_semi_max: f64,
    pub center_jitter: f64,
    pub contrast: Contrast,
    pub noise: NoiseParams,
    pub dropout: Option<SignalDropout>,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            height: 64,
            width: 64,
            pixel_spacing_mm: 0.02,
            frame_spacing_mm: 3.0,
            frames_min: 8,
            frames_max: 16,
            eem_semi_min: 16.0,
            eem_semi_max: 26.0,
            center_jitter: 2.0,
            contrast: Contrast::default(),
            noise: NoiseParams::default(),
            dropout: None,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::config("phantom frames must be at least 8x8"));
        }
        if self.frames_min < 1 || self.frames_max < self.frames_min {
            return Err(Error::config("need 1 <= frames_min <= frames_max"));
        }
        if !(self.eem_semi_min > 2.0 && self.eem_semi_max >= self.eem_semi_min) {
            return Err(Error::config("need 2 < eem_semi_min <= eem_semi_max"));
        }
        let half = self.height.min(self.width) as f64 / 2.0 - 1.0;
        if self.eem_semi_max + self.center_jitter > half {
            return Err(Error::config(format!(
                "vessel up to {} px from centre does not fit a {}x{} frame",
                self.eem_semi_max + self.center_jitter,
                self.height,
                self.width
            )));
        }
        if self.pixel_spacing_mm <= 0.0 || self.frame_spacing_mm <= 0.0 {
            return Err(Error::config("spacings must be positive"));
        }
        Ok(())
    }
}

/// One generated frame with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedFrame {
    pub frame: Tensor,
    pub eem: BinaryMask,
    pub lumen: BinaryMask,
}

/// Renders one frame. `dropout_shift` offsets the dropout sectors (degrees).
pub fn gen_frame(seed: u64, geometry: &FrameGeometry, config: &PhantomConfig, dropout_shift: f64) -> Result<GeneratedFrame> {
    let (h, w) = (config.height, config.width);
    geometry.validate(h, w)?;
    let eem = geometry.eem.rasterize(h, w);
    let lumen = geometry.lumen.rasterize(h, w).and(&eem)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let inscribed = h.min(w) as f64 / 2.0;
    let c = config.contrast;
    let noise = config.noise;
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let in_lumen = lumen.get(y, x);
            let mut v = if in_lumen {
                c.lumen
            } else if eem.get(y, x) {
                c.plaque
            } else {
                c.adventitia
            };
            if noise.speckle > 0.0 {
                let u1: f64 = rng.gen();
                let u2: f64 = rng.gen();
                v *= 1.0 + noise.speckle * (4.0 * u1 * u2 - 1.0);
            }
            let dx = x as f64 - cx;
            let dy = cy - y as f64;
            if noise.attenuation > 0.0 {
                v *= 1.0 - noise.attenuation * (dx.hypot(dy) / inscribed).min(1.0);
            }
            if let Some(d) = &config.dropout {
                if !in_lumen {
                    v *= d.factor(dy.atan2(dx).to_degrees().rem_euclid(360.0), dropout_shift);
                }
            }
            // quantised to 8 bits so frames survive a PGM round trip exactly
            data.push((v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0);
        }
    }
    Ok(GeneratedFrame {
        frame: Tensor::new(&[1, h, w], data)?,
        eem,
        lumen,
    })
}

/// One synthetic patient.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomCase {
    pub case_id: String,
    pub band: BurdenBand,
    pub frames: Vec<Tensor>,
    pub eem_masks: Vec<BinaryMask>,
    pub lumen_masks: Vec<BinaryMask>,
    pub plaque_masks: Vec<BinaryMask>,
    pub pixel_spacing_mm: f64,
    pub frame_spacing_mm: f64,
}

/// `(EEM - lumen) / EEM` from pixel counts, 0 for an empty EEM.
pub fn burden_index(eem_px: usize, lumen_px: usize) -> f64 {
    if eem_px == 0 {
        0.0
    } else {
        (eem_px as f64 - lumen_px as f64) / eem_px as f64
    }
}

impl PhantomCase {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn burden_indices(&self) -> Vec<f64> {
        self.eem_masks
            .iter()
            .zip(&self.lumen_masks)
            .map(|(e, l)| burden_index(e.count(), l.count()))
            .collect()
    }

    pub fn mean_burden_index(&self) -> f64 {
        let b = self.burden_indices();
        b.iter().sum::<f64>() / b.len() as f64
    }
}

fn reflect(mut v: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    for _ in 0..8 {
        if v < lo {
            v = 2.0 * lo - v;
        } else if v > hi {
            v = 2.0 * hi - v;
        } else {
            return v;
        }
    }
    v.clamp(lo, hi)
}

struct WalkState {
    semi_x: f64,
    semi_y: f64,
    angle: f64,
    off_x: f64,
    off_y: f64,
    burden: f64,
    aspect: f64,
    ecc_x: f64,
    ecc_y: f64,
}

const ASPECT_RANGE: (f64, f64) = (0.9, 1.1);

impl WalkState {
    fn init(rng: &mut ChaCha8Rng, cfg: &PhantomConfig, band: BurdenBand) -> Self {
        let (blo, bhi) = band.generation_range();
        let j = cfg.center_jitter;
        WalkState {
            semi_x: rng.gen_range(cfg.eem_semi_min..=cfg.eem_semi_max),
            semi_y: rng.gen_range(cfg.eem_semi_min..=cfg.eem_semi_max),
            angle: rng.gen_range(0.0..PI),
            off_x: rng.gen_range(-j..=j),
            off_y: rng.gen_range(-j..=j),
            burden: rng.gen_range(blo..=bhi),
            aspect: rng.gen_range(ASPECT_RANGE.0..=ASPECT_RANGE.1),
            ecc_x: rng.gen_range(-1.0..=1.0),
            ecc_y: rng.gen_range(-1.0..=1.0),
        }
    }

    fn step(&mut self, rng: &mut ChaCha8Rng, cfg: &PhantomConfig, band: BurdenBand) {
        let mut n = |sd: f64| Normal::new(0.0, sd).expect("positive sd").sample(rng);
        let (blo, bhi) = band.generation_range();
        let j = cfg.center_jitter;
        self.semi_x = reflect(self.semi_x + n(0.4), cfg.eem_semi_min, cfg.eem_semi_max);
        self.semi_y = reflect(self.semi_y + n(0.4), cfg.eem_semi_min, cfg.eem_semi_max);
        self.angle += n(0.04);
        self.off_x = reflect(self.off_x + n(0.25), -j, j);
        self.off_y = reflect(self.off_y + n(0.25), -j, j);
        self.burden = reflect(self.burden + n(0.01), blo, bhi);
        self.aspect = reflect(self.aspect + n(0.01), ASPECT_RANGE.0, ASPECT_RANGE.1);
        self.ecc_x = reflect(self.ecc_x + n(0.05), -1.0, 1.0);
        self.ecc_y = reflect(self.ecc_y + n(0.05), -1.0, 1.0);
    }

    fn geometry(&self, cfg: &PhantomConfig) -> Result<FrameGeometry> {
        let eem = Ellipse {
            cx: cfg.width as f64 / 2.0 + self.off_x,
            cy: cfg.height as f64 / 2.0 + self.off_y,
            semi_x: self.semi_x,
            semi_y: self.semi_y,
            angle: self.angle,
        };
        let s = (1.0 - self.burden).sqrt();
        let (lx, ly) = (s * self.semi_x * self.aspect, s * self.semi_y / self.aspect);
        let slack = 1.0 - (s * self.aspect).max(s / self.aspect);
        let mut reach = 0.8 * slack * self.semi_x.min(self.semi_y);
        let (sin, cos) = self.angle.sin_cos();
        for _ in 0..12 {
            let (u, v) = (self.ecc_x * reach, self.ecc_y * reach);
            let lumen = Ellipse {
                cx: eem.cx + u * cos - v * sin,
                cy: eem.cy + u * sin + v * cos,
                semi_x: lx,
                semi_y: ly,
                angle: self.angle,
            };
            let g = FrameGeometry { eem, lumen };
            if g.validate(cfg.height, cfg.width).is_ok() {
                return Ok(g);
            }
            reach *= 0.5;
        }
        let lumen = Ellipse { cx: eem.cx, cy: eem.cy, semi_x: lx, semi_y: ly, angle: self.angle };
        let g = FrameGeometry { eem, lumen };
        g.validate(cfg.height, cfg.width)?;
        Ok(g)
    }
}

/// Generates one case whose mean burden index lies in `band`.
pub fn gen_case(case_id: &str, seed: u64, band: BurdenBand, n_frames: usize, config: &PhantomConfig) -> Result<PhantomCase> {
    config.validate()?;
    if n_frames == 0 {
        return Err(Error::config("a case needs at least one frame"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = WalkState::init(&mut rng, config, band);
    let shift = match &config.dropout {
        Some(d) if d.jitter_deg > 0.0 => rng.gen_range(-d.jitter_deg..=d.jitter_deg),
        _ => 0.0,
    };
    let mut case = PhantomCase {
        case_id: case_id.to_string(),
        band,
        frames: Vec::with_capacity(n_frames),
        eem_masks: Vec::with_capacity(n_frames),
        lumen_masks: Vec::with_capacity(n_frames),
        plaque_masks: Vec::with_capacity(n_frames),
        pixel_spacing_mm: config.pixel_spacing_mm,
        frame_spacing_mm: config.frame_spacing_mm,
    };
    for i in 0..n_frames {
        if i > 0 {
            state.step(&mut rng, config, band);
        }
        let geometry = state.geometry(config)?;
        let f = gen_frame(seed::derive(seed, i as u64), &geometry, config, shift)?;
        case.plaque_masks.push(f.eem.minus(&f.lumen)?);
        case.frames.push(f.frame);
        case.eem_masks.push(f.eem);
        case.lumen_masks.push(f.lumen);
    }
    let mean = case.mean_burden_index();
    if !band.contains(mean) {
        return Err(Error::config(format!(
            "band {band:?} unreachable with this geometry: mean burden {mean:.3}"
        )));
    }
    Ok(case)
}

/// Splits `n_cases` across bands by largest remainder. Ties in the remainder
/// go to the later band.
pub fn allocate_bands(n_cases: usize, mix: [f64; 3]) -> Result<[usize; 3]> {
    if mix.iter().any(|&p| !(p >= 0.0)) || (mix.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::config(format!("band proportions {mix:?} must be non-negative and sum to 1")));
    }
    let nonzero = mix.iter().filter(|&&p| p > 0.0).count();
    if n_cases < nonzero {
        return Err(Error::config(format!(
            "{n_cases} cases cannot cover {nonzero} non-empty bands"
        )));
    }
    let quotas: Vec<f64> = mix.iter().map(|p| p * n_cases as f64).collect();
    let mut counts = [0usize; 3];
    for (c, q) in counts.iter_mut().zip(&quotas) {
        *c = q.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.partial_cmp(&ra).unwrap().then(b.cmp(&a))
    });
    let mut left = n_cases - counts.iter().sum::<usize>();
    for &i in &order {
        if left == 0 {
            break;
        }
        if mix[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    Ok(counts)
}

pub fn case_id(index: usize) -> String {
    format!("case_{index:03}")
}

/// Generates `n_cases` cases in memory. Case `i` depends only on
/// `(seed, i)` and its band.
pub fn generate_cases(seed: u64, n_cases: usize, band_mix: [f64; 3], config: &PhantomConfig) -> Result<Vec<PhantomCase>> {
    config.validate()?;
    let counts = allocate_bands(n_cases, band_mix)?;
    let mut bands: Vec<BurdenBand> = BurdenBand::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&b, n)| std::iter::repeat_n(b, n))
        .collect();
    bands.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(seed, seed::TAG_BANDS)));
    par::map_range(n_cases, |i| {
        let case_seed = seed::derive_path(seed, &[seed::TAG_CASE, i as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
        let n_frames = rng.gen_range(config.frames_min..=config.frames_max);
        gen_case(&case_id(i), rng.gen(), bands[i], n_frames, config)
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub case_id: String,
    pub band: BurdenBand,
    pub frame_count: usize,
    pub frames: Vec<String>,
    pub eem_masks: Vec<String>,
    pub lumen_masks: Vec<String>,
    pub plaque_masks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub pixel_spacing_mm: f64,
    pub frame_spacing_mm: f64,
    pub config: PhantomConfig,
    pub cases: Vec<CaseEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

fn frame_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
}

/// Writes PGM files for every frame and mask plus `manifest.json`.
pub fn write_dataset(cases: &[PhantomCase], seed: u64, config: &PhantomConfig, out_dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(out_dir)?;
    let (h, w) = (config.height, config.width);
    let mut entries = Vec::with_capacity(cases.len());
    for case in cases {
        fs::create_dir_all(out_dir.join(&case.case_id))?;
        let mut entry = CaseEntry {
            case_id: case.case_id.clone(),
            band: case.band,
            frame_count: case.frame_count(),
            frames: vec![],
            eem_masks: vec![],
            lumen_masks: vec![],
            plaque_masks: vec![],
        };
        for i in 0..case.frame_count() {
            let rel = |kind: &str| format!("{}/{kind}_{i:03}.pgm", case.case_id);
            let items: [(&str, Vec<u8>, &mut Vec<String>); 4] = [
                ("frame", frame_bytes(&case.frames[i]), &mut entry.frames),
                ("eem", case.eem_masks[i].to_bytes(), &mut entry.eem_masks),
                ("lumen", case.lumen_masks[i].to_bytes(), &mut entry.lumen_masks),
                ("plaque", case.plaque_masks[i].to_bytes(), &mut entry.plaque_masks),
            ];
            for (kind, bytes, list) in items {
                let path = rel(kind);
                pgm::write(out_dir.join(&path), w, h, &bytes)?;
                list.push(path);
            }
        }
        entries.push(entry);
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        seed,
        pixel_spacing_mm: config.pixel_spacing_mm,
        frame_spacing_mm: config.frame_spacing_mm,
        config: config.clone(),
        cases: entries,
    };
    fs::write(out_dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// Generates and writes a dataset.
pub fn gen_dataset(seed: u64, n_cases: usize, band_mix: [f64; 3], config: &PhantomConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let cases = generate_cases(seed, n_cases, band_mix, config)?;
    write_dataset(&cases, seed, config, out_dir)
}

fn read_mask(path: &Path) -> Result<BinaryMask> {
    let (w, h, px) = pgm::read(path)?;
    BinaryMask::from_bytes(h, w, &px)
}

/// Loads a dataset from a manifest file or the directory containing one.
pub fn load_dataset(path: &Path) -> Result<(DatasetManifest, Vec<PhantomCase>)> {
    let manifest_path: PathBuf = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    let cases = manifest
        .cases
        .iter()
        .map(|e| -> Result<PhantomCase> {
            let frames = e
                .frames
                .iter()
                .map(|p| {
                    let (w, h, px) = pgm::read(base.join(p))?;
                    Tensor::new(&[1, h, w], px.iter().map(|&b| b as f32 / 255.0).collect())
                })
                .collect::<Result<Vec<_>>>()?;
            let masks = |list: &[String]| list.iter().map(|p| read_mask(&base.join(p))).collect::<Result<Vec<_>>>();
            let case = PhantomCase {
                case_id: e.case_id.clone(),
                band: e.band,
                frames,
                eem_masks: masks(&e.eem_masks)?,
                lumen_masks: masks(&e.lumen_masks)?,
                plaque_masks: masks(&e.plaque_masks)?,
                pixel_spacing_mm: manifest.pixel_spacing_mm,
                frame_spacing_mm: manifest.frame_spacing_mm,
            };
            if case.frames.len() != e.frame_count
                || case.eem_masks.len() != e.frame_count
                || case.lumen_masks.len() != e.frame_count
                || case.plaque_masks.len() != e.frame_count
            {
                return Err(Error::config(format!("case {} lists inconsistent file counts", e.case_id)));
            }
            Ok(case)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, cases))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    /// Stratified by band, then dealt round-robin.
    Iid,
    /// Contiguous blocks of band-sorted cases.
    ByBand,
}

/// Assigns whole cases to clients. Returns case indices per client.
pub fn partition_clients(bands: &[BurdenBand], n_clients: usize, mode: PartitionMode) -> Result<Vec<Vec<usize>>> {
    if n_clients == 0 || bands.len() < n_clients {
        return Err(Error::config(format!(
            "cannot split {} cases across {n_clients} clients without an empty client",
            bands.len()
        )));
    }
    let mut by_band: Vec<usize> = (0..bands.len()).collect();
    by_band.sort_by_key(|&i| bands[i].ordinal());
    let mut clients = vec![Vec::new(); n_clients];
    match mode {
        PartitionMode::Iid => {
            for (k, &i) in by_band.iter().enumerate() {
                clients[k % n_clients].push(i);
            }
        }
        PartitionMode::ByBand => {
            let base = bands.len() / n_clients;
            let extra = bands.len() % n_clients;
            let mut it = by_band.into_iter();
            for (c, client) in clients.iter_mut().enumerate() {
                let take = base + usize::from(c < extra);
                client.extend(it.by_ref().take(take));
            }
        }
    }
    Ok(clients)
}
