//! Cartesian <-> polar resampling about the catheter centre.
//!
//! Polar images have one row per integer radius `r = 0..R` and one column per
//! angular step. Angles are measured counter-clockwise from +x with y up, so a
//! sample at `(r, theta)` reads the Cartesian image at
//! `(cx + r cos theta, cy - r sin theta)` (image rows grow downwards).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarGrid {
    pub cx: f64,
    pub cy: f64,
    pub max_radius: usize,
    pub angular_step_deg: f64,
}

impl PolarGrid {
    /// Grid centred on an `height x width` image.
    pub fn centered(height: usize, width: usize, max_radius: usize, angular_step_deg: f64) -> Self {
        PolarGrid {
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            max_radius,
            angular_step_deg,
        }
    }

    /// 32 radii x 120 angles (3 degree steps) on a 64x64 frame.
    pub fn desk() -> Self {
        Self::centered(64, 64, 32, 3.0)
    }

    /// 256 radii x 720 angles (0.5 degree steps) on a 512x512 frame.
    pub fn full_scale() -> Self {
        Self::centered(512, 512, 256, 0.5)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_radius < 1 {
            return Err(Error::config("polar grid radius must be at least 1"));
        }
        if !(self.angular_step_deg > 0.0 && self.angular_step_deg <= 360.0) {
            return Err(Error::config(format!("angular step {} out of range", self.angular_step_deg)));
        }
        let cols = 360.0 / self.angular_step_deg;
        if (cols - cols.round()).abs() > 1e-9 {
            return Err(Error::config(format!(
                "360 is not a multiple of the angular step {}",
                self.angular_step_deg
            )));
        }
        if !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::config("polar grid centre is not finite"));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.max_radius
    }

    pub fn cols(&self) -> usize {
        (360.0 / self.angular_step_deg).round() as usize
    }

    fn check_inside(&self, height: usize, width: usize) -> Result<()> {
        self.validate()?;
        if self.cx < 0.0 || self.cy < 0.0 || self.cx > (width - 1) as f64 || self.cy > (height - 1) as f64 {
            return Err(Error::config(format!(
                "grid centre ({}, {}) outside {height}x{width} image",
                self.cx, self.cy
            )));
        }
        Ok(())
    }

    /// Cartesian sample position of polar cell `(r, col)`.
    fn position(&self, r: usize, col: usize) -> (f64, f64) {
        let theta = (col as f64 * self.angular_step_deg).to_radians();
        let r = r as f64;
        (self.cx + r * theta.cos(), self.cy - r * theta.sin())
    }

    /// Nearest polar cell of Cartesian pixel `(y, x)`, or `None` beyond the grid.
    fn cell_of(&self, y: usize, x: usize) -> Option<(usize, usize)> {
        let dx = x as f64 - self.cx;
        let dy = self.cy - y as f64;
        let r = dx.hypot(dy).round() as usize;
        if r >= self.max_radius {
            return None;
        }
        let deg = dy.atan2(dx).to_degrees().rem_euclid(360.0);
        let col = (deg / self.angular_step_deg).round() as usize % self.cols();
        Some((r, col))
    }
}

fn bilinear(plane: &[f32], height: usize, width: usize, x: f64, y: f64) -> f32 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let at = |yy: f64, xx: f64| -> f64 {
        if xx < 0.0 || yy < 0.0 || xx >= width as f64 || yy >= height as f64 {
            0.0
        } else {
            plane[yy as usize * width + xx as usize] as f64
        }
    };
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1.0) * fx;
    let bottom = at(y0 + 1.0, x0) * (1.0 - fx) + at(y0 + 1.0, x0 + 1.0) * fx;
    (top * (1.0 - fy) + bottom * fy) as f32
}

/// Bilinear resampling of a 1xHxW image onto the polar grid (1 x R x cols).
/// Samples outside the image read 0.
pub fn to_polar(image: &Tensor, grid: &PolarGrid) -> Result<Tensor> {
    let (c, h, w) = image.chw()?;
    if c != 1 {
        return Err(Error::shape(format!("to_polar expects one channel, got {c}")));
    }
    grid.check_inside(h, w)?;
    let (rows, cols) = (grid.rows(), grid.cols());
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for col in 0..cols {
            let (x, y) = grid.position(r, col);
            out.push(bilinear(image.data(), h, w, x, y));
        }
    }
    Tensor::new(&[1, rows, cols], out)
}

/// Nearest-neighbour resampling of a Cartesian mask onto the polar grid.
pub fn to_polar_mask(mask: &BinaryMask, grid: &PolarGrid) -> Result<BinaryMask> {
    let (h, w) = mask.dims();
    grid.check_inside(h, w)?;
    let (rows, cols) = (grid.rows(), grid.cols());
    Ok(BinaryMask::from_fn(rows, cols, |r, col| {
        let (x, y) = grid.position(r, col);
        let (xi, yi) = (x.round(), y.round());
        xi >= 0.0 && yi >= 0.0 && xi < w as f64 && yi < h as f64 && mask.get(yi as usize, xi as usize)
    }))
}

/// Maps a polar mask back to an `height x width` Cartesian mask by nearest
/// polar cell. Pixels whose radius rounds past the last row stay 0.
pub fn from_polar(polar: &BinaryMask, grid: &PolarGrid, height: usize, width: usize) -> Result<BinaryMask> {
    grid.validate()?;
    if polar.dims() != (grid.rows(), grid.cols()) {
        return Err(Error::shape(format!(
            "polar mask {:?} does not match grid {}x{}",
            polar.dims(),
            grid.rows(),
            grid.cols()
        )));
    }
    Ok(BinaryMask::from_fn(height, width, |y, x| {
        grid.cell_of(y, x).is_some_and(|(r, col)| polar.get(r, col))
    }))
}

/// The Cartesian pixels `from_polar` can ever set.
pub fn support(grid: &PolarGrid, height: usize, width: usize) -> Result<BinaryMask> {
    from_polar(&BinaryMask::full(grid.rows(), grid.cols()), grid, height, width)
}

/// DSC between a mask (restricted to the grid's support) and its polar round trip.
pub fn round_trip_dsc(mask: &BinaryMask, grid: &PolarGrid) -> Result<f64> {
    let (h, w) = mask.dims();
    let restricted = mask.and(&support(grid, h, w)?)?;
    let back = from_polar(&to_polar_mask(mask, grid)?, grid, h, w)?;
    crate::metrics::dsc(&restricted, &back)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disc(h: usize, w: usize, cx: f64, cy: f64, radius: f64) -> BinaryMask {
        BinaryMask::from_fn(h, w, |y, x| (x as f64 - cx).hypot(y as f64 - cy) <= radius)
    }

    #[test]
    fn grid_validation() {
        assert!(PolarGrid::desk().validate().is_ok());
        assert!(PolarGrid { angular_step_deg: 7.0, ..PolarGrid::desk() }.validate().is_err());
        assert!(PolarGrid { max_radius: 0, ..PolarGrid::desk() }.validate().is_err());
        assert!(PolarGrid { angular_step_deg: 0.0, ..PolarGrid::desk() }.validate().is_err());
        assert_eq!((PolarGrid::desk().rows(), PolarGrid::desk().cols()), (32, 120));
    }

    #[test]
    fn full_scale_dims() {
        let img = Tensor::zeros(&[1, 512, 512]);
        let p = to_polar(&img, &PolarGrid::full_scale()).unwrap();
        assert_eq!(p.shape(), &[1, 256, 720]);
    }

    #[test]
    fn constant_image_constant_polar() {
        let img = Tensor::full(&[1, 64, 64], 0.4);
        let p = to_polar(&img, &PolarGrid::desk()).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn bright_pixel_lands_on_its_radius() {
        let grid = PolarGrid::full_scale();
        let mut img = Tensor::zeros(&[1, 512, 512]);
        img.data_mut()[256 * 512 + 356] = 1.0;
        let p = to_polar(&img, &grid).unwrap();
        let cols = grid.cols();
        assert_eq!(p.data()[100 * cols], 1.0);
        let (argmax, _) = p
            .data()
            .iter()
            .enumerate()
            .fold((0, f32::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
        assert_eq!((argmax / cols, argmax % cols), (100, 0));
    }

    #[test]
    fn center_outside_rejected() {
        let grid = PolarGrid { cx: 100.0, ..PolarGrid::desk() };
        assert!(to_polar(&Tensor::zeros(&[1, 64, 64]), &grid).is_err());
    }

    #[test]
    fn from_polar_full_empty_and_disc_area() {
        let grid = PolarGrid::desk();
        let full = from_polar(&BinaryMask::full(32, 120), &grid, 64, 64).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                let d = (x as f64 - 32.0).hypot(y as f64 - 32.0);
                assert_eq!(full.get(y, x), d < 31.5, "pixel ({y},{x})");
            }
        }
        assert!(from_polar(&BinaryMask::empty(32, 120), &grid, 64, 64).unwrap().is_empty());

        let big = PolarGrid::full_scale();
        let k = 128;
        let rows_lt_k = BinaryMask::from_fn(big.rows(), big.cols(), |r, _| r < k);
        let area = from_polar(&rows_lt_k, &big, 512, 512).unwrap().count() as f64;
        let expected = std::f64::consts::PI * (k * k) as f64;
        assert!((area - expected).abs() / expected < 0.03, "area {area} vs {expected}");
    }

    #[test]
    fn round_trip_discs() {
        let grid = PolarGrid::desk();
        let half = disc(64, 64, 32.0, 32.0, 16.0);
        assert!(round_trip_dsc(&half, &grid).unwrap() >= 0.98);
        let eighth = disc(64, 64, 32.0, 32.0, 4.0);
        assert!(round_trip_dsc(&eighth, &grid).unwrap() >= 0.95);
        assert_eq!(round_trip_dsc(&BinaryMask::empty(64, 64), &grid).unwrap(), 1.0);
    }
}
