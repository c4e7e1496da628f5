//! Naive 64-bit reference implementations used as finite-difference oracles.

use std::collections::BTreeMap;

pub const CLAMP: f64 = 1e-7;
pub const SMOOTH: f64 = 1.0;

/// Channel-major image `c x h x w`.
#[derive(Clone, Debug)]
pub struct Img {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Img {
    pub fn new(c: usize, h: usize, w: usize, v: Vec<f64>) -> Self {
        assert_eq!(v.len(), c * h * w);
        Img { c, h, w, v }
    }

    fn at(&self, ch: usize, y: usize, x: usize) -> f64 {
        self.v[(ch * self.h + y) * self.w + x]
    }
}

/// Zero-padded cross-correlation; `wt` is `o x c x k x k`.
pub fn conv(x: &Img, wt: &[f64], b: &[f64], o: usize, k: usize) -> Img {
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; o * x.h * x.w];
    for oc in 0..o {
        for y in 0..x.h {
            for xx in 0..x.w {
                let mut s = b[oc];
                for ic in 0..x.c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + ky as isize - pad;
                            let sx = xx as isize + kx as isize - pad;
                            if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                continue;
                            }
                            s += wt[((oc * x.c + ic) * k + ky) * k + kx] * x.at(ic, sy as usize, sx as usize);
                        }
                    }
                }
                out[(oc * x.h + y) * x.w + xx] = s;
            }
        }
    }
    Img::new(o, x.h, x.w, out)
}

pub fn relu(x: &Img) -> Img {
    Img { v: x.v.iter().map(|&a| a.max(0.0)).collect(), ..x.clone() }
}

pub fn maxpool2(x: &Img) -> Img {
    let (h, w) = (x.h / 2, x.w / 2);
    let mut v = Vec::with_capacity(x.c * h * w);
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|&(dy, dx)| x.at(c, 2 * y + dy, 2 * xx + dx))
                    .fold(f64::NEG_INFINITY, f64::max);
                v.push(m);
            }
        }
    }
    Img::new(x.c, h, w, v)
}

pub fn upsample2(x: &Img) -> Img {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut v = Vec::with_capacity(x.c * h * w);
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                v.push(x.at(c, y / 2, xx / 2));
            }
        }
    }
    Img::new(x.c, h, w, v)
}

pub fn concat(a: &Img, b: &Img) -> Img {
    Img::new(a.c + b.c, a.h, a.w, [a.v.clone(), b.v.clone()].concat())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn bce(p: &[f64], y: &[f64]) -> f64 {
    let n = p.len() as f64;
    p.iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = p.clamp(CLAMP, 1.0 - CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

pub fn soft_dice_loss(p: &[f64], y: &[f64]) -> f64 {
    let inter: f64 = p.iter().zip(y).map(|(a, b)| a * b).sum();
    let total: f64 = p.iter().sum::<f64>() + y.iter().sum::<f64>();
    1.0 - (2.0 * inter + SMOOTH) / (total + SMOOTH)
}

pub fn hybrid(p: &[f64], y: &[f64], omega: f64) -> f64 {
    omega * bce(p, y) + (1.0 - omega) * soft_dice_loss(p, y)
}

/// Parameters by name: `(shape, values)`.
pub type Params = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

fn conv_layer(p: &Params, name: &str, x: &Img) -> Img {
    let (shape, w) = &p[&format!("{name}.weight")];
    let (_, b) = &p[&format!("{name}.bias")];
    conv(x, w, b, shape[0], shape[2])
}

fn block(p: &Params, name: &str, x: &Img) -> Img {
    let a = relu(&conv_layer(p, &format!("{name}.conv1"), x));
    relu(&conv_layer(p, &format!("{name}.conv2"), &a))
}

/// U-Net forward on one `1 x h x w` image, returning clamped probabilities.
pub fn unet(p: &Params, depth: usize, x: &Img) -> Vec<f64> {
    let mut skips = Vec::new();
    let mut cur = x.clone();
    for level in 0..depth {
        let a = block(p, &format!("enc{level}"), &cur);
        cur = maxpool2(&a);
        skips.push(a);
    }
    cur = block(p, "bottleneck", &cur);
    for level in (0..depth).rev() {
        let cat = concat(&upsample2(&cur), &skips[level]);
        cur = block(p, &format!("dec{level}"), &cat);
    }
    conv_layer(p, "head", &cur)
        .v
        .iter()
        .map(|&z| sigmoid(z).clamp(CLAMP, 1.0 - CLAMP))
        .collect()
}

/// Central difference of `f` at `x[i]`.
pub fn central_diff(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let up = f(x);
    x[i] = orig - h;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * h)
}

/// Agreement within 1e-2 relative or 1e-6 absolute.
pub fn grad_close(analytic: f64, numeric: f64) -> bool {
    let err = (analytic - numeric).abs();
    err <= 1e-6 || err <= 1e-2 * analytic.abs().max(numeric.abs())
}
