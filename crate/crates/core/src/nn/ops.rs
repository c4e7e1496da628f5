use crate::error::{Error, Result};
use crate::nn::gemm::{matmul, MatRef};
use crate::tensor::Tensor;

/// Gradients of one layer with respect to its input and, for parameterized
/// layers, its weights and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub input_grad: Tensor,
    pub weight_grad: Option<Tensor>,
    pub bias_grad: Option<Tensor>,
}

fn conv_dims(input: &Tensor, weights: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    let (c, h, w) = input.chw()?;
    let &[o, wc, k, k2] = weights.shape() else {
        return Err(Error::shape(format!(
            "conv weights must be OxCxKxK, got {:?}",
            weights.shape()
        )));
    };
    if k != k2 || k % 2 == 0 {
        return Err(Error::shape(format!("kernel must be square and odd, got {k}x{k2}")));
    }
    if wc != c {
        return Err(Error::shape(format!(
            "input has {c} channels, weights expect {wc}"
        )));
    }
    Ok((o, c, h, w, k))
}

/// Unfolds a zero-padded CxHxW image into a `(C*K*K) x (H*W)` matrix.
fn im2col(input: &[f32], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    if k == 1 {
        return input.iter().map(|&v| v as f64).collect();
    }
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut col = vec![0.0f64; c * k * k * hw];
    for ci in 0..c {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let d = &mut dst[y * w..(y + 1) * w];
                    for x in x0..x1 {
                        d[x] = src_row[(x as isize + dx) as usize] as f64;
                    }
                }
            }
        }
    }
    col
}

/// Scatter-adds a column matrix back onto a CxHxW image (adjoint of `im2col`).
fn col2im(col: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f32> {
    if k == 1 {
        return col.iter().map(|&v| v as f32).collect();
    }
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut acc = vec![0.0f64; c * hw];
    for ci in 0..c {
        let plane = &mut acc[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        continue;
                    }
                    let s = &src[y * w..(y + 1) * w];
                    let d = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for x in x0..x1 {
                        d[(x as isize + dx) as usize] += s[x];
                    }
                }
            }
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Same-padded, stride-1 2-D convolution (cross-correlation).
pub fn conv2d(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (o, c, h, w, k) = conv_dims(input, weights)?;
    if bias.len() != o {
        return Err(Error::shape(format!("bias has {} entries, need {o}", bias.len())));
    }
    let hw = h * w;
    let ckk = c * k * k;
    let col = im2col(input.data(), c, h, w, k);
    let wt = to_f64(weights);
    let mut out = vec![0.0f64; o * hw];
    matmul(
        MatRef::row_major(&wt, o, ckk),
        MatRef::row_major(&col, ckk, hw),
        &mut out,
    );
    let data = out
        .chunks(hw)
        .zip(bias.data())
        .flat_map(|(row, &b)| row.iter().map(move |&v| (v + b as f64) as f32))
        .collect();
    Tensor::new(&[o, h, w], data)
}

/// Analytic gradients of [`conv2d`] given the gradient of its output.
pub fn conv2d_grad(input: &Tensor, weights: &Tensor, output_grad: &Tensor) -> Result<LayerGrad> {
    let (o, c, h, w, k) = conv_dims(input, weights)?;
    if output_grad.shape() != [o, h, w] {
        return Err(Error::shape(format!(
            "output grad {:?} does not match conv output [{o}, {h}, {w}]",
            output_grad.shape()
        )));
    }
    let hw = h * w;
    let ckk = c * k * k;
    let col = im2col(input.data(), c, h, w, k);
    let g = to_f64(output_grad);
    let wt = to_f64(weights);

    let mut wgrad = vec![0.0f64; o * ckk];
    matmul(
        MatRef::row_major(&g, o, hw),
        MatRef::transposed(&col, ckk, hw),
        &mut wgrad,
    );
    let mut col_grad = vec![0.0f64; ckk * hw];
    matmul(
        MatRef::transposed(&wt, o, ckk),
        MatRef::row_major(&g, o, hw),
        &mut col_grad,
    );
    let bias_grad: Vec<f32> = g.chunks(hw).map(|row| row.iter().sum::<f64>() as f32).collect();

    Ok(LayerGrad {
        input_grad: Tensor::new(&[c, h, w], col2im(&col_grad, c, h, w, k))?,
        weight_grad: Some(Tensor::new(
            weights.shape(),
            wgrad.into_iter().map(|v| v as f32).collect(),
        )?),
        bias_grad: Some(Tensor::new(&[o], bias_grad)?),
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Passes the gradient where `x > 0`; zero elsewhere, including `x == 0`.
pub fn relu_grad(x: &Tensor, output_grad: &Tensor) -> Result<Tensor> {
    if x.shape() != output_grad.shape() {
        return Err(Error::shape("relu_grad: input and grad shapes differ"));
    }
    let data = x
        .data()
        .iter()
        .zip(output_grad.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape(), data)
}

/// Logistic function, branching on sign so `exp` never overflows.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| sigmoid_scalar(v as f64) as f32)
}

/// Argmax positions recorded by [`maxpool2`], as flat indices into the input.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolIndices {
    pub input_shape: [usize; 3],
    pub argmax: Vec<usize>,
}

/// 2x2 max pooling with stride 2. Ties resolve to the lowest flat index.
pub fn maxpool2(input: &Tensor) -> Result<(Tensor, PoolIndices)> {
    let (c, h, w) = input.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("maxpool2 needs even extents, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let base = ci * h * w + 2 * y * w + 2 * x;
                let mut best = base;
                for idx in [base + 1, base + w, base + w + 1] {
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::new(&[c, oh, ow], out)?,
        PoolIndices { input_shape: [c, h, w], argmax },
    ))
}

/// Routes each output gradient to the input position that won the max.
pub fn maxpool2_grad(indices: &PoolIndices, output_grad: &Tensor) -> Result<Tensor> {
    if output_grad.len() != indices.argmax.len() {
        return Err(Error::shape("maxpool2_grad: grad does not match recorded indices"));
    }
    let mut grad = Tensor::zeros(&indices.input_shape);
    let data = grad.data_mut();
    for (&idx, &g) in indices.argmax.iter().zip(output_grad.data()) {
        data[idx] += g;
    }
    Ok(grad)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    let (oh, ow) = (2 * h, 2 * w);
    let src = input.data();
    let mut out = vec![0.0f32; c * oh * ow];
    for ci in 0..c {
        for y in 0..oh {
            let srow = &src[ci * h * w + (y / 2) * w..ci * h * w + (y / 2 + 1) * w];
            let drow = &mut out[ci * oh * ow + y * ow..ci * oh * ow + (y + 1) * ow];
            for (x, d) in drow.iter_mut().enumerate() {
                *d = srow[x / 2];
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

/// Adjoint of [`upsample2`]: sums each 2x2 block.
pub fn upsample2_grad(output_grad: &Tensor) -> Result<Tensor> {
    let (c, oh, ow) = output_grad.chw()?;
    if oh % 2 != 0 || ow % 2 != 0 {
        return Err(Error::shape(format!("upsample2_grad needs even extents, got {oh}x{ow}")));
    }
    let (h, w) = (oh / 2, ow / 2);
    let g = output_grad.data();
    let mut out = vec![0.0f32; c * h * w];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let base = ci * oh * ow + 2 * y * ow + 2 * x;
                let s = g[base] as f64 + g[base + 1] as f64 + g[base + ow] as f64 + g[base + ow + 1] as f64;
                out[ci * h * w + y * w + x] = s as f32;
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Concatenates along the channel axis: `a` first, then `b`.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ca, ha, wa) = a.chw()?;
    let (cb, hb, wb) = b.chw()?;
    if (ha, wa) != (hb, wb) {
        return Err(Error::shape(format!(
            "concat: spatial dims {ha}x{wa} vs {hb}x{wb}"
        )));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(&[ca + cb, ha, wa], data)
}

/// Splits a channel-concatenated gradient at `split_point` channels.
pub fn split_grad(output_grad: &Tensor, split_point: usize) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = output_grad.chw()?;
    if split_point == 0 || split_point >= c {
        return Err(Error::shape(format!("split point {split_point} outside 1..{c}")));
    }
    let cut = split_point * h * w;
    let (first, second) = output_grad.data().split_at(cut);
    Ok((
        Tensor::new(&[split_point, h, w], first.to_vec())?,
        Tensor::new(&[c - split_point, h, w], second.to_vec())?,
    ))
}
