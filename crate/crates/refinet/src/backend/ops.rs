//! Differentiable operations.
//!
//! The op set is exactly what the refiner models and losses need: 3x3
//! same-padding convolution, ELU, nearest-neighbor resize, fully-connected,
//! channel concatenation, reshape, and elementwise/reduction arithmetic for
//! composing losses. Each op validates shapes, computes the forward value
//! sequentially (bitwise deterministic), and records a backward hook.

use super::tensor::{real, Real, Shape, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeDir {
    Up,
    Down,
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn require_same_shape<T: Real>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, format!("{} vs {}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<T: Real> Tensor<T> {
    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        require_same_shape("add", self, rhs)?;
        let data: Vec<T> = self
            .data_ref()
            .iter()
            .zip(rhs.data_ref().iter())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(|adj, wanted| {
                vec![
                    wanted[0].then(|| adj.to_vec()),
                    wanted[1].then(|| adj.to_vec()),
                ]
            }),
        ))
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        require_same_shape("sub", self, rhs)?;
        let data: Vec<T> = self
            .data_ref()
            .iter()
            .zip(rhs.data_ref().iter())
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(|adj, wanted| {
                vec![
                    wanted[0].then(|| adj.to_vec()),
                    wanted[1].then(|| adj.iter().map(|&g| -g).collect()),
                ]
            }),
        ))
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        require_same_shape("mul", self, rhs)?;
        let data: Vec<T> = self
            .data_ref()
            .iter()
            .zip(rhs.data_ref().iter())
            .map(|(&a, &b)| a * b)
            .collect();
        let (lhs_c, rhs_c) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |adj, wanted| {
                vec![
                    wanted[0].then(|| {
                        adj.iter()
                            .zip(rhs_c.data_ref().iter())
                            .map(|(&g, &b)| g * b)
                            .collect()
                    }),
                    wanted[1].then(|| {
                        adj.iter()
                            .zip(lhs_c.data_ref().iter())
                            .map(|(&g, &a)| g * a)
                            .collect()
                    }),
                ]
            }),
        ))
    }

    /// Multiply every element by a constant (not a graph input).
    pub fn scale(&self, factor: T) -> Tensor<T> {
        let data: Vec<T> = self.data_ref().iter().map(|&a| a * factor).collect();
        Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone()],
            Box::new(move |adj, wanted| {
                vec![wanted[0].then(|| adj.iter().map(|&g| g * factor).collect())]
            }),
        )
    }

    /// Mean over all elements, as a scalar tensor.
    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel();
        let inv = real::<T>(1.0 / n as f64);
        let sum = self
            .data_ref()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        Tensor::from_op(
            Shape::scalar(),
            vec![sum * inv],
            vec![self.clone()],
            Box::new(move |adj, wanted| {
                let g = adj[0] * inv;
                vec![wanted[0].then(|| vec![g; n])]
            }),
        )
    }

    /// Mean absolute difference over all elements. The adversarial and
    /// reconstruction losses are both this, so loss magnitudes stay
    /// comparable across resolutions.
    pub fn l1_mean(&self, rhs: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        require_same_shape("l1_mean", self, rhs)?;
        let n = self.numel();
        let inv = real::<T>(1.0 / n as f64);
        let sum = self
            .data_ref()
            .iter()
            .zip(rhs.data_ref().iter())
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b).abs());
        let (lhs_c, rhs_c) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            Shape::scalar(),
            vec![sum * inv],
            vec![self.clone(), rhs.clone()],
            Box::new(move |adj, wanted| {
                let g = adj[0] * inv;
                let signs = || -> Vec<T> {
                    lhs_c
                        .data_ref()
                        .iter()
                        .zip(rhs_c.data_ref().iter())
                        .map(|(&a, &b)| {
                            if a > b {
                                g
                            } else if a < b {
                                -g
                            } else {
                                T::zero()
                            }
                        })
                        .collect()
                };
                let lhs_grad = (wanted[0] || wanted[1]).then(signs);
                match (wanted[0], wanted[1]) {
                    (true, true) => {
                        let l = lhs_grad.unwrap();
                        let r = l.iter().map(|&v| -v).collect();
                        vec![Some(l), Some(r)]
                    }
                    (true, false) => vec![lhs_grad, None],
                    (false, true) => {
                        vec![None, Some(lhs_grad.unwrap().iter().map(|&v| -v).collect())]
                    }
                    (false, false) => vec![None, None],
                }
            }),
        ))
    }

    /// Exponential linear unit, alpha = 1.
    pub fn elu(&self) -> Tensor<T> {
        let data: Vec<T> = self
            .data_ref()
            .iter()
            .map(|&v| if v > T::zero() { v } else { v.exp() - T::one() })
            .collect();
        let input = self.clone();
        Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone()],
            Box::new(move |adj, wanted| {
                vec![wanted[0].then(|| {
                    input
                        .data_ref()
                        .iter()
                        .zip(adj)
                        .map(|(&v, &g)| if v > T::zero() { g } else { g * v.exp() })
                        .collect()
                })]
            }),
        )
    }

    /// 3x3 cross-correlation, stride 1, zero padding 1 (spatial size kept).
    /// weight: (out_ch, in_ch, 3, 3), bias: (1, out_ch, 1, 1).
    pub fn conv3x3(&self, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let xs = self.shape();
        let ws = weight.shape();
        if ws.height != 3 || ws.width != 3 {
            return Err(mismatch("conv3x3", format!("kernel must be 3x3, got {ws}")));
        }
        if ws.channels != xs.channels {
            return Err(mismatch(
                "conv3x3",
                format!("input has {} channels, weight expects {}", xs.channels, ws.channels),
            ));
        }
        let out_ch = ws.batch;
        let bs = bias.shape();
        if bs != Shape::new(1, out_ch, 1, 1) {
            return Err(mismatch(
                "conv3x3",
                format!("bias must be 1x{out_ch}x1x1, got {bs}"),
            ));
        }
        let out_shape = Shape::new(xs.batch, out_ch, xs.height, xs.width);
        let data = conv3x3_forward(
            &self.data_ref(),
            &weight.data_ref(),
            &bias.data_ref(),
            xs,
            out_ch,
        );
        let (x_c, w_c) = (self.clone(), weight.clone());
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |adj, wanted| {
                let xs = x_c.shape();
                let d_x = wanted[0]
                    .then(|| conv3x3_backward_input(adj, &w_c.data_ref(), xs, out_ch));
                let d_w = wanted[1]
                    .then(|| conv3x3_backward_weight(adj, &x_c.data_ref(), xs, out_ch));
                let d_b = wanted[2].then(|| conv3x3_backward_bias(adj, xs, out_ch));
                vec![d_x, d_w, d_b]
            }),
        ))
    }

    /// Affine map y = x W^T + b on flattened features.
    /// x: (batch, n, 1, 1), weight: (1, 1, m, n), bias: (1, m, 1, 1).
    pub fn fully_connected(
        &self,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
    ) -> Result<Tensor<T>, TensorError> {
        let xs = self.shape();
        let ws = weight.shape();
        if xs.height != 1 || xs.width != 1 {
            return Err(mismatch(
                "fully_connected",
                format!("input must be flattened to batch x n x 1 x 1, got {xs}"),
            ));
        }
        if ws.batch != 1 || ws.channels != 1 {
            return Err(mismatch(
                "fully_connected",
                format!("weight must be 1x1xmxn, got {ws}"),
            ));
        }
        let (m, n) = (ws.height, ws.width);
        if xs.channels != n {
            return Err(mismatch(
                "fully_connected",
                format!("input features {} vs weight columns {}", xs.channels, n),
            ));
        }
        if bias.shape() != Shape::new(1, m, 1, 1) {
            return Err(mismatch(
                "fully_connected",
                format!("bias must be 1x{m}x1x1, got {}", bias.shape()),
            ));
        }
        let batch = xs.batch;
        let x = self.data_ref();
        let w = weight.data_ref();
        let b = bias.data_ref();
        let mut data = vec![T::zero(); batch * m];
        for bi in 0..batch {
            let xrow = &x[bi * n..(bi + 1) * n];
            for j in 0..m {
                let wrow = &w[j * n..(j + 1) * n];
                let mut acc = b[j];
                for (xv, wv) in xrow.iter().zip(wrow) {
                    acc = acc + *xv * *wv;
                }
                data[bi * m + j] = acc;
            }
        }
        drop((x, w, b));
        let (x_c, w_c) = (self.clone(), weight.clone());
        Ok(Tensor::from_op(
            Shape::new(batch, m, 1, 1),
            data,
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |adj, wanted| {
                let w = w_c.data_ref();
                let x = x_c.data_ref();
                let d_x = wanted[0].then(|| {
                    let mut d = vec![T::zero(); batch * n];
                    for bi in 0..batch {
                        for j in 0..m {
                            let g = adj[bi * m + j];
                            let wrow = &w[j * n..(j + 1) * n];
                            let drow = &mut d[bi * n..(bi + 1) * n];
                            for (dv, wv) in drow.iter_mut().zip(wrow) {
                                *dv = *dv + g * *wv;
                            }
                        }
                    }
                    d
                });
                let d_w = wanted[1].then(|| {
                    let mut d = vec![T::zero(); m * n];
                    for bi in 0..batch {
                        let xrow = &x[bi * n..(bi + 1) * n];
                        for j in 0..m {
                            let g = adj[bi * m + j];
                            let drow = &mut d[j * n..(j + 1) * n];
                            for (dv, xv) in drow.iter_mut().zip(xrow) {
                                *dv = *dv + g * *xv;
                            }
                        }
                    }
                    d
                });
                let d_b = wanted[2].then(|| {
                    let mut d = vec![T::zero(); m];
                    for bi in 0..batch {
                        for j in 0..m {
                            d[j] = d[j] + adj[bi * m + j];
                        }
                    }
                    d
                });
                vec![d_x, d_w, d_b]
            }),
        ))
    }

    /// Reinterpret the element order under a new shape with equal volume.
    pub fn reshape(&self, shape: Shape) -> Result<Tensor<T>, TensorError> {
        if shape.numel() != self.numel() {
            return Err(mismatch(
                "reshape",
                format!("{} has {} elements, target {shape} has {}", self.shape(), self.numel(), shape.numel()),
            ));
        }
        Ok(Tensor::from_op(
            shape,
            self.to_vec(),
            vec![self.clone()],
            Box::new(|adj, wanted| vec![wanted[0].then(|| adj.to_vec())]),
        ))
    }

    pub fn flatten(&self) -> Tensor<T> {
        let s = self.shape();
        self.reshape(Shape::new(s.batch, s.channels * s.height * s.width, 1, 1))
            .expect("flatten preserves volume")
    }

    /// Nearest-neighbor resize by an integer factor. Up replicates each pixel
    /// into a factor x factor block; down keeps the top-left pixel of each
    /// block, which makes down exactly invert up.
    pub fn resize_nearest(&self, factor: usize, dir: ResizeDir) -> Result<Tensor<T>, TensorError> {
        if factor == 0 {
            return Err(TensorError::ZeroFactor);
        }
        let s = self.shape();
        if factor == 1 {
            return Ok(Tensor::from_op(
                s,
                self.to_vec(),
                vec![self.clone()],
                Box::new(|adj, wanted| vec![wanted[0].then(|| adj.to_vec())]),
            ));
        }
        match dir {
            ResizeDir::Up => {
                let out_shape = Shape::new(s.batch, s.channels, s.height * factor, s.width * factor);
                let x = self.data_ref();
                let mut data = vec![T::zero(); out_shape.numel()];
                for plane in 0..s.batch * s.channels {
                    for y in 0..s.height {
                        let src = &x[(plane * s.height + y) * s.width..][..s.width];
                        for ry in 0..factor {
                            let oy = y * factor + ry;
                            let dst = &mut data
                                [(plane * out_shape.height + oy) * out_shape.width..][..out_shape.width];
                            for (xcol, &v) in src.iter().enumerate() {
                                for rx in 0..factor {
                                    dst[xcol * factor + rx] = v;
                                }
                            }
                        }
                    }
                }
                drop(x);
                Ok(Tensor::from_op(
                    out_shape,
                    data,
                    vec![self.clone()],
                    Box::new(move |adj, wanted| {
                        vec![wanted[0].then(|| {
                            let mut d = vec![T::zero(); s.numel()];
                            for plane in 0..s.batch * s.channels {
                                for oy in 0..out_shape.height {
                                    let row = &adj
                                        [(plane * out_shape.height + oy) * out_shape.width..][..out_shape.width];
                                    let drow = &mut d
                                        [(plane * s.height + oy / factor) * s.width..][..s.width];
                                    for (ox, &g) in row.iter().enumerate() {
                                        drow[ox / factor] = drow[ox / factor] + g;
                                    }
                                }
                            }
                            d
                        })]
                    }),
                ))
            }
            ResizeDir::Down => {
                if !s.height.is_multiple_of(factor) || !s.width.is_multiple_of(factor) {
                    return Err(TensorError::NonDivisibleResize {
                        factor,
                        height: s.height,
                        width: s.width,
                    });
                }
                let out_shape = Shape::new(s.batch, s.channels, s.height / factor, s.width / factor);
                let x = self.data_ref();
                let mut data = vec![T::zero(); out_shape.numel()];
                for plane in 0..s.batch * s.channels {
                    for oy in 0..out_shape.height {
                        let src = &x[(plane * s.height + oy * factor) * s.width..][..s.width];
                        let dst = &mut data
                            [(plane * out_shape.height + oy) * out_shape.width..][..out_shape.width];
                        for (ox, dv) in dst.iter_mut().enumerate() {
                            *dv = src[ox * factor];
                        }
                    }
                }
                drop(x);
                Ok(Tensor::from_op(
                    out_shape,
                    data,
                    vec![self.clone()],
                    Box::new(move |adj, wanted| {
                        vec![wanted[0].then(|| {
                            let mut d = vec![T::zero(); s.numel()];
                            for plane in 0..s.batch * s.channels {
                                for oy in 0..out_shape.height {
                                    let row = &adj
                                        [(plane * out_shape.height + oy) * out_shape.width..][..out_shape.width];
                                    let drow = &mut d
                                        [(plane * s.height + oy * factor) * s.width..][..s.width];
                                    for (ox, &g) in row.iter().enumerate() {
                                        drow[ox * factor] = g;
                                    }
                                }
                            }
                            d
                        })]
                    }),
                ))
            }
        }
    }

    /// Concatenate along the channel axis; batch and spatial sizes must agree.
    pub fn concat_channels(&self, rhs: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let (a, b) = (self.shape(), rhs.shape());
        if a.batch != b.batch || a.height != b.height || a.width != b.width {
            return Err(mismatch("concat_channels", format!("{a} vs {b}")));
        }
        let out_shape = Shape::new(a.batch, a.channels + b.channels, a.height, a.width);
        let plane = a.height * a.width;
        let mut data = Vec::with_capacity(out_shape.numel());
        {
            let xa = self.data_ref();
            let xb = rhs.data_ref();
            for bi in 0..a.batch {
                data.extend_from_slice(&xa[bi * a.channels * plane..][..a.channels * plane]);
                data.extend_from_slice(&xb[bi * b.channels * plane..][..b.channels * plane]);
            }
        }
        let (ca, cb) = (a.channels, b.channels);
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |adj, wanted| {
                let batch = a.batch;
                let stride = (ca + cb) * plane;
                let d_a = wanted[0].then(|| {
                    let mut d = Vec::with_capacity(batch * ca * plane);
                    for bi in 0..batch {
                        d.extend_from_slice(&adj[bi * stride..][..ca * plane]);
                    }
                    d
                });
                let d_b = wanted[1].then(|| {
                    let mut d = Vec::with_capacity(batch * cb * plane);
                    for bi in 0..batch {
                        d.extend_from_slice(&adj[bi * stride + ca * plane..][..cb * plane]);
                    }
                    d
                });
                vec![d_a, d_b]
            }),
        ))
    }
}

fn conv3x3_forward<T: Real>(x: &[T], w: &[T], b: &[T], xs: Shape, out_ch: usize) -> Vec<T> {
    let (height, width, in_ch) = (xs.height, xs.width, xs.channels);
    let mut out = vec![T::zero(); xs.batch * out_ch * height * width];
    for bi in 0..xs.batch {
        for o in 0..out_ch {
            let out_plane = &mut out[(bi * out_ch + o) * height * width..][..height * width];
            out_plane.fill(b[o]);
            for i in 0..in_ch {
                let x_plane = &x[(bi * in_ch + i) * height * width..][..height * width];
                for ky in 0..3usize {
                    let dy = ky as isize - 1;
                    for kx in 0..3usize {
                        let dx = kx as isize - 1;
                        let wv = w[((o * in_ch + i) * 3 + ky) * 3 + kx];
                        shifted_axpy(out_plane, x_plane, wv, height, width, dy, dx);
                    }
                }
            }
        }
    }
    out
}

/// out[y][x] += wv * src[y + dy][x + dx] over the in-bounds region.
#[inline]
fn shifted_axpy<T: Real>(
    out: &mut [T],
    src: &[T],
    wv: T,
    height: usize,
    width: usize,
    dy: isize,
    dx: isize,
) {
    let y0 = (-dy).max(0) as usize;
    let y1 = (height as isize - dy).min(height as isize) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = (width as isize - dx).min(width as isize) as usize;
    if x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let sx = (x0 as isize + dx) as usize;
        let orow = &mut out[y * width + x0..y * width + x1];
        let srow = &src[sy * width + sx..][..x1 - x0];
        for (ov, &sv) in orow.iter_mut().zip(srow) {
            *ov = *ov + wv * sv;
        }
    }
}

fn conv3x3_backward_input<T: Real>(adj: &[T], w: &[T], xs: Shape, out_ch: usize) -> Vec<T> {
    let (height, width, in_ch) = (xs.height, xs.width, xs.channels);
    let mut d = vec![T::zero(); xs.numel()];
    for bi in 0..xs.batch {
        for o in 0..out_ch {
            let g_plane = &adj[(bi * out_ch + o) * height * width..][..height * width];
            for i in 0..in_ch {
                let d_plane = &mut d[(bi * in_ch + i) * height * width..][..height * width];
                for ky in 0..3usize {
                    let dy = ky as isize - 1;
                    for kx in 0..3usize {
                        let dx = kx as isize - 1;
                        let wv = w[((o * in_ch + i) * 3 + ky) * 3 + kx];
                        // d_x[y+dy][x+dx] += wv * g[y][x]  ==  shifted by (-dy,-dx)
                        shifted_axpy(d_plane, g_plane, wv, height, width, -dy, -dx);
                    }
                }
            }
        }
    }
    d
}

fn conv3x3_backward_weight<T: Real>(adj: &[T], x: &[T], xs: Shape, out_ch: usize) -> Vec<T> {
    let (height, width, in_ch) = (xs.height, xs.width, xs.channels);
    let mut d = vec![T::zero(); out_ch * in_ch * 9];
    for bi in 0..xs.batch {
        for o in 0..out_ch {
            let g_plane = &adj[(bi * out_ch + o) * height * width..][..height * width];
            for i in 0..in_ch {
                let x_plane = &x[(bi * in_ch + i) * height * width..][..height * width];
                for ky in 0..3usize {
                    let dy = ky as isize - 1;
                    for kx in 0..3usize {
                        let dx = kx as isize - 1;
                        let y0 = (-dy).max(0) as usize;
                        let y1 = (height as isize - dy).min(height as isize) as usize;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (width as isize - dx).min(width as isize) as usize;
                        if x0 >= x1 {
                            continue;
                        }
                        let mut acc = T::zero();
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let sx = (x0 as isize + dx) as usize;
                            let grow = &g_plane[y * width + x0..y * width + x1];
                            let xrow = &x_plane[sy * width + sx..][..x1 - x0];
                            for (&g, &xv) in grow.iter().zip(xrow) {
                                acc = acc + g * xv;
                            }
                        }
                        let slot = ((o * in_ch + i) * 3 + ky) * 3 + kx;
                        d[slot] = d[slot] + acc;
                    }
                }
            }
        }
    }
    d
}

fn conv3x3_backward_bias<T: Real>(adj: &[T], xs: Shape, out_ch: usize) -> Vec<T> {
    let plane = xs.height * xs.width;
    let mut d = vec![T::zero(); out_ch];
    for bi in 0..xs.batch {
        for o in 0..out_ch {
            let g_plane = &adj[(bi * out_ch + o) * plane..][..plane];
            let mut acc = T::zero();
            for &g in g_plane {
                acc = acc + g;
            }
            d[o] = d[o] + acc;
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, data: Vec<f32>) -> Tensor<f32> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn elu_closed_forms() {
        let x = t(Shape::new(1, 1, 1, 3), vec![0.0, 2.0, -1.0]);
        let y = x.elu().to_vec();
        assert_eq!(y[0], 0.0);
        assert_eq!(y[1], 2.0);
        assert!((y[2] - ((-1.0f32).exp() - 1.0)).abs() < 1e-7);
        assert!((y[2] + 0.632_121).abs() < 1e-6);
    }

    #[test]
    fn l1_mean_examples() {
        let a = t(Shape::new(1, 1, 1, 2), vec![0.0, 1.0]);
        let b = t(Shape::new(1, 1, 1, 2), vec![1.0, 1.0]);
        assert_eq!(a.l1_mean(&b).unwrap().item().unwrap(), 0.5);
        assert_eq!(a.l1_mean(&a).unwrap().item().unwrap(), 0.0);
        let c = t(Shape::new(1, 1, 1, 3), vec![0.0; 3]);
        assert!(a.l1_mean(&c).is_err());
    }

    #[test]
    fn conv3x3_all_ones_kernel_sums() {
        let x = t(Shape::new(1, 1, 3, 3), vec![1.0; 9]);
        let w = t(Shape::new(1, 1, 3, 3), vec![1.0; 9]);
        let b = t(Shape::new(1, 1, 1, 1), vec![0.0]);
        let y = x.conv3x3(&w, &b).unwrap().to_vec();
        // padded all-ones kernel: center sees 9 ones, corners see 4
        assert_eq!(y[4], 9.0);
        for corner in [0, 2, 6, 8] {
            assert_eq!(y[corner], 4.0);
        }
    }

    #[test]
    fn conv3x3_zero_kernel_gives_bias() {
        let x = t(Shape::new(2, 3, 4, 4), (0..96).map(|v| v as f32).collect());
        let w = Tensor::zeros(Shape::new(2, 3, 3, 3));
        let b = t(Shape::new(1, 2, 1, 1), vec![0.5, -1.5]);
        let y = x.conv3x3(&w, &b).unwrap();
        let data = y.to_vec();
        for bi in 0..2 {
            for (o, expect) in [0.5f32, -1.5].into_iter().enumerate() {
                for p in 0..16 {
                    assert_eq!(data[(bi * 2 + o) * 16 + p], expect);
                }
            }
        }
    }

    #[test]
    fn conv3x3_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 4, 4));
        let w = Tensor::<f32>::zeros(Shape::new(3, 1, 3, 3));
        let b = Tensor::<f32>::zeros(Shape::new(1, 3, 1, 1));
        assert!(matches!(
            x.conv3x3(&w, &b),
            Err(TensorError::ShapeMismatch { op: "conv3x3", .. })
        ));
    }

    #[test]
    fn fully_connected_identity_and_bias() {
        let x = t(Shape::new(2, 3, 1, 1), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let eye = t(
            Shape::new(1, 1, 3, 3),
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        );
        let zero_b = Tensor::zeros(Shape::new(1, 3, 1, 1));
        let y = x.fully_connected(&eye, &zero_b).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());

        let zero_w = Tensor::zeros(Shape::new(1, 1, 2, 3));
        let b = t(Shape::new(1, 2, 1, 1), vec![7.0, -3.0]);
        let y = x.fully_connected(&zero_w, &b).unwrap();
        assert_eq!(y.to_vec(), vec![7.0, -3.0, 7.0, -3.0]);
    }

    #[test]
    fn resize_up_replicates_blocks() {
        let x = t(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        let up = x.resize_nearest(2, ResizeDir::Up).unwrap();
        assert_eq!(up.shape(), Shape::new(1, 1, 4, 4));
        assert_eq!(
            up.to_vec(),
            vec![1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        let down = up.resize_nearest(2, ResizeDir::Down).unwrap();
        assert_eq!(down.to_vec(), x.to_vec());
    }

    #[test]
    fn resize_factor_one_is_identity() {
        let x = t(Shape::new(1, 2, 2, 2), (0..8).map(|v| v as f32).collect());
        for dir in [ResizeDir::Up, ResizeDir::Down] {
            let y = x.resize_nearest(1, dir).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert_eq!(y.to_vec(), x.to_vec());
        }
    }

    #[test]
    fn resize_down_rejects_non_divisible() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 3, 3));
        assert!(matches!(
            x.resize_nearest(2, ResizeDir::Down),
            Err(TensorError::NonDivisibleResize { .. })
        ));
    }

    #[test]
    fn concat_splits_back_in_backward() {
        let a = Tensor::<f32>::parameter(Shape::new(1, 2, 1, 1), vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f32>::parameter(Shape::new(1, 1, 1, 1), vec![3.0]).unwrap();
        let c = a.concat_channels(&b).unwrap();
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 3.0]);
        let loss = c.mean();
        loss.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0 / 3.0; 2]);
        assert_eq!(b.grad().unwrap(), vec![1.0 / 3.0]);
    }
}
