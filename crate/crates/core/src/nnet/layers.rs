//! Layer primitives with exact forward and backward passes over NCHW batches.

use super::tensor::{matmul, Mat, Real, Tensor};
use super::NnetError;
use crate::par;

/// Variance floor inside normalization.
pub const NORM_EPSILON: f64 = 1e-5;

fn shape_err(layer: &str, expected: impl Into<String>, got: &[usize]) -> NnetError {
    NnetError::Shape {
        layer: layer.to_string(),
        expected: expected.into(),
        got: format!("{got:?}"),
    }
}

fn check_4d<T: Real>(layer: &str, x: &Tensor<T>) -> Result<(usize, usize, usize, usize), NnetError> {
    if x.shape().len() != 4 || x.is_empty() {
        return Err(shape_err(layer, "non-empty (n, c, h, w)", x.shape()));
    }
    Ok(x.dims4())
}

/// Validates a `(cout, cin, k, k)` weight and `(cout)` bias against `x`.
fn conv_dims<T: Real>(layer: &str, x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize), NnetError> {
    let (_, c, _, _) = check_4d(layer, x)?;
    let (cout, cin, k) = match w.shape() {
        &[o, i, k1, k2] if k1 == k2 && (k1 == 1 || k1 == 3) => (o, i, k1),
        s => return Err(shape_err(layer, "(cout, cin, k, k) with k in {1, 3}", s)),
    };
    if cin != c {
        return Err(shape_err(layer, format!("input with {cin} channels"), x.shape()));
    }
    if b.shape() != [cout] {
        return Err(shape_err(layer, format!("bias of shape [{cout}]"), b.shape()));
    }
    Ok((cout, k))
}

/// Unfolds one `(c, h, w)` example into a `(c*9, h*w)` patch matrix for a
/// zero-padded 3x3 window.
fn im2col3<T: Real>(x: &[T], c: usize, h: usize, w: usize, col: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            out[0] = T::zero();
                            out[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => out.copy_from_slice(src),
                        _ => {
                            out[..w - 1].copy_from_slice(&src[1..]);
                            out[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: accumulates patch gradients into `dx`.
fn col2im3<T: Real>(col: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ci * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, &s)| *d = *d + s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, &s)| *d = *d + s),
                    }
                }
            }
        }
    }
}

/// Stride-1 convolution with a 3x3 (padding 1) or 1x1 kernel.
pub fn conv_forward<T: Real>(layer: &str, x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NnetError> {
    let (cout, k) = conv_dims(layer, x, w, b)?;
    let (n, c, h, wd) = x.dims4();
    let hw = h * wd;
    let kk = c * k * k;
    let mut out = Tensor::zeros(vec![n, cout, h, wd]);
    par::for_each_chunk_mut(out.data_mut(), cout * hw, |i, y| {
        for (o, plane) in y.chunks_mut(hw).enumerate() {
            plane.iter_mut().for_each(|v| *v = b.data()[o]);
        }
        let xi = x.example(i);
        if k == 1 {
            matmul(Mat::new(w.data(), cout, kk), Mat::new(xi, kk, hw), y, true);
        } else {
            let mut col = vec![T::zero(); kk * hw];
            im2col3(xi, c, h, wd, &mut col);
            matmul(Mat::new(w.data(), cout, kk), Mat::new(&col, kk, hw), y, true);
        }
    });
    Ok(out)
}

/// Gradients of [`conv_forward`]: `(dx, dw, db)`.
pub fn conv_backward<T: Real>(
    layer: &str,
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), NnetError> {
    let (cout, k) = conv_dims(layer, x, w, b)?;
    let (n, c, h, wd) = x.dims4();
    if dy.shape() != [n, cout, h, wd] {
        return Err(shape_err(layer, format!("upstream [{n}, {cout}, {h}, {wd}]"), dy.shape()));
    }
    let hw = h * wd;
    let kk = c * k * k;
    let parts = par::map_indexed(n, |i| {
        let xi = x.example(i);
        let dyi = dy.example(i);
        let mut dw = vec![T::zero(); cout * kk];
        let mut dx = vec![T::zero(); c * hw];
        if k == 1 {
            matmul(Mat::new(dyi, cout, hw), Mat::new(xi, kk, hw).t(), &mut dw, false);
            matmul(Mat::new(w.data(), cout, kk).t(), Mat::new(dyi, cout, hw), &mut dx, false);
        } else {
            let mut col = vec![T::zero(); kk * hw];
            im2col3(xi, c, h, wd, &mut col);
            matmul(Mat::new(dyi, cout, hw), Mat::new(&col, kk, hw).t(), &mut dw, false);
            matmul(Mat::new(w.data(), cout, kk).t(), Mat::new(dyi, cout, hw), &mut col, false);
            col2im3(&col, c, h, wd, &mut dx);
        }
        let db: Vec<T> = dyi.chunks(hw).map(|p| p.iter().copied().sum()).collect();
        (dx, dw, db)
    });
    // Sum per-example partials in example order so results do not depend on
    // scheduling.
    let mut dx = Vec::with_capacity(n * c * hw);
    let mut dw = Tensor::zeros(w.shape().to_vec());
    let mut db = Tensor::zeros(vec![cout]);
    for (pdx, pdw, pdb) in parts {
        dx.extend_from_slice(&pdx);
        dw.data_mut().iter_mut().zip(&pdw).for_each(|(a, &g)| *a = *a + g);
        db.data_mut().iter_mut().zip(&pdb).for_each(|(a, &g)| *a = *a + g);
    }
    Ok((Tensor::new(x.shape().to_vec(), dx), dw, db))
}

pub fn relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| v.max(T::zero())).collect())
}

/// Gradient passes where the input was strictly positive.
pub fn relu_backward<T: Real>(layer: &str, x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>, NnetError> {
    if x.shape() != dy.shape() {
        return Err(shape_err(layer, format!("upstream {:?}", x.shape()), dy.shape()));
    }
    Ok(Tensor::new(
        x.shape().to_vec(),
        x.data()
            .iter()
            .zip(dy.data())
            .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
            .collect(),
    ))
}

#[inline]
pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| sigmoid(v)).collect())
}

/// Takes the forward output `y`.
pub fn sigmoid_backward<T: Real>(layer: &str, y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>, NnetError> {
    if y.shape() != dy.shape() {
        return Err(shape_err(layer, format!("upstream {:?}", y.shape()), dy.shape()));
    }
    Ok(Tensor::new(
        y.shape().to_vec(),
        y.data()
            .iter()
            .zip(dy.data())
            .map(|(&s, &g)| g * s * (T::one() - s))
            .collect(),
    ))
}

/// 2x2 max pooling, stride 2. Also returns the flat source index of each
/// maximum (first one on ties).
pub fn maxpool_forward<T: Real>(layer: &str, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>), NnetError> {
    let (n, c, h, w) = check_4d(layer, x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err(layer, "even height and width", x.shape()));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let xd = x.data();
    for p in 0..n * c {
        let base = p * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let i0 = base + 2 * y * w + 2 * xx;
                let mut best = i0;
                for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                    if xd[cand] > xd[best] {
                        best = cand;
                    }
                }
                out.push(xd[best]);
                arg.push(best as u32);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out), arg))
}

pub fn maxpool_backward<T: Real>(
    layer: &str,
    input_shape: &[usize],
    argmax: &[u32],
    dy: &Tensor<T>,
) -> Result<Tensor<T>, NnetError> {
    if dy.len() != argmax.len() {
        return Err(shape_err(layer, format!("{} upstream values", argmax.len()), dy.shape()));
    }
    let mut dx = Tensor::zeros(input_shape.to_vec());
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        let v = &mut dx.data_mut()[i as usize];
        *v = *v + g;
    }
    Ok(dx)
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample_forward<T: Real>(layer: &str, x: &Tensor<T>) -> Result<Tensor<T>, NnetError> {
    let (n, c, h, w) = check_4d(layer, x)?;
    let (oh, ow) = (h * 2, w * 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for y in 0..oh {
            let row = &plane[(y / 2) * w..(y / 2 + 1) * w];
            for &v in row {
                out.push(v);
                out.push(v);
            }
        }
    }
    Ok(Tensor::new(vec![n, c, oh, ow], out))
}

/// Sums each 2x2 block of the upstream gradient.
pub fn upsample_backward<T: Real>(layer: &str, dy: &Tensor<T>) -> Result<Tensor<T>, NnetError> {
    let (n, c, oh, ow) = check_4d(layer, dy)?;
    if oh % 2 != 0 || ow % 2 != 0 {
        return Err(shape_err(layer, "even upstream height and width", dy.shape()));
    }
    let (h, w) = (oh / 2, ow / 2);
    let mut dx = vec![T::zero(); n * c * h * w];
    for (p, plane) in dy.data().chunks(oh * ow).enumerate() {
        let out = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let o = &mut out[(y / 2) * w + xx / 2];
                *o = *o + plane[y * ow + xx];
            }
        }
    }
    Ok(Tensor::new(vec![n, c, h, w], dx))
}

/// Channel-wise concatenation.
pub fn concat_forward<T: Real>(layer: &str, xs: &[&Tensor<T>]) -> Result<Tensor<T>, NnetError> {
    let first = xs.first().ok_or_else(|| shape_err(layer, "at least one input", &[]))?;
    let (n, _, h, w) = check_4d(layer, first)?;
    let mut ctotal = 0;
    for x in xs {
        let (xn, xc, xh, xw) = check_4d(layer, x)?;
        if (xn, xh, xw) != (n, h, w) {
            return Err(shape_err(layer, format!("[{n}, _, {h}, {w}] like the first input"), x.shape()));
        }
        ctotal += xc;
    }
    let mut out = Vec::with_capacity(n * ctotal * h * w);
    for i in 0..n {
        for x in xs {
            out.extend_from_slice(x.example(i));
        }
    }
    Ok(Tensor::new(vec![n, ctotal, h, w], out))
}

/// Splits the upstream gradient back into per-input pieces.
pub fn concat_backward<T: Real>(layer: &str, channels: &[usize], dy: &Tensor<T>) -> Result<Vec<Tensor<T>>, NnetError> {
    let (n, c, h, w) = check_4d(layer, dy)?;
    if channels.iter().sum::<usize>() != c {
        return Err(shape_err(layer, format!("{} channels", channels.iter().sum::<usize>()), dy.shape()));
    }
    let hw = h * w;
    let mut parts: Vec<Vec<T>> = channels.iter().map(|&ci| Vec::with_capacity(n * ci * hw)).collect();
    for i in 0..n {
        let mut off = 0;
        let ex = dy.example(i);
        for (p, &ci) in parts.iter_mut().zip(channels) {
            p.extend_from_slice(&ex[off * hw..(off + ci) * hw]);
            off += ci;
        }
    }
    Ok(parts
        .into_iter()
        .zip(channels)
        .map(|(d, &ci)| Tensor::new(vec![n, ci, h, w], d))
        .collect())
}

/// Saved state of a normalization forward pass.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Per-channel normalization with statistics over batch and space, then a
/// learned scale `g` and shift `b`.
pub fn norm_forward<T: Real>(
    layer: &str,
    x: &Tensor<T>,
    g: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(Tensor<T>, NormCache<T>), NnetError> {
    let (n, c, h, w) = check_4d(layer, x)?;
    if g.shape() != [c] || b.shape() != [c] {
        return Err(shape_err(layer, format!("scale/shift of shape [{c}]"), g.shape()));
    }
    let hw = h * w;
    let m = T::from_f64((n * hw) as f64);
    let eps = T::from_f64(NORM_EPSILON);
    let mut xhat = Tensor::zeros(x.shape().to_vec());
    let mut y = Tensor::zeros(x.shape().to_vec());
    let mut inv_std = Vec::with_capacity(c);
    for ch in 0..c {
        let planes = (0..n).map(|i| (i * c + ch) * hw);
        let mean = planes.clone().map(|o| x.data()[o..o + hw].iter().copied().sum::<T>()).sum::<T>() / m;
        let var = planes
            .clone()
            .map(|o| x.data()[o..o + hw].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>())
            .sum::<T>()
            / m;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        for o in planes {
            for k in o..o + hw {
                let xh = (x.data()[k] - mean) * is;
                xhat.data_mut()[k] = xh;
                y.data_mut()[k] = g.data()[ch] * xh + b.data()[ch];
            }
        }
    }
    Ok((y, NormCache { xhat, inv_std }))
}

/// Gradients of [`norm_forward`]: `(dx, dg, db)`.
pub fn norm_backward<T: Real>(
    layer: &str,
    cache: &NormCache<T>,
    g: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), NnetError> {
    if dy.shape() != cache.xhat.shape() {
        return Err(shape_err(layer, format!("upstream {:?}", cache.xhat.shape()), dy.shape()));
    }
    let (n, c, h, w) = dy.dims4();
    let hw = h * w;
    let m = T::from_f64((n * hw) as f64);
    let mut dx = Tensor::zeros(dy.shape().to_vec());
    let mut dg = Tensor::zeros(vec![c]);
    let mut db = Tensor::zeros(vec![c]);
    for ch in 0..c {
        let idx = || (0..n).flat_map(move |i| ((i * c + ch) * hw)..((i * c + ch) * hw + hw));
        let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
        for k in idx() {
            sum_dy = sum_dy + dy.data()[k];
            sum_dy_xhat = sum_dy_xhat + dy.data()[k] * cache.xhat.data()[k];
        }
        dg.data_mut()[ch] = sum_dy_xhat;
        db.data_mut()[ch] = sum_dy;
        let scale = g.data()[ch] * cache.inv_std[ch] / m;
        for k in idx() {
            dx.data_mut()[k] = scale * (m * dy.data()[k] - sum_dy - cache.xhat.data()[k] * sum_dy_xhat);
        }
    }
    Ok((dx, dg, db))
}

/// Layer inventory addressable by kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv3x3,
    Conv1x1,
    Relu,
    Sigmoid,
    MaxPool2,
    Upsample2,
    Concat,
    Norm,
}

impl LayerKind {
    pub const ALL: [LayerKind; 8] = [
        LayerKind::Conv3x3,
        LayerKind::Conv1x1,
        LayerKind::Relu,
        LayerKind::Sigmoid,
        LayerKind::MaxPool2,
        LayerKind::Upsample2,
        LayerKind::Concat,
        LayerKind::Norm,
    ];

    fn name(self) -> &'static str {
        match self {
            LayerKind::Conv3x3 => "conv3x3",
            LayerKind::Conv1x1 => "conv1x1",
            LayerKind::Relu => "relu",
            LayerKind::Sigmoid => "sigmoid",
            LayerKind::MaxPool2 => "maxpool2",
            LayerKind::Upsample2 => "upsample2",
            LayerKind::Concat => "concat",
            LayerKind::Norm => "norm",
        }
    }

    /// Number of parameter tensors the layer takes (weight/bias or scale/shift).
    pub fn param_count(self) -> usize {
        match self {
            LayerKind::Conv3x3 | LayerKind::Conv1x1 | LayerKind::Norm => 2,
            _ => 0,
        }
    }
}

fn expect_params<T>(kind: LayerKind, params: &[&Tensor<T>]) -> Result<(), NnetError> {
    if params.len() != kind.param_count() {
        return Err(NnetError::Shape {
            layer: kind.name().into(),
            expected: format!("{} parameter tensors", kind.param_count()),
            got: format!("{}", params.len()),
        });
    }
    Ok(())
}

fn single<'a, T>(kind: LayerKind, inputs: &[&'a Tensor<T>]) -> Result<&'a Tensor<T>, NnetError> {
    match inputs {
        [x] => Ok(x),
        _ => Err(NnetError::Shape {
            layer: kind.name().into(),
            expected: "exactly one input".into(),
            got: format!("{} inputs", inputs.len()),
        }),
    }
}

/// Applies one layer. Convolutions take `[weight, bias]`, normalization
/// `[scale, shift]`; `concat` takes any number of inputs, others exactly one.
pub fn layer_apply<T: Real>(kind: LayerKind, params: &[&Tensor<T>], inputs: &[&Tensor<T>]) -> Result<Tensor<T>, NnetError> {
    expect_params(kind, params)?;
    let name = kind.name();
    match kind {
        LayerKind::Conv3x3 | LayerKind::Conv1x1 => {
            let k = if kind == LayerKind::Conv3x3 { 3 } else { 1 };
            if params[0].shape().get(2) != Some(&k) {
                return Err(shape_err(name, format!("{k}x{k} kernel"), params[0].shape()));
            }
            conv_forward(name, single(kind, inputs)?, params[0], params[1])
        }
        LayerKind::Relu => Ok(relu_forward(single(kind, inputs)?)),
        LayerKind::Sigmoid => Ok(sigmoid_forward(single(kind, inputs)?)),
        LayerKind::MaxPool2 => Ok(maxpool_forward(name, single(kind, inputs)?)?.0),
        LayerKind::Upsample2 => upsample_forward(name, single(kind, inputs)?),
        LayerKind::Concat => concat_forward(name, inputs),
        LayerKind::Norm => Ok(norm_forward(name, single(kind, inputs)?, params[0], params[1])?.0),
    }
}

/// Input and parameter gradients of [`layer_apply`] given the upstream
/// gradient of its output.
pub fn layer_grad<T: Real>(
    kind: LayerKind,
    params: &[&Tensor<T>],
    inputs: &[&Tensor<T>],
    upstream: &Tensor<T>,
) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>), NnetError> {
    expect_params(kind, params)?;
    let name = kind.name();
    match kind {
        LayerKind::Conv3x3 | LayerKind::Conv1x1 => {
            let (dx, dw, db) = conv_backward(name, single(kind, inputs)?, params[0], params[1], upstream)?;
            Ok((vec![dx], vec![dw, db]))
        }
        LayerKind::Relu => Ok((vec![relu_backward(name, single(kind, inputs)?, upstream)?], vec![])),
        LayerKind::Sigmoid => {
            let y = sigmoid_forward(single(kind, inputs)?);
            Ok((vec![sigmoid_backward(name, &y, upstream)?], vec![]))
        }
        LayerKind::MaxPool2 => {
            let x = single(kind, inputs)?;
            let (y, arg) = maxpool_forward(name, x)?;
            if y.shape() != upstream.shape() {
                return Err(shape_err(name, format!("upstream {:?}", y.shape()), upstream.shape()));
            }
            Ok((vec![maxpool_backward(name, x.shape(), &arg, upstream)?], vec![]))
        }
        LayerKind::Upsample2 => {
            let x = single(kind, inputs)?;
            let dx = upsample_backward(name, upstream)?;
            if dx.shape() != x.shape() {
                return Err(shape_err(name, format!("upstream for {:?}", x.shape()), upstream.shape()));
            }
            Ok((vec![dx], vec![]))
        }
        LayerKind::Concat => {
            let channels: Vec<usize> = inputs.iter().map(|x| x.shape().get(1).copied().unwrap_or(0)).collect();
            Ok((concat_backward(name, &channels, upstream)?, vec![]))
        }
        LayerKind::Norm => {
            let (_, cache) = norm_forward(name, single(kind, inputs)?, params[0], params[1])?;
            let (dx, dg, db) = norm_backward(name, &cache, params[0], upstream)?;
            Ok((vec![dx], vec![dg, db]))
        }
    }
}
