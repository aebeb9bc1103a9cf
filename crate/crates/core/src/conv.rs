//! 2-D "same" convolution with replicate-edge padding and its exact adjoint.
//!
//! Both passes are lowered to dense matrix products over row chunks: im2col
//! for narrow inputs, one strided GEMM per kernel tap for wide ones. Chunks
//! run in parallel; partial weight gradients are reduced in chunk order so
//! results do not depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Target number of output pixels per im2col chunk.
const CHUNK_PIXELS: usize = 1024;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    in_channels: usize,
    out_channels: usize,
    kernel_size: usize,
    /// `out × in × k × k`, row-major.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ConvBackward {
    /// `None` when the caller asked for parameter gradients only.
    pub input: Option<Tensor>,
    pub params: ConvGrads,
}

impl ConvLayer {
    /// Zero-initialized layer.
    pub fn zeros(in_channels: usize, out_channels: usize, kernel_size: usize) -> Result<Self> {
        let n = out_channels * in_channels * kernel_size * kernel_size;
        Self::from_parts(
            in_channels,
            out_channels,
            kernel_size,
            vec![0.0; n],
            vec![0.0; out_channels],
        )
    }

    pub fn from_parts(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if kernel_size == 0 || kernel_size % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel size must be odd and positive, got {kernel_size}"
            )));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::InvalidArgument(
                "conv layer needs at least one channel".into(),
            ));
        }
        let n = out_channels * in_channels * kernel_size * kernel_size;
        if weight.len() != n {
            return Err(Error::shape("ConvLayer weights", n, weight.len()));
        }
        if bias.len() != out_channels {
            return Err(Error::shape("ConvLayer bias", out_channels, bias.len()));
        }
        Ok(ConvLayer {
            in_channels,
            out_channels,
            kernel_size,
            weight,
            bias,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }
    pub fn out_channels(&self) -> usize {
        self.out_channels
    }
    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }
    pub fn padding(&self) -> usize {
        (self.kernel_size - 1) / 2
    }
    pub fn weight(&self) -> &[f64] {
        &self.weight
    }
    pub fn weight_mut(&mut self) -> &mut [f64] {
        &mut self.weight
    }
    pub fn bias(&self) -> &[f64] {
        &self.bias
    }
    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }
    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    #[inline]
    pub fn weight_at(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        let k = self.kernel_size;
        self.weight[((o * self.in_channels + i) * k + ky) * k + kx]
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.channels() != self.in_channels {
            return Err(Error::shape(
                "conv2d",
                format!("{} input channels", self.in_channels),
                format!("{} channels", input.channels()),
            ));
        }
        if input.height() == 0 || input.width() == 0 {
            return Err(Error::InvalidArgument(
                "conv2d input has an empty spatial extent".into(),
            ));
        }
        Ok(())
    }

    /// Bias plus windowed weighted sum, output spatial size equal to input.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let padded = replicate_pad(input, self.padding());
        Ok(valid_correlate(
            &padded,
            &self.weight,
            self.out_channels,
            self.kernel_size,
            Some(&self.bias),
        ))
    }

    /// Gradients of a scalar loss given `grad_out = dL/d(forward(input))`.
    pub fn backward(
        &self,
        input: &Tensor,
        grad_out: &Tensor,
        with_input_grad: bool,
    ) -> Result<ConvBackward> {
        self.check_input(input)?;
        let expected = Shape::new(self.out_channels, input.height(), input.width());
        if grad_out.shape() != expected {
            return Err(Error::shape(
                "conv2d_backward grad_out",
                expected,
                grad_out.shape(),
            ));
        }
        let k = self.kernel_size;
        let p = self.padding();
        let padded = replicate_pad(input, p);

        let bias = (0..self.out_channels)
            .map(|o| grad_out.plane(o).iter().sum())
            .collect();
        let weight = weight_gradient(&padded, grad_out, k);

        let input_grad = if with_input_grad {
            let flipped = self.flipped_transpose();
            let gz = zero_pad(grad_out, k - 1);
            let grad_padded = valid_correlate(&gz, &flipped, self.in_channels, k, None);
            Some(fold_replicate(
                &grad_padded,
                p,
                input.height(),
                input.width(),
            ))
        } else {
            None
        };
        Ok(ConvBackward {
            input: input_grad,
            params: ConvGrads { weight, bias },
        })
    }

    /// `in × out × k × k` kernel with both spatial axes reversed.
    fn flipped_transpose(&self) -> Vec<f64> {
        let k = self.kernel_size;
        let mut out = vec![0.0; self.weight.len()];
        for i in 0..self.in_channels {
            for o in 0..self.out_channels {
                for ky in 0..k {
                    for kx in 0..k {
                        out[((i * self.out_channels + o) * k + ky) * k + kx] =
                            self.weight_at(o, i, k - 1 - ky, k - 1 - kx);
                    }
                }
            }
        }
        out
    }
}

/// Pads every plane by `p` pixels on all sides, repeating edge values.
pub fn replicate_pad(t: &Tensor, p: usize) -> Tensor {
    if p == 0 {
        return t.clone();
    }
    let (h, w) = (t.height(), t.width());
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let mut out = Tensor::zeros(Shape::new(t.channels(), ph, pw));
    for c in 0..t.channels() {
        let src = t.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..ph {
            let sy = y.saturating_sub(p).min(h - 1);
            let srow = &src[sy * w..(sy + 1) * w];
            let drow = &mut dst[y * pw..(y + 1) * pw];
            drow[..p].fill(srow[0]);
            drow[p..p + w].copy_from_slice(srow);
            drow[p + w..].fill(srow[w - 1]);
        }
    }
    out
}

fn zero_pad(t: &Tensor, p: usize) -> Tensor {
    let (h, w) = (t.height(), t.width());
    let pw = w + 2 * p;
    let mut out = Tensor::zeros(Shape::new(t.channels(), h + 2 * p, pw));
    for c in 0..t.channels() {
        let src = t.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            dst[(y + p) * pw + p..(y + p) * pw + p + w].copy_from_slice(&src[y * w..(y + 1) * w]);
        }
    }
    out
}

/// Adjoint of [`replicate_pad`]: every padded cell is accumulated into the
/// edge pixel it was copied from.
pub fn fold_replicate(padded: &Tensor, p: usize, h: usize, w: usize) -> Tensor {
    let pw = w + 2 * p;
    let mut out = Tensor::zeros(Shape::new(padded.channels(), h, w));
    for c in 0..padded.channels() {
        let src = padded.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h + 2 * p {
            let ty = y.saturating_sub(p).min(h - 1);
            let srow = &src[y * pw..(y + 1) * pw];
            let drow = &mut dst[ty * w..(ty + 1) * w];
            drow[0] += srow[..p].iter().sum::<f64>();
            for (d, s) in drow.iter_mut().zip(&srow[p..p + w]) {
                *d += s;
            }
            drow[w - 1] += srow[p + w..].iter().sum::<f64>();
        }
    }
    out
}

thread_local! {
    static SCRATCH: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Runs `f` with a reusable per-thread buffer of at least `len` values.
/// Contents on entry are unspecified.
fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    SCRATCH.with(|cell| {
        let mut buf = cell.borrow_mut();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        f(&mut buf[..len])
    })
}

fn row_chunks(rows: usize, width: usize) -> Vec<(usize, usize)> {
    let per = (CHUNK_PIXELS / width.max(1)).max(1);
    (0..rows)
        .step_by(per)
        .map(|r0| (r0, (r0 + per).min(rows)))
        .collect()
}

/// Fills `cols` (`(r1−r0)·out_w × C·k·k`, one receptive field per row)
/// for output rows `r0..r1` of a valid correlation over `src`.
fn im2col(src: &Tensor, k: usize, r0: usize, r1: usize, out_w: usize, cols: &mut [f64]) {
    let sw = src.width();
    let kk = src.channels() * k * k;
    for y in r0..r1 {
        for x in 0..out_w {
            let j = (y - r0) * out_w + x;
            let dst = &mut cols[j * kk..(j + 1) * kk];
            for c in 0..src.channels() {
                let plane = src.plane(c);
                for ky in 0..k {
                    let s = (y + ky) * sw + x;
                    let d = (c * k + ky) * k;
                    dst[d..d + k].copy_from_slice(&plane[s..s + k]);
                }
            }
        }
    }
}

/// Inputs with at least this many channels skip im2col and run one GEMM
/// per kernel tap directly on the padded planes.
const IMPLICIT_MIN_CHANNELS: usize = 8;

/// Valid cross-correlation of `src` with `m` filters stored as an
/// `m × (C·k·k)` matrix.
fn valid_correlate(src: &Tensor, wmat: &[f64], m: usize, k: usize, bias: Option<&[f64]>) -> Tensor {
    let out_h = src.height() + 1 - k;
    let out_w = src.width() + 1 - k;
    debug_assert_eq!(wmat.len(), m * src.channels() * k * k);
    let chunks = row_chunks(out_h, out_w);
    let implicit = src.channels() >= IMPLICIT_MIN_CHANNELS;
    let parts: Vec<Vec<f64>> = chunks
        .par_iter()
        .map(|&(r0, r1)| {
            if implicit {
                correlate_taps(src, wmat, m, k, bias, r0, r1)
            } else {
                correlate_im2col(src, wmat, m, k, bias, r0, r1)
            }
        })
        .collect();

    // Implicit chunks are laid out with the padded row pitch.
    let pitch = if implicit { src.width() } else { out_w };
    let plane = out_h * out_w;
    let mut out = vec![0.0; m * plane];
    for (&(r0, r1), local) in chunks.iter().zip(&parts) {
        let n = chunk_len(r0, r1, pitch, out_w);
        for o in 0..m {
            let block = &local[o * n..(o + 1) * n];
            for y in r0..r1 {
                let d = o * plane + y * out_w;
                let s = (y - r0) * pitch;
                out[d..d + out_w].copy_from_slice(&block[s..s + out_w]);
            }
        }
    }
    Tensor::from_vec(Shape::new(m, out_h, out_w), out).expect("sized by construction")
}

/// Length of a chunk of rows `r0..r1` stored with row pitch `pitch`, where
/// only the first `out_w` entries of the last row are kept.
fn chunk_len(r0: usize, r1: usize, pitch: usize, out_w: usize) -> usize {
    (r1 - r0 - 1) * pitch + out_w
}

fn init_block(m: usize, n: usize, bias: Option<&[f64]>) -> Vec<f64> {
    let mut local = vec![0.0; m * n];
    if let Some(b) = bias {
        for (o, row) in local.chunks_exact_mut(n).enumerate() {
            row.fill(b[o]);
        }
    }
    local
}

fn correlate_im2col(
    src: &Tensor,
    wmat: &[f64],
    m: usize,
    k: usize,
    bias: Option<&[f64]>,
    r0: usize,
    r1: usize,
) -> Vec<f64> {
    let out_w = src.width() + 1 - k;
    let kk = src.channels() * k * k;
    let n = (r1 - r0) * out_w;
    let mut local = init_block(m, n, bias);
    with_scratch(kk * n, |cols| {
        im2col(src, k, r0, r1, out_w, cols);
        // SAFETY: all pointers reference live buffers of the declared
        // dimensions and strides.
        unsafe {
            matrixmultiply::dgemm(
                m,
                kk,
                n,
                1.0,
                wmat.as_ptr(),
                kk as isize,
                1,
                cols.as_ptr(),
                1,
                kk as isize,
                1.0,
                local.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
    local
}

/// Output rows `r0..r1` as an `m × n` block with the padded row pitch; the
/// trailing `k−1` entries of every row but the last are junk.
fn correlate_taps(
    src: &Tensor,
    wmat: &[f64],
    m: usize,
    k: usize,
    bias: Option<&[f64]>,
    r0: usize,
    r1: usize,
) -> Vec<f64> {
    let (c, pw) = (src.channels(), src.width());
    let out_w = pw + 1 - k;
    let kk = c * k * k;
    let n = chunk_len(r0, r1, pw, out_w);
    let plane = src.height() * pw;
    let data = src.data();
    let mut local = init_block(m, n, bias);
    for ky in 0..k {
        for kx in 0..k {
            let off = (r0 + ky) * pw + kx;
            // SAFETY: the tap's weights form an m × C view of `wmat` and the
            // shifted input an C × n view of `data`; the furthest element read
            // is (C−1)·plane + (r1−1+ky)·pw + kx + out_w − 1 < C·plane.
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    c,
                    n,
                    1.0,
                    wmat.as_ptr().add(ky * k + kx),
                    kk as isize,
                    (k * k) as isize,
                    data.as_ptr().add(off),
                    plane as isize,
                    1,
                    1.0,
                    local.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
    }
    local
}

/// `dL/dW` for a layer whose replicate-padded input is `padded`.
fn weight_gradient(padded: &Tensor, grad_out: &Tensor, k: usize) -> Vec<f64> {
    let out_h = grad_out.height();
    let m = grad_out.channels();
    let kk = padded.channels() * k * k;
    let chunks = row_chunks(out_h, grad_out.width());
    let implicit = padded.channels() >= IMPLICIT_MIN_CHANNELS;
    let parts: Vec<Vec<f64>> = chunks
        .par_iter()
        .map(|&(r0, r1)| {
            if implicit {
                weight_gradient_taps(padded, grad_out, k, r0, r1)
            } else {
                weight_gradient_im2col(padded, grad_out, k, r0, r1)
            }
        })
        .collect();
    let mut total = vec![0.0; m * kk];
    for part in &parts {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    total
}

fn weight_gradient_im2col(
    padded: &Tensor,
    grad_out: &Tensor,
    k: usize,
    r0: usize,
    r1: usize,
) -> Vec<f64> {
    let (out_h, out_w) = (grad_out.height(), grad_out.width());
    let m = grad_out.channels();
    let kk = padded.channels() * k * k;
    let n = (r1 - r0) * out_w;
    let g = grad_out.data();
    let mut local = vec![0.0; m * kk];
    with_scratch(kk * n, |cols| {
        im2col(padded, k, r0, r1, out_w, cols);
        // SAFETY: `g` offset by r0·out_w addresses an m × n block with row
        // stride out_h·out_w; `cols` is n × K row-major.
        unsafe {
            matrixmultiply::dgemm(
                m,
                n,
                kk,
                1.0,
                g.as_ptr().add(r0 * out_w),
                (out_h * out_w) as isize,
                1,
                cols.as_ptr(),
                kk as isize,
                1,
                0.0,
                local.as_mut_ptr(),
                kk as isize,
                1,
            );
        }
    });
    local
}

fn weight_gradient_taps(
    padded: &Tensor,
    grad_out: &Tensor,
    k: usize,
    r0: usize,
    r1: usize,
) -> Vec<f64> {
    let (c, pw) = (padded.channels(), padded.width());
    let out_w = grad_out.width();
    let m = grad_out.channels();
    let kk = c * k * k;
    let n = chunk_len(r0, r1, pw, out_w);
    let plane = padded.height() * pw;
    let data = padded.data();
    // grad_out rows re-laid with the padded pitch, zeros in the junk columns
    let mut g = vec![0.0; m * n];
    for o in 0..m {
        let src = grad_out.plane(o);
        for y in r0..r1 {
            let d = o * n + (y - r0) * pw;
            g[d..d + out_w].copy_from_slice(&src[y * out_w..(y + 1) * out_w]);
        }
    }
    let mut local = vec![0.0; m * kk];
    for ky in 0..k {
        for kx in 0..k {
            let off = (r0 + ky) * pw + kx;
            // SAFETY: same input view as in `correlate_taps`; the result is
            // scattered into the m × C sub-grid of `local` for this tap.
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    n,
                    c,
                    1.0,
                    g.as_ptr(),
                    n as isize,
                    1,
                    data.as_ptr().add(off),
                    1,
                    plane as isize,
                    0.0,
                    local.as_mut_ptr().add(ky * k + kx),
                    kk as isize,
                    (k * k) as isize,
                );
            }
        }
    }
    local
}
