//! 2-D convolution as per-image im2col plus a matrix product, with an explicit
//! backward pass. Replaces the tensor library's CPU convolution, whose kernel
//! gradient goes through a slow dilated direct convolution.

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Storage, Tensor};
use gemm::Parallelism;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> candle_core::Result<Self> {
        let (&[n, c, h, wd], &[o, ci, k, kw]) = (x, w) else {
            candle_core::bail!("conv2d expects rank-4 input and kernel, got {x:?} and {w:?}")
        };
        if ci != c || k != kw || h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
            candle_core::bail!("conv2d shape mismatch: input {x:?}, kernel {w:?}")
        }
        Ok(Self {
            n,
            c,
            h,
            w: wd,
            o,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        })
    }

    /// Output pixels per image.
    fn pixels(&self) -> usize {
        self.ho * self.wo
    }

    /// Column rows: one per (channel, ky, kx) tap.
    fn taps(&self) -> usize {
        self.c * self.k * self.k
    }

    fn image_len(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Output columns `[lo, hi)` whose tap at offset `kx` lands inside the
    /// input row.
    fn valid_x(&self, kx: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = (p.saturating_sub(kx)).div_ceil(s).min(self.wo);
        // ox*s + kx - p < w  <=>  ox*s < w + p - kx
        let hi = (self.w + p).saturating_sub(kx).div_ceil(s).min(self.wo);
        (lo, hi.max(lo))
    }

    /// Calls `f(col_start, input_start, len)` for every run of in-bounds taps
    /// of one image, with the column laid out as `taps × pixels`. Within a run
    /// the column index advances by 1 and the input index by `stride`.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let g = *self;
        let pixels = g.pixels();
        for ch in 0..g.c {
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let row = ((ch * g.k + ky) * g.k + kx) * pixels;
                    let (lo, hi) = g.valid_x(kx);
                    if lo == hi {
                        continue;
                    }
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = (ch * g.h + iy as usize) * g.w + lo * g.stride + kx - g.pad;
                        f(row + oy * g.wo + lo, src, hi - lo);
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f32], col: &mut [f32]) {
        col.fill(0.0);
        let s = self.stride;
        self.for_each_run(|c, i, len| {
            let dst = &mut col[c..c + len];
            if s == 1 {
                dst.copy_from_slice(&x[i..i + len]);
            } else {
                for (d, v) in dst.iter_mut().zip(x[i..].iter().step_by(s)) {
                    *d = *v;
                }
            }
        });
    }

    fn col2im_add(&self, col: &[f32], out: &mut [f32]) {
        let s = self.stride;
        self.for_each_run(|c, i, len| {
            let src = &col[c..c + len];
            if s == 1 {
                for (v, o) in src.iter().zip(&mut out[i..i + len]) {
                    *o += *v;
                }
            } else {
                for (v, o) in src.iter().zip(out[i..].iter_mut().step_by(s)) {
                    *o += *v;
                }
            }
        });
    }
}

/// Row-major `dst (m×n) (+)= a (m×k) · b (k×n)`, where `a` and `b` may be
/// stored transposed.
#[allow(clippy::too_many_arguments)]
fn matmul_into(dst: &mut [f32], accumulate: bool, m: usize, n: usize, k: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool) {
    if m < n {
        // the kernels favor a tall output; compute the transposed product
        return matmul_into_t(dst, accumulate, n, m, k, b, !b_t, a, !a_t);
    }
    gemm_strided(dst, accumulate, m, n, k, a, a_t, b, b_t, (n as isize, 1));
}

/// `dstᵀ (m×n) (+)= a · b` with `dst` stored row-major as `n×m`.
#[allow(clippy::too_many_arguments)]
fn matmul_into_t(dst: &mut [f32], accumulate: bool, m: usize, n: usize, k: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool) {
    gemm_strided(dst, accumulate, m, n, k, a, a_t, b, b_t, (1, m as isize));
}

#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    dst: &mut [f32],
    accumulate: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    (d_rs, d_cs): (isize, isize),
) {
    assert!(dst.len() == m * n && a.len() == m * k && b.len() == k * n);
    // (row stride, column stride) of each operand as stored
    let (a_rs, a_cs) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (b_rs, b_cs) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the lengths are checked above and the strides address them in
    // bounds.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            d_cs,
            d_rs,
            accumulate,
            a.as_ptr(),
            a_cs,
            a_rs,
            b.as_ptr(),
            b_cs,
            b_rs,
            1.0,
            1.0,
            false,
            false,
            false,
            Parallelism::None,
        );
    }
}

fn contiguous<'a>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [f32]> {
    let CpuStorage::F32(data) = s else {
        candle_core::bail!("conv2d supports f32 only")
    };
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("conv2d requires contiguous operands"),
    }
}

struct Conv2d {
    stride: usize,
    pad: usize,
}

impl CustomOp2 for Conv2d {
    fn name(&self) -> &'static str {
        "im2col-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geometry::new(l1.dims(), l2.dims(), self.stride, self.pad)?;
        let x = contiguous(s1, l1)?;
        let w = contiguous(s2, l2)?;
        let (taps, pixels) = (g.taps(), g.pixels());
        let mut col = vec![0.0f32; taps * pixels];
        let mut y = vec![0.0f32; g.n * g.o * pixels];
        for (xb, yb) in x.chunks_exact(g.image_len()).zip(y.chunks_exact_mut(g.o * pixels)) {
            g.im2col(xb, &mut col);
            // y_b (o×P) = W (o×taps) · col (taps×P)
            matmul_into(yb, false, g.o, pixels, taps, w, false, &col, false);
        }
        Ok((CpuStorage::F32(y), Shape::from((g.n, g.o, g.ho, g.wo))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let g = Geometry::new(x.dims(), w.dims(), self.stride, self.pad)?;
        let grad = grad.contiguous()?;
        let (xs, xl) = x.storage_and_layout();
        let (ws, wl) = w.storage_and_layout();
        let (gs, gl) = grad.storage_and_layout();
        let (Storage::Cpu(xs), Storage::Cpu(ws), Storage::Cpu(gs)) = (&*xs, &*ws, &*gs) else {
            candle_core::bail!("conv2d backward runs on the CPU only")
        };
        let (xv, wv, dy) = (contiguous(xs, xl)?, contiguous(ws, wl)?, contiguous(gs, gl)?);
        let (taps, pixels) = (g.taps(), g.pixels());
        let want_dx = x.track_op();
        let mut col = vec![0.0f32; taps * pixels];
        let mut dcol = vec![0.0f32; taps * pixels];
        let mut dw = vec![0.0f32; g.o * taps];
        let mut dx = vec![0.0f32; if want_dx { xv.len() } else { 0 }];
        for b in 0..g.n {
            let xb = &xv[b * g.image_len()..(b + 1) * g.image_len()];
            let dyb = &dy[b * g.o * pixels..(b + 1) * g.o * pixels];
            g.im2col(xb, &mut col);
            // dW (o×taps) += dY_b (o×P) · col_bᵀ (P×taps)
            matmul_into(&mut dw, b > 0, g.o, taps, pixels, dyb, false, &col, true);
            if want_dx {
                // dcol (taps×P) = Wᵀ (taps×o) · dY_b (o×P)
                matmul_into(&mut dcol, false, taps, pixels, g.o, wv, true, dyb, false);
                g.col2im_add(&dcol, &mut dx[b * g.image_len()..(b + 1) * g.image_len()]);
            }
        }
        let dev = x.device();
        let dx = if want_dx { Some(Tensor::from_vec(dx, x.shape(), dev)?) } else { None };
        Ok((dx, Some(Tensor::from_vec(dw, w.shape(), dev)?)))
    }
}

/// Cross-correlation of `N×C×H×W` input with an `O×C×K×K` kernel.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> candle_core::Result<Tensor> {
    x.contiguous()?
        .apply_op2(&w.contiguous()?, Conv2d { stride, pad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var, D};

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(D::Minus1).unwrap().to_scalar().unwrap()
    }

    #[test]
    fn matches_reference_convolution_and_gradients() {
        let dev = Device::Cpu;
        for (n, c, o, h, k, stride, pad) in [(2, 3, 4, 7, 3, 1, 1), (3, 2, 5, 8, 3, 2, 1), (1, 4, 2, 6, 1, 2, 0), (2, 3, 3, 9, 7, 2, 3)] {
            let x = Var::randn(0f32, 1.0, (n, c, h, h), &dev).unwrap();
            let w = Var::randn(0f32, 1.0, (o, c, k, k), &dev).unwrap();
            let mine = conv2d(x.as_tensor(), w.as_tensor(), stride, pad).unwrap();
            let reference = x.as_tensor().conv2d(w.as_tensor(), pad, stride, 1, 1).unwrap();
            assert_eq!(mine.dims(), reference.dims());
            assert!(max_abs_diff(&mine, &reference) < 1e-4);

            let probe = Tensor::randn(0f32, 1.0, mine.shape(), &dev).unwrap();
            let g1 = (mine * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let g2 = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &w] {
                let a = g1.get(v.as_tensor()).unwrap();
                let b = g2.get(v.as_tensor()).unwrap();
                assert!(max_abs_diff(a, b) < 1e-3, "gradient mismatch");
            }
        }
    }
}

