//! 2-D convolution as a custom op (im2col + gemm).
//!
//! Candle's own conv backward routes the input gradient through a direct
//! transposed convolution and always materialises the kernel gradient, which
//! dominates runtime on CPU. Here both gradients are plain gemm calls, and
//! each is only computed when the corresponding operand is tracked.

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    batch: usize,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kh) / self.stride + 1
    }

    fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kw) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

trait Elem: Copy + Default + Send + Sync + 'static + std::ops::AddAssign + From<f32> {}
impl Elem for f32 {}
impl Elem for f64 {}

/// Row-major `dst (m×n) = [dst +] op(a) (m×k) · op(b) (k×n)`.
#[allow(clippy::too_many_arguments)]
fn gemm_rm<T: Elem>(
    dst: &mut [T],
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    m: usize,
    n: usize,
    k: usize,
    accumulate: bool,
) {
    debug_assert_eq!(dst.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    // (row stride, col stride) of op(a) and op(b)
    let (a_rs, a_cs) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (b_rs, b_cs) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and strides stay within them.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            a.as_ptr(),
            a_cs,
            a_rs,
            b.as_ptr(),
            b_cs,
            b_rs,
            T::from(1.0),
            T::from(1.0),
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

fn im2col<T: Elem>(g: &Geometry, img: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let pad = g.padding as isize;
    let mut row = 0;
    for c in 0..g.in_c {
        let plane = &img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for y in 0..oh {
                    let sy = (y * g.stride + i) as isize - pad;
                    let line = &mut dst[y * ow..(y + 1) * ow];
                    if sy < 0 || sy >= g.in_h as isize {
                        line.fill(T::default());
                        continue;
                    }
                    let src = &plane[sy as usize * g.in_w..(sy as usize + 1) * g.in_w];
                    for (x, v) in line.iter_mut().enumerate() {
                        let sx = (x * g.stride + j) as isize - pad;
                        *v = if sx < 0 || sx >= g.in_w as isize {
                            T::default()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Elem>(g: &Geometry, cols: &[T], img: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let pad = g.padding as isize;
    let mut row = 0;
    for c in 0..g.in_c {
        let plane = &mut img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for y in 0..oh {
                    let sy = (y * g.stride + i) as isize - pad;
                    if sy < 0 || sy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * g.in_w..(sy as usize + 1) * g.in_w];
                    for x in 0..ow {
                        let sx = (x * g.stride + j) as isize - pad;
                        if sx >= 0 && sx < g.in_w as isize {
                            dst[sx as usize] += src[y * ow + x];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn forward<T: Elem>(g: &Geometry, x: &[T], w: &[T]) -> Vec<T> {
    let (p, n) = (g.patch(), g.positions());
    let mut cols = vec![T::default(); p * n];
    let mut out = vec![T::default(); g.batch * g.out_c * n];
    let img_len = g.in_c * g.in_h * g.in_w;
    for b in 0..g.batch {
        im2col(g, &x[b * img_len..(b + 1) * img_len], &mut cols);
        let dst = &mut out[b * g.out_c * n..(b + 1) * g.out_c * n];
        gemm_rm(dst, w, false, &cols, false, g.out_c, n, p, false);
    }
    out
}

fn grad_input<T: Elem>(g: &Geometry, grad: &[T], w: &[T]) -> Vec<T> {
    let (p, n) = (g.patch(), g.positions());
    let img_len = g.in_c * g.in_h * g.in_w;
    let mut cols = vec![T::default(); p * n];
    let mut out = vec![T::default(); g.batch * img_len];
    for b in 0..g.batch {
        let go = &grad[b * g.out_c * n..(b + 1) * g.out_c * n];
        gemm_rm(&mut cols, w, true, go, false, p, n, g.out_c, false);
        col2im(g, &cols, &mut out[b * img_len..(b + 1) * img_len]);
    }
    out
}

fn grad_weight<T: Elem>(g: &Geometry, x: &[T], grad: &[T]) -> Vec<T> {
    let (p, n) = (g.patch(), g.positions());
    let img_len = g.in_c * g.in_h * g.in_w;
    let mut cols = vec![T::default(); p * n];
    let mut out = vec![T::default(); g.out_c * p];
    for b in 0..g.batch {
        im2col(g, &x[b * img_len..(b + 1) * img_len], &mut cols);
        let go = &grad[b * g.out_c * n..(b + 1) * g.out_c * n];
        gemm_rm(&mut out, go, false, &cols, true, g.out_c, p, n, b > 0);
    }
    out
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout, what: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("conv2d: {what} must be contiguous"),
    }
}

macro_rules! dispatch {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(d1), CpuStorage::F32(d2)) => {
                let $a = contiguous(d1, $l1, "lhs")?;
                let $b = contiguous(d2, $l2, "rhs")?;
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(d1), CpuStorage::F64(d2)) => {
                let $a = contiguous(d1, $l1, "lhs")?;
                let $b = contiguous(d2, $l2, "rhs")?;
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!("conv2d: only f32/f64 operands of matching dtype are supported"),
        }
    };
}

struct ConvForward(Geometry);
struct ConvGradInput(Geometry);
struct ConvGradWeight(Geometry);

impl CustomOp2 for ConvForward {
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
        let g = &self.0;
        let out = dispatch!(s1, l1, s2, l2, |x, w| forward(g, x, w));
        Ok((out, Shape::from((g.batch, g.out_c, g.out_h(), g.out_w()))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gx = if x.track_op() {
            Some(grad.apply_op2_no_bwd(w, &ConvGradInput(self.0))?)
        } else {
            None
        };
        let gw = if w.track_op() {
            Some(x.apply_op2_no_bwd(&grad, &ConvGradWeight(self.0))?)
        } else {
            None
        };
        Ok((gx, gw))
    }
}

impl CustomOp2 for ConvGradInput {
    fn name(&self) -> &'static str {
        "im2col-conv2d-grad-input"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let out = dispatch!(s1, l1, s2, l2, |grad, w| grad_input(g, grad, w));
        Ok((out, Shape::from((g.batch, g.in_c, g.in_h, g.in_w))))
    }
}

impl CustomOp2 for ConvGradWeight {
    fn name(&self) -> &'static str {
        "im2col-conv2d-grad-weight"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let out = dispatch!(s1, l1, s2, l2, |x, grad| grad_weight(g, x, grad));
        Ok((out, Shape::from((g.out_c, g.in_c, g.kh, g.kw))))
    }
}

/// Convolve `x` `[B, C, H, W]` with `w` `[O, C, kh, kw]` (no bias).
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> candle_core::Result<Tensor> {
    let (batch, in_c, in_h, in_w) = x.dims4()?;
    let (out_c, wc, kh, kw) = w.dims4()?;
    if wc != in_c {
        candle_core::bail!("conv2d: input has {in_c} channels, kernel expects {wc}");
    }
    if stride == 0 || in_h + 2 * padding < kh || in_w + 2 * padding < kw {
        candle_core::bail!("conv2d: kernel {kh}x{kw} does not fit input {in_h}x{in_w} (padding {padding})");
    }
    let g = Geometry {
        batch,
        in_c,
        in_h,
        in_w,
        out_c,
        kh,
        kw,
        stride,
        padding,
    };
    x.contiguous()?.apply_op2(&w.contiguous()?, ConvForward(g))
}
