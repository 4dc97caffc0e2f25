//! Convolution primitives for the autoencoder.
//!
//! All convolutions share one geometry: kernel 3x3, stride 2, padding 1,
//! which maps a (H, W) grid to (H/2, W/2) and back. Layers are generic
//! over `f32`/`f64`; gradient tests use `f64`, training uses `f32`.
//! The heavy lifting is im2col/col2im plus BLAS gemm.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView4, ArrayViewMut2, Axis, NdFloat};
use num_traits::FromPrimitive;

pub trait Scalar: NdFloat + FromPrimitive {}
impl<T: NdFloat + FromPrimitive> Scalar for T {}

pub const KERNEL: usize = 3;
pub const STRIDE: usize = 2;
pub const PADDING: usize = 1;

/// Patch extraction for one sample plane set: `xs` is a (c, h, w) standard
/// layout slice, `cols` receives (oh*ow, c*9) rows. With kernel 3, stride 2,
/// padding 1 only the top row (oy = 0) and left column (ox = 0) of the small
/// grid touch the zero padding, so everything else is three contiguous
/// 3-element copies per channel.
fn im2col_sample<F: Scalar>(xs: &[F], c: usize, h: usize, w: usize, cols: &mut [F]) {
    let (oh, ow) = (h / 2, w / 2);
    let ckk = c * KERNEL * KERNEL;
    debug_assert_eq!(xs.len(), c * h * w);
    debug_assert_eq!(cols.len(), oh * ow * ckk);
    for ci in 0..c {
        let plane = &xs[ci * h * w..(ci + 1) * h * w];
        for oy in 0..oh {
            let iy0 = (oy * STRIDE) as isize - PADDING as isize;
            let row0 = oy * ow * ckk + ci * KERNEL * KERNEL;
            for ky in 0..KERNEL {
                let iy = iy0 + ky as isize;
                if iy < 0 {
                    // Top padding: zero the three kx slots of every ox.
                    for ox in 0..ow {
                        let dst = row0 + ox * ckk + ky * KERNEL;
                        cols[dst..dst + KERNEL].fill(F::zero());
                    }
                    continue;
                }
                let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                // ox = 0 touches the left padding (ix0 = -1).
                let dst = row0 + ky * KERNEL;
                cols[dst] = F::zero();
                cols[dst + 1] = src_row[0];
                cols[dst + 2] = src_row[1];
                for ox in 1..ow {
                    let ix0 = ox * STRIDE - PADDING;
                    let dst = row0 + ox * ckk + ky * KERNEL;
                    cols[dst..dst + KERNEL].copy_from_slice(&src_row[ix0..ix0 + KERNEL]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col_sample`]: scatter-add patch rows back onto (c, h, w).
/// The destination must be zeroed by the caller.
fn col2im_sample_add<F: Scalar>(cols: &[F], c: usize, h: usize, w: usize, xs: &mut [F]) {
    let (oh, ow) = (h / 2, w / 2);
    let ckk = c * KERNEL * KERNEL;
    debug_assert_eq!(xs.len(), c * h * w);
    debug_assert_eq!(cols.len(), oh * ow * ckk);
    for ci in 0..c {
        let plane = &mut xs[ci * h * w..(ci + 1) * h * w];
        for oy in 0..oh {
            let iy0 = (oy * STRIDE) as isize - PADDING as isize;
            let row0 = oy * ow * ckk + ci * KERNEL * KERNEL;
            for ky in 0..KERNEL {
                let iy = iy0 + ky as isize;
                if iy < 0 {
                    continue;
                }
                let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                let src = row0 + ky * KERNEL;
                dst_row[0] = dst_row[0] + cols[src + 1];
                dst_row[1] = dst_row[1] + cols[src + 2];
                for ox in 1..ow {
                    let ix0 = ox * STRIDE - PADDING;
                    let src = row0 + ox * ckk + ky * KERNEL;
                    for kx in 0..KERNEL {
                        dst_row[ix0 + kx] = dst_row[ix0 + kx] + cols[src + kx];
                    }
                }
            }
        }
    }
}

/// Patch extraction over the "small" grid of a stride-2 conv.
///
/// Input is the large grid (n, c, H, W); output has one row per
/// (n, oy, ox) position of the small (H/2, W/2) grid, each row holding the
/// c*3*3 patch values (zero padded at borders).
pub fn im2col<F: Scalar>(x: &ArrayView4<'_, F>) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "grid sides must be even, got {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    let ckk = c * KERNEL * KERNEL;
    let mut cols = Array2::<F>::zeros((n * oh * ow, ckk));
    let cols_slice = cols.as_slice_mut().expect("cols is standard layout");
    let x_std = x.as_standard_layout();
    let xs = x_std.as_slice().expect("standard layout");
    let chw = c * h * w;
    let sample_rows = oh * ow * ckk;
    for ni in 0..n {
        im2col_sample(
            &xs[ni * chw..(ni + 1) * chw],
            c,
            h,
            w,
            &mut cols_slice[ni * sample_rows..(ni + 1) * sample_rows],
        );
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch rows back onto the large grid.
pub fn col2im_add<F: Scalar>(cols: &Array2<F>, n: usize, c: usize, h: usize, w: usize) -> Array4<F> {
    let (oh, ow) = (h / 2, w / 2);
    let ckk = c * KERNEL * KERNEL;
    assert_eq!(cols.dim(), (n * oh * ow, ckk));
    let mut x = Array4::<F>::zeros((n, c, h, w));
    let xs = x.as_slice_mut().expect("standard layout");
    let cs = cols.as_slice().expect("standard layout");
    let chw = c * h * w;
    let sample_rows = oh * ow * ckk;
    for ni in 0..n {
        col2im_sample_add(
            &cs[ni * sample_rows..(ni + 1) * sample_rows],
            c,
            h,
            w,
            &mut xs[ni * chw..(ni + 1) * chw],
        );
    }
    x
}

/// View one sample of a standard-layout batch as a (c, h*w) matrix.
fn sample_view<'a, F: Scalar>(x: &ArrayView4<'a, F>, ni: usize) -> ArrayView2<'a, F> {
    let (_n, c, h, w) = x.dim();
    x.clone()
        .index_axis_move(Axis(0), ni)
        .into_shape_with_order((c, h * w))
        .expect("standard layout batch")
}

fn sample_view_mut<'a, F: Scalar>(x: &'a mut Array4<F>, ni: usize) -> ArrayViewMut2<'a, F> {
    let (_n, c, h, w) = x.dim();
    x.index_axis_mut(Axis(0), ni)
        .into_shape_with_order((c, h * w))
        .expect("standard layout batch")
}

/// Strided 3x3 convolution, (n, c_in, H, W) -> (n, c_out, H/2, W/2).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<F> {
    /// (c_out, c_in, 3, 3)
    pub weight: Array4<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> Conv2d<F> {
    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        Self { weight: Array4::zeros((c_out, c_in, KERNEL, KERNEL)), bias: Array1::zeros(c_out) }
    }

    pub fn c_in(&self) -> usize {
        self.weight.dim().1
    }

    pub fn c_out(&self) -> usize {
        self.weight.dim().0
    }

    fn weight2(&self) -> Array2<F> {
        let (co, ci, k, _) = self.weight.dim();
        self.weight.view().into_shape_with_order((co, ci * k * k)).unwrap().to_owned()
    }

    pub fn forward(&self, x: &ArrayView4<'_, F>) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.c_in(), "input channels");
        assert!(h % 2 == 0 && w % 2 == 0, "grid sides must be even, got {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let co = self.c_out();
        let w2 = self.weight2();
        let x_std = x.as_standard_layout();
        let xs = x_std.as_slice().expect("standard layout");
        let mut y = Array4::<F>::zeros((n, co, oh, ow));
        let mut cols = Array2::<F>::zeros((oh * ow, c * KERNEL * KERNEL));
        for ni in 0..n {
            im2col_sample(
                &xs[ni * c * h * w..(ni + 1) * c * h * w],
                c,
                h,
                w,
                cols.as_slice_mut().unwrap(),
            );
            // y_i = W (co, c*9) . cols^T (c*9, oh*ow) lands directly in
            // feature-map layout; no permutation pass needed.
            let mut y_i = sample_view_mut(&mut y, ni);
            general_mat_mul(F::one(), &w2, &cols.t(), F::zero(), &mut y_i);
            for (mut row, &b) in y_i.outer_iter_mut().zip(self.bias.iter()) {
                row.mapv_inplace(|v| v + b);
            }
        }
        y
    }

    /// Gradients of the loss w.r.t. input, weight and bias given dL/dy.
    /// `need_dx` skips the input gradient for the first layer.
    pub fn backward(
        &self,
        x: &ArrayView4<'_, F>,
        dy: &ArrayView4<'_, F>,
        need_dx: bool,
    ) -> (Option<Array4<F>>, Array4<F>, Array1<F>) {
        let (co, ci, k, _) = self.weight.dim();
        let mut dw = Array4::<F>::zeros((co, ci, k, k));
        let mut db = Array1::<F>::zeros(co);
        let dx = self.backward_into(x, dy, need_dx, &mut dw, &mut db);
        (dx, dw, db)
    }

    /// As [`Self::backward`], but accumulates the parameter gradients into
    /// caller-held buffers so minibatch gradients can be summed sample by
    /// sample without temporaries.
    pub fn backward_into(
        &self,
        x: &ArrayView4<'_, F>,
        dy: &ArrayView4<'_, F>,
        need_dx: bool,
        dw: &mut Array4<F>,
        db: &mut Array1<F>,
    ) -> Option<Array4<F>> {
        let (n, c, h, w) = x.dim();
        let (co, ci, k, _) = self.weight.dim();
        assert_eq!(dw.dim(), (co, ci, k, k));
        let w2 = self.weight2();
        let x_std = x.as_standard_layout();
        let xs = x_std.as_slice().expect("standard layout");
        let mut dw2 = dw
            .view_mut()
            .into_shape_with_order((co, ci * k * k))
            .expect("standard layout gradient");
        let mut dx = need_dx.then(|| Array4::<F>::zeros((n, c, h, w)));
        let mut cols = Array2::<F>::zeros((h / 2 * (w / 2), c * KERNEL * KERNEL));
        let mut dcols = Array2::<F>::zeros(cols.dim());
        for ni in 0..n {
            let dy_i = sample_view(dy, ni);
            im2col_sample(
                &xs[ni * c * h * w..(ni + 1) * c * h * w],
                c,
                h,
                w,
                cols.as_slice_mut().unwrap(),
            );
            general_mat_mul(F::one(), &dy_i, &cols, F::one(), &mut dw2);
            for (d, row) in db.iter_mut().zip(dy_i.outer_iter()) {
                *d = *d + row.sum();
            }
            if let Some(dx) = dx.as_mut() {
                general_mat_mul(F::one(), &dy_i.t(), &w2, F::zero(), &mut dcols.view_mut());
                let mut dx_i = sample_view_mut(dx, ni);
                col2im_sample_add(
                    dcols.as_slice().unwrap(),
                    c,
                    h,
                    w,
                    dx_i.as_slice_mut().unwrap(),
                );
            }
        }
        dx
    }
}

/// Transposed 3x3 convolution, (n, c_in, h, w) -> (n, c_out, 2h, 2w).
/// Stride 2, padding 1, output padding 1; exact mirror of [`Conv2d`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d<F> {
    /// (c_in, c_out, 3, 3)
    pub weight: Array4<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> ConvTranspose2d<F> {
    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        Self { weight: Array4::zeros((c_in, c_out, KERNEL, KERNEL)), bias: Array1::zeros(c_out) }
    }

    pub fn c_in(&self) -> usize {
        self.weight.dim().0
    }

    pub fn c_out(&self) -> usize {
        self.weight.dim().1
    }

    fn weight2(&self) -> Array2<F> {
        let (ci, co, k, _) = self.weight.dim();
        self.weight.view().into_shape_with_order((ci, co * k * k)).unwrap().to_owned()
    }

    pub fn forward(&self, x: &ArrayView4<'_, F>) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.c_in(), "input channels");
        let co = self.c_out();
        let w2 = self.weight2();
        let mut y = Array4::<F>::zeros((n, co, h * 2, w * 2));
        let mut cols = Array2::<F>::zeros((h * w, co * KERNEL * KERNEL));
        for ni in 0..n {
            let x_i = sample_view(x, ni);
            // cols_i = x_i^T (h*w, ci) . W (ci, co*9), the adjoint of the
            // forward conv's gemm; col2im scatters it onto the large grid.
            general_mat_mul(F::one(), &x_i.t(), &w2, F::zero(), &mut cols.view_mut());
            let mut y_i = sample_view_mut(&mut y, ni);
            col2im_sample_add(
                cols.as_slice().unwrap(),
                co,
                h * 2,
                w * 2,
                y_i.as_slice_mut().unwrap(),
            );
            for (mut row, &b) in y_i.outer_iter_mut().zip(self.bias.iter()) {
                row.mapv_inplace(|v| v + b);
            }
        }
        y
    }

    pub fn backward(
        &self,
        x: &ArrayView4<'_, F>,
        dy: &ArrayView4<'_, F>,
    ) -> (Array4<F>, Array4<F>, Array1<F>) {
        let (ci, co, k, _) = self.weight.dim();
        let mut dw = Array4::<F>::zeros((ci, co, k, k));
        let mut db = Array1::<F>::zeros(co);
        let dx = self.backward_into(x, dy, &mut dw, &mut db);
        (dx, dw, db)
    }

    /// As [`Self::backward`], accumulating parameter gradients into
    /// caller-held buffers.
    pub fn backward_into(
        &self,
        x: &ArrayView4<'_, F>,
        dy: &ArrayView4<'_, F>,
        dw: &mut Array4<F>,
        db: &mut Array1<F>,
    ) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        let (ci, co, k, _) = self.weight.dim();
        assert_eq!(dw.dim(), (ci, co, k, k));
        let w2 = self.weight2();
        let dy_std = dy.as_standard_layout();
        let dys = dy_std.as_slice().expect("standard layout");
        let mut dw2 = dw
            .view_mut()
            .into_shape_with_order((ci, co * k * k))
            .expect("standard layout gradient");
        let mut dx = Array4::<F>::zeros((n, c, h, w));
        let mut dcols = Array2::<F>::zeros((h * w, co * KERNEL * KERNEL));
        let big = co * (h * 2) * (w * 2);
        for ni in 0..n {
            im2col_sample(
                &dys[ni * big..(ni + 1) * big],
                co,
                h * 2,
                w * 2,
                dcols.as_slice_mut().unwrap(),
            );
            let x_i = sample_view(x, ni);
            general_mat_mul(F::one(), &x_i, &dcols, F::one(), &mut dw2);
            let dy_i = sample_view(dy, ni);
            for (d, row) in db.iter_mut().zip(dy_i.outer_iter()) {
                *d = *d + row.sum();
            }
            let mut dx_i = sample_view_mut(&mut dx, ni);
            general_mat_mul(F::one(), &w2, &dcols.t(), F::zero(), &mut dx_i);
        }
        dx
    }
}

pub fn relu_inplace<F: Scalar>(x: &mut Array4<F>) {
    x.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
}

/// dL/dx of a ReLU given its output `y` and upstream gradient `dy`.
pub fn relu_backward<F: Scalar>(y: &Array4<F>, dy: &mut Array4<F>) {
    ndarray::Zip::from(dy).and(y).for_each(|d, &v| {
        if v <= F::zero() {
            *d = F::zero();
        }
    });
}

/// Mean squared error over all elements and its gradient w.r.t. `pred`.
/// Single fused pass: the activations are large, so touching them once
/// matters.
pub fn mse_and_grad<F: Scalar>(pred: &Array4<F>, target: &Array4<F>) -> (F, Array4<F>) {
    assert_eq!(pred.dim(), target.dim(), "shape mismatch in mse");
    let inv_n = F::one() / F::from_usize(pred.len()).unwrap();
    let two_inv_n = inv_n + inv_n;
    let mut sum = F::zero();
    let mut grad = Array4::<F>::zeros(pred.dim());
    ndarray::Zip::from(&mut grad).and(pred).and(target).for_each(|g, &p, &t| {
        let d = p - t;
        sum = sum + d * d;
        *g = d * two_inv_n;
    });
    (sum * inv_n, grad)
}

/// Adam over a flat list of parameter tensors.
pub struct Adam<F> {
    lr: F,
    beta1: F,
    beta2: F,
    eps: F,
    t: i32,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: F, sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: F::from_f64(0.9).unwrap(),
            beta2: F::from_f64(0.999).unwrap(),
            eps: F::from_f64(1e-8).unwrap(),
            t: 0,
            m: sizes.iter().map(|&s| vec![F::zero(); s]).collect(),
            v: sizes.iter().map(|&s| vec![F::zero(); s]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut [F]], grads: &[&[F]]) {
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let one = F::one();
        let bc1 = one - self.beta1.powi(self.t);
        let bc2 = one - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.len(), g.len());
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (one - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (one - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] = p[i] - self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn conv_shape_halves() {
        let layer = Conv2d::<f64>::zeros(3, 8);
        let x = Array4::<f64>::zeros((2, 3, 16, 16));
        assert_eq!(layer.forward(&x.view()).dim(), (2, 8, 8, 8));
    }

    #[test]
    fn convt_shape_doubles() {
        let layer = ConvTranspose2d::<f64>::zeros(8, 3);
        let x = Array4::<f64>::zeros((2, 8, 8, 8));
        assert_eq!(layer.forward(&x.view()).dim(), (2, 3, 16, 16));
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> for random x, c.
        use rand::Rng;
        let mut rng = crate::rng::seeded_rng(1);
        let x = Array4::<f64>::from_shape_fn((1, 2, 8, 8), |_| rng.gen::<f64>() - 0.5);
        let cols_shape = (16, 2 * 9);
        let c = Array2::<f64>::from_shape_fn(cols_shape, |_| rng.gen::<f64>() - 0.5);
        let ix = im2col(&x.view());
        let lhs: f64 = (&ix * &c).sum();
        let cx = col2im_add(&c, 1, 2, 8, 8);
        let rhs: f64 = (&x * &cx).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn conv_known_values() {
        // Single 1x1-channel path: identity-ish kernel picks the center pixel.
        let mut layer = Conv2d::<f64>::zeros(1, 1);
        layer.weight[[0, 0, 1, 1]] = 1.0; // center tap
        let mut x = Array4::<f64>::zeros((1, 1, 4, 4));
        for i in 0..4 {
            for j in 0..4 {
                x[[0, 0, i, j]] = (i * 4 + j) as f64;
            }
        }
        let y = layer.forward(&x.view());
        // Stride-2 sampling of the centers: rows 0,2 cols 0,2.
        assert_eq!(y[[0, 0, 0, 0]], 0.0);
        assert_eq!(y[[0, 0, 0, 1]], 2.0);
        assert_eq!(y[[0, 0, 1, 0]], 8.0);
        assert_eq!(y[[0, 0, 1, 1]], 10.0);
    }

    #[test]
    fn mse_known_values() {
        let a = Array4::<f64>::from_elem((1, 1, 1, 2), 1.0);
        let b = Array4::<f64>::zeros((1, 1, 1, 2));
        let (loss, _) = mse_and_grad(&a, &b);
        assert!((loss - 1.0).abs() < 1e-12);
        let mut c = Array4::<f64>::zeros((1, 1, 1, 2));
        c[[0, 0, 0, 0]] = 1.0;
        let (loss2, _) = mse_and_grad(&c, &b);
        assert!((loss2 - 0.5).abs() < 1e-12);
        let (loss3, _) = mse_and_grad(&a, &a);
        assert_eq!(loss3, 0.0);
    }
}
