//! Valid-padding 2D convolution via im2col + gemm.
//!
//! Images are processed one at a time: the column buffers stay small enough
//! to live in cache while the gemm shapes are still large enough to be
//! efficient for the layer sizes used here.

use super::data::{Scalar, TensorData};

/// Output spatial size for a valid convolution.
pub fn out_dim(input: usize, kernel: usize, stride: usize) -> usize {
    (input - kernel) / stride + 1
}

/// Scatter one image (C,H,W) into columns (C*KH*KW, OH*OW).
fn im2col<S: Scalar>(
    img: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    cols: &mut [S],
) {
    let oh = out_dim(h, kh, stride);
    let ow = out_dim(w, kw, stride);
    let n_cols = oh * ow;
    let mut row = 0;
    for ch in 0..c {
        for dy in 0..kh {
            for dx in 0..kw {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let iy = oy * stride + dy;
                        let ix = ox * stride + dx;
                        cols[row * n_cols + oy * ow + ox] = img[ch * h * w + iy * w + ix];
                    }
                }
                row += 1;
            }
        }
    }
}

/// Accumulate columns (C*KH*KW, OH*OW) back into an image gradient (C,H,W).
fn col2im<S: Scalar>(
    cols: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    img: &mut [S],
) {
    let oh = out_dim(h, kh, stride);
    let ow = out_dim(w, kw, stride);
    let n_cols = oh * ow;
    let mut row = 0;
    for ch in 0..c {
        for dy in 0..kh {
            for dx in 0..kw {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let iy = oy * stride + dy;
                        let ix = ox * stride + dx;
                        img[ch * h * w + iy * w + ix] += cols[row * n_cols + oy * ow + ox];
                    }
                }
                row += 1;
            }
        }
    }
}

pub fn forward<S: Scalar>(
    x: &TensorData<S>,
    w: &TensorData<S>,
    b: &TensorData<S>,
    stride: usize,
) -> TensorData<S> {
    let (n, c, h, iw) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oc, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = out_dim(h, kh, stride);
    let ow = out_dim(iw, kw, stride);
    let patch = c * kh * kw;
    let n_cols = oh * ow;

    let xv = x.as_slice();
    let wv = w.as_slice();
    let bv = b.as_slice();
    let mut out = vec![S::zero(); n * oc * n_cols];
    let mut cols = vec![S::zero(); patch * n_cols];
    for i in 0..n {
        im2col(&xv[i * c * h * iw..(i + 1) * c * h * iw], c, h, iw, kh, kw, stride, &mut cols);
        // out_i (oc, n_cols) = w (oc, patch) * cols (patch, n_cols)
        S::gemm(
            oc, patch, n_cols,
            S::one(),
            wv, patch as isize, 1,
            &cols, n_cols as isize, 1,
            S::zero(),
            &mut out[i * oc * n_cols..(i + 1) * oc * n_cols],
        );
        for och in 0..oc {
            let base = i * oc * n_cols + och * n_cols;
            for p in 0..n_cols {
                out[base + p] += bv[och];
            }
        }
    }
    TensorData::new(vec![n, oc, oh, ow], out)
}

/// Gradients (dx, dw, db) for the forward pass above.
pub fn backward<S: Scalar>(
    x: &TensorData<S>,
    w: &TensorData<S>,
    g: &TensorData<S>,
    stride: usize,
) -> (TensorData<S>, TensorData<S>, TensorData<S>) {
    let (n, c, h, iw) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oc, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = out_dim(h, kh, stride);
    let ow = out_dim(iw, kw, stride);
    let patch = c * kh * kw;
    let n_cols = oh * ow;

    let xv = x.as_slice();
    let wv = w.as_slice();
    let gv = g.as_slice();

    let mut dx = vec![S::zero(); n * c * h * iw];
    let mut dw = vec![S::zero(); oc * patch];
    let mut db = vec![S::zero(); oc];
    let mut cols = vec![S::zero(); patch * n_cols];
    let mut dcols = vec![S::zero(); patch * n_cols];

    for i in 0..n {
        let gi = &gv[i * oc * n_cols..(i + 1) * oc * n_cols];
        // dw += g_i (oc, n_cols) * cols^T (n_cols, patch)
        im2col(&xv[i * c * h * iw..(i + 1) * c * h * iw], c, h, iw, kh, kw, stride, &mut cols);
        S::gemm(
            oc, n_cols, patch,
            S::one(),
            gi, n_cols as isize, 1,
            &cols, 1, n_cols as isize,
            S::one(),
            &mut dw,
        );
        // dcols = w^T (patch, oc) * g_i (oc, n_cols)
        S::gemm(
            patch, oc, n_cols,
            S::one(),
            wv, 1, patch as isize,
            gi, n_cols as isize, 1,
            S::zero(),
            &mut dcols,
        );
        col2im(&dcols, c, h, iw, kh, kw, stride, &mut dx[i * c * h * iw..(i + 1) * c * h * iw]);
        for och in 0..oc {
            for p in 0..n_cols {
                db[och] += gi[och * n_cols + p];
            }
        }
    }

    (
        TensorData::new(vec![n, c, h, iw], dx),
        TensorData::new(vec![oc, c, kh, kw], dw),
        TensorData::new(vec![oc], db),
    )
}
