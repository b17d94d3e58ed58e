//! Separable bilinear resampling: full-image resize and bounding-box crops.
//!
//! Sample `i` of an `n`-long output over the source interval `[start, end)`
//! reads source coordinate `start + (i + ½)·(end − start)/n − ½` (pixel
//! centers at integers), clamped to the image, so a resize to the same size
//! or a crop aligned to a pixel block reproduces the source exactly.

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::geometry::BBoxNorm;

#[derive(Debug, Clone, PartialEq)]
pub struct Interp1d {
    pub src_len: usize,
    /// `(i0, i1, w1)`: output = (1 − w1)·src[i0] + w1·src[i1].
    pub taps: Vec<(usize, usize, f64)>,
}

impl Interp1d {
    pub fn new(src_len: usize, start: f64, end: f64, out_len: usize) -> Self {
        assert!(src_len > 0 && out_len > 0);
        let scale = (end - start) / out_len as f64;
        let max = (src_len - 1) as f64;
        let taps = (0..out_len)
            .map(|i| {
                let x = (start + (i as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
                let i0 = x.floor() as usize;
                let i1 = (i0 + 1).min(src_len - 1);
                (i0, i1, x - i0 as f64)
            })
            .collect();
        Interp1d { src_len, taps }
    }

    pub fn resize(src_len: usize, out_len: usize) -> Self {
        Interp1d::new(src_len, 0.0, src_len as f64, out_len)
    }

    pub fn out_len(&self) -> usize {
        self.taps.len()
    }
}

/// Resamples one `h × w` plane into `rows.out_len() × cols.out_len()`.
pub fn resample_plane<F: Scalar>(src: &[F], w: usize, rows: &Interp1d, cols: &Interp1d, dst: &mut [F]) {
    let ow = cols.out_len();
    for (oy, &(r0, r1, wr)) in rows.taps.iter().enumerate() {
        let (wr0, wr1) = (F::of(1.0 - wr), F::of(wr));
        let line0 = &src[r0 * w..(r0 + 1) * w];
        let line1 = &src[r1 * w..(r1 + 1) * w];
        let out = &mut dst[oy * ow..(oy + 1) * ow];
        for (o, &(c0, c1, wc)) in out.iter_mut().zip(&cols.taps) {
            let (wc0, wc1) = (F::of(1.0 - wc), F::of(wc));
            *o = wr0 * (wc0 * line0[c0] + wc1 * line0[c1]) + wr1 * (wc0 * line1[c0] + wc1 * line1[c1]);
        }
    }
}

/// Adjoint of [`resample_plane`], accumulating into `dsrc`.
pub fn resample_plane_backward<F: Scalar>(dy: &[F], w: usize, rows: &Interp1d, cols: &Interp1d, dsrc: &mut [F]) {
    let ow = cols.out_len();
    for (oy, &(r0, r1, wr)) in rows.taps.iter().enumerate() {
        let (wr0, wr1) = (F::of(1.0 - wr), F::of(wr));
        let g = &dy[oy * ow..(oy + 1) * ow];
        for (&gv, &(c0, c1, wc)) in g.iter().zip(&cols.taps) {
            let (wc0, wc1) = (F::of(1.0 - wc), F::of(wc));
            dsrc[r0 * w + c0] += gv * wr0 * wc0;
            dsrc[r0 * w + c1] += gv * wr0 * wc1;
            dsrc[r1 * w + c0] += gv * wr1 * wc0;
            dsrc[r1 * w + c1] += gv * wr1 * wc1;
        }
    }
}

/// Bilinear resize of every plane to `out_h × out_w`.
pub fn resize_bilinear<F: Scalar>(x: &Tensor<F>, out_h: usize, out_w: usize) -> Tensor<F> {
    let [n, c, h, w] = x.shape;
    let rows = Interp1d::resize(h, out_h);
    let cols = Interp1d::resize(w, out_w);
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    for (src, dst) in x.data.chunks(h * w).zip(out.data.chunks_mut(out_h * out_w)) {
        resample_plane(src, w, &rows, &cols, dst);
    }
    out
}

pub fn resize_bilinear_backward<F: Scalar>(in_shape: [usize; 4], dy: &Tensor<F>) -> Tensor<F> {
    let [_, _, h, w] = in_shape;
    let (out_h, out_w) = (dy.height(), dy.width());
    let rows = Interp1d::resize(h, out_h);
    let cols = Interp1d::resize(w, out_w);
    let mut dx = Tensor::zeros(in_shape);
    for (g, dst) in dy.data.chunks(out_h * out_w).zip(dx.data.chunks_mut(h * w)) {
        resample_plane_backward(g, w, &rows, &cols, dst);
    }
    dx
}

/// Sampling grid of a bounding-box crop on an `h × w` map.
pub fn crop_grid(bbox: &BBoxNorm, h: usize, w: usize, size: usize) -> Result<(Interp1d, Interp1d)> {
    if !bbox.is_valid() {
        return Err(Error::invalid(format!("degenerate or out-of-range bbox {bbox:?}")));
    }
    let rows = Interp1d::new(h, bbox.v0 * h as f64, bbox.v1 * h as f64, size);
    let cols = Interp1d::new(w, bbox.u0 * w as f64, bbox.u1 * w as f64, size);
    Ok((rows, cols))
}

/// Superpixel sampling: bilinear crop-resize of sample `index` of `dense` to
/// `size × size`, flattened `(channel, row, col)`.
pub fn sps_sample<F: Scalar>(dense: &Tensor<F>, index: usize, bbox: &BBoxNorm, size: usize) -> Result<Vec<F>> {
    let [_, c, h, w] = dense.shape;
    let (rows, cols) = crop_grid(bbox, h, w, size)?;
    let mut out = vec![F::zero(); c * size * size];
    for (src, dst) in dense.sample(index).chunks(h * w).zip(out.chunks_mut(size * size)) {
        resample_plane(src, w, &rows, &cols, dst);
    }
    Ok(out)
}

/// Accumulates the gradient of an [`sps_sample`] output into `grad`.
pub fn sps_sample_backward<F: Scalar>(
    grad: &mut Tensor<F>,
    index: usize,
    bbox: &BBoxNorm,
    size: usize,
    d_embedding: &[F],
) -> Result<()> {
    let [_, _, h, w] = grad.shape;
    let (rows, cols) = crop_grid(bbox, h, w, size)?;
    for (g, dst) in d_embedding.chunks(size * size).zip(grad.sample_mut(index).chunks_mut(h * w)) {
        resample_plane_backward(g, w, &rows, &cols, dst);
    }
    Ok(())
}
