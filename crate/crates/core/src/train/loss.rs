//! Pretext distance loss and cross-entropy losses with their gradients.

use crate::depthio::IGNORE_LABEL;
use crate::error::{Error, Result};
use crate::geometry::PairLabel;
use crate::model::{interp, Scalar, Tensor};

/// `| ‖h_a − h_b‖₂ − d |` for one pair.
pub fn pretext_loss<F: Scalar>(h_a: &[F], h_b: &[F], d: f64) -> Result<f64> {
    Ok(pretext_pair(h_a, h_b, d, false)?.0)
}

/// Mean pretext loss over pairs.
pub fn pretext_loss_batch<F: Scalar>(pairs: &[(&[F], &[F], f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("pretext loss over an empty batch"));
    }
    let mut sum = 0.0;
    for (a, b, d) in pairs {
        sum += pretext_loss(a, b, *d)?;
    }
    Ok(sum / pairs.len() as f64)
}

/// Loss and, if requested, its gradient with respect to `h_a` (the gradient
/// with respect to `h_b` is the negation). The subgradient is zero where the
/// loss is not differentiable.
pub fn pretext_pair<F: Scalar>(h_a: &[F], h_b: &[F], d: f64, want_grad: bool) -> Result<(f64, Vec<F>)> {
    if h_a.len() != h_b.len() {
        return Err(Error::shape(format!("embedding of length {}", h_a.len()), format!("length {}", h_b.len())));
    }
    if !(d >= 0.0) {
        return Err(Error::invalid(format!("target distance {d} must be >= 0")));
    }
    let l2 = h_a
        .iter()
        .zip(h_b)
        .map(|(a, b)| {
            let t = a.as_f64() - b.as_f64();
            t * t
        })
        .sum::<f64>()
        .sqrt();
    let loss = (l2 - d).abs();
    if !want_grad {
        return Ok((loss, Vec::new()));
    }
    let grad = if l2 == d || l2 == 0.0 {
        vec![F::zero(); h_a.len()]
    } else {
        let scale = (l2 - d).signum() / l2;
        h_a.iter()
            .zip(h_b)
            .map(|(a, b)| F::of(scale * (a.as_f64() - b.as_f64())))
            .collect()
    };
    Ok((loss, grad))
}

/// Summed pretext loss over every pair of every sample of a decoder output.
///
/// When `grad_scale` is given, `grad_scale · ∂(sum)/∂dense` is returned too.
pub fn pretext_dense<F: Scalar>(
    dense: &Tensor<F>,
    pairs: &[&[PairLabel]],
    sps_size: usize,
    grad_scale: Option<f64>,
) -> Result<(f64, usize, Option<Tensor<F>>)> {
    if pairs.len() != dense.batch() {
        return Err(Error::shape(format!("{} pair lists", dense.batch()), pairs.len().to_string()));
    }
    let mut grad = grad_scale.map(|_| Tensor::zeros(dense.shape));
    let mut sum = 0.0;
    let mut count = 0;
    for (i, list) in pairs.iter().enumerate() {
        for p in list.iter() {
            let ha = interp::sps_sample(dense, i, &p.bbox_a, sps_size)?;
            let hb = interp::sps_sample(dense, i, &p.bbox_b, sps_size)?;
            let (loss, g) = pretext_pair(&ha, &hb, p.distance, grad.is_some())?;
            sum += loss;
            count += 1;
            if let (Some(gt), Some(scale)) = (grad.as_mut(), grad_scale) {
                let ga: Vec<F> = g.iter().map(|&v| v * F::of(scale)).collect();
                let gb: Vec<F> = ga.iter().map(|&v| -v).collect();
                interp::sps_sample_backward(gt, i, &p.bbox_a, sps_size, &ga)?;
                interp::sps_sample_backward(gt, i, &p.bbox_b, sps_size, &gb)?;
            }
        }
    }
    Ok((sum, count, grad))
}

fn log_softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    scores.iter().map(|s| s - lse).collect()
}

/// Mean per-pixel cross-entropy over pixels whose label is not the ignore id.
///
/// `labels` holds `n·h·w` class ids in sample-major raster order. Returns
/// the loss, the gradient with respect to `logits`, and the pixel count.
pub fn pixel_cross_entropy<F: Scalar>(logits: &Tensor<F>, labels: &[u8]) -> Result<(f64, Tensor<F>, usize)> {
    let [n, k, h, w] = logits.shape;
    let hw = h * w;
    if labels.len() != n * hw {
        return Err(Error::shape(format!("{} labels", n * hw), labels.len().to_string()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l != IGNORE_LABEL && l as usize >= k) {
        return Err(Error::invalid(format!("class id {bad} out of range for {k} classes")));
    }
    let count = labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
    let mut grad = Tensor::zeros(logits.shape);
    if count == 0 {
        return Ok((0.0, grad, 0));
    }
    let inv = 1.0 / count as f64;
    let mut sum = 0.0;
    let mut scores = vec![0.0; k];
    for i in 0..n {
        let base = i * k * hw;
        for px in 0..hw {
            let label = labels[i * hw + px];
            if label == IGNORE_LABEL {
                continue;
            }
            for (c, s) in scores.iter_mut().enumerate() {
                *s = logits.data[base + c * hw + px].as_f64();
            }
            let ls = log_softmax(&scores);
            sum -= ls[label as usize];
            for (c, l) in ls.iter().enumerate() {
                let target = if c == label as usize { 1.0 } else { 0.0 };
                grad.data[base + c * hw + px] = F::of((l.exp() - target) * inv);
            }
        }
    }
    Ok((sum * inv, grad, count))
}

/// Mean cross-entropy of `[n, k, 1, 1]` logits against class ids.
pub fn cross_entropy<F: Scalar>(logits: &Tensor<F>, targets: &[usize]) -> Result<(f64, Tensor<F>)> {
    let n = logits.batch();
    let k = logits.sample_len();
    if targets.len() != n || n == 0 {
        return Err(Error::shape(format!("{n} targets"), targets.len().to_string()));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::invalid(format!("class id {bad} out of range for {k} classes")));
    }
    let mut grad = Tensor::zeros(logits.shape);
    let mut sum = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let scores: Vec<f64> = logits.sample(i).iter().map(|v| v.as_f64()).collect();
        let ls = log_softmax(&scores);
        sum -= ls[t];
        for (c, g) in grad.sample_mut(i).iter_mut().enumerate() {
            *g = F::of((ls[c].exp() - if c == t { 1.0 } else { 0.0 }) / n as f64);
        }
    }
    Ok((sum / n as f64, grad))
}
