//! Segmentation metrics: per-class IoU, mean IoU, and global accuracy.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Argmax over the channel axis, per voxel, batch folded out.
pub fn argmax_labels<T: Element>(pred: &Tensor<T>) -> Vec<u8> {
    let (batch, ch, v) = (pred.shape().batch(), pred.shape().channels(), pred.shape().spatial_len());
    let data = pred.data();
    let mut labels = vec![0u8; batch * v];
    for b in 0..batch {
        for i in 0..v {
            let mut best_c = 0usize;
            let mut best = data[(b * ch) * v + i];
            for c in 1..ch {
                let val = data[(b * ch + c) * v + i];
                if val > best {
                    best = val;
                    best_c = c;
                }
            }
            labels[b * v + i] = best_c as u8;
        }
    }
    labels
}

/// Eq.-style binarized IoU for one class; 1 when both masks are empty.
pub fn iou_per_class(pred: &[u8], truth: &[u8], class: u8, num_classes: usize) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Invalid(format!(
            "label volumes differ in length: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    if class as usize >= num_classes {
        return Err(Error::Invalid(format!(
            "unknown class id {class} (have {num_classes} classes)"
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.iter().zip(truth) {
        let pi = p == class;
        let gi = g == class;
        inter += (pi && gi) as usize;
        union += (pi || gi) as usize;
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

#[derive(Clone, Debug)]
pub struct Metrics {
    pub per_class_iou: Vec<f64>,
    pub mean_iou: f64,
    pub accuracy: f64,
}

/// Argmax the prediction and report per-class IoU, mean IoU, and global
/// accuracy against a label volume.
pub fn evaluate<T: Element>(pred: &Tensor<T>, truth_labels: &[u8]) -> Result<Metrics> {
    let num_classes = pred.shape().channels();
    let pred_labels = argmax_labels(pred);
    if pred_labels.len() != truth_labels.len() {
        return Err(Error::Invalid(format!(
            "prediction covers {} voxels, truth {}",
            pred_labels.len(),
            truth_labels.len()
        )));
    }
    let mut per_class_iou = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        per_class_iou.push(iou_per_class(&pred_labels, truth_labels, c as u8, num_classes)?);
    }
    let mean_iou = per_class_iou.iter().sum::<f64>() / num_classes as f64;
    let correct = pred_labels.iter().zip(truth_labels).filter(|(p, g)| p == g).count();
    Ok(Metrics {
        per_class_iou,
        mean_iou,
        accuracy: correct as f64 / truth_labels.len() as f64,
    })
}

/// One-hot encoding of a label volume as a `[1, num_classes, spatial...]`
/// tensor.
pub fn one_hot<T: Element>(labels: &[u8], num_classes: usize, spatial: &[usize]) -> Tensor<T> {
    let v: usize = spatial.iter().product();
    assert_eq!(v, labels.len());
    let mut data = vec![T::zero(); num_classes * v];
    for (i, &l) in labels.iter().enumerate() {
        data[(l as usize) * v + i] = T::one();
    }
    Tensor::new(crate::tensor::Shape::act(1, num_classes, spatial), data).expect("sized")
}

/// Inverse class-frequency weights over a label set, normalized to mean 1.
/// Classes absent from the data get weight 0 before normalization.
pub fn inverse_frequency_weights(labels: &[&[u8]], num_classes: usize) -> Vec<f32> {
    let mut counts = vec![0usize; num_classes];
    let mut total = 0usize;
    for ls in labels {
        for &l in *ls {
            counts[l as usize] += 1;
            total += 1;
        }
    }
    let mut w: Vec<f32> = counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { total as f32 / c as f32 })
        .collect();
    let mean = w.iter().sum::<f32>() / num_classes as f32;
    if mean > 0.0 {
        for v in &mut w {
            *v /= mean;
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn iou_identities() {
        assert_eq!(iou_per_class(&[1, 1, 0], &[1, 1, 0], 1, 2).unwrap(), 1.0);
        assert_eq!(iou_per_class(&[1, 1, 0], &[0, 0, 1], 1, 2).unwrap(), 0.0);
        // p=[1,1,0], g=[1,0,1] -> 1/3
        let v = iou_per_class(&[1, 1, 0], &[1, 0, 1], 1, 2).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
        // both empty -> 1
        assert_eq!(iou_per_class(&[0, 0], &[0, 0], 1, 2).unwrap(), 1.0);
    }

    #[test]
    fn iou_rejects_unknown_class() {
        assert!(iou_per_class(&[0], &[0], 5, 3).is_err());
    }

    #[test]
    fn iou_is_symmetric_and_permutation_invariant() {
        let p = [1u8, 0, 1, 1, 0, 0];
        let g = [1u8, 1, 0, 1, 0, 1];
        let a = iou_per_class(&p, &g, 1, 2).unwrap();
        let b = iou_per_class(&g, &p, 1, 2).unwrap();
        assert_eq!(a, b);
        // identical permutation of both
        let perm = [3usize, 0, 5, 1, 4, 2];
        let pp: Vec<u8> = perm.iter().map(|&i| p[i]).collect();
        let gp: Vec<u8> = perm.iter().map(|&i| g[i]).collect();
        assert_eq!(iou_per_class(&pp, &gp, 1, 2).unwrap(), a);
    }

    #[test]
    fn evaluate_perfect_and_complement() {
        let pred = Tensor::new(
            Shape::act(1, 2, &[4]),
            vec![0.9, 0.9, 0.1, 0.1, 0.1, 0.1, 0.9, 0.9],
        )
        .unwrap();
        let m = evaluate(&pred, &[0, 0, 1, 1]).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.mean_iou, 1.0);
        let m = evaluate(&pred, &[1, 1, 0, 0]).unwrap();
        assert_eq!(m.accuracy, 0.0);
    }

    #[test]
    fn evaluate_invariant_under_monotone_logit_scaling() {
        let logits = vec![0.2, 1.4, -0.3, 0.9, 0.8, -1.0, 0.4, 0.0];
        let scaled: Vec<f64> = logits.iter().map(|v| v * 3.5).collect();
        let a = Tensor::new(Shape::act(1, 2, &[4]), logits).unwrap();
        let b = Tensor::new(Shape::act(1, 2, &[4]), scaled).unwrap();
        let truth = [0u8, 1, 0, 1];
        let ma = evaluate(&a, &truth).unwrap();
        let mb = evaluate(&b, &truth).unwrap();
        assert_eq!(ma.accuracy, mb.accuracy);
        assert_eq!(ma.per_class_iou, mb.per_class_iou);
    }

    #[test]
    fn inverse_frequency_weights_mean_one_and_linear() {
        let l0 = vec![0u8; 90];
        let l1 = vec![1u8; 10];
        let w = inverse_frequency_weights(&[&l0, &l1], 2);
        assert!((w.iter().sum::<f32>() / 2.0 - 1.0).abs() < 1e-6);
        assert!(w[1] > w[0]);
    }
}
