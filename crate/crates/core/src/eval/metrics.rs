use crate::error::{Error, Result};

fn check_labels(pred: &[u8], gt: &[u8], num_classes: usize) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::dim(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    for (name, labels) in [("prediction", pred), ("ground truth", gt)] {
        if let Some(i) = labels.iter().position(|&l| l as usize >= num_classes) {
            return Err(Error::Label {
                value: labels[i],
                num_classes,
                position: format!("{name} pixel {i}"),
            });
        }
    }
    Ok(())
}

/// `counts[gt][pred]` pixel counts.
pub fn confusion_matrix(pred: &[u8], gt: &[u8], num_classes: usize) -> Result<Vec<Vec<u64>>> {
    check_labels(pred, gt, num_classes)?;
    let mut m = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        m[g as usize][p as usize] += 1;
    }
    Ok(m)
}

/// Intersection over union per class; a class absent from both scores 1.
pub fn iou_per_class(pred: &[u8], gt: &[u8], num_classes: usize) -> Result<Vec<f64>> {
    let m = confusion_matrix(pred, gt, num_classes)?;
    Ok(iou_from_confusion(&m))
}

pub fn iou_from_confusion(m: &[Vec<u64>]) -> Vec<f64> {
    (0..m.len())
        .map(|c| {
            let inter = m[c][c];
            let gt: u64 = m[c].iter().sum();
            let pred: u64 = m.iter().map(|row| row[c]).sum();
            let union = gt + pred - inter;
            if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            }
        })
        .collect()
}

fn mean(values: &[f64], what: &str) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::contract(format!("{what} of an empty list")));
    }
    // Running mean: exact when all values are equal.
    let mut m = 0.0;
    for (i, &v) in values.iter().enumerate() {
        m += (v - m) / (i + 1) as f64;
    }
    Ok(m)
}

/// Unweighted mean of per-class IOUs.
pub fn miou_image(ious: &[f64]) -> Result<f64> {
    mean(ious, "mIOU")
}

/// Unweighted mean of per-image mIOUs.
pub fn mmiou(mious: &[f64]) -> Result<f64> {
    mean(mious, "mmIOU")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_example() {
        let ious = iou_per_class(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert!((ious[0] - 0.5).abs() < 1e-15);
        assert!((ious[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!((miou_image(&ious).unwrap() - 0.5833).abs() < 1e-4);
    }

    #[test]
    fn identity_and_absent_classes() {
        let ious = iou_per_class(&[0, 2, 2], &[0, 2, 2], 7).unwrap();
        assert_eq!(ious, vec![1.0; 7]);
    }

    #[test]
    fn empty_means_are_contract_errors() {
        assert!(matches!(miou_image(&[]), Err(Error::Contract(_))));
        assert!(matches!(mmiou(&[]), Err(Error::Contract(_))));
        assert_eq!(mmiou(&[0.7, 0.7, 0.7]).unwrap(), 0.7);
    }

    #[test]
    fn mismatch_errors() {
        assert!(matches!(iou_per_class(&[0], &[0, 1], 2), Err(Error::Dimension(_))));
        assert!(matches!(iou_per_class(&[0, 7], &[0, 1], 7), Err(Error::Label { .. })));
    }
}
