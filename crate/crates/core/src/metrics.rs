//! Overlap metrics on binary masks.

use crate::error::{Error, Result};
use crate::nn::sigmoid;
use crate::tensor::{Scalar, Tensor};

/// Probability threshold separating foreground from background.
pub const THRESHOLD: f64 = 0.5;

/// Pixel counts of prediction, ground truth and their intersection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MaskCounts {
    pub pred: u64,
    pub gt: u64,
    pub inter: u64,
}

impl MaskCounts {
    pub fn from_masks(pred: &[bool], gt: &[bool]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::shape("iou", &[pred.len()], &[gt.len()]));
        }
        let mut c = Self::default();
        for (&p, &g) in pred.iter().zip(gt) {
            c.pred += u64::from(p);
            c.gt += u64::from(g);
            c.inter += u64::from(p && g);
        }
        Ok(c)
    }

    pub fn union(&self) -> u64 {
        self.pred + self.gt - self.inter
    }

    /// `|P∩G| / |P∪G|`; 1 when both masks are empty.
    pub fn iou(&self) -> f64 {
        match self.union() {
            0 => 1.0,
            u => self.inter as f64 / u as f64,
        }
    }

    /// `2|P∩G| / (|P|+|G|)`; 1 when both masks are empty.
    pub fn dice(&self) -> f64 {
        match self.pred + self.gt {
            0 => 1.0,
            s => (2 * self.inter) as f64 / s as f64,
        }
    }
}

/// Foreground test for a probability map.
pub fn binarize_probs<T: Scalar>(p: &Tensor<T>) -> Vec<bool> {
    p.data().iter().map(|v| v.as_f64() > THRESHOLD).collect()
}

/// Foreground test for logits, through the sigmoid.
pub fn binarize_logits<T: Scalar>(z: &Tensor<T>) -> Vec<bool> {
    z.data().iter().map(|&v| sigmoid(v).as_f64() > THRESHOLD).collect()
}

fn counts<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<MaskCounts> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("iou", pred.shape(), gt.shape()));
    }
    MaskCounts::from_masks(&binarize_probs(pred), &binarize_probs(gt))
}

/// IoU of two binary (or probability) masks thresholded at 0.5.
pub fn iou<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    Ok(counts(pred, gt)?.iou())
}

/// Dice of two binary (or probability) masks thresholded at 0.5.
pub fn dice<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    Ok(counts(pred, gt)?.dice())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageScore {
    pub id: String,
    pub iou: f64,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_image: Vec<ImageScore>,
    pub miou: f64,
    pub mdice: f64,
}

impl EvalReport {
    pub fn from_scores(per_image: Vec<ImageScore>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = per_image.len() as f64;
        let miou = per_image.iter().map(|s| s.iou).sum::<f64>() / n;
        let mdice = per_image.iter().map(|s| s.dice).sum::<f64>() / n;
        Ok(Self { per_image, miou, mdice })
    }

    /// `id\tiou\tdice` rows, no header.
    pub fn to_tsv(&self) -> String {
        self.per_image
            .iter()
            .map(|s| format!("{}\t{:.6}\t{:.6}\n", s.id, s.iou, s.dice))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8]) -> Vec<bool> {
        bits.iter().map(|&b| b == 1).collect()
    }

    #[test]
    fn worked_example() {
        let p = mask(&[1, 1, 1, 1, 0, 0, 0, 0]);
        let g = mask(&[0, 0, 1, 1, 1, 1, 0, 0]);
        let c = MaskCounts::from_masks(&p, &g).unwrap();
        assert_eq!(c, MaskCounts { pred: 4, gt: 4, inter: 2 });
        assert_eq!(c.iou(), 1.0 / 3.0);
        assert_eq!(c.dice(), 0.5);
    }

    #[test]
    fn degenerate_cases() {
        let empty = mask(&[0, 0, 0]);
        let some = mask(&[0, 1, 0]);
        let both = MaskCounts::from_masks(&empty, &empty).unwrap();
        assert_eq!((both.iou(), both.dice()), (1.0, 1.0));
        let one = MaskCounts::from_masks(&some, &empty).unwrap();
        assert_eq!((one.iou(), one.dice()), (0.0, 0.0));
        let same = MaskCounts::from_masks(&some, &some).unwrap();
        assert_eq!((same.iou(), same.dice()), (1.0, 1.0));
    }

    #[test]
    fn disjoint_is_zero() {
        let c = MaskCounts::from_masks(&mask(&[1, 0]), &mask(&[0, 1])).unwrap();
        assert_eq!((c.iou(), c.dice()), (0.0, 0.0));
    }

    #[test]
    fn tensor_metrics_threshold() {
        let p = Tensor::from_f64(&[1, 1, 1, 4], &[0.9, 0.6, 0.5, 0.1]).unwrap();
        let g = Tensor::from_f64(&[1, 1, 1, 4], &[1.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(iou(&p, &g).unwrap(), 2.0 / 3.0);
        assert_eq!(dice(&p, &g).unwrap(), 0.8);
        let bad = Tensor::<f64>::zeros(&[1, 1, 1, 3]).unwrap();
        assert!(iou(&p, &bad).is_err());
    }

    #[test]
    fn means_and_empty() {
        let r = EvalReport::from_scores(vec![
            ImageScore { id: "a".into(), iou: 0.2, dice: 0.3 },
            ImageScore { id: "b".into(), iou: 0.8, dice: 0.9 },
        ])
        .unwrap();
        assert_eq!(r.miou, 0.5);
        assert!(matches!(EvalReport::from_scores(vec![]), Err(Error::EmptyDataset)));
        assert_eq!(r.to_tsv().lines().next().unwrap().split('\t').count(), 3);
    }

    #[test]
    fn logits_binarize_through_sigmoid() {
        let z = Tensor::<f64>::from_f64(&[3], &[-0.1, 0.0, 0.1]).unwrap();
        assert_eq!(binarize_logits(&z), vec![false, false, true]);
    }
}
