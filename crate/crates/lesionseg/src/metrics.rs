//! Evaluation metrics: Jaccard (IoU), Dice, and the thresholded Jaccard
//! used for challenge scoring. All counting is exact integer arithmetic;
//! the both-empty convention scores 1.0 (perfect agreement).

use std::fmt::Write as _;
use std::path::Path;

use crate::data::Mask;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

fn check_same_shape(pred: &Mask, truth: &Mask) -> Result<()> {
    if pred.h != truth.h || pred.w != truth.w {
        return Err(Error::Shape(format!(
            "mask extents differ: {}x{} vs {}x{}",
            pred.h, pred.w, truth.h, truth.w
        )));
    }
    Ok(())
}

/// |pred AND truth| / |pred OR truth|; both-empty scores 1.0.
pub fn jaccard(pred: &Mask, truth: &Mask) -> Result<f64> {
    check_same_shape(pred, truth)?;
    let mut intersection = 0u64;
    let mut union = 0u64;
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        intersection += (p && t) as u64;
        union += (p || t) as u64;
    }
    Ok(if union == 0 { 1.0 } else { intersection as f64 / union as f64 })
}

/// 2|pred AND truth| / (|pred| + |truth|); both-empty scores 1.0.
pub fn dice(pred: &Mask, truth: &Mask) -> Result<f64> {
    check_same_shape(pred, truth)?;
    let mut intersection = 0u64;
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        intersection += (p && t) as u64;
    }
    let total = pred.count_ones() + truth.count_ones();
    Ok(if total == 0 { 1.0 } else { 2.0 * intersection as f64 / total as f64 })
}

/// Mean over images of (J if J >= cut else 0), the challenge-style aggregation.
pub fn threshold_jaccard(per_image: &[f64], cut: f64) -> Result<f64> {
    if per_image.is_empty() {
        return Err(Error::Contract("threshold_jaccard over an empty image set".into()));
    }
    let sum: f64 = per_image.iter().map(|&j| if j >= cut { j } else { 0.0 }).sum();
    Ok(sum / per_image.len() as f64)
}

/// Threshold a probability map into a binary mask; ties (p == threshold)
/// count as lesion. Accepts (H,W), (1,H,W) or (1,1,H,W) tensors.
pub fn binarize<E: Element>(probs: &Tensor<E>, threshold: f64) -> Result<Mask> {
    let dims = probs.shape().dims();
    let spatial: &[usize] = match dims {
        [_, _] => &dims[..2],
        [1, _, _] => &dims[1..],
        [1, 1, _, _] => &dims[2..],
        _ => {
            return Err(Error::Shape(format!(
                "binarize expects a single-channel map, got {}",
                probs.shape()
            )));
        }
    };
    let (h, w) = (spatial[0], spatial[1]);
    let thr = E::from_f64(threshold);
    let data = probs.data();
    Ok(Mask { h, w, data: data.iter().map(|&p| p >= thr).collect() })
}

#[derive(Debug, Clone)]
pub struct PerImageMetrics {
    pub id: String,
    pub jaccard: f64,
    pub dice: f64,
}

/// Per-image and dataset-level segmentation scores.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub per_image: Vec<PerImageMetrics>,
    pub dataset_jaccard: f64,
    pub dataset_threshold_jaccard: f64,
    pub cut: f64,
}

impl MetricReport {
    pub fn from_masks<'a>(
        pairs: impl IntoIterator<Item = (&'a str, &'a Mask, &'a Mask)>,
        cut: f64,
    ) -> Result<Self> {
        let mut per_image = Vec::new();
        for (id, pred, truth) in pairs {
            per_image.push(PerImageMetrics {
                id: id.to_string(),
                jaccard: jaccard(pred, truth)?,
                dice: dice(pred, truth)?,
            });
        }
        Self::from_per_image(per_image, cut)
    }

    pub fn from_per_image(per_image: Vec<PerImageMetrics>, cut: f64) -> Result<Self> {
        let js: Vec<f64> = per_image.iter().map(|m| m.jaccard).collect();
        let dataset_threshold_jaccard = threshold_jaccard(&js, cut)?;
        let dataset_jaccard = js.iter().sum::<f64>() / js.len() as f64;
        Ok(MetricReport { per_image, dataset_jaccard, dataset_threshold_jaccard, cut })
    }

    /// Per-image CSV: `image_id,jaccard,dice`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("image_id,jaccard,dice\n");
        for m in &self.per_image {
            writeln!(out, "{},{},{}", m.id, m.jaccard, m.dice).expect("string write");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Summary CSV: one row under `dataset_jaccard,dataset_threshold_jaccard,cut`.
    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let out = format!(
            "dataset_jaccard,dataset_threshold_jaccard,cut\n{},{},{}\n",
            self.dataset_jaccard, self.dataset_threshold_jaccard, self.cut
        );
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn mask_from_bits(h: usize, w: usize, bits: &[u8]) -> Mask {
        Mask { h, w, data: bits.iter().map(|&b| b != 0).collect() }
    }

    #[test]
    fn identical_and_disjoint_masks() {
        let a = mask_from_bits(2, 2, &[1, 1, 0, 0]);
        let b = mask_from_bits(2, 2, &[0, 0, 1, 1]);
        assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(jaccard(&a, &b).unwrap(), 0.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn overlap_counts() {
        // pred = {a,b}, truth = {b,c}: J = 1/3, D = 2*1/4.
        let pred = mask_from_bits(1, 3, &[1, 1, 0]);
        let truth = mask_from_bits(1, 3, &[0, 1, 1]);
        assert_eq!(jaccard(&pred, &truth).unwrap(), 1.0 / 3.0);
        assert_eq!(dice(&pred, &truth).unwrap(), 0.5);
    }

    #[test]
    fn both_empty_convention() {
        let empty = Mask::new(3, 3);
        assert_eq!(jaccard(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
    }

    #[test]
    fn shape_mismatch_is_shape_error() {
        let a = Mask::new(2, 2);
        let b = Mask::new(2, 3);
        assert!(matches!(jaccard(&a, &b), Err(Error::Shape(_))));
        assert!(matches!(dice(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn threshold_jaccard_examples() {
        assert!((threshold_jaccard(&[0.8539], 0.65).unwrap() - 0.8539).abs() < 1e-12);
        assert_eq!(threshold_jaccard(&[0.64], 0.65).unwrap(), 0.0);
        assert!((threshold_jaccard(&[0.9, 0.5], 0.65).unwrap() - 0.45).abs() < 1e-12);
        assert!(matches!(threshold_jaccard(&[], 0.65), Err(Error::Contract(_))));
    }

    #[test]
    fn binarize_tie_goes_to_lesion() {
        let probs = Tensor::<f64>::from_vec([1, 3], vec![0.49, 0.5, 0.51]).unwrap();
        let mask = binarize(&probs, 0.5).unwrap();
        assert_eq!(mask.data, vec![false, true, true]);

        let zeros = Tensor::<f64>::zeros([1, 2, 2]);
        assert_eq!(binarize(&zeros, 0.5).unwrap().count_ones(), 0);
        assert_eq!(binarize(&zeros, 0.0).unwrap().count_ones(), 4);
    }

    // Brute-force per-pixel counting oracle, kept deliberately independent
    // of the library routines above.
    fn oracle_counts(pred: &Mask, truth: &Mask) -> (u64, u64, u64, u64) {
        let mut inter = 0;
        let mut union = 0;
        let mut np = 0;
        let mut nt = 0;
        for y in 0..pred.h {
            for x in 0..pred.w {
                let p = pred.get(y, x);
                let t = truth.get(y, x);
                if p {
                    np += 1;
                }
                if t {
                    nt += 1;
                }
                if p && t {
                    inter += 1;
                }
                if p || t {
                    union += 1;
                }
            }
        }
        (inter, union, np, nt)
    }

    proptest! {
        #[test]
        fn metrics_match_counting_oracle(
            h in 1usize..16,
            w in 1usize..16,
            seed in any::<u64>(),
        ) {
            let n = h * w;
            let mut bits_p = vec![0u8; n];
            let mut bits_t = vec![0u8; n];
            let mut state = seed;
            for i in 0..n {
                state = crate::data::splitmix64(state);
                bits_p[i] = (state & 1) as u8;
                bits_t[i] = ((state >> 1) & 1) as u8;
            }
            let pred = mask_from_bits(h, w, &bits_p);
            let truth = mask_from_bits(h, w, &bits_t);
            let (inter, union, np, nt) = oracle_counts(&pred, &truth);

            let j = jaccard(&pred, &truth).unwrap();
            let d = dice(&pred, &truth).unwrap();
            let expect_j = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
            let expect_d = if np + nt == 0 { 1.0 } else { 2.0 * inter as f64 / (np + nt) as f64 };
            prop_assert_eq!(j, expect_j);
            prop_assert_eq!(d, expect_d);

            // Algebraic identity D = 2J/(1+J).
            prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
        }

        #[test]
        fn threshold_jaccard_is_bounded_by_the_mean(
            js in proptest::collection::vec(0.0f64..=1.0, 1..40),
            cut in 0.0f64..=1.0,
        ) {
            let tj = threshold_jaccard(&js, cut).unwrap();
            let mean = js.iter().sum::<f64>() / js.len() as f64;
            prop_assert!(tj >= 0.0);
            prop_assert!(tj <= mean + 1e-12);
        }
    }

    #[test]
    fn report_csv_round_trip_shape() {
        let dir = tempfile::tempdir().unwrap();
        let a = mask_from_bits(1, 3, &[1, 1, 0]);
        let b = mask_from_bits(1, 3, &[0, 1, 1]);
        let report =
            MetricReport::from_masks([("img1", &a, &b), ("img2", &a, &a)], 0.65).unwrap();
        assert!((report.dataset_jaccard - (1.0 / 3.0 + 1.0) / 2.0).abs() < 1e-12);
        assert!((report.dataset_threshold_jaccard - 0.5).abs() < 1e-12);

        let csv = dir.path().join("per_image.csv");
        let summary = dir.path().join("summary.csv");
        report.write_csv(&csv).unwrap();
        report.write_summary_csv(&summary).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert!(text.starts_with("image_id,jaccard,dice\n"));
        assert_eq!(text.lines().count(), 3);
        let s = std::fs::read_to_string(&summary).unwrap();
        assert!(s.starts_with("dataset_jaccard,dataset_threshold_jaccard,cut\n"));
        assert_eq!(s.lines().count(), 2);
    }
}
