//! Pixel-level F1 and image-level false-alarm decisions.

/// Confusion counts over forged pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_masks(pred: &[bool], gt: &[bool]) -> Self {
        assert_eq!(pred.len(), gt.len(), "mask lengths differ");
        let mut c = Confusion::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    /// `2TP / (2TP + FP + FN)`; 1 when both prediction and truth are empty.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

pub fn f1_score(pred: &[bool], gt: &[bool]) -> f64 {
    Confusion::from_masks(pred, gt).f1()
}

/// Pixels whose forged-class probability exceeds `tau`; `mask` is `h·w·2`.
pub fn threshold_mask(mask: &[f32], tau: f64) -> Vec<bool> {
    mask.chunks(2).map(|px| px[1] as f64 > tau).collect()
}

pub fn forged_fraction(pred: &[bool]) -> f64 {
    pred.iter().filter(|&&p| p).count() as f64 / pred.len().max(1) as f64
}

/// A pristine image is a false alarm when its predicted forged fraction exceeds `theta`.
pub fn is_false_alarm(pred: &[bool], theta: f64) -> bool {
    forged_fraction(pred) > theta
}
