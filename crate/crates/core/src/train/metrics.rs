use serde::{Deserialize, Serialize};

/// Token counts for the retained class (label 1). Padded positions are never counted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn from_masks(pred: &[u8], truth: &[u8], pad: &[u8]) -> Self {
        let mut c = Confusion::default();
        c.add(pred, truth, pad);
        c
    }

    pub fn add(&mut self, pred: &[u8], truth: &[u8], pad: &[u8]) {
        for ((&p, &t), &m) in pred.iter().zip(truth).zip(pad) {
            if m == 0 {
                continue;
            }
            match (p != 0, t != 0) {
                (true, true) => self.tp += 1,
                (true, false) => self.fp += 1,
                (false, true) => self.fn_ += 1,
                (false, false) => self.tn += 1,
            }
        }
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// 0 when nothing was predicted as retained.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// 0 when the truth retains nothing.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Harmonic mean of precision and recall, 0 when both are 0.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_example() {
        let c = Confusion::from_masks(&[1, 1, 0, 0], &[1, 0, 1, 0], &[1, 1, 1, 1]);
        assert_eq!((c.precision(), c.recall(), c.f1(), c.accuracy()), (0.5, 0.5, 0.5, 0.5));
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let c = Confusion::from_masks(&[1, 0, 1], &[1, 0, 1], &[1, 1, 1]);
        assert_eq!((c.f1(), c.accuracy()), (1.0, 1.0));
        let c = Confusion::from_masks(&[0, 0, 0], &[0, 1, 0], &[1, 1, 1]);
        assert_eq!(c.precision(), 0.0);
        assert_eq!(c.f1(), 0.0);
    }

    #[test]
    fn padding_is_excluded() {
        let c = Confusion::from_masks(&[1, 1, 1, 0], &[1, 0, 0, 0], &[1, 0, 0, 0]);
        assert_eq!(c.total(), 1);
        assert_eq!(c.f1(), 1.0);
    }
}
