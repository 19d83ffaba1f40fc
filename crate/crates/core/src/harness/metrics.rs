use serde::Serialize;

use super::trace::TraceRow;

/// Decision counts. `fn_` because `fn` is taken.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    /// No positives claimed counts as perfect precision.
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    /// Harmonic mean of precision and recall; 1.0 when there was nothing to get right or wrong.
    pub fn f1(&self) -> f64 {
        if self.tp + self.fp + self.fn_ == 0 {
            return 1.0;
        }
        2.0 * self.tp as f64 / (2 * self.tp + self.fp + self.fn_) as f64
    }

    pub fn merge(self, o: Confusion) -> Confusion {
        Confusion { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }

    /// Counts the `tp` / `fp` / `fn` / `tn` outcome tokens; other outcomes
    /// (alias, edge, unnamed) are informational.
    pub fn from_rows<'a>(rows: impl IntoIterator<Item = &'a TraceRow>) -> Confusion {
        let mut c = Confusion::default();
        for r in rows {
            match r.outcome.as_str() {
                "tp" => c.tp += 1,
                "fp" => c.fp += 1,
                "fn" => c.fn_ += 1,
                "tn" => c.tn += 1,
                _ => {}
            }
        }
        c
    }
}

impl std::iter::Sum for Confusion {
    fn sum<I: Iterator<Item = Confusion>>(iter: I) -> Self {
        iter.fold(Confusion::default(), Confusion::merge)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRun {
    pub seed: u64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub candidates_tested: u64,
    pub simulated_cycles: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub profile: String,
    pub seed: u64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub confusion: Confusion,
    pub candidates_tested: u64,
    pub simulated_cycles: u64,
    /// Host time; kept out of every emitted trace so traces stay reproducible.
    #[serde(skip)]
    pub wall_seconds: f64,
    /// Only set for sweeps.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_f1: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub runs: Vec<SweepRun>,
    pub rows: Vec<TraceRow>,
}

impl MetricsReport {
    /// Builds the report from its rows so F1 always agrees with the trace.
    pub fn from_rows(scenario: &str, profile: &str, seed: u64, rows: Vec<TraceRow>) -> Self {
        let confusion = Confusion::from_rows(&rows);
        Self {
            scenario: scenario.to_string(),
            profile: profile.to_string(),
            seed,
            f1: confusion.f1(),
            precision: confusion.precision(),
            recall: confusion.recall(),
            confusion,
            candidates_tested: 0,
            simulated_cycles: 0,
            wall_seconds: 0.0,
            mean_f1: None,
            runs: Vec::new(),
            rows,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn degenerate_cases() {
        assert_eq!(Confusion::default().f1(), 1.0);
        assert_eq!(Confusion { tn: 9, ..Default::default() }.f1(), 1.0);
        assert_eq!(Confusion { fn_: 1, ..Default::default() }.f1(), 0.0);
        let c = Confusion { tp: 22, fp: 0, fn_: 1, tn: 0 };
        assert!((c.f1() - 44.0 / 45.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn f1_is_harmonic_mean(tp in 0u64..1000, fp in 0u64..1000, fn_ in 0u64..1000) {
            let c = Confusion { tp, fp, fn_, tn: 0 };
            let (p, r) = (c.precision(), c.recall());
            let h = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
            if tp + fp + fn_ > 0 {
                prop_assert!((c.f1() - h).abs() < 1e-9);
            }
            prop_assert!((0.0..=1.0).contains(&c.f1()));
        }
    }
}
