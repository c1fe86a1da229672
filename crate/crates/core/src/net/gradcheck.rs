/// Central-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub h: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Coordinates whose one-sided slopes disagree by more than this
    /// (relative) are treated as sitting on a kink and are skipped.
    pub kink_tolerance: f64,
    /// Check only these coordinates; all of them when `None`.
    pub indices: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates skipped because the function is not smooth there.
    pub kinks: Vec<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            h: 1e-5,
            floor: 1e-6,
            kink_tolerance: 1e-2,
            indices: None,
        }
    }
}

impl GradCheck {
    /// `f` returns the value and the analytic gradient at its argument; only
    /// the gradient at `x` is used.
    pub fn run<F>(&self, mut f: F, x: &[f64]) -> GradCheckReport
    where
        F: FnMut(&[f64]) -> (f64, Vec<f64>),
    {
        let (f0, analytic) = f(x);
        assert_eq!(analytic.len(), x.len(), "gradient length differs from input length");
        let all: Vec<usize>;
        let indices = match &self.indices {
            Some(i) => i.as_slice(),
            None => {
                all = (0..x.len()).collect();
                &all
            }
        };
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst_index: None,
            checked: 0,
            kinks: Vec::new(),
        };
        let mut probe = x.to_vec();
        for &i in indices {
            probe[i] = x[i] + self.h;
            let fp = f(&probe).0;
            probe[i] = x[i] - self.h;
            let fm = f(&probe).0;
            probe[i] = x[i];

            let right = (fp - f0) / self.h;
            let left = (f0 - fm) / self.h;
            let scale = right.abs().max(left.abs()).max(self.floor);
            if (right - left).abs() > self.kink_tolerance * scale && (right - left).abs() > 1e3 * self.h {
                report.kinks.push(i);
                continue;
            }
            let numeric = (fp - fm) / (2.0 * self.h);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(self.floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst_index.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst_index = Some(i);
                }
            }
        }
        report
    }
}

/// [`GradCheck`] with default settings and step `h`.
pub fn grad_check<F>(f: F, x: &[f64], h: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    GradCheck { h, ..GradCheck::default() }.run(f, x)
}
