//! Central finite differences, used as the independent oracle for analytic
//! gradients.

/// `(f(x+h) - f(x-h)) / 2h` for coordinate `i` of `x`.
pub fn central_difference<F>(f: &mut F, x: &mut [f64], i: usize, h: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let orig = x[i];
    x[i] = orig + h;
    let fp = f(x);
    x[i] = orig - h;
    let fm = f(x);
    x[i] = orig;
    (fp - fm) / (2.0 * h)
}

/// `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps near-zero components from turning round-off into large
/// relative errors.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(floor);
    (a - b).abs() / denom
}

/// Summary of a finite-difference comparison over many coordinates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    /// Coordinates whose central difference straddled a kink and were skipped.
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
}

impl GradCheck {
    pub fn record(&mut self, rel: f64) {
        self.checked += 1;
        if rel > self.max_rel_err || rel.is_nan() {
            self.max_rel_err = rel;
        }
    }

    pub fn skip_kink(&mut self) {
        self.skipped_kinks += 1;
    }

    pub fn merge(&mut self, other: &GradCheck) {
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
        if other.max_rel_err > self.max_rel_err || other.max_rel_err.is_nan() {
            self.max_rel_err = other.max_rel_err;
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}
