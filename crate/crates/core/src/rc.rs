//! Relative contextualization statistics.
//!
//! For a cross sample `X` and a self sample `Y`, RC is `Z = max(X - Y, 0)`.
//! Its expectation under the uniform joint over sample pairs is computed
//! exactly in `O((|X| + |Y|) log)` with sorted prefix sums. The
//! distribution-free bounds
//!
//! ```text
//! a = ∫ max(F_Y - F_X, 0) dt  <=  E[Z]  <=  A = ∫ min(F_Y, 1 - F_X) dt
//! ```
//!
//! are integrated exactly: both CDFs are step functions, so the integrands are
//! constant between consecutive distinct sample values and one sorted sweep
//! over those breakpoints gives every area. The same sweep yields the bounds
//! for the reverse direction `Z' = max(Y - X, 0)`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::contextualization::{cross_values, self_values, EmpiricalSample, SampleMode, TokenSpan};
use crate::error::{Error, Result};
use crate::tensor_io::LogitTensor;

/// How an RC score is obtained from a (cross, self) sample pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RcMode {
    /// Uniform-joint expectation `E[max(X - Y, 0)]`.
    #[default]
    Exact,
    /// The overlap area `A`, an upper bound on the expectation.
    UpperBound,
}

impl std::str::FromStr for RcMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(RcMode::Exact),
            "upper_bound" | "upper-bound" | "upper" => Ok(RcMode::UpperBound),
            other => Err(Error::InvalidParameter(format!("unknown RC mode `{other}`"))),
        }
    }
}

/// Lower area, upper area, and optionally the exact expectation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RcBounds {
    #[serde(rename = "lower_a")]
    pub lower: f64,
    #[serde(rename = "upper_a")]
    pub upper: f64,
    pub exact: Option<f64>,
}

/// Upper and lower areas for both `max(X - Y, 0)` and `max(Y - X, 0)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AreaQuad {
    pub ub_x_minus_y: f64,
    pub lb_x_minus_y: f64,
    pub ub_y_minus_x: f64,
    pub lb_y_minus_x: f64,
}

/// `num / den` for `num <= den`, rounded once.
fn ratio(num: u128, den: u128) -> f64 {
    num as f64 / den as f64
}

/// `min(a/na, b/nb)` evaluated by exact cross-multiplication.
fn min_frac(a: u128, na: u128, b: u128, nb: u128) -> f64 {
    if a * nb <= b * na {
        ratio(a, na)
    } else {
        ratio(b, nb)
    }
}

/// `max(a/na - b/nb, 0)` with the difference formed in integers.
fn pos_diff(a: u128, na: u128, b: u128, nb: u128) -> f64 {
    let (l, r) = (a * nb, b * na);
    if l > r {
        ratio(l - r, na * nb)
    } else {
        0.0
    }
}

/// Sweeps the merged breakpoints of two sorted slices.
///
/// On each interval `[L, R)` between consecutive distinct values, `cx` and
/// `cy` count the values `<= L`, i.e. the CDF counts at the interval's
/// midpoint. Integrand values are exact rationals rounded once.
fn sweep(xs: &[f64], ys: &[f64]) -> AreaQuad {
    let (nx, ny) = (xs.len() as u128, ys.len() as u128);
    let (mut i, mut j) = (0usize, 0usize);
    let mut quad = AreaQuad::default();
    let next = |i: usize, j: usize| match (xs.get(i), ys.get(j)) {
        (Some(&a), Some(&b)) => Some(a.min(b)),
        (Some(&a), None) => Some(a),
        (None, Some(&b)) => Some(b),
        (None, None) => None,
    };
    let Some(mut left) = next(i, j) else {
        return quad;
    };
    loop {
        while i < xs.len() && xs[i] <= left {
            i += 1;
        }
        while j < ys.len() && ys[j] <= left {
            j += 1;
        }
        let Some(right) = next(i, j) else {
            break;
        };
        let width = right - left;
        let (cx, cy) = (i as u128, j as u128);
        quad.ub_x_minus_y += min_frac(cy, ny, nx - cx, nx) * width;
        quad.lb_x_minus_y += pos_diff(cy, ny, cx, nx) * width;
        quad.ub_y_minus_x += min_frac(cx, nx, ny - cy, ny) * width;
        quad.lb_y_minus_x += pos_diff(cx, nx, cy, ny) * width;
        left = right;
    }
    quad
}

/// All four bound areas from one sorted pass.
pub fn four_areas(x: &EmpiricalSample, y: &EmpiricalSample) -> AreaQuad {
    sweep(x.values(), y.values())
}

/// `A = ∫ min(F_Y(t), 1 - F_X(t)) dt`, the upper bound on `E[max(X - Y, 0)]`.
pub fn overlap_area_upper(x: &EmpiricalSample, y: &EmpiricalSample) -> f64 {
    four_areas(x, y).ub_x_minus_y
}

/// `a = ∫ max(F_Y(t) - F_X(t), 0) dt`, the lower bound on `E[max(X - Y, 0)]`.
pub fn area_lower(x: &EmpiricalSample, y: &EmpiricalSample) -> f64 {
    four_areas(x, y).lb_x_minus_y
}

/// Sorted reference sample with prefix sums, answering
/// `Σ_y max(x - y, 0)` for any `x` in `O(log |Y|)`.
#[derive(Clone, Debug)]
pub struct ExcessTable {
    sorted: Vec<f64>,
    prefix: Vec<f64>,
}

impl ExcessTable {
    pub fn new(sample: &EmpiricalSample) -> Self {
        Self::from_sorted(sample.values().to_vec())
    }

    pub(crate) fn from_unsorted(mut values: Vec<f64>) -> Self {
        values.sort_unstable_by(f64::total_cmp);
        Self::from_sorted(values)
    }

    fn from_sorted(sorted: Vec<f64>) -> Self {
        let mut prefix = Vec::with_capacity(sorted.len() + 1);
        let mut acc = 0.0;
        prefix.push(acc);
        for &v in &sorted {
            acc += v;
            prefix.push(acc);
        }
        Self { sorted, prefix }
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    /// `Σ_y max(x - y, 0)` over the reference sample.
    pub fn total_excess(&self, x: f64) -> f64 {
        let below = self.sorted.partition_point(|&y| y < x);
        if below == 0 {
            return 0.0;
        }
        below as f64 * x - self.prefix[below]
    }

    /// Uniform-pair mean of `max(x - y, 0)` for `x` drawn from `xs`.
    pub fn mean_excess(&self, xs: &[f64]) -> f64 {
        let total: f64 = xs.iter().map(|&x| self.total_excess(x)).sum();
        total / (xs.len() as f64 * self.sorted.len() as f64)
    }
}

/// `E[max(X - Y, 0)]` under the uniform joint over all `(x, y)` pairs.
///
/// With a cross sample of size `|p||g|` and the causal self sample of size
/// `|g|(|g|+1)/2`, this is the full-sequence expected RC.
pub fn expected_rc_exact(cross: &EmpiricalSample, self_: &EmpiricalSample) -> f64 {
    ExcessTable::new(self_).mean_excess(cross.values())
}

/// Expected RC under the independent-output-token approximation: the mean
/// over queries `j` in `window` of `E[max(X(p1, {j}) - Y(window, {j}), 0)]`.
pub fn expected_rc_iot(logits: &LogitTensor, p1: &TokenSpan, window: &TokenSpan, mode: SampleMode) -> Result<f64> {
    // validates spans up front
    cross_values(logits, p1, window, mode)?;
    let mut total = 0.0;
    for &j in window.indices() {
        let row = TokenSpan::singleton(j);
        let cross = cross_values(logits, p1, &row, mode)?;
        let table = ExcessTable::from_unsorted(self_values(logits, window, &row, mode)?);
        total += table.mean_excess(&cross);
    }
    Ok(total / window.len() as f64)
}

/// `A / delta`: `Z` stays at or below this with probability at least
/// `1 - delta` (Markov's inequality applied to `E[Z] <= A`).
pub fn markov_tail_bound(upper: f64, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "delta must lie in (0, 1], got {delta}"
        )));
    }
    if upper.is_nan() || upper < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "upper area must be non-negative, got {upper}"
        )));
    }
    Ok(upper / delta)
}

pub fn rc_bounds(cross: &EmpiricalSample, self_: &EmpiricalSample, with_exact: bool) -> RcBounds {
    let quad = four_areas(cross, self_);
    RcBounds {
        lower: quad.lb_x_minus_y,
        upper: quad.ub_x_minus_y,
        exact: with_exact.then(|| expected_rc_exact(cross, self_)),
    }
}

/// Score of one sample pair in the requested mode.
pub fn rc_score(cross: &EmpiricalSample, self_: &EmpiricalSample, mode: RcMode) -> f64 {
    match mode {
        RcMode::Exact => expected_rc_exact(cross, self_),
        RcMode::UpperBound => overlap_area_upper(cross, self_),
    }
}

/// Descending by score; NaN-free inputs assumed.
pub(crate) fn desc(a: f64, b: f64) -> Ordering {
    b.total_cmp(&a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_io::HeadLocator;
    use proptest::prelude::*;

    fn s(v: &[f64]) -> EmpiricalSample {
        EmpiricalSample::new(v.to_vec()).unwrap()
    }

    fn brute(x: &[f64], y: &[f64]) -> f64 {
        let mut t = 0.0;
        for &a in x {
            for &b in y {
                t += (a - b).max(0.0);
            }
        }
        t / (x.len() * y.len()) as f64
    }

    #[test]
    fn singleton_areas() {
        assert_eq!(overlap_area_upper(&s(&[2.0]), &s(&[1.0])), 1.0);
        assert_eq!(area_lower(&s(&[2.0]), &s(&[1.0])), 1.0);
        assert_eq!(overlap_area_upper(&s(&[0.0]), &s(&[5.0])), 0.0);
        let q = four_areas(&s(&[2.0]), &s(&[1.0]));
        assert_eq!(
            (q.ub_x_minus_y, q.lb_x_minus_y, q.ub_y_minus_x, q.lb_y_minus_x),
            (1.0, 1.0, 0.0, 0.0)
        );
    }

    #[test]
    fn two_point_samples() {
        // intervals [0,1) [1,2) [2,3): F_X = 1/2, 1/2, 1 and F_Y = 0, 1/2, 1/2
        let (x, y) = (s(&[0.0, 2.0]), s(&[1.0, 3.0]));
        let q = four_areas(&x, &y);
        assert_eq!(q.ub_x_minus_y, 0.5);
        assert_eq!(q.lb_x_minus_y, 0.0);
        assert_eq!(q.ub_y_minus_x, 1.5);
        assert_eq!(q.lb_y_minus_x, 1.0);
        // E[max(Y - X, 0)] = (1 + 3 + 0 + 1) / 4
        assert_eq!(expected_rc_exact(&y, &x), 1.25);
        let b = rc_bounds(&x, &y, true);
        assert_eq!((b.lower, b.upper, b.exact), (0.0, 0.5, Some(0.25)));
    }

    #[test]
    fn identical_samples() {
        let x = s(&[0.5, -1.0, 2.0, 2.0, 3.5]);
        let q = four_areas(&x, &x);
        assert_eq!(q.lb_x_minus_y, 0.0);
        assert_eq!(q.lb_y_minus_x, 0.0);
        assert_eq!(q.ub_x_minus_y, q.ub_y_minus_x);
        let b = rc_bounds(&x, &x, true);
        assert_eq!(b.exact, Some(brute(x.values(), x.values())));
    }

    #[test]
    fn exact_expectation_examples() {
        let e = expected_rc_exact(&s(&[0.0, 1.0, 2.0, 3.0]), &s(&[1.0, 1.0, 2.0]));
        assert!((e - 7.0 / 12.0).abs() < 1e-15);
        assert_eq!(expected_rc_exact(&s(&[4.5]), &s(&[1.25])), 3.25);
        assert_eq!(expected_rc_exact(&s(&[-3.0, -2.0]), &s(&[-1.0, 0.0])), 0.0);
    }

    #[test]
    fn markov_bound() {
        assert_eq!(markov_tail_bound(0.5, 0.5).unwrap(), 1.0);
        assert_eq!(markov_tail_bound(0.0, 0.3).unwrap(), 0.0);
        assert!((markov_tail_bound(0.5, 0.05).unwrap() - 10.0).abs() < 1e-12);
        assert!(markov_tail_bound(1.0, 0.0).is_err());
        assert!(markov_tail_bound(1.0, 1.5).is_err());
    }

    fn hand_logits() -> LogitTensor {
        // prompt [0, 2), window = generation [2, 4)
        let table = |i: usize, j: usize| match (i, j) {
            (0, 2) => 3.0,
            (1, 2) => 0.5,
            (2, 2) => 1.0,
            (0, 3) => 2.0,
            (1, 3) => -1.0,
            (2, 3) => 0.0,
            (3, 3) => 1.5,
            _ => 0.0,
        };
        LogitTensor::from_fn(HeadLocator::new(0, 0), 2, 4, table).unwrap()
    }

    #[test]
    fn iot_by_row_enumeration() {
        let t = hand_logits();
        let p = TokenSpan::range(0, 2);
        let w = TokenSpan::range(2, 4);
        // row 2: cross {3, 0.5}, self {1}: (2 + 0) / 2 = 1
        // row 3: cross {2, -1}, self {0, 1.5}: (2 + 0.5 + 0 + 0) / 4 = 0.625
        let got = expected_rc_iot(&t, &p, &w, SampleMode::Generation).unwrap();
        assert!((got - 0.8125).abs() < 1e-15);

        let one = TokenSpan::singleton(3);
        let iot = expected_rc_iot(&t, &p, &one, SampleMode::Generation).unwrap();
        let cross = crate::contextualization::cross_samples(&t, &p, &one, SampleMode::Generation).unwrap();
        let selfs = crate::contextualization::self_samples(&t, &one, &one, SampleMode::Generation).unwrap();
        assert_eq!(iot, expected_rc_exact(&cross, &selfs));
    }

    #[test]
    fn iot_of_constant_logits_is_zero() {
        let t = LogitTensor::from_fn(HeadLocator::new(0, 0), 3, 7, |_, _| 2.5).unwrap();
        let got = expected_rc_iot(
            &t,
            &TokenSpan::range(0, 3),
            &TokenSpan::range(3, 7),
            SampleMode::Generation,
        )
        .unwrap();
        assert_eq!(got, 0.0);
    }

    proptest! {
        #[test]
        fn prefix_sums_match_brute_force(
            x in prop::collection::vec(-50f64..50.0, 1..60),
            y in prop::collection::vec(-50f64..50.0, 1..60),
        ) {
            let got = expected_rc_exact(&s(&x), &s(&y));
            prop_assert!((got - brute(&x, &y)).abs() < 1e-12);
        }

        #[test]
        fn bounds_sandwich_both_directions(
            x in prop::collection::vec(-5f64..5.0, 1..30),
            y in prop::collection::vec(-5f64..5.0, 1..30),
        ) {
            let (sx, sy) = (s(&x), s(&y));
            let q = four_areas(&sx, &sy);
            let e_xy = brute(&x, &y);
            let e_yx = brute(&y, &x);
            prop_assert!(q.lb_x_minus_y <= e_xy + 1e-9 && e_xy <= q.ub_x_minus_y + 1e-9);
            prop_assert!(q.lb_y_minus_x <= e_yx + 1e-9 && e_yx <= q.ub_y_minus_x + 1e-9);
        }

        #[test]
        fn translation_and_scale(
            x in prop::collection::vec(-5f64..5.0, 1..20),
            y in prop::collection::vec(-5f64..5.0, 1..20),
            shift in -3f64..3.0,
            bump in 0f64..3.0,
        ) {
            let shifted = |v: &[f64], c: f64| s(&v.iter().map(|a| a + c).collect::<Vec<_>>());
            let (sx, sy) = (s(&x), s(&y));
            let base = four_areas(&sx, &sy);
            let moved = four_areas(&shifted(&x, shift), &shifted(&y, shift));
            prop_assert!((base.ub_x_minus_y - moved.ub_x_minus_y).abs() < 1e-9);
            prop_assert!((base.lb_x_minus_y - moved.lb_x_minus_y).abs() < 1e-9);
            let e = expected_rc_exact(&sx, &sy);
            prop_assert!((e - expected_rc_exact(&shifted(&x, shift), &shifted(&y, shift))).abs() < 1e-9);
            // pushing X up never lowers the X-over-Y quantities
            prop_assert!(overlap_area_upper(&shifted(&x, bump), &sy) >= base.ub_x_minus_y - 1e-9);
            prop_assert!(expected_rc_exact(&shifted(&x, bump), &sy) >= e - 1e-9);
            // powers of two scale exactly
            let doubled = four_areas(&shifted(&x, 0.0).scale(2.0), &sy.scale(2.0));
            prop_assert_eq!(doubled.ub_x_minus_y, 2.0 * base.ub_x_minus_y);
            prop_assert_eq!(doubled.lb_y_minus_x, 2.0 * base.lb_y_minus_x);
        }
    }

    trait Scale {
        fn scale(&self, k: f64) -> EmpiricalSample;
    }

    impl Scale for EmpiricalSample {
        fn scale(&self, k: f64) -> EmpiricalSample {
            s(&self.values().iter().map(|v| v * k).collect::<Vec<_>>())
        }
    }
}
