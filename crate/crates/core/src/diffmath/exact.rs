//! Error-free transformations. Sums of doubles are carried as nonoverlapping
//! expansions (smallest component first) and rounded once at the end.

#[inline]
pub(crate) fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bv = s - a;
    let av = s - bv;
    (s, (a - av) + (b - bv))
}

/// Add `b` to a nonoverlapping expansion in place, dropping zero components.
pub(crate) fn grow_expansion(e: &mut Vec<f64>, b: f64) {
    let mut q = b;
    let mut kept = 0;
    for i in 0..e.len() {
        let (s, h) = two_sum(q, e[i]);
        q = s;
        if h != 0.0 {
            e[kept] = h;
            kept += 1;
        }
    }
    e.truncate(kept);
    if q != 0.0 {
        e.push(q);
    }
}

/// Correctly rounded value of a nonoverlapping expansion (smallest first).
pub(crate) fn round_expansion(e: &[f64]) -> f64 {
    let mut n = e.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut hi = e[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = e[n];
        hi = x + y;
        lo = y - (hi - x);
        if lo != 0.0 {
            break;
        }
    }
    // round-half-even fix-up when the remainder sits exactly on a tie
    if n > 0 && ((lo < 0.0 && e[n - 1] < 0.0) || (lo > 0.0 && e[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

/// Exact accumulator for sums of doubles and of products of doubles.
#[derive(Debug, Clone, Default)]
pub(crate) struct ExactSum(Vec<f64>);

impl ExactSum {
    pub(crate) fn add(&mut self, v: f64) {
        grow_expansion(&mut self.0, v);
    }

    pub(crate) fn add_product(&mut self, a: f64, b: f64) {
        let p = a * b;
        self.add(a.mul_add(b, -p));
        self.add(p);
    }

    pub(crate) fn value(&self) -> f64 {
        round_expansion(&self.0)
    }
}
