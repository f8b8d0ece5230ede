//! Reductions with a fixed summation tree.
//!
//! The split points depend only on the input length, so the rounding of the
//! result is the same no matter how many rayon workers take part.

const LEAF: usize = 2048;

pub fn tree_sum(values: &[f64]) -> f64 {
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = split_point(values.len());
    let (a, b) = rayon::join(|| tree_sum(&values[..mid]), || tree_sum(&values[mid..]));
    a + b
}

/// Sum of `f(i)` for `i in 0..n` with the same tree as [`tree_sum`].
pub fn tree_sum_by<F>(n: usize, f: &F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    fn rec<F: Fn(usize) -> f64 + Sync>(lo: usize, hi: usize, f: &F) -> f64 {
        let len = hi - lo;
        if len <= LEAF {
            return (lo..hi).map(f).sum();
        }
        let mid = lo + split_point(len);
        let (a, b) = rayon::join(|| rec(lo, mid, f), || rec(mid, hi, f));
        a + b
    }
    rec(0, n, f)
}

/// Σ a[i]·b[i] with the same tree as [`tree_sum`]; leaves use four lanes.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    if a.len() <= LEAF {
        let mut lanes = [0.0; 4];
        let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
        let (ra, rb) = (ca.remainder(), cb.remainder());
        for (x, y) in ca.zip(cb) {
            for k in 0..4 {
                lanes[k] += x[k] * y[k];
            }
        }
        let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
        return (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail;
    }
    let mid = split_point(a.len());
    let (x, y) = rayon::join(|| dot(&a[..mid], &b[..mid]), || dot(&a[mid..], &b[mid..]));
    x + y
}

fn split_point(len: usize) -> usize {
    // largest multiple of LEAF not exceeding half, at least LEAF
    let half = len / 2;
    (half / LEAF).max(1) * LEAF
}
