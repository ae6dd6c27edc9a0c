//! Search over candidate counts `c ∈ [0, cmax]` for the maximizer of
//! `L(c) = M_c + log N(c; ν, ρ)`.

use serde::{Deserialize, Serialize};

/// Ranges up to this size are scanned exhaustively.
pub const EXHAUSTIVE_LIMIT: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SearchStrategy {
    Exhaustive,
    BinarySearch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountSearch {
    pub c_star: usize,
    pub value: f64,
    pub strategy: SearchStrategy,
    /// Every `(c, L(c))` evaluated, in ascending `c`.
    pub evaluated: Vec<(usize, f64)>,
    /// Whether the fully scanned `L` was unimodal; `None` after binary search.
    pub unimodal: Option<bool>,
}

/// True when the sequence rises (weakly) and then falls (weakly).
/// `-∞` entries compare as ordinary values.
pub fn is_unimodal(values: &[f64]) -> bool {
    let mut falling = false;
    for w in values.windows(2) {
        if w[1] > w[0] {
            if falling {
                return false;
            }
        } else if w[1] < w[0] {
            falling = true;
        }
    }
    true
}

/// Maximizes `eval` over `0..=cmax`. NaN values count as `-∞`; ties go to
/// the smaller count.
pub fn argmax_count(cmax: usize, exhaustive_limit: usize, mut eval: impl FnMut(usize) -> f64) -> CountSearch {
    let mut cache: Vec<Option<f64>> = vec![None; cmax + 1];
    let mut get = |c: usize, cache: &mut Vec<Option<f64>>| -> f64 {
        *cache[c].get_or_insert_with(|| {
            let v = eval(c);
            if v.is_nan() {
                f64::NEG_INFINITY
            } else {
                v
            }
        })
    };
    let (c_star, strategy, unimodal) = if cmax <= exhaustive_limit {
        let values: Vec<f64> = (0..=cmax).map(|c| get(c, &mut cache)).collect();
        let mut best = 0;
        for (c, v) in values.iter().enumerate() {
            if *v > values[best] {
                best = c;
            }
        }
        let uni = is_unimodal(&values);
        if !uni {
            log::debug!("non-unimodal count objective {values:?}");
        }
        (best, SearchStrategy::Exhaustive, Some(uni))
    } else {
        let (mut lo, mut hi) = (0usize, cmax);
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            if get(mid, &mut cache) < get(mid + 1, &mut cache) {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        (lo, SearchStrategy::BinarySearch, None)
    };
    let value = get(c_star, &mut cache);
    let evaluated = cache.iter().enumerate().filter_map(|(c, v)| v.map(|v| (c, v))).collect();
    CountSearch { c_star, value, strategy, evaluated, unimodal }
}
