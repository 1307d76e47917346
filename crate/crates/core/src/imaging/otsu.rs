use num_bigint::BigUint;

use super::GrayImage;

/// Result of Otsu's method.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Otsu {
    /// Pixels with intensity strictly greater than this are foreground.
    pub threshold: u8,
    /// Set when the image holds a single distinct intensity.
    pub degenerate: bool,
}

/// Between-class variance up to a positive constant, kept as an exact
/// fraction `num / den` so the argmax is free of rounding.
///
/// With `n0`, `s0` the count and intensity sum at or below the threshold,
/// `N`, `S` the totals: `(s0 N - S n0)^2 / (n0 (N - n0))`.
#[derive(Clone, Copy)]
struct Score {
    num: u128,
    den: u128,
}

impl Score {
    fn gt(&self, other: &Score) -> bool {
        match (self.num.checked_mul(other.den), other.num.checked_mul(self.den)) {
            (Some(a), Some(b)) => a > b,
            _ => BigUint::from(self.num) * other.den > BigUint::from(other.num) * self.den,
        }
    }
}

/// Global threshold maximizing between-class variance over the 256-bin
/// histogram. Ties go to the smallest threshold.
pub fn otsu_threshold(img: &GrayImage) -> Otsu {
    let mut hist = [0u64; 256];
    for &v in img.data() {
        hist[v as usize] += 1;
    }
    let total = img.data().len() as u128;
    let sum: u128 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as u128 * c as u128)
        .sum();

    let distinct = hist.iter().filter(|&&c| c > 0).count();
    if distinct <= 1 {
        let v = hist.iter().position(|&c| c > 0).unwrap_or(0) as u8;
        return Otsu {
            threshold: v.saturating_sub(1),
            degenerate: true,
        };
    }

    let mut best_t = 0u8;
    let mut best = Score { num: 0, den: 1 };
    let (mut n0, mut s0) = (0u128, 0u128);
    for t in 0..256usize {
        n0 += hist[t] as u128;
        s0 += t as u128 * hist[t] as u128;
        if n0 == 0 || n0 == total {
            continue;
        }
        let diff = (s0 * total).abs_diff(sum * n0);
        let score = Score {
            num: diff * diff,
            den: n0 * (total - n0),
        };
        if score.gt(&best) {
            best = score;
            best_t = t as u8;
        }
    }
    Otsu {
        threshold: best_t,
        degenerate: false,
    }
}
