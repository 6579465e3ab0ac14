//! Brute-force reference implementations, written without sorting or
//! pooling so they share no logic with the library.

/// Pairwise ROC AUC: wins plus half ties over all positive/negative pairs.
pub fn roc_pairs(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Average precision from explicit ranks: item `j` precedes `i` when it
/// scores higher, or ties and comes earlier in the input.
pub fn ap_rank_walk(scores: &[f64], labels: &[u8]) -> f64 {
    let precedes = |j: usize, i: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    let n = scores.len();
    let mut total = 0.0;
    let mut positives = 0.0;
    for i in 0..n {
        if labels[i] != 1 {
            continue;
        }
        positives += 1.0;
        let rank = 1 + (0..n).filter(|&j| precedes(j, i)).count();
        let hits = 1 + (0..n).filter(|&j| labels[j] == 1 && precedes(j, i)).count();
        total += hits as f64 / rank as f64;
    }
    total / positives
}

/// Weighted isotonic fit by the min-max characterisation:
/// `f_i = max_{j ≤ i} min_{k ≥ i} mean_w(y_j..=y_k)`.
pub fn isotonic_minmax(y: &[f64], w: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mean = |j: usize, k: usize| {
        let (s, t) = (j..=k).fold((0.0, 0.0), |(s, t), m| (s + w[m] * y[m], t + w[m]));
        s / t
    };
    (0..n)
        .map(|i| {
            (0..=i)
                .map(|j| (i..n).map(|k| mean(j, k)).fold(f64::INFINITY, f64::min))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// Two-tailed Student-t tail by Simpson quadrature of the unnormalised
/// density after `x = tan θ`, normalised by the same quadrature.
pub fn t_two_tailed(t: f64, df: f64) -> f64 {
    let g = |theta: f64| {
        let c = theta.cos();
        if c <= 0.0 {
            return 0.0;
        }
        let x = theta.tan();
        (1.0 + x * x / df).powf(-(df + 1.0) / 2.0) / (c * c)
    };
    let simpson = |a: f64, b: f64, n: usize| {
        let h = (b - a) / n as f64;
        let mut s = g(a) + g(b);
        for i in 1..n {
            s += g(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    let half = std::f64::consts::FRAC_PI_2;
    let total = simpson(-half, half, 400_000);
    let tail = simpson(t.abs().atan(), half, 400_000);
    2.0 * tail / total
}

/// Paired t statistic written out from its definition.
pub fn t_statistic(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    let ss: f64 = d.iter().map(|x| (x - mean) * (x - mean)).sum();
    mean / (ss / (n - 1.0) / n).sqrt()
}
