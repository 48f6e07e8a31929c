/// Trailing moving average over full windows; `xs.len() − window + 1` values.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || xs.len() < window {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(xs.len() - window + 1);
    let mut sum: f64 = xs[..window].iter().sum();
    out.push(sum / window as f64);
    for i in window..xs.len() {
        sum += xs[i] - xs[i - window];
        out.push(sum / window as f64);
    }
    out
}

/// Largest increase of a curve over any earlier point: `max_{i<j} (c_j − c_i)`,
/// zero for a non-increasing curve.
pub fn max_rise(curve: &[f64]) -> f64 {
    let mut lowest = f64::INFINITY;
    let mut rise: f64 = 0.0;
    for &c in curve {
        rise = rise.max(c - lowest);
        lowest = lowest.min(c);
    }
    rise
}

/// Standard error of a window mean estimated from `xs`: sample deviation
/// over `√window`.
pub fn window_standard_error(xs: &[f64], window: usize) -> f64 {
    if xs.len() < 2 || window == 0 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (var / window as f64).sqrt()
}

/// Least-squares slope of `ys` against their index.
pub fn slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    if ys.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, &y) in ys.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
    }
    sxy / sxx
}
