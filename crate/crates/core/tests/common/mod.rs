//! Reference implementations shared by several test targets.

/// Textbook differential box counting on one `(L+1) x (L+1)` window: the
/// intensity axis is cut into boxes of height `s G / M`, a block covers
/// `range / height + 1` boxes, and the dimension is the slope of
/// `ln N(s)` against `ln(1/s)` fitted by solving the 2x2 normal equations.
pub fn dbc_reference(z: &[f64], w: usize, top: usize, left: usize, scales: &[usize], m: f64, g: f64) -> f64 {
    let l = *scales.iter().max().unwrap();
    let mut pts = Vec::new();
    for &s in scales {
        let height = s as f64 * g / m;
        let mut count = 0.0;
        for by in (0..l).step_by(s) {
            for bx in (0..l).step_by(s) {
                let mut vals = Vec::new();
                for y in top + by..=top + by + s {
                    for x in left + bx..=left + bx + s {
                        vals.push(z[y * w + x]);
                    }
                }
                let hi = vals.iter().cloned().fold(f64::MIN, f64::max);
                let lo = vals.iter().cloned().fold(f64::MAX, f64::min);
                count += (hi - lo) / height + 1.0;
            }
        }
        pts.push(((1.0 / s as f64).ln(), count.ln()));
    }
    let n = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    slope.clamp(0.0, 3.0)
}
