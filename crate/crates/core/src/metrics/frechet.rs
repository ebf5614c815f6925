use super::curve::Curve;

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Discrete Frechet distance between two point sequences.
///
/// Computed with the Eiter-Mannila recurrence
/// `ca[i][j] = max(d(a_i, b_j), min(ca[i-1][j], ca[i][j-1], ca[i-1][j-1]))`
/// using two rolling rows.
///
/// # Panics
///
/// If either sequence is empty.
pub fn discrete_frechet(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "frechet of an empty curve");
    let m = b.len();
    let mut prev = vec![0.0f64; m];
    let mut cur = vec![0.0f64; m];
    for (i, &pa) in a.iter().enumerate() {
        for (j, &pb) in b.iter().enumerate() {
            let d = dist(pa, pb);
            cur[j] = match (i, j) {
                (0, 0) => d,
                (0, _) => cur[j - 1].max(d),
                (_, 0) => prev[0].max(d),
                _ => prev[j].min(cur[j - 1]).min(prev[j - 1]).max(d),
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m - 1]
}

pub fn frechet_distance(a: &Curve, b: &Curve) -> f64 {
    discrete_frechet(&a.as_coords(), &b.as_coords())
}
