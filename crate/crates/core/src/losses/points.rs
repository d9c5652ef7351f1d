use rand::Rng;

/// Bilinear read of a row-major `h x w` map at normalized `(x, y)` in
/// `[0, 1]^2`. Pixel centres sit at `(i + 0.5) / w`; reads past the outer
/// centres clamp to the border.
pub fn bilinear_at(map: &[f32], h: usize, w: usize, x: f32, y: f32) -> f32 {
    let (idx, wt) = corners(h, w, x, y);
    idx.iter().zip(&wt).map(|(&i, &c)| c * map[i as usize]).sum()
}

/// The four corner indices and weights of a normalized point, clamped to
/// the border. Unused corners get weight 0 and index 0.
pub fn corners(h: usize, w: usize, x: f32, y: f32) -> ([u32; 4], [f32; 4]) {
    let px = (x * w as f32 - 0.5).clamp(0.0, (w - 1) as f32);
    let py = (y * h as f32 - 0.5).clamp(0.0, (h - 1) as f32);
    let (x0, y0) = (px.floor(), py.floor());
    let (fx, fy) = (px - x0, py - y0);
    let mut idx = [0u32; 4];
    let mut wt = [0f32; 4];
    for c in 0..4 {
        let xx = x0 as i64 + (c & 1) as i64;
        let yy = y0 as i64 + (c >> 1) as i64;
        if xx < 0 || yy < 0 || xx >= w as i64 || yy >= h as i64 {
            continue;
        }
        idx[c] = (yy as usize * w + xx as usize) as u32;
        let gx = if c & 1 == 1 { fx } else { 1.0 - fx };
        let gy = if c >> 1 == 1 { fy } else { 1.0 - fy };
        wt[c] = gx * gy;
    }
    (idx, wt)
}

/// `k` uniform points in `[0, 1]^2`.
pub fn uniform_points<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<(f32, f32)> {
    (0..k).map(|_| (rng.random::<f32>(), rng.random::<f32>())).collect()
}

/// Uncertainty-guided point selection for one mask.
///
/// Draws `ceil(oversample * k)` uniform proposals, keeps the
/// `round(importance * k)` with the smallest `|logit|`, and fills the rest
/// with fresh uniform points. Always returns exactly `k` points.
pub fn sample_points<R: Rng + ?Sized>(
    logits: &[f32],
    h: usize,
    w: usize,
    k: usize,
    oversample: f64,
    importance: f64,
    rng: &mut R,
) -> Vec<(f32, f32)> {
    let n_prop = ((oversample.max(1.0) * k as f64).ceil() as usize).max(k);
    let n_imp = ((importance.clamp(0.0, 1.0) * k as f64).round() as usize).min(k);
    if n_imp == 0 {
        return uniform_points(k, rng);
    }
    let proposals = uniform_points(n_prop, rng);
    let mut scored: Vec<(f32, usize)> =
        proposals.iter().enumerate().map(|(i, &(x, y))| (bilinear_at(logits, h, w, x, y).abs(), i)).collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out: Vec<(f32, f32)> = scored[..n_imp].iter().map(|&(_, i)| proposals[i]).collect();
    out.extend(uniform_points(k - n_imp, rng));
    out
}
