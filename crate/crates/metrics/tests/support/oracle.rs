//! Exhaustive reference implementations of the mask metrics.
//!
//! Written against the metric definitions only (4-connected boundary,
//! out-of-bounds as background, all-pairs nearest distance, linear
//! percentile). Shared with the acceptance suite via `#[path]`.

#![allow(dead_code)]

pub fn boundary(mask: &[Vec<bool>]) -> Vec<(usize, usize)> {
    let h = mask.len() as isize;
    let w = mask.first().map_or(0, |r| r.len()) as isize;
    let at = |r: isize, c: isize| r >= 0 && c >= 0 && r < h && c < w && mask[r as usize][c as usize];
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if at(r, c) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dr, dc)| !at(r + dr, c + dc)) {
                out.push((r as usize, c as usize));
            }
        }
    }
    out
}

pub fn nearest(from: &[(usize, usize)], to: &[(usize, usize)], sy: f64, sx: f64) -> Vec<f64> {
    from.iter()
        .map(|&(ra, ca)| {
            to.iter()
                .map(|&(rb, cb)| {
                    let dy = (ra as f64 - rb as f64) * sy;
                    let dx = (ca as f64 - cb as f64) * sx;
                    (dy * dy + dx * dx).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

pub fn p95(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = 0.95 * (v.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = pos.ceil() as usize;
    v[i] + (v[j] - v[i]) * (pos - i as f64)
}

pub fn dsc(a: &[Vec<bool>], b: &[Vec<bool>]) -> f64 {
    let mut inter = 0;
    let mut total = 0;
    for (ra, rb) in a.iter().zip(b) {
        for (&x, &y) in ra.iter().zip(rb) {
            if x && y {
                inter += 1;
            }
            total += x as usize + y as usize;
        }
    }
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// `None` when either mask has no foreground.
pub fn hd95(a: &[Vec<bool>], b: &[Vec<bool>], sy: f64, sx: f64) -> Option<f64> {
    let (ba, bb) = (boundary(a), boundary(b));
    if ba.is_empty() || bb.is_empty() {
        return None;
    }
    Some(p95(&nearest(&ba, &bb, sy, sx)).max(p95(&nearest(&bb, &ba, sy, sx))))
}

pub fn nsd(a: &[Vec<bool>], b: &[Vec<bool>], tau: f64, sy: f64, sx: f64) -> Option<f64> {
    let (ba, bb) = (boundary(a), boundary(b));
    if ba.is_empty() || bb.is_empty() {
        return None;
    }
    let mut hits = 0usize;
    for d in nearest(&ba, &bb, sy, sx).into_iter().chain(nearest(&bb, &ba, sy, sx)) {
        if d <= tau {
            hits += 1;
        }
    }
    Some(hits as f64 / (ba.len() + bb.len()) as f64)
}
