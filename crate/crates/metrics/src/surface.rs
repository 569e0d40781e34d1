use ndarray::ArrayView2;

use crate::{MetricError, Side, Spacing};

/// Pixel coordinate as `(row, col)`.
pub type Coord = (usize, usize);

/// Foreground pixels with at least one background 4-neighbour, in row-major order.
///
/// Pixels on the image border always count as boundary.
pub fn boundary(mask: ArrayView2<bool>) -> Vec<Coord> {
    let (h, w) = mask.dim();
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask[(r, c)] {
                continue;
            }
            let edge = r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || !mask[(r - 1, c)]
                || !mask[(r + 1, c)]
                || !mask[(r, c - 1)]
                || !mask[(r, c + 1)];
            if edge {
                out.push((r, c));
            }
        }
    }
    out
}

#[inline]
fn offset(a: usize, b: usize, scale: f64) -> f64 {
    (a as f64 - b as f64) * scale
}

/// For every point of `from`, the Euclidean distance to the nearest point of `to`.
///
/// Output order follows `from`. `to` is bucketed by row; rows are scanned
/// outwards from the query row and the scan stops once the row offset alone
/// exceeds the best squared distance found, so the result equals the
/// exhaustive minimum exactly.
pub fn directed_distances(
    from: &[Coord],
    to: &[Coord],
    spacing: Spacing,
) -> Result<Vec<f64>, MetricError> {
    if to.is_empty() {
        return Err(MetricError::EmptySurface { side: Side::Second });
    }
    let max_row = to.iter().map(|p| p.0).max().unwrap_or(0);
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); max_row + 1];
    for &(r, c) in to {
        rows[r].push(c);
    }
    for cols in &mut rows {
        cols.sort_unstable();
        cols.dedup();
    }

    let nearest_in_row = |cols: &[usize], col: usize, dy2: f64, best: &mut f64| {
        if cols.is_empty() {
            return;
        }
        let idx = cols.partition_point(|&c| c < col);
        for j in [idx.checked_sub(1), Some(idx)].into_iter().flatten() {
            if let Some(&c) = cols.get(j) {
                let dx = offset(col, c, spacing.col);
                let d2 = dy2 + dx * dx;
                if d2 < *best {
                    *best = d2;
                }
            }
        }
    };

    let out = from
        .iter()
        .map(|&(r, c)| {
            let mut best = f64::INFINITY;
            // Rows at and below the query row.
            for rb in r.min(rows.len())..rows.len() {
                let dy = offset(rb, r, spacing.row);
                let dy2 = dy * dy;
                if dy2 >= best {
                    break;
                }
                nearest_in_row(&rows[rb], c, dy2, &mut best);
            }
            // Rows above.
            for rb in (0..r.min(rows.len())).rev() {
                let dy = offset(r, rb, spacing.row);
                let dy2 = dy * dy;
                if dy2 >= best {
                    break;
                }
                nearest_in_row(&rows[rb], c, dy2, &mut best);
            }
            best.sqrt()
        })
        .collect();
    Ok(out)
}

/// Linearly interpolated percentile (`q` in `[0, 100]`) of `values`.
///
/// The rank is `q/100 · (n−1)` over the ascending sort; fractional ranks
/// interpolate between neighbours. Returns NaN for an empty slice.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn single_pixel_is_its_own_boundary() {
        let mut m = Array2::from_elem((5, 5), false);
        m[(2, 2)] = true;
        assert_eq!(boundary(m.view()), vec![(2, 2)]);
    }

    #[test]
    fn filled_square_has_eight_perimeter_pixels() {
        let mut m = Array2::from_elem((7, 7), false);
        for r in 2..5 {
            for c in 2..5 {
                m[(r, c)] = true;
            }
        }
        let b = boundary(m.view());
        assert_eq!(b.len(), 8);
        assert!(!b.contains(&(3, 3)));
    }

    #[test]
    fn full_mask_boundary_is_image_border() {
        let m = Array2::from_elem((4, 6), true);
        let b = boundary(m.view());
        assert_eq!(b.len(), 2 * 6 + 2 * 2);
        assert!(b.iter().all(|&(r, c)| r == 0 || c == 0 || r == 3 || c == 5));
    }

    #[test]
    fn empty_mask_has_no_boundary() {
        let m = Array2::from_elem((3, 3), false);
        assert!(boundary(m.view()).is_empty());
    }

    #[test]
    fn directed_distance_examples() {
        let a = vec![(0, 0), (4, 4)];
        assert_eq!(
            directed_distances(&a, &a, Spacing::UNIT).unwrap(),
            vec![0.0, 0.0]
        );
        assert_eq!(
            directed_distances(&[(0, 0)], &[(0, 3)], Spacing::UNIT).unwrap(),
            vec![3.0]
        );
        assert_eq!(
            directed_distances(&[(0, 0)], &[(3, 4)], Spacing::new(2.0, 1.0).unwrap()).unwrap(),
            vec![(36.0f64 + 16.0).sqrt()]
        );
        assert!(directed_distances(&a, &[], Spacing::UNIT).is_err());
        assert!(directed_distances(&[], &a, Spacing::UNIT).unwrap().is_empty());
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[5.0], 95.0), 5.0);
        assert_eq!(percentile(&[0.0, 10.0], 50.0), 5.0);
        // rank = 0.95 * 4 = 3.8 -> 3 + 0.8 * (4 - 3)
        let v = percentile(&[4.0, 0.0, 2.0, 1.0, 3.0], 95.0);
        assert!((v - 3.8).abs() < 1e-12);
        assert!(percentile(&[], 95.0).is_nan());
    }
}
