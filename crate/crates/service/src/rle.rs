//! Row-major run-length encoding of binary masks.
//!
//! `counts` alternates background and foreground runs and always starts with
//! a background run, which is zero when the first pixel is foreground.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`.
    pub shape: [usize; 2],
    pub counts: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RleError {
    #[error("runs cover {covered} pixels but the shape holds {expected}")]
    Length { covered: u64, expected: u64 },
}

pub fn encode(mask: &Array2<bool>) -> Rle {
    let (h, w) = mask.dim();
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for &v in mask.iter() {
        if v != current {
            counts.push(run);
            run = 0;
            current = v;
        }
        run += 1;
    }
    counts.push(run);
    Rle { shape: [h, w], counts }
}

pub fn decode(rle: &Rle) -> Result<Array2<bool>, RleError> {
    let [h, w] = rle.shape;
    let expected = (h * w) as u64;
    let covered: u64 = rle.counts.iter().map(|&c| u64::from(c)).sum();
    if covered != expected {
        return Err(RleError::Length { covered, expected });
    }
    let mut data = Vec::with_capacity(h * w);
    let mut value = false;
    for &c in &rle.counts {
        data.extend(std::iter::repeat_n(value, c as usize));
        value = !value;
    }
    Ok(Array2::from_shape_vec((h, w), data).expect("length checked above"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leading_foreground_starts_with_empty_run() {
        let m = Array2::from_shape_vec((1, 4), vec![true, true, false, true]).unwrap();
        let r = encode(&m);
        assert_eq!(r.counts, vec![0, 2, 1, 1]);
        assert_eq!(decode(&r).unwrap(), m);
    }

    #[test]
    fn row_major_order() {
        let m = Array2::from_shape_vec((2, 2), vec![false, true, true, false]).unwrap();
        assert_eq!(encode(&m).counts, vec![1, 2, 1]);
    }

    #[test]
    fn empty_and_wrong_length() {
        let m = Array2::from_elem((0, 3), false);
        assert_eq!(decode(&encode(&m)).unwrap(), m);
        let bad = Rle {
            shape: [2, 2],
            counts: vec![1, 1],
        };
        assert!(decode(&bad).is_err());
    }
}
