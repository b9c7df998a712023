//! Sliding windows over a run: stride 1, every offset from 0 to `L - T`.

use crate::error::{Error, Result};

pub fn window_count(run_length: usize, window: usize) -> Result<usize> {
    if window == 0 {
        return Err(Error::Contract("window size must be at least 1".into()));
    }
    if window > run_length {
        return Err(Error::Contract(format!("window {window} exceeds run length {run_length}")));
    }
    Ok(run_length - window + 1)
}

pub fn enumerate_windows(run_length: usize, window: usize) -> Result<Vec<usize>> {
    Ok((0..window_count(run_length, window)?).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn counts() {
        assert_eq!(window_count(137, 64).unwrap(), 74);
        assert_eq!(window_count(137, 16).unwrap(), 122);
        assert_eq!(enumerate_windows(9, 9).unwrap(), vec![0]);
        assert!(matches!(enumerate_windows(5, 6), Err(Error::Contract(_))));
        assert!(enumerate_windows(5, 0).is_err());
    }

    proptest! {
        #[test]
        fn windows_cover_every_frame(len in 1usize..200, t in 1usize..200) {
            prop_assume!(t <= len);
            let offs = enumerate_windows(len, t).unwrap();
            prop_assert_eq!(offs.len(), len - t + 1);
            prop_assert!(offs.windows(2).all(|w| w[1] == w[0] + 1));
            let mut covered = vec![false; len];
            for &o in &offs {
                for c in &mut covered[o..o + t] {
                    *c = true;
                }
            }
            prop_assert!(covered.iter().all(|&c| c));
        }
    }
}
