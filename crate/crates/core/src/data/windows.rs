use crate::error::{Error, Result};

/// Half-open `[start, end)` windows of length `window` every `stride` units.
///
/// The window count is `1 + ceil((total - window) / stride)` when the signal is
/// longer than one window, so the last window may run past `total_units`;
/// callers zero-pad it. Ten seconds of 10 ms frames cut into 96-frame windows
/// at stride 48 gives twenty segments.
pub fn segment_windows(
    total_units: usize,
    window: usize,
    stride: usize,
) -> Result<Vec<(usize, usize)>> {
    if total_units == 0 || window == 0 || stride == 0 {
        return Err(Error::invalid(format!(
            "segment_windows needs positive arguments, got total={total_units} window={window} stride={stride}"
        )));
    }
    let count = if total_units > window {
        1 + (total_units - window).div_ceil(stride)
    } else {
        1
    };
    Ok((0..count)
        .map(|k| (k * stride, k * stride + window))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ten_second_clip_gives_twenty_segments() {
        let w = segment_windows(1000, 96, 48).unwrap();
        assert_eq!(w.len(), 20);
        assert_eq!(w[0], (0, 96));
        assert_eq!(w[19], (912, 1008));
    }

    #[test]
    fn single_full_window() {
        assert_eq!(segment_windows(96, 96, 48).unwrap(), vec![(0, 96)]);
    }

    #[test]
    fn enumerated_partial_tail() {
        assert_eq!(
            segment_windows(200, 96, 48).unwrap(),
            vec![(0, 96), (48, 144), (96, 192), (144, 240)]
        );
    }

    #[test]
    fn zero_arguments_rejected() {
        assert!(segment_windows(0, 96, 48).is_err());
        assert!(segment_windows(100, 0, 48).is_err());
        assert!(segment_windows(100, 96, 0).is_err());
    }

    proptest! {
        #[test]
        fn windows_cover_signal(total in 1usize..2000, window in 1usize..200, stride in 1usize..200) {
            let w = segment_windows(total, window, stride).unwrap();
            prop_assert!(!w.is_empty());
            prop_assert_eq!(w[0].0, 0);
            for pair in w.windows(2) {
                prop_assert_eq!(pair[1].0 - pair[0].0, stride);
            }
            for &(s, e) in &w {
                prop_assert_eq!(e - s, window);
            }
            prop_assert!(w.last().unwrap().1 >= total);
            if stride <= window {
                for u in 0..total {
                    prop_assert!(w.iter().any(|&(s, e)| s <= u && u < e));
                }
            }
        }
    }
}
