use crate::error::{Error, Result};

/// Linear interpolation of `series` onto `len` evenly spaced positions.
///
/// Output `j` samples the input at `j·(L−1)/(len−1)`; both endpoints are
/// copied exactly.
pub fn resample_linear(series: &[f64], len: usize) -> Result<Vec<f64>> {
    let l = series.len();
    if l < 2 || len < 2 {
        return Err(Error::InvalidArgument(format!(
            "resample needs at least 2 points in and out (got {l} -> {len})"
        )));
    }
    if l == len {
        return Ok(series.to_vec());
    }
    let last = l - 1;
    let mut out = Vec::with_capacity(len);
    for j in 0..len {
        let pos = (j * last) as f64 / (len - 1) as f64;
        let i = pos.floor() as usize;
        if i >= last {
            out.push(series[last]);
            continue;
        }
        let frac = pos - i as f64;
        let (a, b) = (series[i], series[i + 1]);
        let v = a + frac * (b - a);
        out.push(v.clamp(a.min(b), a.max(b)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(resample_linear(&[0.0, 10.0], 3).unwrap(), vec![0.0, 5.0, 10.0]);
        let s = [1.0, -4.0, 2.5, 9.0];
        assert_eq!(resample_linear(&s, 4).unwrap(), s.to_vec());
        assert_eq!(resample_linear(&[1.0, 3.0, 2.0], 5).unwrap(), vec![1.0, 2.0, 3.0, 2.5, 2.0]);
    }

    #[test]
    fn degenerate_lengths_rejected() {
        assert!(resample_linear(&[1.0], 4).is_err());
        assert!(resample_linear(&[1.0, 2.0], 1).is_err());
    }

    proptest! {
        #[test]
        fn affine_series_reproduced(l in 2usize..80, t in 2usize..80, a in -50.0f64..50.0, b in -5.0f64..5.0) {
            let s: Vec<f64> = (0..l).map(|i| a + b * i as f64).collect();
            let out = resample_linear(&s, t).unwrap();
            for (j, v) in out.iter().enumerate() {
                let pos = (j * (l - 1)) as f64 / (t - 1) as f64;
                prop_assert!((v - (a + b * pos)).abs() < 1e-12);
            }
        }

        #[test]
        fn output_within_input_range(s in prop::collection::vec(-1e3f64..1e3, 2..40), t in 2usize..100) {
            let out = resample_linear(&s, t).unwrap();
            let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out.iter().all(|&v| v >= lo && v <= hi));
            prop_assert_eq!(out[0], s[0]);
            prop_assert_eq!(out[t - 1], s[s.len() - 1]);
        }
    }
}
