use ndarray::Array2;

use crate::corpus::DurationSequence;

/// Transformer-style embedding `[sin(p·ω₀), cos(p·ω₀), sin(p·ω₁), …]` with
/// `ωᵢ = 10000^(−2i/E)`.
pub fn sinusoidal(pos: f64, width: usize) -> Vec<f64> {
    (0..width)
        .map(|j| {
            let i = (j / 2) as f64;
            let angle = pos / 10000f64.powf(2.0 * i / width as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Per-frame `[emb(d) ‖ emb(k) ‖ (k+1)/d]` for frame `k` of a phoneme lasting
/// `d` frames. Returns a `T × (2E + 1)` matrix.
pub fn positional_features(durations: &DurationSequence, width: usize) -> Array2<f64> {
    let cols = 2 * width + 1;
    let mut out = Array2::zeros((durations.total(), cols));
    let mut row = 0;
    for &d in durations.frames() {
        let de = sinusoidal(d as f64, width);
        for k in 0..d {
            let ke = sinusoidal(k as f64, width);
            let mut r = out.row_mut(row);
            for j in 0..width {
                r[j] = de[j];
                r[width + j] = ke[j];
            }
            r[2 * width] = (k + 1) as f64 / d as f64;
            row += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn progress_column() {
        let f = positional_features(&DurationSequence::new(vec![4]), 8);
        let p: Vec<f64> = f.column(16).to_vec();
        assert_eq!(p, vec![0.25, 0.5, 0.75, 1.0]);
        let f = positional_features(&DurationSequence::new(vec![1]), 8);
        assert_eq!(f[[0, 16]], 1.0);
    }

    #[test]
    fn position_zero_alternates() {
        let e = sinusoidal(0.0, 6);
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_duration_emits_nothing() {
        let f = positional_features(&DurationSequence::new(vec![0, 2, 0]), 4);
        assert_eq!(f.nrows(), 2);
        assert_eq!(f.column(8).to_vec(), vec![0.5, 1.0]);
    }
}
