use super::StatsError;

/// Benjamini-Hochberg step-up adjustment.
///
/// Sorting ascending, the adjusted value at rank `i` (1-based) is
/// `min_{j >= i} (m / j) * p_(j)`, capped at 1. Results come back in the
/// input order.
pub fn bh_adjust(p_values: &[f64]) -> Result<Vec<f64>, StatsError> {
    if let Some(&bad) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(StatsError::InvalidPValue(bad));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));

    let mut adjusted = vec![0.0; m];
    let mut running_min = 1.0f64;
    for (rank0, &idx) in order.iter().enumerate().rev() {
        let scaled = p_values[idx] * (m as f64 / (rank0 + 1) as f64);
        running_min = running_min.min(scaled);
        adjusted[idx] = running_min;
    }
    Ok(adjusted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct transcription of the min-over-suffix definition.
    fn brute(p: &[f64]) -> Vec<f64> {
        let m = p.len();
        let mut sorted: Vec<f64> = p.to_vec();
        sorted.sort_by(f64::total_cmp);
        p.iter()
            .map(|&pi| {
                // smallest rank holding this value
                let i = sorted.iter().position(|&s| s == pi).unwrap();
                (i..m)
                    .map(|j| sorted[j] * m as f64 / (j + 1) as f64)
                    .fold(f64::INFINITY, f64::min)
                    .min(1.0)
            })
            .collect()
    }

    #[test]
    fn single_and_equal() {
        assert_eq!(bh_adjust(&[0.03]).unwrap(), vec![0.03]);
        assert_eq!(bh_adjust(&[0.2, 0.2, 0.2]).unwrap(), vec![0.2, 0.2, 0.2]);
        assert_eq!(bh_adjust(&[]).unwrap(), Vec::<f64>::new());
    }

    #[test]
    fn rejects_out_of_range() {
        assert_eq!(bh_adjust(&[0.1, 1.2]), Err(StatsError::InvalidPValue(1.2)));
        assert!(bh_adjust(&[f64::NAN]).is_err());
    }

    #[test]
    fn preserves_input_order() {
        let adj = bh_adjust(&[0.04, 0.01, 0.03]).unwrap();
        // sorted 0.01, 0.03, 0.04 -> 0.03, 0.045, 0.04 -> suffix-min 0.03, 0.04, 0.04
        let want = [0.04, 0.03, 0.04];
        for (a, w) in adj.iter().zip(want) {
            assert!((a - w).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn matches_definition_and_is_monotone(p in prop::collection::vec(0.0f64..=1.0, 1..40)) {
            let adj = bh_adjust(&p).unwrap();
            for (a, b) in adj.iter().zip(brute(&p)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            for i in 0..p.len() {
                prop_assert!(adj[i] >= p[i] - 1e-15);
                prop_assert!(adj[i] <= 1.0);
                for j in 0..p.len() {
                    if p[i] <= p[j] {
                        prop_assert!(adj[i] <= adj[j] + 1e-15);
                    }
                }
            }
        }
    }
}
