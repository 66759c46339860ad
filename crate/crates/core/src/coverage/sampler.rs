use crate::error::{Error, Result};

/// Variance-stratified neuron selection.
///
/// Neuron ids are sorted ascending by variance (ties by id) and the ids at
/// 1-based sorted positions `ceil(j * n / k)`, `j = 1..=k`, are taken,
/// deduplicated in order. With `n <= k` every neuron is returned.
pub fn sample_neurons(variances: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidArgument("sample size k must be at least 1".into()));
    }
    let n = variances.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| variances[a].total_cmp(&variances[b]).then(a.cmp(&b)));
    if n <= k {
        return Ok(order);
    }
    let mut picked = Vec::with_capacity(k);
    let mut last = usize::MAX;
    for j in 1..=k {
        let pos = (j * n).div_ceil(k).clamp(1, n);
        if pos != last {
            picked.push(order[pos - 1]);
            last = pos;
        }
    }
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        // sorted: n1(1), n3(3), n0(5), n2(9); positions 2 and 4
        assert_eq!(sample_neurons(&[5.0, 1.0, 9.0, 3.0], 2).unwrap(), vec![3, 2]);
    }

    #[test]
    fn n_equal_k_takes_everything() {
        let mut got = sample_neurons(&[0.3, 0.3, 0.1, 7.0, 2.0], 5).unwrap();
        got.sort();
        assert_eq!(got, vec![0, 1, 2, 3, 4]);
        assert_eq!(sample_neurons(&[1.0, 2.0], 10).unwrap().len(), 2);
    }

    #[test]
    fn zero_k_is_an_error() {
        assert!(sample_neurons(&[1.0], 0).is_err());
    }

    #[test]
    fn ties_are_broken_by_id() {
        assert_eq!(sample_neurons(&[1.0, 1.0, 1.0, 1.0], 2).unwrap(), vec![1, 3]);
    }
}
