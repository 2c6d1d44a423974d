//! Two-sample energy distance
//! `2E‖X − Y‖ − E‖X − X′‖ − E‖Y − Y′‖`, with the within-sample terms taken
//! over distinct pairs only.

use crate::error::{check_len, Error, Result};
use crate::par;
use crate::stats::norm2;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm2(&diff)
}

fn mean_cross(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let rows = par::map_indexed(x.len(), |i| y.iter().map(|b| dist(&x[i], b)).sum::<f64>());
    rows.iter().sum::<f64>() / (x.len() * y.len()) as f64
}

fn mean_within(x: &[Vec<f64>]) -> f64 {
    let n = x.len();
    let rows = par::map_indexed(n, |i| x[i + 1..].iter().map(|b| dist(&x[i], b)).sum::<f64>());
    2.0 * rows.iter().sum::<f64>() / (n * (n - 1)) as f64
}

pub fn energy_distance(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::Precondition("energy distance needs two points per sample".into()));
    }
    let d = x[0].len();
    for row in x.iter().chain(y) {
        check_len(d, row.len())?;
    }
    Ok(2.0 * mean_cross(x, y) - mean_within(x) - mean_within(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gauss(seed: u64, n: usize, shift: f64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                (0..2)
                    .map(|_| shift + Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn small_case_by_hand() {
        // 1-D: x = {0, 1}, y = {3, 5}.
        let x = vec![vec![0.0], vec![1.0]];
        let y = vec![vec![3.0], vec![5.0]];
        let cross = (3.0 + 5.0 + 2.0 + 4.0) / 4.0;
        let want = 2.0 * cross - 1.0 - 2.0;
        assert!((energy_distance(&x, &y).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn symmetric_and_near_zero_for_same_law() {
        let a = gauss(1, 400, 0.0);
        let b = gauss(2, 400, 0.0);
        let e = energy_distance(&a, &b).unwrap();
        assert!((e - energy_distance(&b, &a).unwrap()).abs() < 1e-12);
        assert!(e.abs() < 0.05, "{e}");
        let far = energy_distance(&a, &gauss(3, 400, 2.0)).unwrap();
        assert!(far > 1.0, "{far}");
    }

    #[test]
    fn rejects_tiny_or_ragged_input() {
        assert!(energy_distance(&[vec![1.0]], &[vec![1.0], vec![2.0]]).is_err());
        assert!(energy_distance(&[vec![1.0], vec![2.0]], &[vec![1.0], vec![2.0, 3.0]]).is_err());
    }
}
