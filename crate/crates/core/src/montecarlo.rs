//! Replicate fan-out with index-ordered results.

use crate::rng::{stream, StreamRng};
use rayon::prelude::*;

/// Runs `f` for replicates `0..reps`, each on its own stream under `master_seed`.
/// Results come back in replicate order whatever the thread count.
pub fn run_replicates<R, F>(master_seed: u64, reps: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize, &mut StreamRng) -> R + Sync,
{
    (0..reps)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(master_seed, i as u64);
            f(i, &mut rng)
        })
        .collect()
}

/// Sample mean and standard error of the mean. The error is zero for fewer than two values.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let k = values.len();
    if k == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / k as f64;
    if k < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    (mean, (var / k as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn order_and_thread_independence() {
        let draw = |_: usize, rng: &mut StreamRng| rng.random::<u64>();
        let a = run_replicates(9, 64, draw);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = one.install(|| run_replicates(9, 64, draw));
        assert_eq!(a, b);
        assert_eq!(run_replicates(9, 3, |i, _| i), vec![0, 1, 2]);
    }

    #[test]
    fn summary_statistics() {
        let (m, s) = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_stderr(&[2.0]), (2.0, 0.0));
    }
}
