//! Central finite-difference gradient checking in 64-bit mode.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub max_rel_err: f64,
    /// (leaf index, flat offset, analytic, numeric) of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub seed: u64,
    pub min_coordinates: usize,
    pub eps: f64,
    /// Denominator floor for the relative error so that vanishing gradients
    /// are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            seed: 0,
            min_coordinates: 20,
            eps: 1e-6,
            floor: 1e-5,
        }
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

impl GradCheck {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    /// Checks d(sum(f() * R))/d(leaf) for a fixed random projection R against
    /// central differences at randomly chosen coordinates of every leaf.
    pub fn run(
        &self,
        leaves: &[Tensor<f64>],
        f: impl Fn() -> Result<Tensor<f64>>,
    ) -> Result<GradCheckReport> {
        if leaves.is_empty() {
            return Err(Error::Autograd("gradient check without leaves".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9e37_79b9);
        let out = f()?;
        let proj: Vec<f64> = (0..out.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let proj = Tensor::new(proj, out.shape())?;
        let objective = |o: &Tensor<f64>| -> Result<Tensor<f64>> { Ok(o.mul(&proj)?.sum_all()) };

        for l in leaves {
            l.zero_grad();
        }
        objective(&out)?.backward()?;

        // Spread the budget evenly, handing whatever a small leaf cannot use
        // on to the larger ones.
        let mut order: Vec<usize> = (0..leaves.len()).collect();
        order.sort_by_key(|&i| leaves[i].numel());
        let mut quota = vec![0; leaves.len()];
        let mut left = self.min_coordinates;
        for (n, &i) in order.iter().enumerate() {
            let share = left.div_ceil(leaves.len() - n).max(3);
            quota[i] = share.min(leaves[i].numel());
            left = left.saturating_sub(quota[i]);
        }
        let mut report = GradCheckReport {
            coordinates: 0,
            max_rel_err: 0.0,
            worst: None,
        };
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = leaf
                .grad()
                .unwrap_or_else(|| vec![0.0; leaf.numel()]);
            for off in sample(&mut rng, leaf.numel(), quota[li]).into_iter() {
                let probe = |delta: f64| -> Result<f64> {
                    leaf.update_data(|d| d[off] += delta);
                    let v = crate::tensor::no_grad(|| f().and_then(|o| objective(&o)));
                    leaf.update_data(|d| d[off] -= delta);
                    Ok(v?.item())
                };
                let numeric = (probe(self.eps)? - probe(-self.eps)?) / (2.0 * self.eps);
                let err = relative_error(analytic[off], numeric, self.floor);
                report.coordinates += 1;
                if err >= report.max_rel_err {
                    report.max_rel_err = err;
                    report.worst = Some((li, off, analytic[off], numeric));
                }
            }
        }
        Ok(report)
    }
}

/// Convenience form: draws random leaves with the given shapes and checks `f`.
pub fn check_gradients<F>(shapes: &[Vec<usize>], seed: u64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let leaves: Vec<Tensor<f64>> = shapes
        .iter()
        .map(|s| {
            let n = super::numel(s);
            Tensor::param((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), s)
        })
        .collect::<Result<_>>()?;
    GradCheck::with_seed(seed).run(&leaves, || f(&leaves))
}
