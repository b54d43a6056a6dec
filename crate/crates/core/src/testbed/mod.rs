//! Analytic robot worlds used to generate data and to score results against
//! ground truth.

mod arm_tool;
mod biped;
mod tendon;

pub use arm_tool::ArmToolWorld;
pub use biped::BipedWorld;
pub use tendon::TendonArmWorld;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{check_len, Error, Result};
use crate::modality::ModalityLayout;
use crate::trainer::{Dataset, Sample};

pub trait World: Send + Sync {
    fn layout(&self) -> ModalityLayout;

    /// Inclusive lower and upper command bounds.
    fn command_bounds(&self) -> (Vec<f64>, Vec<f64>);

    /// Identifier of the hidden body state.
    fn state_id(&self) -> String;

    /// Noise-free observation over [`World::layout`] for a command.
    fn observe_clean(&self, command: &[f64]) -> Result<Vec<f64>>;

    /// Per-channel Gaussian noise std in raw units.
    fn noise_std(&self) -> Vec<f64>;

    fn command_dim(&self) -> usize {
        self.command_bounds().0.len()
    }
}

pub fn check_command(world: &(impl World + ?Sized), command: &[f64]) -> Result<()> {
    let (lo, hi) = world.command_bounds();
    check_len("command", lo.len(), command.len())?;
    for (i, ((&c, &l), &h)) in command.iter().zip(&lo).zip(&hi).enumerate() {
        if !c.is_finite() || c < l - 1e-12 || c > h + 1e-12 {
            return Err(Error::LimitViolation(format!(
                "command[{i}] = {c} outside [{l}, {h}]"
            )));
        }
    }
    Ok(())
}

/// Observation with optional noise; groups not flagged available are zeroed.
pub fn observe<R: Rng + ?Sized>(
    world: &(impl World + ?Sized),
    command: &[f64],
    available: &[bool],
    rng: Option<&mut R>,
) -> Result<Sample> {
    check_command(world, command)?;
    let layout = world.layout();
    check_len("availability", layout.n_groups(), available.len())?;
    let mut x = world.observe_clean(command)?;
    if let Some(rng) = rng {
        for (v, s) in x.iter_mut().zip(world.noise_std()) {
            if s > 0.0 {
                *v += Normal::new(0.0, s).expect("finite std").sample(rng);
            }
        }
    }
    for (g, _) in available.iter().enumerate().filter(|(_, a)| !**a) {
        for c in layout.range(g) {
            x[c] = 0.0;
        }
    }
    Ok(Sample::new(world.state_id(), x, available.to_vec()))
}

pub fn random_command<R: Rng + ?Sized>(world: &(impl World + ?Sized), rng: &mut R) -> Vec<f64> {
    let (lo, hi) = world.command_bounds();
    lo.iter()
        .zip(&hi)
        .map(|(&l, &h)| rng.random_range(l..=h))
        .collect()
}

/// `n` fully observed noisy samples from uniform random commands.
pub fn random_rollout(world: &(impl World + ?Sized), n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = world.layout();
    let avail = vec![true; layout.n_groups()];
    let mut d = Dataset::new(layout);
    for _ in 0..n {
        let cmd = random_command(world, &mut rng);
        d.push(observe(world, &cmd, &avail, Some(&mut rng))?)?;
    }
    Ok(d)
}

/// Euclidean distance between a claimed and an actual quantity.
pub fn oracle_error(claimed: &[f64], actual: &[f64]) -> Result<f64> {
    check_len("oracle error", actual.len(), claimed.len())?;
    Ok(claimed
        .iter()
        .zip(actual)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Mean Euclidean error over pairs.
pub fn mean_oracle_error(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("oracle pairs".into()));
    }
    let mut s = 0.0;
    for (a, b) in pairs {
        s += oracle_error(a, b)?;
    }
    Ok(s / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_error_examples() {
        assert_eq!(oracle_error(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(oracle_error(&[0.0, 3.0], &[4.0, 0.0]).unwrap(), 5.0);
        let m = mean_oracle_error(&[
            (vec![0.0, 3.0], vec![4.0, 0.0]),
            (vec![1.0], vec![2.0, 0.0]),
        ]);
        assert!(m.is_err());
        let m = mean_oracle_error(&[
            (vec![0.0, 3.0], vec![4.0, 0.0]),
            (vec![1.0, 1.0], vec![1.0, 2.0]),
        ])
        .unwrap();
        assert_eq!(m, 3.0);
    }

    #[test]
    fn rollouts_are_reproducible() {
        let w = ArmToolWorld::new(500.0, 30.0);
        let a = random_rollout(&w, 50, 7).unwrap();
        let b = random_rollout(&w, 50, 7).unwrap();
        assert_eq!(a.to_csv_string().unwrap(), b.to_csv_string().unwrap());
        assert_ne!(a, random_rollout(&w, 50, 8).unwrap());
        assert_eq!(a.len(), 50);
    }

    #[test]
    fn limits_are_enforced() {
        let w = ArmToolWorld::new(500.0, 30.0);
        let e = observe::<ChaCha8Rng>(&w, &[5.0, 0.0, 0.0, 0.0], &[true, true], None);
        assert!(matches!(e, Err(Error::LimitViolation(_))));
    }

    #[test]
    fn unavailable_groups_are_flagged_and_zeroed() {
        let w = ArmToolWorld::new(500.0, 30.0);
        let s = observe::<ChaCha8Rng>(&w, &[0.1, 0.2, 0.0, 0.0], &[true, false], None).unwrap();
        assert_eq!(s.available, vec![true, false]);
        assert_eq!(&s.values[4..], &[0.0, 0.0]);
    }
}
