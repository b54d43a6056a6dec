use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::World;
use crate::error::{check_len, Error, Result};
use crate::modality::ModalityLayout;

/// Two joints driven by four elastic tendons: `l = l0 - R theta + c f`.
///
/// Commands are `(theta, f)`; the joint torque the tendons balance is
/// `tau_ext = R^T f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TendonArmWorld {
    /// Moment arms in mm, one row per muscle.
    pub moment_arms: [[f64; 2]; 4],
    pub rest_lengths: [f64; 4],
    /// Length change per unit tension, mm/N.
    pub compliance: f64,
    pub joint_limit: f64,
    pub tension_range: [f64; 2],
    /// Noise std per group in raw units (rad, N, mm).
    pub noise_theta: f64,
    pub noise_tension: f64,
    pub noise_length: f64,
    /// Muscle whose length sensor is stuck at `frozen_value`.
    #[serde(default)]
    pub frozen_muscle: Option<usize>,
    #[serde(default)]
    pub frozen_value: f64,
    pub state: String,
}

impl Default for TendonArmWorld {
    fn default() -> Self {
        Self {
            moment_arms: [[12.0, 6.0], [-10.0, -5.0], [7.0, 13.0], [-8.0, -11.0]],
            rest_lengths: [200.0; 4],
            compliance: 0.1,
            joint_limit: 0.8,
            tension_range: [5.0, 50.0],
            noise_theta: 0.002,
            noise_tension: 0.07,
            noise_length: 0.6,
            frozen_muscle: None,
            frozen_value: 0.0,
            state: "tendon".into(),
        }
    }
}

impl TendonArmWorld {
    pub fn r(&self) -> DMatrix<f64> {
        DMatrix::from_fn(4, 2, |i, j| self.moment_arms[i][j])
    }

    pub fn lengths(&self, theta: &[f64], f: &[f64]) -> Result<Vec<f64>> {
        check_len("joint angles", 2, theta.len())?;
        check_len("tensions", 4, f.len())?;
        Ok((0..4)
            .map(|i| {
                self.rest_lengths[i]
                    - self.moment_arms[i][0] * theta[0]
                    - self.moment_arms[i][1] * theta[1]
                    + self.compliance * f[i]
            })
            .collect())
    }

    /// Tensions consistent with `theta` and `l`.
    pub fn tensions_from(&self, theta: &[f64], l: &[f64]) -> Result<Vec<f64>> {
        check_len("joint angles", 2, theta.len())?;
        check_len("lengths", 4, l.len())?;
        Ok((0..4)
            .map(|i| {
                (l[i] - self.rest_lengths[i]
                    + self.moment_arms[i][0] * theta[0]
                    + self.moment_arms[i][1] * theta[1])
                    / self.compliance
            })
            .collect())
    }

    /// Least-squares joint angles consistent with `f` and `l`.
    pub fn angles_from(&self, f: &[f64], l: &[f64]) -> Result<Vec<f64>> {
        check_len("tensions", 4, f.len())?;
        check_len("lengths", 4, l.len())?;
        let r = self.r();
        let rhs = DVector::from_fn(4, |i, _| {
            self.rest_lengths[i] + self.compliance * f[i] - l[i]
        });
        let sol = (r.transpose() * &r)
            .lu()
            .solve(&(r.transpose() * rhs))
            .ok_or_else(|| Error::InvalidConfig("moment arm matrix is rank deficient".into()))?;
        Ok(sol.iter().copied().collect())
    }

    pub fn joint_torque(&self, f: &[f64]) -> Result<Vec<f64>> {
        check_len("tensions", 4, f.len())?;
        Ok((0..2)
            .map(|j| (0..4).map(|i| self.moment_arms[i][j] * f[i]).sum())
            .collect())
    }

    /// Static equilibrium `(theta, f)` for commanded lengths and external torque.
    pub fn equilibrium(&self, l_send: &[f64], tau_ext: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_len("commanded lengths", 4, l_send.len())?;
        check_len("external torque", 2, tau_ext.len())?;
        let mut a = DMatrix::zeros(6, 6);
        let mut b = DVector::zeros(6);
        for i in 0..4 {
            a[(i, 0)] = -self.moment_arms[i][0];
            a[(i, 1)] = -self.moment_arms[i][1];
            a[(i, 2 + i)] = self.compliance;
            b[i] = l_send[i] - self.rest_lengths[i];
        }
        for j in 0..2 {
            for i in 0..4 {
                a[(4 + j, 2 + i)] = self.moment_arms[i][j];
            }
            b[4 + j] = tau_ext[j];
        }
        let x = a
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::InvalidConfig("equilibrium system is singular".into()))?;
        Ok((
            x.rows(0, 2).iter().copied().collect(),
            x.rows(2, 4).iter().copied().collect(),
        ))
    }

    pub fn with_fault(&self, muscle: usize, value: f64) -> Self {
        Self {
            frozen_muscle: Some(muscle),
            frozen_value: value,
            ..self.clone()
        }
    }

    /// Same world with scaled moment arms and shifted rest lengths.
    pub fn perturbed(&self, arm_scale: f64, rest_shift: f64, state: &str) -> Self {
        let mut w = self.clone();
        for row in w.moment_arms.iter_mut() {
            for v in row.iter_mut() {
                *v *= arm_scale;
            }
        }
        for l in w.rest_lengths.iter_mut() {
            *l += rest_shift;
        }
        w.state = state.into();
        w
    }
}

impl World for TendonArmWorld {
    fn layout(&self) -> ModalityLayout {
        ModalityLayout::new([("theta", 2), ("f", 4), ("l", 4)]).expect("static layout")
    }

    fn command_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let [fl, fh] = self.tension_range;
        (
            vec![-self.joint_limit, -self.joint_limit, fl, fl, fl, fl],
            vec![self.joint_limit, self.joint_limit, fh, fh, fh, fh],
        )
    }

    fn state_id(&self) -> String {
        self.state.clone()
    }

    fn observe_clean(&self, command: &[f64]) -> Result<Vec<f64>> {
        check_len("tendon command", 6, command.len())?;
        let mut l = self.lengths(&command[..2], &command[2..])?;
        if let Some(j) = self.frozen_muscle {
            l[j] = self.frozen_value;
        }
        let mut v = command.to_vec();
        v.extend(l);
        Ok(v)
    }

    fn noise_std(&self) -> Vec<f64> {
        let mut v = vec![self.noise_theta; 2];
        v.extend([self.noise_tension; 4]);
        v.extend([self.noise_length; 4]);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_tension_is_pure_geometry() {
        let w = TendonArmWorld::default();
        let l = w.lengths(&[0.3, -0.2], &[0.0; 4]).unwrap();
        for i in 0..4 {
            let expect = 200.0 - w.moment_arms[i][0] * 0.3 + w.moment_arms[i][1] * 0.2;
            assert_eq!(l[i], expect);
        }
    }

    #[test]
    fn any_two_quantities_determine_the_third() {
        let w = TendonArmWorld::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let th = [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)];
            let f: Vec<f64> = (0..4).map(|_| rng.random_range(5.0..50.0)).collect();
            let l = w.lengths(&th, &f).unwrap();
            let f2 = w.tensions_from(&th, &l).unwrap();
            let th2 = w.angles_from(&f, &l).unwrap();
            for i in 0..4 {
                assert!((f2[i] - f[i]).abs() < 1e-9);
            }
            for j in 0..2 {
                assert!((th2[j] - th[j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn equilibrium_recovers_the_generating_state() {
        let w = TendonArmWorld::default();
        let th = [0.25, -0.4];
        let f = [12.0, 30.0, 22.0, 41.0];
        let l = w.lengths(&th, &f).unwrap();
        let tau = w.joint_torque(&f).unwrap();
        let (th2, f2) = w.equilibrium(&l, &tau).unwrap();
        for j in 0..2 {
            assert!((th2[j] - th[j]).abs() < 1e-9);
        }
        for i in 0..4 {
            assert!((f2[i] - f[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn frozen_sensor_reports_constant() {
        let w = TendonArmWorld::default().with_fault(2, 190.0);
        let v = w
            .observe_clean(&[0.1, 0.1, 10.0, 10.0, 10.0, 10.0])
            .unwrap();
        assert_eq!(v[8], 190.0);
    }
}
