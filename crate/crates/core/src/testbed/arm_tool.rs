use serde::{Deserialize, Serialize};

use super::World;
use crate::error::{check_len, Result};
use crate::modality::ModalityLayout;

/// Planar 4-joint arm holding a stick whose tip carries a hanging cloth.
///
/// The stick leaves the hand at `tool_angle_deg` relative to the last link;
/// the observed tool point hangs `droop` mm below the stick tip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArmToolWorld {
    pub links: [f64; 4],
    pub tool_length: f64,
    pub tool_angle_deg: f64,
    pub droop: f64,
    pub joint_limit: f64,
    /// Noise std as a fraction of each group's nominal spread.
    pub noise: f64,
}

impl Default for ArmToolWorld {
    fn default() -> Self {
        Self {
            links: [300.0, 300.0, 200.0, 100.0],
            tool_length: 500.0,
            tool_angle_deg: 30.0,
            droop: 100.0,
            joint_limit: 0.8,
            noise: 0.005,
        }
    }
}

impl ArmToolWorld {
    pub fn new(tool_length: f64, tool_angle_deg: f64) -> Self {
        Self {
            tool_length,
            tool_angle_deg,
            ..Self::default()
        }
    }

    pub fn with_grasp(&self, tool_length: f64, tool_angle_deg: f64) -> Self {
        Self {
            tool_length,
            tool_angle_deg,
            ..self.clone()
        }
    }

    /// The 3 x 3 grid of grasp states.
    pub fn grasp_grid() -> Vec<(f64, f64)> {
        let mut v = Vec::new();
        for l in [300.0, 500.0, 700.0] {
            for phi in [0.0, 30.0, 60.0] {
                v.push((l, phi));
            }
        }
        v
    }

    pub fn state_label(tool_length: f64, tool_angle_deg: f64) -> String {
        format!("l{tool_length}_a{tool_angle_deg}")
    }

    pub fn tool_tip(&self, theta: &[f64]) -> Result<[f64; 2]> {
        check_len("arm joint angles", 4, theta.len())?;
        let (mut x, mut y, mut a) = (0.0, 0.0, 0.0);
        for (l, t) in self.links.iter().zip(theta) {
            a += t;
            x += l * a.cos();
            y += l * a.sin();
        }
        let s = a + self.tool_angle_deg.to_radians();
        Ok([
            x + self.tool_length * s.cos(),
            y + self.tool_length * s.sin() - self.droop,
        ])
    }
}

impl World for ArmToolWorld {
    fn layout(&self) -> ModalityLayout {
        ModalityLayout::new([("theta", 4), ("x_tool", 2)]).expect("static layout")
    }

    fn command_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![-self.joint_limit; 4], vec![self.joint_limit; 4])
    }

    fn state_id(&self) -> String {
        Self::state_label(self.tool_length, self.tool_angle_deg)
    }

    fn observe_clean(&self, command: &[f64]) -> Result<Vec<f64>> {
        let tip = self.tool_tip(command)?;
        let mut v = command.to_vec();
        v.extend(tip);
        Ok(v)
    }

    fn noise_std(&self) -> Vec<f64> {
        let theta = self.noise * self.joint_limit / 3f64.sqrt();
        let tip = self.noise * 200.0;
        vec![theta, theta, theta, theta, tip, tip]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_pose_closed_form() {
        for (l, phi) in ArmToolWorld::grasp_grid() {
            let w = ArmToolWorld::new(l, phi);
            let tip = w.tool_tip(&[0.0; 4]).unwrap();
            let p = phi.to_radians();
            assert!((tip[0] - (900.0 + l * p.cos())).abs() < 1e-9);
            assert!((tip[1] - (l * p.sin() - 100.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn first_joint_rotates_everything_but_the_droop() {
        let w = ArmToolWorld::new(300.0, 0.0);
        let tip = w
            .tool_tip(&[std::f64::consts::FRAC_PI_2, 0.0, 0.0, 0.0])
            .unwrap();
        assert!((tip[0] - 0.0).abs() < 1e-9);
        assert!((tip[1] - (1200.0 - 100.0)).abs() < 1e-9);
    }
}
