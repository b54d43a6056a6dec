use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::World;
use crate::error::{check_len, Error, Result};
use crate::modality::ModalityLayout;

const G: f64 = 9.81;

/// Small humanoid standing on one ankle joint and holding a stick in one
/// hand. Every joint yields under gravity by `compliance` rad per N m, so
/// realized angles differ from commanded ones.
///
/// Command order: shoulder pitch, shoulder yaw, elbow pitch, ankle pitch.
/// Lengths in mm, masses in kg. The body frame has x forward, y left, z up
/// with the origin at the ankle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BipedWorld {
    pub tool_mass: f64,
    pub tool_length: f64,
    pub body_mass: f64,
    pub body_com: [f64; 3],
    pub shoulder: [f64; 3],
    pub upper_arm: f64,
    pub forearm: f64,
    pub segment_mass: f64,
    /// rad per N m (30 deg per N m by default).
    pub compliance: f64,
    pub camera: [f64; 3],
    pub focal: f64,
    pub lower: [f64; 4],
    pub upper: [f64; 4],
    /// Noise std as a fraction of each group's nominal spread.
    pub noise: f64,
}

impl Default for BipedWorld {
    fn default() -> Self {
        Self {
            tool_mass: 0.08,
            tool_length: 176.0,
            body_mass: 0.6,
            body_com: [0.0, 0.0, 120.0],
            shoulder: [0.0, -40.0, 200.0],
            upper_arm: 60.0,
            forearm: 60.0,
            segment_mass: 0.03,
            compliance: 30f64.to_radians(),
            camera: [600.0, 0.0, 100.0],
            focal: 500.0,
            lower: [-1.6, -0.5, -1.2, -0.25],
            upper: [0.0, 0.5, 0.0, 0.25],
            noise: 0.005,
        }
    }
}

/// Positions of the mass points and joint frames for realized angles.
struct Pose {
    joint_origin: [Vector3<f64>; 4],
    joint_axis: [Vector3<f64>; 4],
    /// (position, mass, depth): 0 body, 1 upper arm, 2 forearm and tool.
    masses: Vec<(Vector3<f64>, f64, usize)>,
    tip: Vector3<f64>,
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn com(pose: &Pose) -> Vector3<f64> {
    let mut s = Vector3::zeros();
    let mut m = 0.0;
    for (p, mass, _) in &pose.masses {
        s += p * *mass;
        m += mass;
    }
    s / m
}

impl BipedWorld {
    pub fn new(tool_mass_g: f64, tool_length: f64) -> Self {
        Self {
            tool_mass: tool_mass_g / 1000.0,
            tool_length,
            ..Self::default()
        }
    }

    pub fn with_tool(&self, tool_mass_g: f64, tool_length: f64) -> Self {
        Self {
            tool_mass: tool_mass_g / 1000.0,
            tool_length,
            ..self.clone()
        }
    }

    /// Mass (g) x length (mm) grid of tool states.
    pub fn tool_grid() -> Vec<(f64, f64)> {
        let mut v = Vec::new();
        for m in [40.0, 80.0, 120.0] {
            for l in [176.0, 236.0] {
                v.push((m, l));
            }
        }
        v
    }

    pub fn state_label(tool_mass_g: f64, tool_length: f64) -> String {
        format!("m{tool_mass_g}_l{tool_length}")
    }

    fn pose(&self, q: &[f64]) -> Pose {
        let (sp, sy, el, an) = (q[0], q[1], q[2], q[3]);
        let ra = rot_y(an);
        let body = ra * Vector3::from(self.body_com);
        let sh = ra * Vector3::from(self.shoulder);
        let ryaw = ra * rot_z(sy);
        let rs = ryaw * rot_y(sp);
        let elbow = sh + rs * Vector3::new(0.0, 0.0, -self.upper_arm);
        let re = rs * rot_y(el);
        let wrist = elbow + re * Vector3::new(0.0, 0.0, -self.forearm);
        let tool_dir = re * Vector3::x();
        let tip = wrist + tool_dir * self.tool_length;
        Pose {
            joint_origin: [sh, sh, elbow, Vector3::zeros()],
            joint_axis: [
                ryaw * Vector3::y(),
                ra * Vector3::z(),
                rs * Vector3::y(),
                Vector3::y(),
            ],
            masses: vec![
                (body, self.body_mass, 0),
                ((sh + elbow) * 0.5, self.segment_mass, 1),
                ((elbow + wrist) * 0.5, self.segment_mass, 2),
                (
                    wrist + tool_dir * (0.5 * self.tool_length),
                    self.tool_mass,
                    2,
                ),
            ],
            tip,
        }
    }

    /// Gravity torque (N m) about each joint.
    fn gravity_torque(&self, pose: &Pose) -> [f64; 4] {
        let fg = Vector3::new(0.0, 0.0, -G);
        let mut tau = [0.0; 4];
        for (j, t) in tau.iter_mut().enumerate() {
            for (p, m, depth) in &pose.masses {
                let moved = match j {
                    0 | 1 => *depth >= 1,
                    2 => *depth == 2,
                    _ => true,
                };
                if moved {
                    let r = (p - pose.joint_origin[j]) / 1000.0;
                    *t += pose.joint_axis[j].dot(&r.cross(&(fg * *m)));
                }
            }
        }
        tau
    }

    /// Realized angles: `q = command + compliance * tau(q)`, iterated.
    pub fn realized(&self, command: &[f64]) -> Result<Vec<f64>> {
        check_len("biped command", 4, command.len())?;
        let mut q = command.to_vec();
        for _ in 0..100 {
            let tau = self.gravity_torque(&self.pose(&q));
            let next: Vec<f64> = (0..4)
                .map(|j| command[j] + self.compliance * tau[j])
                .collect();
            let res = next
                .iter()
                .zip(&q)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            q = next;
            if res <= 1e-9 {
                return Ok(q);
            }
        }
        Err(Error::InvalidConfig(
            "deflection fixed point did not converge".into(),
        ))
    }

    /// Tool tip in 3D for a command.
    pub fn tool_tip(&self, command: &[f64]) -> Result<[f64; 3]> {
        let q = self.realized(command)?;
        let t = self.pose(&q).tip;
        Ok([t.x, t.y, t.z])
    }

    /// Ground projection of the total center of mass.
    pub fn cog(&self, command: &[f64]) -> Result<[f64; 2]> {
        let q = self.realized(command)?;
        let c = com(&self.pose(&q));
        Ok([c.x, c.y])
    }

    fn project(&self, p: &Vector3<f64>) -> [f64; 2] {
        let depth = self.camera[0] - p.x;
        [
            -self.focal * (p.y - self.camera[1]) / depth,
            self.focal * (p.z - self.camera[2]) / depth,
        ]
    }
}

impl World for BipedWorld {
    fn layout(&self) -> ModalityLayout {
        ModalityLayout::new([("theta", 4), ("x_cog", 2), ("x_tool", 2), ("s_tool", 2)])
            .expect("static layout")
    }

    fn command_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (self.lower.to_vec(), self.upper.to_vec())
    }

    fn state_id(&self) -> String {
        Self::state_label((self.tool_mass * 1000.0).round(), self.tool_length)
    }

    fn observe_clean(&self, command: &[f64]) -> Result<Vec<f64>> {
        let q = self.realized(command)?;
        let pose = self.pose(&q);
        let c = com(&pose);
        let img = self.project(&pose.tip);
        let mut v = command.to_vec();
        v.extend([c.x, c.y, pose.tip.x, pose.tip.z, img[0], img[1]]);
        Ok(v)
    }

    fn noise_std(&self) -> Vec<f64> {
        let n = self.noise;
        let mut v: Vec<f64> = self
            .lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| n * (u - l) / 12f64.sqrt())
            .collect();
        v.extend([n * 10.0, n * 10.0, n * 60.0, n * 60.0, n * 100.0, n * 100.0]);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rigid_kinematics_without_compliance() {
        let w = BipedWorld {
            compliance: 0.0,
            ..BipedWorld::new(80.0, 176.0)
        };
        // arm hanging, elbow straight: tip = shoulder - (0, 0, 120) + (176, 0, 0)
        let tip = w.tool_tip(&[0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((tip[0] - 176.0).abs() < 1e-9);
        assert!((tip[1] + 40.0).abs() < 1e-9);
        assert!((tip[2] - 80.0).abs() < 1e-9);
        assert_eq!(
            w.realized(&[0.1, 0.2, -0.3, 0.05]).unwrap(),
            vec![0.1, 0.2, -0.3, 0.05]
        );
    }

    #[test]
    fn deflection_solves_the_fixed_point() {
        let w = BipedWorld::new(120.0, 236.0);
        let cmd = [-1.0, 0.2, -0.6, 0.1];
        let q = w.realized(&cmd).unwrap();
        let tau = w.gravity_torque(&w.pose(&q));
        for j in 0..4 {
            assert!((q[j] - cmd[j] - w.compliance * tau[j]).abs() < 1e-8);
        }
        assert!((q[0] - cmd[0]).abs() > 1e-3);
    }

    #[test]
    fn heavier_tool_sags_and_pulls_the_cog() {
        for cmd in [
            [-1.2, 0.0, -0.5, 0.0],
            [-0.8, 0.3, -0.9, 0.1],
            [-1.5, -0.2, -0.2, -0.1],
        ] {
            let mut prev: Option<([f64; 3], [f64; 2])> = None;
            for m in [40.0, 80.0, 120.0] {
                let w = BipedWorld::new(m, 236.0);
                let tip = w.tool_tip(&cmd).unwrap();
                let cog = w.cog(&cmd).unwrap();
                if let Some((pt, pc)) = prev {
                    assert!(tip[2] < pt[2], "tip did not sag: {tip:?} vs {pt:?}");
                    assert!(
                        cog[0] > pc[0],
                        "cog did not move forward: {cog:?} vs {pc:?}"
                    );
                }
                prev = Some((tip, cog));
            }
        }
    }
}
