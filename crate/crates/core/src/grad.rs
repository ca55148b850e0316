//! Per-particle gradient containers.

use nalgebra::Vector3;

use crate::sh::ShCoeffs;

/// Gradient of a scalar objective with respect to one particle's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleGrad {
    pub position: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub sh: ShCoeffs,
}

/// Number of scalar parameters per particle.
pub const PARAMS_PER_PARTICLE: usize = 3 + 3 + 4 + 1 + 48;

impl Default for ParticleGrad {
    fn default() -> Self {
        Self {
            position: Vector3::zeros(),
            log_scale: Vector3::zeros(),
            rotation: [0.0; 4],
            opacity_logit: 0.0,
            sh: [[0.0; 3]; 16],
        }
    }
}

impl ParticleGrad {
    pub fn add_assign(&mut self, o: &ParticleGrad) {
        self.position += o.position;
        self.log_scale += o.log_scale;
        for i in 0..4 {
            self.rotation[i] += o.rotation[i];
        }
        self.opacity_logit += o.opacity_logit;
        for (a, b) in self.sh.iter_mut().zip(&o.sh) {
            for c in 0..3 {
                a[c] += b[c];
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.position *= s;
        self.log_scale *= s;
        self.rotation = self.rotation.map(|v| v * s);
        self.opacity_logit *= s;
        for row in &mut self.sh {
            *row = row.map(|v| v * s);
        }
    }

    /// Zero everything except the SH coefficients.
    pub fn keep_sh_only(&mut self) {
        let sh = self.sh;
        *self = ParticleGrad { sh, ..Default::default() };
    }

    /// Flat view in the order position, log_scale, rotation, opacity, sh.
    pub fn to_flat(&self) -> [f64; PARAMS_PER_PARTICLE] {
        let mut out = [0.0; PARAMS_PER_PARTICLE];
        out[0..3].copy_from_slice(self.position.as_slice());
        out[3..6].copy_from_slice(self.log_scale.as_slice());
        out[6..10].copy_from_slice(&self.rotation);
        out[10] = self.opacity_logit;
        for (k, row) in self.sh.iter().enumerate() {
            out[11 + 3 * k..14 + 3 * k].copy_from_slice(row);
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.to_flat().iter().all(|&v| v == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}

/// Gradients for a whole scene, plus the screen-space mean gradient that the
/// densification heuristic tracks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParticleGrads {
    pub particles: Vec<ParticleGrad>,
    /// d objective / d projected mean, pixels, summed over the views that
    /// contributed.
    pub screen: Vec<[f64; 2]>,
}

impl ParticleGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            particles: vec![ParticleGrad::default(); n],
            screen: vec![[0.0; 2]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn add_assign(&mut self, other: &ParticleGrads) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.particles.iter_mut().zip(&other.particles) {
            a.add_assign(b);
        }
        for (a, b) in self.screen.iter_mut().zip(&other.screen) {
            a[0] += b[0];
            a[1] += b[1];
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.particles {
            g.scale(s);
        }
        for g in &mut self.screen {
            *g = g.map(|v| v * s);
        }
    }

    pub fn zero_particle(&mut self, i: usize) {
        self.particles[i] = ParticleGrad::default();
        self.screen[i] = [0.0; 2];
    }

    pub fn is_zero(&self) -> bool {
        self.particles.iter().all(ParticleGrad::is_zero)
    }

    pub fn is_finite(&self) -> bool {
        self.particles.iter().all(ParticleGrad::is_finite)
    }
}
