//! Degree-3 real spherical harmonics in the layout used by Gaussian-splatting
//! PLY files: 16 basis functions, Condon–Shortley phase, colors offset by 0.5
//! and clamped at zero.

use nalgebra::Vector3;

pub const SH_BASIS_LEN: usize = 16;

/// `[basis][channel]` coefficient table for one particle.
pub type ShCoeffs = [[f64; 3]; SH_BASIS_LEN];

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Color offset added to the SH reconstruction before clamping.
pub const SH_DC_OFFSET: f64 = 0.5;

pub fn sh_basis(dir: &Vector3<f64>) -> [f64; SH_BASIS_LEN] {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    [
        SH_C0,
        -SH_C1 * y,
        SH_C1 * z,
        -SH_C1 * x,
        SH_C2[0] * xy,
        SH_C2[1] * yz,
        SH_C2[2] * (2.0 * zz - xx - yy),
        SH_C2[3] * xz,
        SH_C2[4] * (xx - yy),
        SH_C3[0] * y * (3.0 * xx - yy),
        SH_C3[1] * xy * z,
        SH_C3[2] * y * (4.0 * zz - xx - yy),
        SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
        SH_C3[4] * x * (4.0 * zz - xx - yy),
        SH_C3[5] * z * (xx - yy),
        SH_C3[6] * x * (xx - 3.0 * yy),
    ]
}

/// Partial derivatives of every basis polynomial with respect to `(x, y, z)`.
pub fn sh_basis_jacobian(dir: &Vector3<f64>) -> [[f64; 3]; SH_BASIS_LEN] {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        [0.0, 0.0, 0.0],
        [0.0, -SH_C1, 0.0],
        [0.0, 0.0, SH_C1],
        [-SH_C1, 0.0, 0.0],
        [SH_C2[0] * y, SH_C2[0] * x, 0.0],
        [0.0, SH_C2[1] * z, SH_C2[1] * y],
        [SH_C2[2] * -2.0 * x, SH_C2[2] * -2.0 * y, SH_C2[2] * 4.0 * z],
        [SH_C2[3] * z, 0.0, SH_C2[3] * x],
        [SH_C2[4] * 2.0 * x, SH_C2[4] * -2.0 * y, 0.0],
        [SH_C3[0] * 6.0 * x * y, SH_C3[0] * (3.0 * xx - 3.0 * yy), 0.0],
        [SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y],
        [
            SH_C3[2] * -2.0 * x * y,
            SH_C3[2] * (4.0 * zz - xx - 3.0 * yy),
            SH_C3[2] * 8.0 * y * z,
        ],
        [
            SH_C3[3] * -6.0 * x * z,
            SH_C3[3] * -6.0 * y * z,
            SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
        ],
        [
            SH_C3[4] * (4.0 * zz - 3.0 * xx - yy),
            SH_C3[4] * -2.0 * x * y,
            SH_C3[4] * 8.0 * x * z,
        ],
        [SH_C3[5] * 2.0 * x * z, SH_C3[5] * -2.0 * y * z, SH_C3[5] * (xx - yy)],
        [SH_C3[6] * (3.0 * xx - 3.0 * yy), SH_C3[6] * -6.0 * x * y, 0.0],
    ]
}

/// Unclamped per-channel reconstruction including the DC offset.
pub fn sh_reconstruct(coeffs: &ShCoeffs, basis: &[f64; SH_BASIS_LEN]) -> [f64; 3] {
    let mut rgb = [SH_DC_OFFSET; 3];
    for (b, row) in basis.iter().zip(coeffs) {
        for c in 0..3 {
            rgb[c] += b * row[c];
        }
    }
    rgb
}

/// View-dependent color of one particle seen along unit direction `view_dir`.
pub fn sh_eval(coeffs: &ShCoeffs, view_dir: &Vector3<f64>) -> [f64; 3] {
    let rgb = sh_reconstruct(coeffs, &sh_basis(view_dir));
    rgb.map(|v| v.max(0.0))
}

/// DC coefficients that reproduce `rgb` exactly under [`sh_eval`] (for colors
/// that are nonnegative).
pub fn rgb_to_dc(rgb: [f64; 3]) -> [f64; 3] {
    rgb.map(|v| (v - SH_DC_OFFSET) / SH_C0)
}
