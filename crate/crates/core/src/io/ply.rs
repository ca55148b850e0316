//! Binary little-endian PLY scenes in the common splatting layout, with an
//! optional trailing `uchar label` property.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::scene::{GaussianParticle, GaussianScene, Label};

/// Higher-order SH coefficients per color channel.
const REST_PER_CHANNEL: usize = 15;

/// Float property names in file order.
pub fn property_names() -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "opacity"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((0..3).map(|i| format!("f_dc_{i}")));
    names.extend((0..3 * REST_PER_CHANNEL).map(|i| format!("f_rest_{i}")));
    names
}

fn float_values(p: &GaussianParticle) -> Vec<f64> {
    let mut v = Vec::with_capacity(59);
    v.extend_from_slice(p.position.as_slice());
    v.extend_from_slice(p.log_scale.as_slice());
    v.extend_from_slice(&p.rotation);
    v.push(p.opacity_logit);
    v.extend_from_slice(&p.sh[0]);
    // f_rest is channel-major: all coefficients of red, then green, then blue.
    for c in 0..3 {
        for k in 1..=REST_PER_CHANNEL {
            v.push(p.sh[k][c]);
        }
    }
    v
}

/// Serializes to bytes. Values are stored as float32.
pub fn scene_to_ply(scene: &GaussianScene) -> Vec<u8> {
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", scene.len()));
    for name in property_names() {
        header.push_str(&format!("property float {name}\n"));
    }
    header.push_str("property uchar label\nend_header\n");
    let mut out = header.into_bytes();
    for p in &scene.particles {
        for v in float_values(p) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.push(u8::from(p.label.is_masked()));
    }
    out
}

pub fn save_scene(scene: &GaussianScene, path: &Path) -> Result<()> {
    std::fs::write(path, scene_to_ply(scene)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_scene(path: &Path) -> Result<GaussianScene> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    scene_from_ply(&bytes, path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Scalar {
    U8,
    I8,
    U16,
    I16,
    U32,
    I32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "uchar" | "uint8" => Scalar::U8,
            "char" | "int8" => Scalar::I8,
            "ushort" | "uint16" => Scalar::U16,
            "short" | "int16" => Scalar::I16,
            "uint" | "uint32" => Scalar::U32,
            "int" | "int32" => Scalar::I32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::U8 | Scalar::I8 => 1,
            Scalar::U16 | Scalar::I16 => 2,
            Scalar::U32 | Scalar::I32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Scalar::U8 => b[0] as f64,
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

/// Parses a PLY byte buffer; `path` only labels errors. Properties are
/// matched by name, so extra ones (normals, say) are skipped and a missing
/// `label` means every particle is Unmasked.
pub fn scene_from_ply(bytes: &[u8], path: &Path) -> Result<GaussianScene> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut pos = 0;
    let mut line_no = 0;
    let next_line = |pos: &mut usize| -> Option<String> {
        let rest = &bytes[*pos..];
        let end = rest.iter().position(|&b| b == b'\n')?;
        *pos += end + 1;
        Some(String::from_utf8_lossy(&rest[..end]).trim_end_matches('\r').to_string())
    };
    let header_line = |pos: &mut usize, line_no: &mut usize| -> Result<String> {
        *line_no += 1;
        next_line(pos).ok_or_else(|| err(*line_no, "header ends before end_header".into()))
    };

    if header_line(&mut pos, &mut line_no)? != "ply" {
        return Err(err(1, "missing 'ply' magic".into()));
    }
    let mut count: Option<usize> = None;
    let mut in_vertex = false;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    let mut saw_format = false;
    loop {
        let line = header_line(&mut pos, &mut line_no)?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["format", "binary_little_endian", "1.0"] => saw_format = true,
            ["format", other, ..] => return Err(err(line_no, format!("unsupported format {other:?}; only binary_little_endian 1.0"))),
            ["element", name, n] => {
                if count.is_some() && *name != "vertex" {
                    return Err(err(line_no, format!("element {name:?} after vertex is not supported")));
                }
                if *name != "vertex" {
                    return Err(err(line_no, format!("unexpected element {name:?} before vertex")));
                }
                let n = n.parse::<usize>().map_err(|_| err(line_no, format!("bad vertex count {n:?}")))?;
                count = Some(n);
                in_vertex = true;
            }
            ["property", "list", ..] => return Err(err(line_no, "list properties are not supported".into())),
            ["property", ty, name] => {
                if !in_vertex {
                    return Err(err(line_no, "property outside the vertex element".into()));
                }
                let ty = Scalar::parse(ty).ok_or_else(|| err(line_no, format!("unknown property type {ty:?}")))?;
                if props.iter().any(|(n, _)| n == name) {
                    return Err(err(line_no, format!("duplicate property {name:?}")));
                }
                props.push((name.to_string(), ty));
            }
            _ => return Err(err(line_no, format!("malformed header line {line:?}"))),
        }
    }
    if !saw_format {
        return Err(err(line_no, "header has no format line".into()));
    }
    let count = count.ok_or_else(|| err(line_no, "header declares no vertex element".into()))?;
    let index: HashMap<&str, usize> = props.iter().enumerate().map(|(i, (n, _))| (n.as_str(), i)).collect();
    let offsets: Vec<usize> = props
        .iter()
        .scan(0, |acc, (_, t)| {
            let o = *acc;
            *acc += t.size();
            Some(o)
        })
        .collect();
    let stride: usize = props.iter().map(|(_, t)| t.size()).sum();
    let required = property_names();
    for name in required.iter().take(14) {
        if !index.contains_key(name.as_str()) {
            return Err(err(line_no, format!("missing required property {name:?}")));
        }
    }
    let rest = (0..3 * REST_PER_CHANNEL).filter(|i| index.contains_key(format!("f_rest_{i}").as_str())).count();
    if rest % 3 != 0 || (0..rest).any(|i| !index.contains_key(format!("f_rest_{i}").as_str())) {
        return Err(err(line_no, format!("f_rest properties must be f_rest_0..f_rest_{{3k-1}}, found {rest}")));
    }
    let rest_per_channel = rest / 3;
    let body = &bytes[pos..];
    let needed = count.checked_mul(stride).ok_or_else(|| err(line_no, "vertex data size overflows".into()))?;
    if body.len() < needed {
        return Err(err(line_no, format!("vertex data truncated: need {needed} bytes, have {}", body.len())));
    }
    let label_slot = index.get("label").copied();
    let mut particles = Vec::with_capacity(count);
    for row in body[..needed].chunks_exact(stride) {
        let get = |name: &str| {
            let i = index[name];
            props[i].1.read(&row[offsets[i]..])
        };
        let mut sh = [[0.0; 3]; 16];
        for (c, slot) in sh[0].iter_mut().enumerate() {
            *slot = get(&format!("f_dc_{c}"));
        }
        for c in 0..3 {
            for k in 0..rest_per_channel {
                sh[k + 1][c] = get(&format!("f_rest_{}", c * rest_per_channel + k));
            }
        }
        let label = match label_slot {
            None => Label::Unmasked,
            Some(i) => match props[i].1.read(&row[offsets[i]..]) {
                v if v == 0.0 => Label::Unmasked,
                v if v == 1.0 => Label::Masked,
                v => return Err(err(line_no, format!("label value {v} is neither 0 nor 1"))),
            },
        };
        particles.push(GaussianParticle {
            position: Vector3::new(get("x"), get("y"), get("z")),
            log_scale: Vector3::new(get("scale_0"), get("scale_1"), get("scale_2")),
            rotation: [get("rot_0"), get("rot_1"), get("rot_2"), get("rot_3")],
            opacity_logit: get("opacity"),
            sh,
            label,
        });
    }
    Ok(GaussianScene::new(particles))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn f32_scene(seed: u64, n: usize) -> GaussianScene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = || rng.gen_range(-2.0f32..2.0) as f64;
        let particles = (0..n)
            .map(|i| {
                let mut sh = [[0.0; 3]; 16];
                for row in &mut sh {
                    *row = [r(), r(), r()];
                }
                GaussianParticle {
                    position: Vector3::new(r(), r(), r()),
                    log_scale: Vector3::new(r(), r(), r()),
                    rotation: [r(), r(), r(), r()],
                    opacity_logit: r(),
                    sh,
                    label: if i % 3 == 0 { Label::Masked } else { Label::Unmasked },
                }
            })
            .collect();
        GaussianScene::new(particles)
    }

    #[test]
    fn round_trip_is_exact() {
        let scene = f32_scene(1, 7);
        let bytes = scene_to_ply(&scene);
        let back = scene_from_ply(&bytes, Path::new("mem.ply")).unwrap();
        assert_eq!(back, scene);
        assert_eq!(scene_to_ply(&back), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = scene_to_ply(&f32_scene(2, 1));
        let text = String::from_utf8_lossy(&bytes);
        let header: Vec<&str> = text.split("end_header").next().unwrap().lines().collect();
        assert_eq!(header[2], "element vertex 1");
        assert_eq!(header[3], "property float x");
        assert_eq!(header[6], "property float scale_0");
        assert_eq!(header[9], "property float rot_0");
        assert_eq!(header[13], "property float opacity");
        assert_eq!(header[14], "property float f_dc_0");
        assert_eq!(header[17], "property float f_rest_0");
        assert_eq!(header[61], "property float f_rest_44");
        assert_eq!(header[62], "property uchar label");
        let body = bytes.len() - (text.find("end_header\n").unwrap() + 11);
        assert_eq!(body, 59 * 4 + 1);
    }

    /// Third-party layout: normals, a different order, no label, degree 0.
    #[test]
    fn foreign_layout_loads_unmasked() {
        let mut header = String::from("ply\nformat binary_little_endian 1.0\ncomment other tool\nelement vertex 2\n");
        let names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"];
        for n in names {
            header.push_str(&format!("property float {n}\n"));
        }
        header.push_str("end_header\n");
        let mut bytes = header.into_bytes();
        for p in 0..2 {
            for i in 0..names.len() {
                bytes.extend_from_slice(&((p * 100 + i) as f32).to_le_bytes());
            }
        }
        let s = scene_from_ply(&bytes, Path::new("foreign.ply")).unwrap();
        assert_eq!(s.len(), 2);
        assert!(s.particles.iter().all(|p| p.label == Label::Unmasked));
        assert_eq!(s.particles[1].position, Vector3::new(100.0, 101.0, 102.0));
        assert_eq!(s.particles[1].sh[0], [106.0, 107.0, 108.0]);
        assert_eq!(s.particles[1].opacity_logit, 109.0);
        assert_eq!(s.particles[1].rotation, [113.0, 114.0, 115.0, 116.0]);
        assert_eq!(s.particles[1].sh[1], [0.0; 3]);
    }

    #[test]
    fn malformed_header_names_the_line() {
        let cases: [(&str, usize); 4] = [
            ("ply\nformat ascii 1.0\nend_header\n", 2),
            ("ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float x\nproperty bogus y\nend_header\n", 5),
            ("ply\nformat binary_little_endian 1.0\nelement vertex two\nend_header\n", 3),
            ("ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float x\nend_header\n", 5),
        ];
        for (text, line) in cases {
            match scene_from_ply(text.as_bytes(), Path::new("bad.ply")) {
                Err(Error::Parse { line: l, path, .. }) => {
                    assert_eq!(l, line, "{text:?}");
                    assert_eq!(path, Path::new("bad.ply"));
                }
                other => panic!("expected a parse error for {text:?}, got {other:?}"),
            }
        }
        let mut bytes = scene_to_ply(&f32_scene(3, 2));
        bytes.truncate(bytes.len() - 5);
        assert!(matches!(scene_from_ply(&bytes, Path::new("t.ply")), Err(Error::Parse { .. })));
    }
}
