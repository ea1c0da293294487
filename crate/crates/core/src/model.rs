//! Gaussian clouds and the binary PLY checkpoint layout used by 3DGS trainers.
//!
//! A cloud stores attributes exactly as the checkpoint does (32-bit floats,
//! log-scales, opacity logits, unnormalized quaternions). Activation into
//! world-space quantities happens on demand through [`GaussianCloud::activate`].

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

/// Coefficient of the degree-0 real spherical harmonic, `1 / (2 sqrt(pi))`.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

/// Number of higher-degree SH coefficients (all three colors) for degree `f`.
pub const fn sh_rest_len(degree: u8) -> usize {
    let f = degree as usize;
    3 * (f + 1) * (f + 1) - 3
}

fn degree_for_rest_len(len: usize) -> Option<u8> {
    (0..=3u8).find(|&f| sh_rest_len(f) == len)
}

#[derive(Debug, Error, PartialEq)]
pub enum PlyError {
    #[error("malformed PLY header: {0}")]
    MalformedHeader(String),
    #[error("unsupported PLY format `{0}` (only binary_little_endian 1.0 is accepted)")]
    UnsupportedFormat(String),
    #[error("missing property {0}")]
    MissingProperty(String),
    #[error("unexpected property {0}")]
    UnexpectedProperty(String),
    #[error("duplicate property {0}")]
    DuplicateProperty(String),
    #[error("property {name} has unsupported type {ty} (expected float)")]
    UnsupportedType { name: String, ty: String },
    #[error("f_rest property count {0} does not match any SH degree 0..=3")]
    BadShCount(usize),
    #[error("element count mismatch: header declares {declared} vertices ({expected} bytes), payload has {actual} bytes")]
    CountMismatch {
        declared: usize,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value in property {property} at vertex {index}")]
    NonFinite { property: String, index: usize },
    #[error("cloud must contain at least one Gaussian")]
    Empty,
}

#[derive(Debug, Error, PartialEq)]
pub enum CloudError {
    #[error("index {index} out of range for cloud of {len} Gaussians")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("inconsistent cloud: {0}")]
    Inconsistent(String),
}

/// A trained 3DGS model in checkpoint (pre-activation) form.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub positions: Vec<[f32; 3]>,
    /// `(w, x, y, z)`, not necessarily unit norm.
    pub quaternions: Vec<[f32; 4]>,
    pub log_scales: Vec<[f32; 3]>,
    pub opacity_logits: Vec<f32>,
    pub sh_dc: Vec<[f32; 3]>,
    /// Row-major `N x D` with `D = sh_rest_len(sh_degree)`, in checkpoint
    /// channel-major order (`f_rest_0..`).
    pub sh_rest: Vec<f32>,
    pub sh_degree: u8,
}

/// One Gaussian with activations applied.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivatedGaussian {
    pub position: [f64; 3],
    pub rotation: [f64; 4],
    pub scale: [f64; 3],
    pub opacity: f64,
    pub sh_dc: [f64; 3],
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Normalizes `(w, x, y, z)`; a zero quaternion maps to the identity.
pub fn normalize_quat(q: [f64; 4]) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if n == 0.0 || !n.is_finite() {
        [1.0, 0.0, 0.0, 0.0]
    } else {
        [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
    }
}

impl GaussianCloud {
    /// A cloud of `n` Gaussians with every attribute zero.
    pub fn zeros(n: usize, sh_degree: u8) -> Self {
        Self {
            positions: vec![[0.0; 3]; n],
            quaternions: vec![[0.0; 4]; n],
            log_scales: vec![[0.0; 3]; n],
            opacity_logits: vec![0.0; n],
            sh_dc: vec![[0.0; 3]; n],
            sh_rest: vec![0.0; n * sh_rest_len(sh_degree)],
            sh_degree,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn rest_dim(&self) -> usize {
        sh_rest_len(self.sh_degree)
    }

    pub fn sh_rest_row(&self, i: usize) -> &[f32] {
        let d = self.rest_dim();
        &self.sh_rest[i * d..(i + 1) * d]
    }

    /// Checks the structural invariants (shared length, SH width, finiteness).
    pub fn validate(&self) -> Result<(), CloudError> {
        let n = self.len();
        if n == 0 {
            return Err(CloudError::Inconsistent("empty cloud".into()));
        }
        if self.sh_degree > 3 {
            return Err(CloudError::Inconsistent(format!(
                "sh degree {} > 3",
                self.sh_degree
            )));
        }
        let lens = [
            self.quaternions.len(),
            self.log_scales.len(),
            self.opacity_logits.len(),
            self.sh_dc.len(),
        ];
        if lens.iter().any(|&l| l != n) || self.sh_rest.len() != n * self.rest_dim() {
            return Err(CloudError::Inconsistent("attribute lengths differ".into()));
        }
        let finite = self.positions.iter().flatten().all(|v| v.is_finite())
            && self.quaternions.iter().flatten().all(|v| v.is_finite())
            && self.log_scales.iter().flatten().all(|v| v.is_finite())
            && self.opacity_logits.iter().all(|v| v.is_finite())
            && self.sh_dc.iter().flatten().all(|v| v.is_finite())
            && self.sh_rest.iter().all(|v| v.is_finite());
        if !finite {
            return Err(CloudError::Inconsistent("non-finite attribute".into()));
        }
        Ok(())
    }

    pub fn activate(&self, index: usize) -> Result<ActivatedGaussian, CloudError> {
        if index >= self.len() {
            return Err(CloudError::IndexOutOfRange {
                index,
                len: self.len(),
            });
        }
        let p = self.positions[index];
        let q = self.quaternions[index];
        let s = self.log_scales[index];
        let dc = self.sh_dc[index];
        Ok(ActivatedGaussian {
            position: p.map(f64::from),
            rotation: normalize_quat(q.map(f64::from)),
            scale: s.map(|v| f64::from(v).exp()),
            opacity: sigmoid(f64::from(self.opacity_logits[index])),
            sh_dc: dc.map(f64::from),
        })
    }

    /// Gathers the Gaussians at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let d = self.rest_dim();
        let mut sh_rest = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            sh_rest.extend_from_slice(self.sh_rest_row(i));
        }
        Self {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            quaternions: indices.iter().map(|&i| self.quaternions[i]).collect(),
            log_scales: indices.iter().map(|&i| self.log_scales[i]).collect(),
            opacity_logits: indices.iter().map(|&i| self.opacity_logits[i]).collect(),
            sh_dc: indices.iter().map(|&i| self.sh_dc[i]).collect(),
            sh_rest,
            sh_degree: self.sh_degree,
        }
    }
}

/// Property names in the order [`save_ply`] writes them. `nx, ny, nz` are
/// emitted as zeros for compatibility with the reference trainer output.
pub fn ply_property_names(sh_degree: u8) -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((0..3).map(|i| format!("f_dc_{i}")));
    names.extend((0..sh_rest_len(sh_degree)).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

const IGNORED_PROPERTIES: [&str; 3] = ["nx", "ny", "nz"];

struct Header {
    vertex_count: usize,
    properties: Vec<String>,
    payload_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, PlyError> {
    const END: &[u8] = b"end_header\n";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| PlyError::MalformedHeader("missing end_header".into()))?;
    let text = std::str::from_utf8(&bytes[..end])
        .map_err(|_| PlyError::MalformedHeader("header is not UTF-8".into()))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(PlyError::MalformedHeader("missing `ply` magic".into()));
    }
    let mut format_seen = false;
    let mut vertex_count = None;
    let mut in_vertex = false;
    let mut properties = Vec::new();
    for line in lines {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", fmt, version] => {
                if *fmt != "binary_little_endian" || *version != "1.0" {
                    return Err(PlyError::UnsupportedFormat(format!("{fmt} {version}")));
                }
                format_seen = true;
            }
            ["format", ..] => return Err(PlyError::MalformedHeader(line.into())),
            ["element", name, count] => {
                if *name != "vertex" {
                    return Err(PlyError::MalformedHeader(format!(
                        "unsupported element `{name}`"
                    )));
                }
                if vertex_count.is_some() {
                    return Err(PlyError::MalformedHeader("duplicate vertex element".into()));
                }
                let n: usize = count
                    .parse()
                    .map_err(|_| PlyError::MalformedHeader(format!("bad count `{count}`")))?;
                vertex_count = Some(n);
                in_vertex = true;
            }
            ["property", ty, name] => {
                if !in_vertex {
                    return Err(PlyError::MalformedHeader(
                        "property before element".into(),
                    ));
                }
                if *ty != "float" && *ty != "float32" {
                    return Err(PlyError::UnsupportedType {
                        name: name.to_string(),
                        ty: ty.to_string(),
                    });
                }
                if properties.iter().any(|p| p == name) {
                    return Err(PlyError::DuplicateProperty(name.to_string()));
                }
                properties.push(name.to_string());
            }
            _ => return Err(PlyError::MalformedHeader(line.into())),
        }
    }
    if !format_seen {
        return Err(PlyError::MalformedHeader("missing format line".into()));
    }
    let vertex_count =
        vertex_count.ok_or_else(|| PlyError::MalformedHeader("missing vertex element".into()))?;
    Ok(Header {
        vertex_count,
        properties,
        payload_offset: end + END.len(),
    })
}

/// Parses a binary little-endian 3DGS PLY. Properties are matched by name;
/// `nx, ny, nz` are accepted and dropped.
pub fn load_ply(bytes: &[u8]) -> Result<GaussianCloud, PlyError> {
    let header = parse_header(bytes)?;
    let rest_count = header
        .properties
        .iter()
        .filter(|p| p.starts_with("f_rest_"))
        .count();
    let sh_degree = degree_for_rest_len(rest_count).ok_or(PlyError::BadShCount(rest_count))?;

    let column: HashMap<&str, usize> = header
        .properties
        .iter()
        .enumerate()
        .map(|(i, p)| (p.as_str(), i))
        .collect();
    let required: Vec<String> = ply_property_names(sh_degree)
        .into_iter()
        .filter(|p| !IGNORED_PROPERTIES.contains(&p.as_str()))
        .collect();
    for name in &required {
        if !column.contains_key(name.as_str()) {
            return Err(PlyError::MissingProperty(name.clone()));
        }
    }
    for name in &header.properties {
        if !required.contains(name) && !IGNORED_PROPERTIES.contains(&name.as_str()) {
            return Err(PlyError::UnexpectedProperty(name.clone()));
        }
    }

    let n = header.vertex_count;
    let stride = header.properties.len() * 4;
    let payload = &bytes[header.payload_offset..];
    let expected = n * stride;
    if payload.len() != expected {
        return Err(PlyError::CountMismatch {
            declared: n,
            expected,
            actual: payload.len(),
        });
    }
    if n == 0 {
        return Err(PlyError::Empty);
    }

    let read = |row: usize, name: &str| -> Result<f32, PlyError> {
        let off = row * stride + column[name] * 4;
        let v = f32::from_le_bytes(payload[off..off + 4].try_into().unwrap());
        if v.is_finite() {
            Ok(v)
        } else {
            Err(PlyError::NonFinite {
                property: name.to_string(),
                index: row,
            })
        }
    };

    let mut cloud = GaussianCloud::zeros(n, sh_degree);
    let d = cloud.rest_dim();
    let rest_names: Vec<String> = (0..d).map(|i| format!("f_rest_{i}")).collect();
    for i in 0..n {
        cloud.positions[i] = [read(i, "x")?, read(i, "y")?, read(i, "z")?];
        cloud.sh_dc[i] = [read(i, "f_dc_0")?, read(i, "f_dc_1")?, read(i, "f_dc_2")?];
        for (k, name) in rest_names.iter().enumerate() {
            cloud.sh_rest[i * d + k] = read(i, name)?;
        }
        cloud.opacity_logits[i] = read(i, "opacity")?;
        cloud.log_scales[i] = [read(i, "scale_0")?, read(i, "scale_1")?, read(i, "scale_2")?];
        cloud.quaternions[i] = [
            read(i, "rot_0")?,
            read(i, "rot_1")?,
            read(i, "rot_2")?,
            read(i, "rot_3")?,
        ];
    }
    Ok(cloud)
}

pub fn save_ply(cloud: &GaussianCloud) -> Vec<u8> {
    let names = ply_property_names(cloud.sh_degree);
    let mut header = String::new();
    header.push_str("ply\nformat binary_little_endian 1.0\n");
    let _ = writeln!(header, "element vertex {}", cloud.len());
    for name in &names {
        let _ = writeln!(header, "property float {name}");
    }
    header.push_str("end_header\n");

    let mut out = header.into_bytes();
    out.reserve(cloud.len() * names.len() * 4);
    let mut push = |v: f32| out.extend_from_slice(&v.to_le_bytes());
    for i in 0..cloud.len() {
        cloud.positions[i].iter().for_each(|&v| push(v));
        (0..3).for_each(|_| push(0.0));
        cloud.sh_dc[i].iter().for_each(|&v| push(v));
        cloud.sh_rest_row(i).iter().for_each(|&v| push(v));
        push(cloud.opacity_logits[i]);
        cloud.log_scales[i].iter().for_each(|&v| push(v));
        cloud.quaternions[i].iter().for_each(|&v| push(v));
    }
    out
}
