//! Attribute transforms: quaternion/Euler replacement and the Region Adaptive
//! Hierarchical Transform (RAHT) over the Morton-ordered octree leaves.

use std::f64::consts::{FRAC_PI_2, PI};

use thiserror::Error;

use crate::model::{normalize_quat, GaussianCloud};

pub type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Error, PartialEq)]
pub enum TransformError {
    #[error("non-finite quaternion")]
    NonFinite,
    #[error("expected {expected} values, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("unknown channel id {0}")]
    UnknownChannel(usize),
}

/// Intrinsic roll/pitch/yaw with `R = Rz(psi) Ry(theta) Rx(phi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerAngles {
    pub phi: f64,
    pub theta: f64,
    pub psi: f64,
}

// Below this `1 - |sin(theta)|` the roll and yaw arguments are rounding noise.
const GIMBAL_EPS: f64 = 1e-14;

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

pub fn quat_to_euler(q: [f64; 4]) -> Result<EulerAngles, TransformError> {
    if q.iter().any(|v| !v.is_finite()) {
        return Err(TransformError::NonFinite);
    }
    let [w, x, y, z] = normalize_quat(q);
    let t = 2.0 * (w * y - x * z);
    if t.abs() >= 1.0 - GIMBAL_EPS {
        // pitch at +-90deg: only psi - phi is observable, keep it all in psi
        return Ok(EulerAngles {
            phi: 0.0,
            theta: FRAC_PI_2.copysign(t),
            psi: wrap_angle(2.0 * z.atan2(w)),
        });
    }
    let phi = (2.0 * (w * x + y * z)).atan2(1.0 - 2.0 * (x * x + y * y));
    let theta = -FRAC_PI_2 + 2.0 * (1.0 + t).sqrt().atan2((1.0 - t).sqrt());
    let psi = (2.0 * (w * z + x * y)).atan2(1.0 - 2.0 * (y * y + z * z));
    Ok(EulerAngles { phi, theta, psi })
}

pub fn euler_to_rotation(e: EulerAngles) -> Mat3 {
    let (sp, cp) = e.phi.sin_cos();
    let (st, ct) = e.theta.sin_cos();
    let (ss, cs) = e.psi.sin_cos();
    [
        [ct * cs, -cp * ss + sp * st * cs, sp * ss + cp * st * cs],
        [ct * ss, cp * cs + sp * st * ss, -sp * cs + cp * st * ss],
        [-st, sp * ct, cp * ct],
    ]
}

/// Unit quaternion `(w, x, y, z)` of the same rotation as [`euler_to_rotation`].
pub fn euler_to_quat(e: EulerAngles) -> [f64; 4] {
    let (sp, cp) = (e.phi * 0.5).sin_cos();
    let (st, ct) = (e.theta * 0.5).sin_cos();
    let (ss, cs) = (e.psi * 0.5).sin_cos();
    [
        cp * ct * cs + sp * st * ss,
        sp * ct * cs - cp * st * ss,
        cp * st * cs + sp * ct * ss,
        cp * ct * ss - sp * st * cs,
    ]
}

pub fn quat_to_rotation(q: [f64; 4]) -> Mat3 {
    let [w, x, y, z] = normalize_quat(q);
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

#[derive(Debug, Clone, Copy)]
enum RahtOp {
    Pass,
    Merge { w1: f64, w2: f64 },
}

/// Butterfly schedule of the transform, derived from the leaf keys alone so the
/// decoder can rebuild it from the octree.
#[derive(Debug, Clone)]
pub struct RahtPlan {
    leaf_count: usize,
    /// One entry per binary merge step that merges at least one pair.
    steps: Vec<Vec<RahtOp>>,
}

impl RahtPlan {
    /// `keys` must be strictly ascending Morton keys of a depth-`depth` grid.
    /// Merges run along x, y, z of the finest level, then the next level up.
    pub fn new(keys: &[u64], depth: u8) -> Self {
        let mut nodes: Vec<(u64, f64)> = keys.iter().map(|&k| (k, 1.0)).collect();
        let mut steps = Vec::new();
        for _ in 0..3 * depth as u32 {
            let mut ops = Vec::with_capacity(nodes.len());
            let mut next = Vec::with_capacity(nodes.len());
            let mut merged_any = false;
            let mut i = 0;
            while i < nodes.len() {
                let (k, w) = nodes[i];
                if k & 1 == 0 && i + 1 < nodes.len() && nodes[i + 1].0 == k + 1 {
                    let w2 = nodes[i + 1].1;
                    ops.push(RahtOp::Merge { w1: w, w2 });
                    next.push((k >> 1, w + w2));
                    merged_any = true;
                    i += 2;
                } else {
                    ops.push(RahtOp::Pass);
                    next.push((k >> 1, w));
                    i += 1;
                }
            }
            if merged_any {
                steps.push(ops);
            }
            nodes = next;
        }
        Self {
            leaf_count: keys.len(),
            steps,
        }
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_count
    }

    pub fn ac_count(&self) -> usize {
        self.leaf_count.saturating_sub(1)
    }

    pub fn forward(&self, values: &[f64]) -> Result<RahtCoefficients, TransformError> {
        if values.len() != self.leaf_count {
            return Err(TransformError::LengthMismatch {
                expected: self.leaf_count,
                actual: values.len(),
            });
        }
        if values.is_empty() {
            return Ok(RahtCoefficients {
                dc: 0.0,
                ac: Vec::new(),
            });
        }
        let mut cur = values.to_vec();
        let mut ac = Vec::with_capacity(self.ac_count());
        for ops in &self.steps {
            let mut next = Vec::with_capacity(ops.len());
            let mut i = 0;
            for op in ops {
                match *op {
                    RahtOp::Pass => {
                        next.push(cur[i]);
                        i += 1;
                    }
                    RahtOp::Merge { w1, w2 } => {
                        let (a1, a2) = (cur[i], cur[i + 1]);
                        let (s1, s2) = (w1.sqrt(), w2.sqrt());
                        let norm = (w1 + w2).sqrt();
                        next.push((s1 * a1 + s2 * a2) / norm);
                        ac.push((-s2 * a1 + s1 * a2) / norm);
                        i += 2;
                    }
                }
            }
            cur = next;
        }
        debug_assert_eq!(cur.len(), 1);
        Ok(RahtCoefficients { dc: cur[0], ac })
    }

    pub fn inverse(&self, coeffs: &RahtCoefficients) -> Result<Vec<f64>, TransformError> {
        if coeffs.ac.len() != self.ac_count() {
            return Err(TransformError::LengthMismatch {
                expected: self.ac_count(),
                actual: coeffs.ac.len(),
            });
        }
        if self.leaf_count == 0 {
            return Ok(Vec::new());
        }
        let mut cur = vec![coeffs.dc];
        let mut ac_end = coeffs.ac.len();
        for ops in self.steps.iter().rev() {
            let merges = ops.iter().filter(|op| matches!(op, RahtOp::Merge { .. })).count();
            let step_ac = &coeffs.ac[ac_end - merges..ac_end];
            ac_end -= merges;
            let mut prev = Vec::with_capacity(ops.len() + merges);
            let mut m = 0;
            for (op, &v) in ops.iter().zip(&cur) {
                match *op {
                    RahtOp::Pass => prev.push(v),
                    RahtOp::Merge { w1, w2 } => {
                        let (s1, s2) = (w1.sqrt(), w2.sqrt());
                        let norm = (w1 + w2).sqrt();
                        let h = step_ac[m];
                        m += 1;
                        prev.push((s1 * v - s2 * h) / norm);
                        prev.push((s2 * v + s1 * h) / norm);
                    }
                }
            }
            cur = prev;
        }
        Ok(cur)
    }
}

/// One channel after RAHT: a DC term and `M - 1` AC terms in step-major,
/// Morton-minor order.
#[derive(Debug, Clone, PartialEq)]
pub struct RahtCoefficients {
    pub dc: f64,
    pub ac: Vec<f64>,
}

pub fn raht_forward(values: &[f64], keys: &[u64], depth: u8) -> Result<RahtCoefficients, TransformError> {
    RahtPlan::new(keys, depth).forward(values)
}

pub fn raht_inverse(coeffs: &RahtCoefficients, keys: &[u64], depth: u8) -> Result<Vec<f64>, TransformError> {
    RahtPlan::new(keys, depth).inverse(coeffs)
}

/// The ten "important" attribute channels, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    Opacity,
    Phi,
    Theta,
    Psi,
    LogScale0,
    LogScale1,
    LogScale2,
    ShDc0,
    ShDc1,
    ShDc2,
}

pub const CHANNEL_COUNT: usize = 10;

impl Channel {
    pub const ALL: [Channel; CHANNEL_COUNT] = [
        Channel::Opacity,
        Channel::Phi,
        Channel::Theta,
        Channel::Psi,
        Channel::LogScale0,
        Channel::LogScale1,
        Channel::LogScale2,
        Channel::ShDc0,
        Channel::ShDc1,
        Channel::ShDc2,
    ];

    pub fn from_id(id: usize) -> Result<Self, TransformError> {
        Self::ALL.get(id).copied().ok_or(TransformError::UnknownChannel(id))
    }

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn is_scale(self) -> bool {
        matches!(self, Channel::LogScale0 | Channel::LogScale1 | Channel::LogScale2)
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::Opacity => "opacity",
            Channel::Phi => "euler_phi",
            Channel::Theta => "euler_theta",
            Channel::Psi => "euler_psi",
            Channel::LogScale0 => "log_scale_0",
            Channel::LogScale1 => "log_scale_1",
            Channel::LogScale2 => "log_scale_2",
            Channel::ShDc0 => "sh_dc_0",
            Channel::ShDc1 => "sh_dc_1",
            Channel::ShDc2 => "sh_dc_2",
        }
    }
}

/// Highest channel width at which scale channels skip RAHT.
pub const SCALE_RAW_MAX_BITS: u8 = 8;

/// Per-channel choice of whether RAHT is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformPlan {
    pub raht: [bool; CHANNEL_COUNT],
}

impl TransformPlan {
    pub fn all_raht() -> Self {
        Self {
            raht: [true; CHANNEL_COUNT],
        }
    }

    /// RAHT everywhere except scale channels whose channel-level width is
    /// at most [`SCALE_RAW_MAX_BITS`].
    pub fn from_channel_bits(bits: &[u8; CHANNEL_COUNT]) -> Self {
        let mut raht = [true; CHANNEL_COUNT];
        for ch in Channel::ALL {
            if ch.is_scale() && bits[ch.id()] <= SCALE_RAW_MAX_BITS {
                raht[ch.id()] = false;
            }
        }
        Self { raht }
    }

    pub fn to_mask(self) -> u16 {
        self.raht
            .iter()
            .enumerate()
            .fold(0u16, |m, (i, &r)| if r { m | 1 << i } else { m })
    }

    pub fn from_mask(mask: u16) -> Self {
        Self {
            raht: std::array::from_fn(|i| mask & (1 << i) != 0),
        }
    }
}

/// Raw per-Gaussian values of the ten important channels (Euler angles from
/// normalized quaternions).
pub fn raw_channels(cloud: &GaussianCloud) -> Vec<Vec<f64>> {
    let n = cloud.len();
    let mut ch = vec![Vec::with_capacity(n); CHANNEL_COUNT];
    for i in 0..n {
        let q = cloud.quaternions[i].map(f64::from);
        let e = quat_to_euler(q).expect("finite cloud");
        let s = cloud.log_scales[i];
        let dc = cloud.sh_dc[i];
        let vals = [
            f64::from(cloud.opacity_logits[i]),
            e.phi,
            e.theta,
            e.psi,
            f64::from(s[0]),
            f64::from(s[1]),
            f64::from(s[2]),
            f64::from(dc[0]),
            f64::from(dc[1]),
            f64::from(dc[2]),
        ];
        for (c, v) in ch.iter_mut().zip(vals) {
            c.push(v);
        }
    }
    ch
}

/// Channel stream handed to the quantizer: either RAHT output or raw values.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStream {
    pub channel: Channel,
    pub raht: bool,
    /// DC coefficient, present for transformed channels.
    pub dc: Option<f64>,
    /// AC coefficients for transformed channels, raw values otherwise.
    pub values: Vec<f64>,
}

/// Builds the ten channel streams of a deduplicated, Morton-ordered cloud.
pub fn assemble_channels(cloud: &GaussianCloud, raht: &RahtPlan, plan: &TransformPlan) -> Vec<ChannelStream> {
    raw_channels(cloud)
        .into_iter()
        .zip(Channel::ALL)
        .map(|(values, channel)| stream_for(channel, values, raht, plan.raht[channel.id()]))
        .collect()
}

pub(crate) fn stream_for(channel: Channel, values: Vec<f64>, raht: &RahtPlan, transform: bool) -> ChannelStream {
    if transform {
        let c = raht.forward(&values).expect("one value per leaf");
        ChannelStream {
            channel,
            raht: true,
            dc: Some(c.dc),
            values: c.ac,
        }
    } else {
        ChannelStream {
            channel,
            raht: false,
            dc: None,
            values,
        }
    }
}

/// Inverse of [`stream_for`].
pub fn restore_channel(stream: &ChannelStream, raht: &RahtPlan) -> Result<Vec<f64>, TransformError> {
    if stream.raht {
        raht.inverse(&RahtCoefficients {
            dc: stream.dc.unwrap_or(0.0),
            ac: stream.values.clone(),
        })
    } else if stream.values.len() != raht.leaf_count() {
        Err(TransformError::LengthMismatch {
            expected: raht.leaf_count(),
            actual: stream.values.len(),
        })
    } else {
        Ok(stream.values.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn frob(a: &Mat3, b: &Mat3) -> f64 {
        let mut s = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                s += (a[i][j] - b[i][j]).powi(2);
            }
        }
        s.sqrt()
    }

    #[test]
    fn identity_quaternion() {
        let e = quat_to_euler([1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!((e.phi, e.theta, e.psi), (0.0, 0.0, 0.0));
        let r = euler_to_rotation(e);
        assert!(frob(&r, &quat_to_rotation([1.0, 0.0, 0.0, 0.0])) < 1e-15);
    }

    #[test]
    fn yaw_quarter_turn() {
        let q = [FRAC_1_SQRT_2, 0.0, 0.0, FRAC_1_SQRT_2];
        let e = quat_to_euler(q).unwrap();
        assert!(e.phi.abs() < 1e-12 && e.theta.abs() < 1e-12);
        assert!((e.psi - FRAC_PI_2).abs() < 1e-12);
        let expected = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(frob(&euler_to_rotation(e), &expected) < 1e-12);
        assert!(frob(&quat_to_rotation(q), &expected) < 1e-12);
    }

    #[test]
    fn gimbal_points() {
        for sign in [1.0, -1.0] {
            // pitch of +-90deg combined with a roll
            let e0 = EulerAngles {
                phi: 0.4,
                theta: sign * FRAC_PI_2,
                psi: -1.1,
            };
            let q = euler_to_quat(e0);
            let e = quat_to_euler(q).unwrap();
            assert_eq!(e.theta, sign * FRAC_PI_2);
            assert_eq!(e.phi, 0.0);
            assert!(e.psi.is_finite());
            assert!(frob(&euler_to_rotation(e), &quat_to_rotation(q)) < 1e-9);
        }
    }

    #[test]
    fn euler_quat_round_trip() {
        let e = EulerAngles {
            phi: 0.3,
            theta: -0.7,
            psi: 2.9,
        };
        let back = quat_to_euler(euler_to_quat(e)).unwrap();
        assert!((back.phi - e.phi).abs() < 1e-12);
        assert!((back.theta - e.theta).abs() < 1e-12);
        assert!((back.psi - e.psi).abs() < 1e-12);
    }

    #[test]
    fn nan_quaternion_rejected() {
        assert_eq!(
            quat_to_euler([f64::NAN, 0.0, 0.0, 0.0]),
            Err(TransformError::NonFinite)
        );
    }

    #[test]
    fn constant_sibling_pair() {
        let c = raht_forward(&[3.0, 3.0], &[0, 1], 1).unwrap();
        assert!((c.dc - 2f64.sqrt() * 3.0).abs() < 1e-15);
        assert_eq!(c.ac, vec![0.0]);
    }

    #[test]
    fn three_node_layout() {
        // a0 at (x0, y0), a1 at (x0, y1), a2 at (x1, y1): a1/a2 merge along x,
        // then a0 merges with their DC along y.
        let (a0, a1, a2) = (1.5, -2.0, 4.0);
        let c = raht_forward(&[a0, a1, a2], &[0, 2, 3], 1).unwrap();
        let d1 = (a1 + a2) / 2f64.sqrt();
        let ac1 = (a2 - a1) / 2f64.sqrt();
        let dc2 = (a0 + 2f64.sqrt() * d1) / 3f64.sqrt();
        let ac2 = (-2f64.sqrt() * a0 + d1) / 3f64.sqrt();
        assert!((c.ac[0] - ac1).abs() < 1e-14);
        assert!((c.ac[1] - ac2).abs() < 1e-14);
        assert!((c.dc - dc2).abs() < 1e-14);
        let back = raht_inverse(&c, &[0, 2, 3], 1).unwrap();
        for (b, a) in back.iter().zip([a0, a1, a2]) {
            assert!((b - a).abs() < 1e-14);
        }
    }

    #[test]
    fn constant_channel_has_zero_ac() {
        let keys: Vec<u64> = (0..40).map(|i| i * 7 + (i % 3)).collect();
        let c = raht_forward(&vec![0.25; keys.len()], &keys, 4).unwrap();
        assert!(c.ac.iter().all(|&a| a.abs() < 1e-12));
        assert!((c.dc - (keys.len() as f64).sqrt() * 0.25).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch() {
        let plan = RahtPlan::new(&[0, 1, 5], 1);
        assert!(plan.forward(&[1.0]).is_err());
        assert!(plan
            .inverse(&RahtCoefficients {
                dc: 0.0,
                ac: vec![0.0]
            })
            .is_err());
    }

    #[test]
    fn single_leaf() {
        let plan = RahtPlan::new(&[5], 3);
        let c = plan.forward(&[2.5]).unwrap();
        assert_eq!(c, RahtCoefficients { dc: 2.5, ac: vec![] });
        assert_eq!(plan.inverse(&c).unwrap(), vec![2.5]);
    }

    #[test]
    fn plan_masks() {
        let mut bits = [16u8; CHANNEL_COUNT];
        bits[Channel::LogScale1.id()] = 8;
        let plan = TransformPlan::from_channel_bits(&bits);
        assert!(!plan.raht[Channel::LogScale1.id()]);
        assert!(plan.raht[Channel::LogScale0.id()]);
        assert_eq!(TransformPlan::from_mask(plan.to_mask()), plan);
        assert_eq!(Channel::ALL.len(), 10);
        assert!(Channel::from_id(10).is_err());
    }

    #[test]
    fn raw_scale_channels_pass_through() {
        let mut cloud = GaussianCloud::zeros(3, 0);
        cloud.log_scales = vec![[-1.0, -2.0, -3.0], [0.5, 0.25, 0.0], [1.0, 2.0, 3.0]];
        cloud.quaternions = vec![[1.0, 0.0, 0.0, 0.0]; 3];
        let keys = [0u64, 1, 7];
        let raht = RahtPlan::new(&keys, 1);
        let mut bits = [16u8; CHANNEL_COUNT];
        bits[4] = 8;
        bits[5] = 4;
        bits[6] = 1;
        let streams = assemble_channels(&cloud, &raht, &TransformPlan::from_channel_bits(&bits));
        assert_eq!(streams.len(), 10);
        for (a, s) in streams[4..7].iter().enumerate() {
            assert!(!s.raht);
            let expect: Vec<f64> = cloud.log_scales.iter().map(|v| f64::from(v[a])).collect();
            assert_eq!(s.values, expect);
        }
        assert!(streams[0].raht && streams[0].values.len() == 2);
    }
}
