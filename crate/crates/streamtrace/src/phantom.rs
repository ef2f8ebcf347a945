//! Synthetic vector-field phantoms with analytically known geometry. Each
//! phantom provides: the exact direction field, a white-matter mask, a
//! 6-channel feature volume (symmetric outer-product encoding of the local
//! direction, the fiber-orientation stand-in), a wider context volume
//! (features plus distractor channels) for the student, and analytically
//! traced ground-truth streamlines.
//!
//! The encoding is antipodally symmetric (encode(u) == encode(-u)), so a
//! full circle is unlearnable: centrally opposite points present identical
//! features with opposite tangents. The circular bundle is therefore an
//! annular arc sector spanning less than half a turn.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, Streamline};
use crate::metric;
use crate::report::{self, PairStats};
use crate::rng::Xoshiro256StarStar;
use crate::tracts::Tractogram;
use crate::volumes::{Mask, Volume};

pub const FEATURE_CHANNELS: usize = 6;
pub const DISTRACTOR_CHANNELS: usize = 4;
pub const CONTEXT_CHANNELS: usize = FEATURE_CHANNELS + DISTRACTOR_CHANNELS;

/// Symmetric outer-product encoding of a unit direction:
/// (ux*ux, uy*uy, uz*uz, ux*uy, ux*uz, uy*uz).
pub fn encode_direction(u: [f64; 3]) -> [f64; FEATURE_CHANNELS] {
    [
        u[0] * u[0],
        u[1] * u[1],
        u[2] * u[2],
        u[0] * u[1],
        u[0] * u[2],
        u[1] * u[2],
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    Straight,
    Circular,
    Helix,
    CrossingX,
}

fn default_dims() -> [usize; 3] {
    [48, 48, 16]
}
fn default_voxel() -> f64 {
    1.0
}
fn default_bundle_radius() -> f64 {
    2.5
}
fn default_radius() -> f64 {
    16.0
}
fn default_arc() -> f64 {
    120.0
}
fn default_pitch() -> f64 {
    24.0
}
fn default_n_gt() -> usize {
    50
}
fn default_seed() -> u64 {
    7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    #[serde(default = "default_dims")]
    pub dims: [usize; 3],
    #[serde(default = "default_voxel")]
    pub voxel_size: f64,
    /// Half-width of the fiber bundle tube, mm.
    #[serde(default = "default_bundle_radius")]
    pub bundle_radius: f64,
    /// Circle / helix radius, mm.
    #[serde(default = "default_radius")]
    pub radius: f64,
    /// Angular span of the circular arc sector, degrees (< 180).
    #[serde(default = "default_arc")]
    pub arc_degrees: f64,
    /// Helix rise per full turn, mm.
    #[serde(default = "default_pitch")]
    pub pitch: f64,
    /// Additive Gaussian noise on feature and context channels.
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default = "default_n_gt")]
    pub n_ground_truth: usize,
    #[serde(default = "default_seed")]
    pub rng_seed: u64,
}

impl PhantomSpec {
    pub fn new(kind: PhantomKind) -> Self {
        PhantomSpec {
            kind,
            dims: default_dims(),
            voxel_size: default_voxel(),
            bundle_radius: default_bundle_radius(),
            radius: default_radius(),
            arc_degrees: default_arc(),
            pitch: default_pitch(),
            noise_sigma: 0.0,
            n_ground_truth: default_n_gt(),
            rng_seed: default_seed(),
        }
    }

    fn center(&self) -> [f64; 3] {
        [
            (self.dims[0] as f64 - 1.0) / 2.0 * self.voxel_size,
            (self.dims[1] as f64 - 1.0) / 2.0 * self.voxel_size,
            (self.dims[2] as f64 - 1.0) / 2.0 * self.voxel_size,
        ]
    }

    fn extent(&self) -> [f64; 3] {
        [
            (self.dims[0] as f64 - 1.0) * self.voxel_size,
            (self.dims[1] as f64 - 1.0) * self.voxel_size,
            (self.dims[2] as f64 - 1.0) * self.voxel_size,
        ]
    }

    /// Edge margin keeping bundles away from the trilinear boundary.
    fn margin(&self) -> f64 {
        2.0 * self.voxel_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 4) {
            return Err(Error::InvalidPhantom("dims must be at least 4".into()));
        }
        if !(self.voxel_size > 0.0) || !(self.bundle_radius > 0.0) {
            return Err(Error::InvalidPhantom(
                "voxel_size and bundle_radius must be positive".into(),
            ));
        }
        if matches!(self.kind, PhantomKind::Circular)
            && !(self.arc_degrees > 0.0 && self.arc_degrees < 180.0)
        {
            return Err(Error::InvalidPhantom(
                "circular arc must span (0, 180) degrees; the direction encoding \
                 is antipodally symmetric, so a half turn or more is ambiguous"
                    .into(),
            ));
        }
        if matches!(self.kind, PhantomKind::Circular | PhantomKind::Helix) {
            let c = self.center();
            if self.radius + self.bundle_radius + self.margin() > c[0].min(c[1]) {
                return Err(Error::InvalidPhantom(format!(
                    "radius {} + bundle {} does not fit inside dims {:?}",
                    self.radius, self.bundle_radius, self.dims
                )));
            }
        }
        if matches!(self.kind, PhantomKind::Helix) && !(self.pitch > 0.0) {
            return Err(Error::InvalidPhantom("pitch must be positive".into()));
        }
        Ok(())
    }

    /// Analytic unit direction of the bundle at a world point, or None
    /// outside the bundle. In the crossing region of the crossing-X phantom
    /// this reports the first arm; the feature volume carries both.
    pub fn direction(&self, p: &Point3) -> Option<[f64; 3]> {
        let c = self.center();
        let e = self.extent();
        let m = self.margin();
        let br = self.bundle_radius;
        match self.kind {
            PhantomKind::Straight => {
                let dy = p.y - c[1];
                let dz = p.z - c[2];
                if dy * dy + dz * dz <= br * br && p.x >= m && p.x <= e[0] - m {
                    Some([1.0, 0.0, 0.0])
                } else {
                    None
                }
            }
            PhantomKind::Circular => {
                let dx = p.x - c[0];
                let dy = p.y - c[1];
                let r = (dx * dx + dy * dy).sqrt();
                let half = self.arc_degrees.to_radians() / 2.0;
                let theta = dy.atan2(dx);
                if (r - self.radius).abs() <= br
                    && (p.z - c[2]).abs() <= br
                    && theta.abs() <= half
                {
                    Some([-theta.sin(), theta.cos(), 0.0])
                } else {
                    None
                }
            }
            PhantomKind::Helix => {
                let dx = p.x - c[0];
                let dy = p.y - c[1];
                let r = (dx * dx + dy * dy).sqrt();
                if (r - self.radius).abs() <= br && p.z >= m && p.z <= e[2] - m {
                    let theta = dy.atan2(dx);
                    let rise = self.pitch / (2.0 * std::f64::consts::PI);
                    let norm = (self.radius * self.radius + rise * rise).sqrt();
                    Some([
                        -theta.sin() * self.radius / norm,
                        theta.cos() * self.radius / norm,
                        rise / norm,
                    ])
                } else {
                    None
                }
            }
            PhantomKind::CrossingX => {
                let dirs = crossing_arm_dirs();
                for d in dirs {
                    if self.in_crossing_arm(p, d) {
                        return Some(d);
                    }
                }
                None
            }
        }
    }

    fn in_crossing_arm(&self, p: &Point3, dir: [f64; 3]) -> bool {
        let c = self.center();
        let m = self.margin();
        let br = self.bundle_radius;
        let v = [p.x - c[0], p.y - c[1], p.z - c[2]];
        let along = v[0] * dir[0] + v[1] * dir[1];
        let perp = [v[0] - along * dir[0], v[1] - along * dir[1]];
        let half_len = self.extent()[0].min(self.extent()[1]) / 2.0 - m;
        perp[0] * perp[0] + perp[1] * perp[1] <= br * br
            && v[2].abs() <= br
            && along.abs() <= half_len
    }

    /// Feature encoding at a world point: sum of the outer-product encodings
    /// of every bundle population present (zero outside all bundles).
    pub fn features(&self, p: &Point3) -> [f64; FEATURE_CHANNELS] {
        let mut out = [0.0; FEATURE_CHANNELS];
        match self.kind {
            PhantomKind::CrossingX => {
                for d in crossing_arm_dirs() {
                    if self.in_crossing_arm(p, d) {
                        let e = encode_direction(d);
                        for (o, v) in out.iter_mut().zip(e) {
                            *o += v;
                        }
                    }
                }
            }
            _ => {
                if let Some(d) = self.direction(p) {
                    out = encode_direction(d);
                }
            }
        }
        out
    }
}

fn crossing_arm_dirs() -> [[f64; 3]; 2] {
    let s = std::f64::consts::SQRT_2.recip();
    [[s, s, 0.0], [s, -s, 0.0]]
}

/// A built phantom: exact field (via the spec), volumes, and ground truth.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub spec: PhantomSpec,
    pub wm_mask: Mask,
    pub feature_volume: Volume,
    pub context_volume: Volume,
    pub ground_truth: Tractogram,
}

pub fn build(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = Xoshiro256StarStar::seed_from_u64(spec.rng_seed);
    let dims = (spec.dims[0], spec.dims[1], spec.dims[2]);
    let vs = [spec.voxel_size; 3];

    let mut mask_vol = Volume::zeros(dims, 1, vs);
    let mut feature = Volume::zeros(dims, FEATURE_CHANNELS, vs);
    let mut context = Volume::zeros(dims, CONTEXT_CHANNELS, vs);

    let ext = spec.extent();
    for z in 0..dims.2 {
        for y in 0..dims.1 {
            for x in 0..dims.0 {
                let p = Point3::new(
                    x as f64 * spec.voxel_size,
                    y as f64 * spec.voxel_size,
                    z as f64 * spec.voxel_size,
                );
                let f = spec.features(&p);
                let in_bundle = f.iter().any(|&v| v != 0.0);
                if in_bundle {
                    let i = mask_vol.voxel_index(x, y, z);
                    mask_vol.data[i] = 1.0;
                }
                let fb = feature.voxel_index(x, y, z);
                let cb = context.voxel_index(x, y, z);
                for (c, &v) in f.iter().enumerate() {
                    feature.data[fb + c] = (v + spec.noise_sigma * rng.next_normal()) as f32;
                    context.data[cb + c] = (v + spec.noise_sigma * rng.next_normal()) as f32;
                }
                // distractors: smooth gradients, a ripple, and pure noise
                let d = [
                    p.x / ext[0].max(1.0),
                    p.y / ext[1].max(1.0),
                    (2.0 * std::f64::consts::PI * p.z / ext[2].max(1.0)).sin(),
                    rng.next_normal(),
                ];
                for (c, &v) in d.iter().enumerate() {
                    context.data[cb + FEATURE_CHANNELS + c] =
                        (v + spec.noise_sigma * rng.next_normal()) as f32;
                }
            }
        }
    }

    let ground_truth = trace_ground_truth(spec, &mut rng)?;
    Ok(Phantom {
        spec: spec.clone(),
        wm_mask: Mask::new(mask_vol)?,
        feature_volume: feature,
        context_volume: context,
        ground_truth,
    })
}

/// Analytically traced bundle streamlines at 1 mm spacing, used as training
/// labels and as the tracking oracle.
fn trace_ground_truth(spec: &PhantomSpec, rng: &mut Xoshiro256StarStar) -> Result<Tractogram> {
    let c = spec.center();
    let e = spec.extent();
    let m = spec.margin();
    let br = spec.bundle_radius * 0.7; // keep seeds off the tube wall
    let step = 1.0;
    let mut lines = Vec::with_capacity(spec.n_ground_truth);

    for i in 0..spec.n_ground_truth {
        let points: Vec<Point3> = match spec.kind {
            PhantomKind::Straight => {
                let (oy, oz) = disc_sample(rng, br);
                let n = ((e[0] - 2.0 * m) / step).floor() as usize;
                (0..=n)
                    .map(|k| Point3::new(m + k as f64 * step, c[1] + oy, c[2] + oz))
                    .collect()
            }
            PhantomKind::Circular => {
                let (orad, oz) = disc_sample(rng, br);
                let r = spec.radius + orad;
                let half = spec.arc_degrees.to_radians() / 2.0;
                let dtheta = step / r;
                let n = (2.0 * half / dtheta).floor() as usize;
                (0..=n)
                    .map(|k| {
                        let t = -half + k as f64 * dtheta;
                        Point3::new(c[0] + r * t.cos(), c[1] + r * t.sin(), c[2] + oz)
                    })
                    .collect()
            }
            PhantomKind::Helix => {
                let orad = rng.uniform(-br, br);
                let r = spec.radius + orad;
                let t0 = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
                let rise = spec.pitch / (2.0 * std::f64::consts::PI);
                let dtheta = step / (r * r + rise * rise).sqrt();
                let z0 = m;
                let n = (((e[2] - m) - z0) / (rise * dtheta)).floor() as usize;
                (0..=n)
                    .map(|k| {
                        let t = t0 + k as f64 * dtheta;
                        Point3::new(
                            c[0] + r * t.cos(),
                            c[1] + r * t.sin(),
                            z0 + k as f64 * rise * dtheta,
                        )
                    })
                    .collect()
            }
            PhantomKind::CrossingX => {
                let dir = crossing_arm_dirs()[i % 2];
                let (op, oz) = disc_sample(rng, br);
                let perp = [-dir[1], dir[0]];
                let half_len = (e[0].min(e[1]) / 2.0 - m) / std::f64::consts::SQRT_2;
                let n = (2.0 * half_len / step).floor() as usize;
                (0..=n)
                    .map(|k| {
                        let along = -half_len + k as f64 * step;
                        Point3::new(
                            c[0] + along * dir[0] + op * perp[0],
                            c[1] + along * dir[1] + op * perp[1],
                            c[2] + oz,
                        )
                    })
                    .collect()
            }
        };
        if points.len() < 2 {
            return Err(Error::InvalidPhantom(
                "phantom too small to trace ground truth".into(),
            ));
        }
        let seed = points.len() / 2;
        lines.push(Streamline::new(points, seed)?);
    }
    Ok(Tractogram::new(lines))
}

/// Uniform sample from a disc of the given radius, as (a, b) offsets.
fn disc_sample(rng: &mut Xoshiro256StarStar, radius: f64) -> (f64, f64) {
    loop {
        let a = rng.uniform(-radius, radius);
        let b = rng.uniform(-radius, radius);
        if a * a + b * b <= radius * radius {
            return (a, b);
        }
    }
}

/// The phantom's direction field sampled at voxel centers as a 3-channel
/// volume (zero outside the bundle), for field-following tracking.
pub fn field_volume(spec: &PhantomSpec) -> Result<Volume> {
    spec.validate()?;
    let dims = (spec.dims[0], spec.dims[1], spec.dims[2]);
    let mut v = Volume::zeros(dims, 3, [spec.voxel_size; 3]);
    for z in 0..dims.2 {
        for y in 0..dims.1 {
            for x in 0..dims.0 {
                let p = Point3::new(
                    x as f64 * spec.voxel_size,
                    y as f64 * spec.voxel_size,
                    z as f64 * spec.voxel_size,
                );
                if let Some(u) = spec.direction(&p) {
                    let base = v.voxel_index(x, y, z);
                    for c in 0..3 {
                        v.data[base + c] = u[c] as f32;
                    }
                }
            }
        }
    }
    Ok(v)
}

/// Epsilon-ball comparison of a tracked tractogram against the phantom's
/// ground truth (tracked streamlines as queries).
pub fn evaluate_tracking(
    tracked: &Tractogram,
    truth: &Tractogram,
    radius: f64,
    k: usize,
) -> Result<PairStats> {
    let results = metric::compare(tracked, truth, radius, k, None)?;
    report::summarize(&results, report::DEFAULT_BIN_WIDTH_MM)
}
