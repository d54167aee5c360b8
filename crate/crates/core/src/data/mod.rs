//! Procedural furniture dataset: parametric chairs, tables and lamps built
//! from boxes and cylinders, with exact ground-truth poses, equivalence
//! classes and contact records, plus a versioned binary file format.
//!
//! Each distinct geometry (e.g. "the leg") is sampled once and shared by
//! all of its instances, so interchangeable parts have bitwise-identical
//! canonical clouds. Whole shapes are scaled into a unit bounding box
//! centered at the origin, keeping translation targets inside the
//! network's bounded output range.

use crate::encoding::{cluster_equivalent, EquivalencePartition, EQUIVALENCE_THRESHOLD};
use crate::error::{Error, Result};
use crate::geom::{fps, pca_canonicalize, vec3, PartCloud, Pose, Quat};
use crate::metrics::ContactPair;
use crate::rng::{derive_seed, rng_from_seed};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read as _, Write as _};
use std::path::Path;

/// Shapes with more parts than this are never generated.
pub const MAX_PARTS: usize = 20;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: [u8; 4] = *b"PASM";
/// Surface points drawn per part before farthest-point downsampling.
const OVERSAMPLE: usize = 4;
/// Upper bound on a record length accepted by the reader; anything larger
/// is treated as corruption rather than attempted as an allocation.
const MAX_RECORD_BYTES: u64 = 1 << 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Chair,
    Table,
    Lamp,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Chair, Category::Table, Category::Lamp];

    pub fn name(self) -> &'static str {
        match self {
            Category::Chair => "chair",
            Category::Table => "table",
            Category::Lamp => "lamp",
        }
    }

    fn tag(self) -> u8 {
        match self {
            Category::Chair => 0,
            Category::Table => 1,
            Category::Lamp => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Category> {
        match tag {
            0 => Ok(Category::Chair),
            1 => Ok(Category::Table),
            2 => Ok(Category::Lamp),
            other => Err(Error::InvalidArgument(format!(
                "unknown category tag {other}"
            ))),
        }
    }
}

impl std::str::FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Category> {
        match s {
            "chair" => Ok(Category::Chair),
            "table" => Ok(Category::Table),
            "lamp" => Ok(Category::Lamp),
            other => Err(Error::InvalidArgument(format!("unknown category {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Split> {
        match tag {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split tag {other}"))),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

/// Split assignment as a pure hash of the sample id: 70/10/20.
pub fn split_of(id: u64) -> Split {
    match derive_seed(id, "split", &[]) % 100 {
        0..=69 => Split::Train,
        70..=79 => Split::Val,
        _ => Split::Test,
    }
}

/// What to generate: one furniture category at a fixed point density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub category: Category,
    /// Points per part cloud after farthest-point downsampling.
    pub n_pc: usize,
    pub seed: u64,
}

impl GeneratorSpec {
    fn validate(&self) -> Result<()> {
        if self.n_pc < 8 || self.n_pc > 8192 {
            return Err(Error::InvalidConfig(format!(
                "n_pc must be in 8..=8192, got {}",
                self.n_pc
            )));
        }
        Ok(())
    }
}

/// One shape: canonicalized parts, the poses that assemble them, the
/// equivalence partition and the contact record between touching parts.
#[derive(Debug, Clone, PartialEq)]
pub struct AssemblySample {
    pub id: u64,
    pub category: Category,
    pub split: Split,
    pub parts: Vec<PartCloud>,
    pub gt_poses: Vec<Pose>,
    pub partition: EquivalencePartition,
    pub contacts: Vec<ContactPair>,
}

impl AssemblySample {
    pub fn n_parts(&self) -> usize {
        self.parts.len()
    }

    /// World-space points of part `i` under its ground-truth pose.
    pub fn gt_world(&self, i: usize) -> Vec<[f64; 3]> {
        self.parts[i]
            .points()
            .iter()
            .map(|&p| self.gt_poses[i].apply(p))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Primitive surface sampling

#[derive(Debug, Clone, Copy)]
enum Primitive {
    /// Axis-aligned box centered at the local origin.
    Box { half: [f64; 3] },
    /// Cylinder along local z, centered at the local origin.
    Cylinder { radius: f64, half_h: f64 },
}

/// Uniform surface points, faces chosen in proportion to their area.
fn sample_surface(prim: Primitive, n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let mut pts = Vec::with_capacity(n);
    match prim {
        Primitive::Box { half: h } => {
            // Face pairs normal to x, y, z.
            let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
            let total: f64 = 2.0 * areas.iter().sum::<f64>();
            for _ in 0..n {
                let mut r = rng.gen_range(0.0..total);
                let mut axis = 2;
                for k in 0..3 {
                    if r < 2.0 * areas[k] {
                        axis = k;
                        break;
                    }
                    r -= 2.0 * areas[k];
                }
                let side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                let mut p = [0.0; 3];
                p[axis] = side * h[axis];
                let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                p[u] = rng.gen_range(-h[u]..h[u]);
                p[v] = rng.gen_range(-h[v]..h[v]);
                pts.push(p);
            }
        }
        Primitive::Cylinder { radius, half_h } => {
            let lateral = 2.0 * std::f64::consts::PI * radius * (2.0 * half_h);
            let cap = std::f64::consts::PI * radius * radius;
            let total = lateral + 2.0 * cap;
            for _ in 0..n {
                let r = rng.gen_range(0.0..total);
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                if r < lateral {
                    pts.push([
                        radius * theta.cos(),
                        radius * theta.sin(),
                        rng.gen_range(-half_h..half_h),
                    ]);
                } else {
                    let z = if r - lateral < cap { half_h } else { -half_h };
                    let rs = radius * rng.gen::<f64>().sqrt();
                    pts.push([rs * theta.cos(), rs * theta.sin(), z]);
                }
            }
        }
    }
    pts
}

/// Oversamples a primitive's surface and keeps an even subset by farthest
/// point sampling.
fn sample_part(prim: Primitive, n_pc: usize, seed: u64) -> Result<PartCloud> {
    let mut rng = rng_from_seed(seed);
    let raw = PartCloud::from_points(sample_surface(prim, OVERSAMPLE * n_pc, &mut rng))?;
    let picked = fps(&raw, n_pc, derive_seed(seed, "fps", &[]))?;
    Ok(raw.select(&picked))
}

// ---------------------------------------------------------------------------
// Category blueprints

/// Rigid placement of one geometry instance: `world = rot · local + pos`.
#[derive(Debug, Clone, Copy)]
struct Instance {
    geom: usize,
    rot: Quat,
    pos: [f64; 3],
}

/// A shape before point sampling: geometries, their placements, and the
/// world-space contact point of every touching pair.
struct Blueprint {
    geoms: Vec<Primitive>,
    instances: Vec<Instance>,
    /// `(i, j, world point)` with `i < j`; the point lies on both parts.
    contacts: Vec<(usize, usize, [f64; 3])>,
}

fn upright(geom: usize, pos: [f64; 3]) -> Instance {
    Instance {
        geom,
        rot: Quat::IDENTITY,
        pos,
    }
}

/// Seat on four legs, tilted back rest, zero to two arm rests. The back
/// tilts about the x-aligned line through its bottom-face center, which
/// stays on the seat plane, so that contact is exact at any tilt.
fn chair_blueprint(rng: &mut ChaCha8Rng) -> Blueprint {
    let leg_h = rng.gen_range(0.25..0.45);
    let leg_w = rng.gen_range(0.03..0.07);
    let seat_w = rng.gen_range(0.35..0.55);
    let seat_d = rng.gen_range(0.35..0.55);
    let seat_t = rng.gen_range(0.04..0.08);
    let back_h = rng.gen_range(0.30..0.50);
    let back_t = rng.gen_range(0.03..0.06);
    let tilt = rng.gen_range(0.0..0.15);
    let n_arms: usize = rng.gen_range(0..=2);
    let arm_h = rng.gen_range(0.18..0.28);

    let mut geoms = vec![
        Primitive::Box {
            half: [seat_w / 2.0, seat_d / 2.0, seat_t / 2.0],
        },
        Primitive::Box {
            half: [seat_w / 2.0, back_t / 2.0, back_h / 2.0],
        },
        Primitive::Box {
            half: [leg_w / 2.0, leg_w / 2.0, leg_h / 2.0],
        },
    ];
    let z_top = leg_h + seat_t;
    let mut instances = vec![upright(0, [0.0, 0.0, leg_h + seat_t / 2.0])];
    let mut contacts = Vec::new();

    let pivot = [0.0, -seat_d / 2.0 + back_t / 2.0, z_top];
    let rot = Quat::from_axis_angle([1.0, 0.0, 0.0], tilt);
    instances.push(Instance {
        geom: 1,
        rot,
        pos: vec3::add(pivot, rot.rotate([0.0, 0.0, back_h / 2.0])),
    });
    contacts.push((0, 1, pivot));

    for (sx, sy) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)] {
        let x = sx * (seat_w / 2.0 - leg_w / 2.0);
        let y = sy * (seat_d / 2.0 - leg_w / 2.0);
        let idx = instances.len();
        instances.push(upright(2, [x, y, leg_h / 2.0]));
        contacts.push((0, idx, [x, y, leg_h]));
    }

    if n_arms > 0 {
        geoms.push(Primitive::Box {
            half: [0.025, 0.35 * seat_d, arm_h / 2.0],
        });
        for sx in [-1.0, 1.0].into_iter().take(n_arms) {
            let x = sx * (seat_w / 2.0 - 0.03);
            let idx = instances.len();
            instances.push(upright(3, [x, 0.0, z_top + arm_h / 2.0]));
            contacts.push((0, idx, [x, 0.0, z_top]));
        }
    }

    Blueprint {
        geoms,
        instances,
        contacts,
    }
}

/// Top slab on four legs, optionally braced by two side stretchers whose
/// end faces sit flush against the inner leg faces.
fn table_blueprint(rng: &mut ChaCha8Rng) -> Blueprint {
    let leg_h = rng.gen_range(0.40..0.70);
    let leg_w = rng.gen_range(0.04..0.08);
    let top_w = rng.gen_range(0.60..1.00);
    let top_d = rng.gen_range(0.45..0.80);
    let top_t = rng.gen_range(0.03..0.06);
    let stretchers = rng.gen::<bool>();
    let z_s = rng.gen_range(0.15..0.50) * leg_h;
    let inset = 0.02;

    let mut geoms = vec![
        Primitive::Box {
            half: [top_w / 2.0, top_d / 2.0, top_t / 2.0],
        },
        Primitive::Box {
            half: [leg_w / 2.0, leg_w / 2.0, leg_h / 2.0],
        },
    ];
    let mut instances = vec![upright(0, [0.0, 0.0, leg_h + top_t / 2.0])];
    let mut contacts = Vec::new();

    let x_leg = top_w / 2.0 - leg_w / 2.0 - inset;
    let y_leg = top_d / 2.0 - leg_w / 2.0 - inset;
    for (sx, sy) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)] {
        let (x, y) = (sx * x_leg, sy * y_leg);
        let idx = instances.len();
        instances.push(upright(1, [x, y, leg_h / 2.0]));
        contacts.push((0, idx, [x, y, leg_h]));
    }

    if stretchers {
        let len = 2.0 * y_leg - leg_w;
        let s_w = 0.8 * leg_w;
        geoms.push(Primitive::Box {
            half: [s_w / 2.0, len / 2.0, s_w / 2.0],
        });
        // Legs 1, 2 share the -x side; legs 3, 4 the +x side.
        for (sx, leg_lo, leg_hi) in [(-1.0, 1, 2), (1.0, 3, 4)] {
            let x = sx * x_leg;
            let idx = instances.len();
            instances.push(upright(2, [x, 0.0, z_s]));
            contacts.push((leg_lo, idx, [x, -(y_leg - leg_w / 2.0), z_s]));
            contacts.push((leg_hi, idx, [x, y_leg - leg_w / 2.0, z_s]));
        }
    }

    Blueprint {
        geoms,
        instances,
        contacts,
    }
}

/// Disc base, thin pole, wider shade, stacked coaxially.
fn lamp_blueprint(rng: &mut ChaCha8Rng) -> Blueprint {
    let base_r = rng.gen_range(0.10..0.16);
    let base_h = rng.gen_range(0.02..0.05);
    let pole_r = rng.gen_range(0.012..0.025);
    let pole_h = rng.gen_range(0.35..0.60);
    let shade_r = rng.gen_range(0.08..0.15);
    let shade_h = rng.gen_range(0.10..0.18);

    let geoms = vec![
        Primitive::Cylinder {
            radius: base_r,
            half_h: base_h / 2.0,
        },
        Primitive::Cylinder {
            radius: pole_r,
            half_h: pole_h / 2.0,
        },
        Primitive::Cylinder {
            radius: shade_r,
            half_h: shade_h / 2.0,
        },
    ];
    let instances = vec![
        upright(0, [0.0, 0.0, base_h / 2.0]),
        upright(1, [0.0, 0.0, base_h + pole_h / 2.0]),
        upright(2, [0.0, 0.0, base_h + pole_h + shade_h / 2.0]),
    ];
    let contacts = vec![
        (0, 1, [0.0, 0.0, base_h]),
        (1, 2, [0.0, 0.0, base_h + pole_h]),
    ];

    Blueprint {
        geoms,
        instances,
        contacts,
    }
}

// ---------------------------------------------------------------------------
// Blueprint -> sample

fn quantize(x: f64) -> f64 {
    x as f32 as f64
}

fn quantize3(p: [f64; 3]) -> [f64; 3] {
    [quantize(p[0]), quantize(p[1]), quantize(p[2])]
}

/// Samples surfaces, normalizes the whole shape into a unit box at the
/// origin, canonicalizes each geometry once, and derives poses, contacts
/// and the equivalence partition. Point coordinates are quantized to f32
/// so in-memory samples match their on-disk representation exactly.
fn finalize(bp: &Blueprint, spec: &GeneratorSpec, id: u64) -> Result<AssemblySample> {
    let locals: Vec<PartCloud> = bp
        .geoms
        .iter()
        .enumerate()
        .map(|(g, &prim)| sample_part(prim, spec.n_pc, derive_seed(id, "cloud", &[g as u64])))
        .collect::<Result<_>>()?;

    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for inst in &bp.instances {
        for &p in locals[inst.geom].points() {
            let w = vec3::add(inst.rot.rotate(p), inst.pos);
            for k in 0..3 {
                lo[k] = lo[k].min(w[k]);
                hi[k] = hi[k].max(w[k]);
            }
        }
    }
    let center = vec3::scale(vec3::add(lo, hi), 0.5);
    let max_extent = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
    let s = 1.0 / max_extent;

    // One canonicalization per geometry; instances share the cloud.
    let canon: Vec<(PartCloud, Pose)> = locals
        .iter()
        .map(|cloud| {
            let scaled = PartCloud::from_points(
                cloud.points().iter().map(|&p| vec3::scale(p, s)).collect(),
            )?;
            let (canonical, frame) = pca_canonicalize(&scaled)?;
            let quantized = PartCloud::from_points(
                canonical.points().iter().map(|&p| quantize3(p)).collect(),
            )?;
            Ok((quantized, frame))
        })
        .collect::<Result<_>>()?;

    let mut parts = Vec::with_capacity(bp.instances.len());
    let mut gt_poses = Vec::with_capacity(bp.instances.len());
    for inst in &bp.instances {
        let rigid = Pose::new(inst.rot, vec3::scale(vec3::sub(inst.pos, center), s))?;
        parts.push(canon[inst.geom].0.clone());
        gt_poses.push(rigid.compose(&canon[inst.geom].1));
    }

    let contacts = bp
        .contacts
        .iter()
        .map(|&(i, j, world)| {
            debug_assert!(i < j);
            let p = vec3::scale(vec3::sub(world, center), s);
            ContactPair {
                i,
                j,
                c_ij: quantize3(gt_poses[i].inverse().apply(p)),
                c_ji: quantize3(gt_poses[j].inverse().apply(p)),
            }
        })
        .collect();

    Ok(AssemblySample {
        id,
        category: spec.category,
        split: split_of(id),
        partition: cluster_equivalent(&parts, EQUIVALENCE_THRESHOLD)?,
        parts,
        gt_poses,
        contacts,
    })
}

/// Generates `count` deterministic samples. The same spec always yields
/// bitwise-identical output.
pub fn generate(spec: &GeneratorSpec, count: usize) -> Result<Vec<AssemblySample>> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::InvalidArgument("sample count must be >= 1".into()));
    }
    (0..count as u64)
        .map(|index| {
            let id = derive_seed(spec.seed, "sample", &[u64::from(spec.category.tag()), index]);
            let mut rng = rng_from_seed(derive_seed(id, "blueprint", &[]));
            let bp = match spec.category {
                Category::Chair => chair_blueprint(&mut rng),
                Category::Table => table_blueprint(&mut rng),
                Category::Lamp => lamp_blueprint(&mut rng),
            };
            debug_assert!(bp.instances.len() <= MAX_PARTS);
            finalize(&bp, spec, id)
        })
        .collect()
}

/// Randomly removes parts (each with probability `p`), keeping at least
/// one; the partition is re-clustered and contacts are restricted to
/// surviving pairs and reindexed.
pub fn part_drop(sample: &AssemblySample, p: f64, seed: u64) -> Result<AssemblySample> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "drop probability must be in [0, 1), got {p}"
        )));
    }
    let mut rng = rng_from_seed(derive_seed(seed, "part-drop", &[sample.id]));
    let n = sample.n_parts();
    let keep: Vec<usize> = loop {
        let kept: Vec<usize> = (0..n).filter(|_| rng.gen::<f64>() >= p).collect();
        if !kept.is_empty() {
            break kept;
        }
    };
    let back = {
        let mut map = vec![usize::MAX; n];
        for (new, &old) in keep.iter().enumerate() {
            map[old] = new;
        }
        map
    };
    let parts: Vec<PartCloud> = keep.iter().map(|&i| sample.parts[i].clone()).collect();
    let contacts = sample
        .contacts
        .iter()
        .filter(|c| back[c.i] != usize::MAX && back[c.j] != usize::MAX)
        .map(|c| ContactPair {
            i: back[c.i],
            j: back[c.j],
            ..*c
        })
        .collect();
    Ok(AssemblySample {
        id: sample.id,
        category: sample.category,
        split: sample.split,
        gt_poses: keep.iter().map(|&i| sample.gt_poses[i]).collect(),
        partition: cluster_equivalent(&parts, EQUIVALENCE_THRESHOLD)?,
        parts,
        contacts,
    })
}

// ---------------------------------------------------------------------------
// Binary dataset format
//
// magic "PASM" | version u32 | count u64 | records…
// record: payload_len u64 | payload | fnv1a64(payload)
// payload: id u64 | category u8 | split u8 | n_parts u32 | n_points u32
//          | class id per part u32 | points f32 (n_parts × n_points × 3)
//          | poses f64 (n_parts × 7) | n_contacts u32
//          | contacts (i u32, j u32, c_ij f32×3, c_ji f32×3)
// Poses keep full f64 precision; point coordinates are f32 (they are
// quantized at generation, so no information is lost).

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
    record: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Truncated(format!(
                "record {} payload ends early",
                self.record
            )));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f64::from(f32::from_le_bytes(self.take(4)?.try_into().unwrap())))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn point(&mut self) -> Result<[f64; 3]> {
        Ok([self.f32()?, self.f32()?, self.f32()?])
    }
}

fn encode_sample(sample: &AssemblySample) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&sample.id.to_le_bytes());
    out.push(sample.category.tag());
    out.push(sample.split.tag());
    let n_parts = sample.n_parts();
    let n_points = sample.parts[0].len();
    out.extend_from_slice(&(n_parts as u32).to_le_bytes());
    out.extend_from_slice(&(n_points as u32).to_le_bytes());
    for part in 0..n_parts {
        out.extend_from_slice(&(sample.partition.class_of(part) as u32).to_le_bytes());
    }
    for part in &sample.parts {
        for p in part.points() {
            for &c in p {
                out.extend_from_slice(&(c as f32).to_le_bytes());
            }
        }
    }
    for pose in &sample.gt_poses {
        for c in pose.to_7vec() {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    out.extend_from_slice(&(sample.contacts.len() as u32).to_le_bytes());
    for c in &sample.contacts {
        out.extend_from_slice(&(c.i as u32).to_le_bytes());
        out.extend_from_slice(&(c.j as u32).to_le_bytes());
        for p in [c.c_ij, c.c_ji] {
            for &x in &p {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
    }
    out
}

fn decode_sample(payload: &[u8], record: usize) -> Result<AssemblySample> {
    let mut cur = Cursor {
        buf: payload,
        at: 0,
        record,
    };
    let id = cur.u64()?;
    let category = Category::from_tag(cur.u8()?)?;
    let split = Split::from_tag(cur.u8()?)?;
    let n_parts = cur.u32()? as usize;
    let n_points = cur.u32()? as usize;
    if n_parts == 0 || n_parts > MAX_PARTS {
        return Err(Error::InvalidArgument(format!(
            "record {record}: part count {n_parts} out of range"
        )));
    }
    let class_ids: Vec<usize> = (0..n_parts)
        .map(|_| cur.u32().map(|c| c as usize))
        .collect::<Result<_>>()?;
    let mut classes: Vec<Vec<usize>> = Vec::new();
    for (part, &cls) in class_ids.iter().enumerate() {
        if cls == classes.len() {
            classes.push(vec![part]);
        } else if cls < classes.len() {
            classes[cls].push(part);
        } else {
            return Err(Error::InvalidPartition(format!(
                "class id {cls} skips {} in record {record}",
                classes.len()
            )));
        }
    }
    let partition = EquivalencePartition::new(classes, n_parts)?;

    let mut parts = Vec::with_capacity(n_parts);
    for _ in 0..n_parts {
        let pts: Vec<[f64; 3]> = (0..n_points)
            .map(|_| cur.point())
            .collect::<Result<_>>()?;
        parts.push(PartCloud::from_points(pts)?);
    }
    let mut gt_poses = Vec::with_capacity(n_parts);
    for _ in 0..n_parts {
        let mut v = [0.0; 7];
        for slot in &mut v {
            *slot = cur.f64()?;
        }
        gt_poses.push(Pose::from_stored(&v)?);
    }
    let n_contacts = cur.u32()? as usize;
    let mut contacts = Vec::with_capacity(n_contacts);
    for _ in 0..n_contacts {
        let (i, j) = (cur.u32()? as usize, cur.u32()? as usize);
        if i >= j || j >= n_parts {
            return Err(Error::InvalidArgument(format!(
                "record {record}: contact pair ({i}, {j}) invalid for {n_parts} parts"
            )));
        }
        contacts.push(ContactPair {
            i,
            j,
            c_ij: cur.point()?,
            c_ji: cur.point()?,
        });
    }
    if cur.at != payload.len() {
        return Err(Error::Truncated(format!(
            "record {record} has {} trailing bytes",
            payload.len() - cur.at
        )));
    }
    Ok(AssemblySample {
        id,
        category,
        split,
        parts,
        gt_poses,
        partition,
        contacts,
    })
}

pub fn save_dataset(path: &Path, samples: &[AssemblySample]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(samples.len() as u64).to_le_bytes())?;
    for sample in samples {
        let payload = encode_sample(sample);
        w.write_all(&(payload.len() as u64).to_le_bytes())?;
        w.write_all(&payload)?;
        w.write_all(&fnv1a64(&payload).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<AssemblySample>> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut read_exact = |n: usize, what: &str| -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        r.read_exact(&mut buf)
            .map_err(|_| Error::Truncated(what.to_string()))?;
        Ok(buf)
    };
    if read_exact(4, "magic")? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = u32::from_le_bytes(read_exact(4, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let count = u64::from_le_bytes(read_exact(8, "sample count")?.try_into().unwrap());
    let mut samples = Vec::new();
    for record in 0..count as usize {
        let len =
            u64::from_le_bytes(read_exact(8, &format!("record {record} length"))?.try_into().unwrap());
        if len > MAX_RECORD_BYTES {
            return Err(Error::Truncated(format!(
                "record {record} claims {len} bytes"
            )));
        }
        let payload = read_exact(len as usize, &format!("record {record} payload"))?;
        let stored =
            u64::from_le_bytes(read_exact(8, &format!("record {record} checksum"))?.try_into().unwrap());
        if fnv1a64(&payload) != stored {
            return Err(Error::ChecksumMismatch { record });
        }
        samples.push(decode_sample(&payload, record)?);
    }
    Ok(samples)
}

/// Human-readable sample counts per category and split.
pub fn manifest(samples: &[AssemblySample]) -> String {
    use std::fmt::Write as _;
    let mut out = format!("samples: {}\n", samples.len());
    for category in Category::ALL {
        for split in Split::ALL {
            let count = samples
                .iter()
                .filter(|s| s.category == category && s.split == split)
                .count();
            if count > 0 {
                writeln!(out, "{} {} {}", category.name(), split.name(), count).unwrap();
            }
        }
    }
    out
}
