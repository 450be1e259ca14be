//! Synthetic CT-like phantoms with planted lymph-node blobs.
//!
//! Each volume is an air background around a soft-tissue ellipsoid holding a
//! few smooth nodes. In a positive volume one node grows a spiculated halo of
//! bright radial strands separated by darker gaps through its capsule; its node
//! plus halo region is the truth mask. Negatives have no halo and no mask. Soft-tissue density varies
//! per patient, so global intensity statistics carry no usable class signal.

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::ctprep::{CtVolume, Landmarks, Orientation};
use crate::dataio::{write_grid, write_manifest, write_volume, Manifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::volume::Grid3;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    /// `[W, H, D]` voxels.
    pub extent: [usize; 3],
    /// `[sx, sy, sz]` in mm.
    pub spacing: [f32; 3],
    pub air_hu: f32,
    pub tissue_hu: f32,
    /// Per-patient tissue offset drawn uniformly from `±tissue_jitter_hu`.
    pub tissue_jitter_hu: f32,
    /// Body ellipsoid semi-axes in mm, centred in the volume.
    pub body_semi_axes_mm: [f32; 3],
    /// Each semi-axis is scaled by a factor drawn from `1 ± body_jitter`.
    pub body_jitter: f32,
    pub nodes_min: usize,
    pub nodes_max: usize,
    pub node_radius_mm: (f32, f32),
    /// Peak contrast of a node over tissue.
    pub node_hu: f32,
    pub halo_thickness_mm: f32,
    pub halo_spikes: usize,
    /// Angular half-width of one strand, radians.
    pub halo_spike_width: f32,
    pub halo_hu: f32,
    /// Strand level subtracted across the shell. Strands end up brighter than
    /// tissue and the gaps between them darker, so the shell adds little mean HU.
    pub halo_gap_level: f32,
    /// Amplitude of uniform texture jitter inside the halo shell.
    pub halo_jitter_hu: f32,
    pub noise_hu: f32,
    pub landmarks: Landmarks,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            extent: [32, 32, 20],
            spacing: [1.0, 1.0, 2.0],
            air_hu: -1000.0,
            tissue_hu: 40.0,
            tissue_jitter_hu: 30.0,
            body_semi_axes_mm: [14.5, 13.0, 18.0],
            body_jitter: 0.04,
            nodes_min: 2,
            nodes_max: 3,
            node_radius_mm: (2.0, 3.0),
            node_hu: 90.0,
            halo_thickness_mm: 3.0,
            halo_spikes: 14,
            halo_spike_width: 0.35,
            halo_hu: 1500.0,
            halo_gap_level: 0.3,
            halo_jitter_hu: 60.0,
            noise_hu: 20.0,
            landmarks: Landmarks {
                nose_slice: 2,
                acromion_slice: 18,
            },
            seed: 7,
        }
    }
}

/// One node in mm coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub center_mm: [f32; 3],
    pub radius_mm: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub patient_id: String,
    pub label: u8,
    pub volume: CtVolume,
    /// Present for positives only.
    pub mask: Option<Grid3<f32>>,
    pub blobs: Vec<Blob>,
    /// Index into `blobs` of the node carrying the halo.
    pub halo_blob: Option<usize>,
    pub body_semi_axes_mm: [f32; 3],
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::Validation(format!("phantom spec: {reason}")));
        if self.extent.contains(&0) || self.spacing.iter().any(|&s| !(s > 0.0)) {
            return bad("extent and spacing must be positive".into());
        }
        if self.nodes_min == 0 || self.nodes_min > self.nodes_max {
            return bad(format!("node count range {}..={}", self.nodes_min, self.nodes_max));
        }
        let (r0, r1) = self.node_radius_mm;
        if !(r0 > 0.0 && r0 <= r1) {
            return bad(format!("node radius range ({r0}, {r1})"));
        }
        if !(self.tissue_jitter_hu >= 0.0) {
            return bad(format!("tissue jitter {}", self.tissue_jitter_hu));
        }
        if !(0.0..1.0).contains(&self.halo_gap_level) {
            return bad(format!("halo gap level {}", self.halo_gap_level));
        }
        if !(0.0..1.0).contains(&self.body_jitter) {
            return bad(format!("body jitter {}", self.body_jitter));
        }
        let l = self.landmarks;
        if l.nose_slice >= l.acromion_slice || l.acromion_slice >= self.extent[2] {
            return bad(format!("landmarks {l:?} outside {} slices", self.extent[2]));
        }
        // Smallest body must still hold the largest node and its halo.
        let reach = r1 + self.halo_thickness_mm + 0.5;
        let half = self.half_extent_mm();
        for a in 0..3 {
            let min_axis = self.body_semi_axes_mm[a] * (1.0 - self.body_jitter);
            if min_axis <= reach || self.body_semi_axes_mm[a] * (1.0 + self.body_jitter) > half[a] {
                return bad(format!("blobs of reach {reach} mm cannot fit body axis {a}"));
            }
        }
        let span = (l.acromion_slice - l.nose_slice) as f32 * self.spacing[2];
        if span <= 2.0 * reach {
            return bad("nose-to-acromion span too short for a blob".into());
        }
        Ok(())
    }

    fn half_extent_mm(&self) -> [f32; 3] {
        std::array::from_fn(|a| (self.extent[a] - 1) as f32 * self.spacing[a] / 2.0)
    }

    fn patient_rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }
}

pub fn patient_id(index: usize) -> String {
    format!("p{index:04}")
}

/// Even indices are positive.
pub fn label_of(index: usize) -> u8 {
    (index % 2 == 0) as u8
}

/// Generates phantom `index` from its own seeded stream.
pub fn generate_one(spec: &PhantomSpec, index: usize) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = spec.patient_rng(index);
    let label = label_of(index);
    let half = spec.half_extent_mm();
    let axes: [f32; 3] = std::array::from_fn(|a| {
        spec.body_semi_axes_mm[a] * (1.0 + rng.gen_range(-spec.body_jitter..=spec.body_jitter))
    });

    let tissue = spec.tissue_hu + rng.gen_range(-1.0f32..=1.0) * spec.tissue_jitter_hu;
    let reach_max = spec.node_radius_mm.1 + spec.halo_thickness_mm + 0.5;
    let n_nodes = rng.gen_range(spec.nodes_min..=spec.nodes_max);
    let z_lo = spec.landmarks.nose_slice as f32 * spec.spacing[2] + reach_max;
    let z_hi = spec.landmarks.acromion_slice as f32 * spec.spacing[2] - reach_max;
    let mut blobs: Vec<Blob> = Vec::with_capacity(n_nodes);
    let mut attempts = 0;
    while blobs.len() < n_nodes {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::Validation(format!(
                "phantom spec: could not place {n_nodes} non-overlapping blobs"
            )));
        }
        let radius = rng.gen_range(spec.node_radius_mm.0..=spec.node_radius_mm.1);
        let c: [f32; 3] = std::array::from_fn(|a| half[a] + rng.gen_range(-axes[a]..=axes[a]));
        if c[2] < z_lo || c[2] > z_hi {
            continue;
        }
        let inner: [f32; 3] = std::array::from_fn(|a| axes[a] - reach_max);
        let e: f32 = (0..3).map(|a| ((c[a] - half[a]) / inner[a]).powi(2)).sum();
        if e > 1.0 {
            continue;
        }
        let clear = blobs.iter().all(|b| dist(b.center_mm, c) > b.radius_mm + radius + spec.halo_thickness_mm + 1.0);
        if clear {
            blobs.push(Blob { center_mm: c, radius_mm: radius });
        }
    }
    let ring_blob = rng.gen_range(0..blobs.len());
    let halo_blob = (label == 1).then_some(ring_blob);
    let spikes: Vec<[f32; 3]> = (0..spec.halo_spikes).map(|_| unit_vector(&mut rng)).collect();
    let noise = Normal::new(0.0f32, spec.noise_hu.max(0.0)).map_err(|e| Error::Validation(e.to_string()))?;

    let [nx, ny, nz] = spec.extent;
    let ring = blobs[ring_blob];
    let mut hu = Vec::with_capacity(nx * ny * nz);
    let mut mask = Vec::with_capacity(if halo_blob.is_some() { nx * ny * nz } else { 0 });
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [x as f32 * spec.spacing[0], y as f32 * spec.spacing[1], z as f32 * spec.spacing[2]];
                let e: f32 = (0..3).map(|a| ((p[a] - half[a]) / axes[a]).powi(2)).sum();
                let mut v = if e <= 1.0 { tissue } else { spec.air_hu };
                for b in &blobs {
                    let t = dist(p, b.center_mm) / b.radius_mm;
                    if t < 1.5 {
                        // smooth profile with a soft capsule edge
                        v += spec.node_hu * smoothstep(1.5, 0.5, t);
                    }
                }
                let d = dist(p, ring.center_mm);
                let shell = d - ring.radius_mm;
                if halo_blob.is_some() && shell > -0.5 && shell <= spec.halo_thickness_mm {
                    let dir = [(p[0] - ring.center_mm[0]) / d, (p[1] - ring.center_mm[1]) / d, (p[2] - ring.center_mm[2]) / d];
                    let strand = spikes
                        .iter()
                        .map(|s| {
                            let cos = (s[0] * dir[0] + s[1] * dir[1] + s[2] * dir[2]).clamp(-1.0, 1.0);
                            (-(cos.acos() / spec.halo_spike_width).powi(2)).exp()
                        })
                        .fold(0.0f32, f32::max);
                    let fade = 1.0 - (shell.max(0.0) / spec.halo_thickness_mm);
                    v += spec.halo_hu * (strand - spec.halo_gap_level) * fade + rng.gen_range(-1.0f32..=1.0) * spec.halo_jitter_hu * fade;
                }
                if e <= 1.0 {
                    v += noise.sample(&mut rng);
                }
                hu.push(v);
                if halo_blob.is_some() {
                    mask.push((d <= ring.radius_mm + spec.halo_thickness_mm) as u8 as f32);
                }
            }
        }
    }
    let voxels = Grid3::new(spec.extent, hu)?;
    let volume = CtVolume::new(voxels, spec.spacing, Some(spec.landmarks), Orientation::HeadFirst)?;
    let mask = match halo_blob {
        Some(_) => Some(Grid3::new(spec.extent, mask)?),
        None => None,
    };
    Ok(Phantom {
        patient_id: patient_id(index),
        label,
        volume,
        mask,
        blobs,
        halo_blob,
        body_semi_axes_mm: axes,
    })
}

fn dist(a: [f32; 3], b: [f32; 3]) -> f32 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// 1 at `t <= lo_t`, 0 at `t >= hi_t`, cubic in between.
fn smoothstep(hi_t: f32, lo_t: f32, t: f32) -> f32 {
    let u = ((hi_t - t) / (hi_t - lo_t)).clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f32; 3] {
    loop {
        let v: [f32; 3] = std::array::from_fn(|_| rng.gen_range(-1.0f32..=1.0));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-3 && n <= 1.0 {
            return v.map(|c| c / n);
        }
    }
}

/// Generates `2 * n_per_class` phantoms (in memory, in parallel).
pub fn generate_all(spec: &PhantomSpec, n_per_class: usize) -> Result<Vec<Phantom>> {
    spec.validate()?;
    (0..2 * n_per_class).into_par_iter().map(|i| generate_one(spec, i)).collect()
}

/// Writes `manifest.csv`, `volumes/<id>.gmgv` and, for positives,
/// `masks/<id>.gmgv` under `out_dir`.
pub fn generate(spec: &PhantomSpec, n_per_class: usize, out_dir: &Path) -> Result<Manifest> {
    if n_per_class == 0 {
        return Err(Error::Validation("phantom count must be >= 1 per class".into()));
    }
    let phantoms = generate_all(spec, n_per_class)?;
    let vol_dir = out_dir.join("volumes");
    let mask_dir = out_dir.join("masks");
    for d in [&vol_dir, &mask_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut entries = Vec::with_capacity(phantoms.len());
    for p in &phantoms {
        let volume_path = vol_dir.join(format!("{}.gmgv", p.patient_id));
        write_volume(&p.volume, &volume_path)?;
        let mask_path = match &p.mask {
            Some(m) => {
                let path = mask_dir.join(format!("{}.gmgv", p.patient_id));
                write_grid(m, p.volume.spacing, &path)?;
                Some(path)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            patient_id: p.patient_id.clone(),
            volume_path,
            label: p.label,
            landmarks: p.volume.landmarks,
            mask_path,
        });
    }
    let manifest = Manifest { entries };
    write_manifest(&manifest, &out_dir.join("manifest.csv"))?;
    Ok(manifest)
}
