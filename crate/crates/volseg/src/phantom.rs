//! Deterministic synthetic 4D cohort generator: a textured ellipsoidal
//! region over a darker background, deformed smoothly over time by a
//! low-frequency sinusoidal displacement, with dense ground truth retained
//! for evaluation.
//!
//! A second, dimmer ellipsoid acts as a distractor so that confidence
//! leakage outside the target region has a phantom analogue.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VolsegError};
use crate::io;
use crate::volume::{LabelMap, TimeSeries, Volume3D};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub grid_size: (usize, usize, usize),
    pub num_frames: usize,
    pub num_subjects: usize,
    /// Fraction of frames exposed as labeled, in (0, 1].
    pub label_fraction: f64,
    /// Peak voxel displacement of the breathing-like motion.
    pub motion_amplitude: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            grid_size: (32, 32, 32),
            num_frames: 30,
            num_subjects: 10,
            label_fraction: 0.1,
            motion_amplitude: 2.0,
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w, d) = self.grid_size;
        if h < 8 || w < 8 || d < 8 {
            return Err(VolsegError::Validation(format!(
                "grid dims must be >= 8, got {:?}",
                self.grid_size
            )));
        }
        if self.num_frames < 2 {
            return Err(VolsegError::Validation("num_frames must be >= 2".into()));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(VolsegError::Validation(format!(
                "label_fraction must be in (0, 1], got {}",
                self.label_fraction
            )));
        }
        if self.motion_amplitude < 0.0 {
            return Err(VolsegError::Validation("motion_amplitude must be >= 0".into()));
        }
        Ok(())
    }
}

/// One generated subject: the exposed sparse-labeled series plus the dense
/// per-frame ground truth kept aside for evaluation.
#[derive(Debug, Clone)]
pub struct PhantomSubject {
    pub series: TimeSeries,
    pub dense_gt: Vec<LabelMap>,
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let mut s = 0.0;
        for a in 0..3 {
            let d = (p[a] - self.center[a]) / self.radii[a];
            s += d * d;
        }
        s <= 1.0
    }
}

fn subject_rng(seed: u64, subject_index: usize) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15) ^ (subject_index as u64 + 1))
}

/// Separable [1, 2, 1]/4 smoothing pass along every axis, repeated twice;
/// turns white noise into band-limited texture.
fn smooth(mut a: Array3<f64>) -> Array3<f64> {
    let (h, w, d) = a.dim();
    for _ in 0..2 {
        for axis in 0..3 {
            let src = a.clone();
            for i in 0..h {
                for j in 0..w {
                    for k in 0..d {
                        let (pm, pp) = match axis {
                            0 => ([i.saturating_sub(1), j, k], [(i + 1).min(h - 1), j, k]),
                            1 => ([i, j.saturating_sub(1), k], [i, (j + 1).min(w - 1), k]),
                            _ => ([i, j, k.saturating_sub(1)], [i, j, (k + 1).min(d - 1)]),
                        };
                        a[[i, j, k]] = 0.25 * src[pm] + 0.5 * src[[i, j, k]] + 0.25 * src[pp];
                    }
                }
            }
        }
    }
    a
}

struct SubjectGeometry {
    target: Ellipsoid,
    distractor: Ellipsoid,
    texture: Array3<f64>,
    motion_phase: [f64; 3],
    motion_freq: [f64; 3],
}

fn subject_geometry(cfg: &PhantomConfig, rng: &mut ChaCha12Rng) -> SubjectGeometry {
    let (h, w, d) = cfg.grid_size;
    let dims = [h as f64, w as f64, d as f64];
    let mut center = [0.0; 3];
    let mut radii = [0.0; 3];
    let base_frac = [0.55, 0.45, 0.40];
    for a in 0..3 {
        center[a] = dims[a] / 2.0 + rng.gen_range(-0.08..0.08) * dims[a];
        radii[a] = base_frac[a] * dims[a] / 2.0 * rng.gen_range(0.9..1.1);
    }
    let target = Ellipsoid { center, radii };

    // dim distractor shell offset toward a corner
    let mut d_center = [0.0; 3];
    let mut d_radii = [0.0; 3];
    for a in 0..3 {
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        d_center[a] = dims[a] / 2.0 + sign * 0.28 * dims[a];
        d_radii[a] = 0.22 * dims[a] / 2.0 * rng.gen_range(0.9..1.1);
    }
    let distractor = Ellipsoid {
        center: d_center,
        radii: d_radii,
    };

    let noise = Array3::from_shape_fn(cfg.grid_size, |_| rng.gen_range(-1.0..1.0));
    let texture = smooth(noise);

    let motion_phase = [
        rng.gen_range(0.0..std::f64::consts::TAU),
        rng.gen_range(0.0..std::f64::consts::TAU),
        rng.gen_range(0.0..std::f64::consts::TAU),
    ];
    // one to two motion cycles over the series
    let motion_freq = [
        rng.gen_range(1.0..2.0),
        rng.gen_range(1.0..2.0),
        rng.gen_range(1.0..2.0),
    ];
    SubjectGeometry {
        target,
        distractor,
        texture,
        motion_phase,
        motion_freq,
    }
}

/// Analytic displacement at voxel `p` and frame `t`; |u| <= motion_amplitude
/// per component by construction, smooth in both arguments.
fn displacement(
    geo: &SubjectGeometry,
    cfg: &PhantomConfig,
    p: [usize; 3],
    t: usize,
) -> [f64; 3] {
    let (h, w, d) = cfg.grid_size;
    let dims = [h as f64, w as f64, d as f64];
    let phase_t = t as f64 / cfg.num_frames as f64;
    let mut u = [0.0; 3];
    for a in 0..3 {
        let temporal =
            (std::f64::consts::TAU * geo.motion_freq[a] * phase_t + geo.motion_phase[a]).sin();
        // low-frequency spatial profile, zero mean-ish across the grid
        let spatial = (std::f64::consts::PI * p[(a + 1) % 3] as f64 / dims[(a + 1) % 3]).sin();
        u[a] = cfg.motion_amplitude * temporal * spatial;
    }
    u
}

fn base_intensity(geo: &SubjectGeometry, p: [f64; 3], texture: f64) -> f64 {
    if geo.target.contains(p) {
        0.60 + 0.22 * texture
    } else if geo.distractor.contains(p) {
        0.38 + 0.08 * texture
    } else {
        0.10 + 0.04 * texture
    }
}

fn sample_texture(tex: &Array3<f64>, p: [f64; 3]) -> f64 {
    let (h, w, d) = tex.dim();
    let x = p[0].max(0.0).min((h - 1) as f64);
    let y = p[1].max(0.0).min((w - 1) as f64);
    let z = p[2].max(0.0).min((d - 1) as f64);
    let i0 = x.floor() as usize;
    let j0 = y.floor() as usize;
    let k0 = z.floor() as usize;
    let i1 = (i0 + 1).min(h - 1);
    let j1 = (j0 + 1).min(w - 1);
    let k1 = (k0 + 1).min(d - 1);
    let fx = x - i0 as f64;
    let fy = y - j0 as f64;
    let fz = z - k0 as f64;
    let mut acc = 0.0;
    for (ai, &ii) in [i0, i1].iter().enumerate() {
        for (aj, &jj) in [j0, j1].iter().enumerate() {
            for (ak, &kk) in [k0, k1].iter().enumerate() {
                let wx = if ai == 0 { 1.0 - fx } else { fx };
                let wy = if aj == 0 { 1.0 - fy } else { fy };
                let wz = if ak == 0 { 1.0 - fz } else { fz };
                acc += wx * wy * wz * tex[[ii, jj, kk]];
            }
        }
    }
    acc
}

pub fn generate_subject(cfg: &PhantomConfig, subject_index: usize) -> Result<PhantomSubject> {
    cfg.validate()?;
    let (h, w, d) = cfg.grid_size;
    let mut rng = subject_rng(cfg.seed, subject_index);
    let geo = subject_geometry(cfg, &mut rng);

    let mut frames = Vec::with_capacity(cfg.num_frames);
    let mut dense_gt = Vec::with_capacity(cfg.num_frames);
    let mut noise_rng = ChaCha12Rng::seed_from_u64(rng.gen());
    for t in 0..cfg.num_frames {
        let mut img = Array3::zeros((h, w, d));
        let mut mask = Array3::<u8>::zeros((h, w, d));
        for i in 0..h {
            for j in 0..w {
                for k in 0..d {
                    let u = displacement(&geo, cfg, [i, j, k], t);
                    let q = [i as f64 + u[0], j as f64 + u[1], k as f64 + u[2]];
                    let tex = sample_texture(&geo.texture, q);
                    let mut v = base_intensity(&geo, q, tex);
                    if cfg.noise_sigma > 0.0 {
                        let n: f64 = noise_rng.sample(rand_distr::StandardNormal);
                        v += cfg.noise_sigma * n;
                    }
                    img[[i, j, k]] = v;
                    mask[[i, j, k]] = u8::from(geo.target.contains(q));
                }
            }
        }
        // normalize, then quantize to the on-disk precision so that generated
        // cohorts round-trip bit-exactly through save/load
        let vol = Volume3D::new(img, [3.0, 3.0, 3.0])?.normalized();
        let quantized = vol.data().mapv(|v| v as f32 as f64);
        frames.push(Volume3D::new(quantized, [3.0, 3.0, 3.0])?);
        dense_gt.push(LabelMap::binary(mask)?);
    }

    let n_labeled = ((cfg.label_fraction * cfg.num_frames as f64).round() as usize).max(1);
    let mut indices: Vec<usize> = (0..cfg.num_frames).collect();
    indices.shuffle(&mut rng);
    let mut labels = BTreeMap::new();
    for &t in indices.iter().take(n_labeled.min(cfg.num_frames)) {
        labels.insert(t, dense_gt[t].clone());
    }

    let series = TimeSeries::new(format!("phantom-{:03}", subject_index), frames, labels)?;
    Ok(PhantomSubject { series, dense_gt })
}

pub fn generate_cohort(cfg: &PhantomConfig) -> Result<Vec<PhantomSubject>> {
    (0..cfg.num_subjects)
        .map(|i| generate_subject(cfg, i))
        .collect()
}

/// Write the cohort in the manifest layout under `out`, with the hidden dense
/// ground truth in a sibling `<out>_gt` directory.
pub fn write_cohort(cfg: &PhantomConfig, out: &Path) -> Result<()> {
    let gt_root = sibling_gt_dir(out);
    for subject in generate_cohort(cfg)? {
        let dir = out.join(subject.series.subject_id());
        io::save_series(&dir, &subject.series)?;
        let gt_dir = gt_root.join(subject.series.subject_id());
        std::fs::create_dir_all(&gt_dir).map_err(|e| VolsegError::io(&gt_dir, e))?;
        for (t, gt) in subject.dense_gt.iter().enumerate() {
            io::save_label(&gt_dir.join(format!("label_{:04}.raw", t)), gt)?;
        }
    }
    Ok(())
}

pub fn sibling_gt_dir(out: &Path) -> std::path::PathBuf {
    let name = out
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_else(|| "phantom".into());
    out.with_file_name(format!("{}_gt", name))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::dice_coefficient;

    fn small_cfg() -> PhantomConfig {
        PhantomConfig {
            grid_size: (16, 16, 16),
            num_frames: 6,
            num_subjects: 3,
            label_fraction: 0.34,
            motion_amplitude: 1.0,
            noise_sigma: 0.02,
            seed: 7,
        }
    }

    #[test]
    fn zero_motion_zero_noise_frames_identical() {
        let cfg = PhantomConfig {
            motion_amplitude: 0.0,
            noise_sigma: 0.0,
            num_frames: 4,
            grid_size: (16, 16, 16),
            ..small_cfg()
        };
        let s = generate_subject(&cfg, 0).unwrap();
        for t in 1..4 {
            assert_eq!(s.series.frame(t).data(), s.series.frame(0).data());
            assert_eq!(s.dense_gt[t], s.dense_gt[0]);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg();
        let a = generate_subject(&cfg, 1).unwrap();
        let b = generate_subject(&cfg, 1).unwrap();
        for t in 0..cfg.num_frames {
            assert_eq!(a.series.frame(t).data(), b.series.frame(t).data());
        }
        assert_eq!(a.series.labeled_indices(), b.series.labeled_indices());
    }

    #[test]
    fn consecutive_gt_masks_overlap() {
        let cfg = PhantomConfig {
            grid_size: (32, 32, 32),
            num_frames: 30,
            motion_amplitude: 2.0,
            ..PhantomConfig::default()
        };
        let s = generate_subject(&cfg, 2).unwrap();
        for t in 0..29 {
            let d = dice_coefficient(&s.dense_gt[t], &s.dense_gt[t + 1]).unwrap();
            assert!(d >= 0.85, "consecutive GT dice {} at t={}", d, t);
        }
    }

    #[test]
    fn cohort_ids_and_label_counts() {
        let cfg = small_cfg();
        let cohort = generate_cohort(&cfg).unwrap();
        assert_eq!(cohort.len(), 3);
        let ids: Vec<&str> = cohort.iter().map(|s| s.series.subject_id()).collect();
        assert_eq!(ids, vec!["phantom-000", "phantom-001", "phantom-002"]);
        for s in &cohort {
            // round(0.34 * 6) = 2 labeled frames
            assert_eq!(s.series.labeled_indices().len(), 2);
        }
    }

    #[test]
    fn label_fraction_one_labels_every_frame() {
        let cfg = PhantomConfig {
            label_fraction: 1.0,
            ..small_cfg()
        };
        let s = generate_subject(&cfg, 0).unwrap();
        assert_eq!(s.series.labeled_indices().len(), cfg.num_frames);
    }

    #[test]
    fn distinct_subjects_have_distinct_mask_centroids() {
        let cfg = small_cfg();
        let a = generate_subject(&cfg, 0).unwrap();
        let b = generate_subject(&cfg, 1).unwrap();
        let centroid = |m: &LabelMap| -> [f64; 3] {
            let mut c = [0.0; 3];
            let mut n = 0.0;
            for ((i, j, k), v) in m.data().indexed_iter() {
                if *v != 0 {
                    c[0] += i as f64;
                    c[1] += j as f64;
                    c[2] += k as f64;
                    n += 1.0;
                }
            }
            [c[0] / n, c[1] / n, c[2] / n]
        };
        let ca = centroid(&a.dense_gt[0]);
        let cb = centroid(&b.dense_gt[0]);
        let dist: f64 = ca
            .iter()
            .zip(cb.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        assert!(dist > 0.05, "centroid distance {}", dist);
    }

    #[test]
    fn occupancy_within_placenta_like_range() {
        let cfg = PhantomConfig::default();
        for idx in 0..4 {
            let s = generate_subject(&cfg, idx).unwrap();
            let (h, w, d) = cfg.grid_size;
            let total = (h * w * d) as f64;
            for gt in &s.dense_gt {
                let frac = gt.foreground_count() as f64 / total;
                assert!(
                    (0.02..=0.30).contains(&frac),
                    "occupancy {} out of range for subject {}",
                    frac,
                    idx
                );
            }
        }
    }

    #[test]
    fn written_cohort_round_trips() {
        let cfg = small_cfg();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("data");
        write_cohort(&cfg, &out).unwrap();
        let loaded = crate::io::load_cohort(&out).unwrap();
        assert_eq!(loaded.len(), 3);
        let regen = generate_subject(&cfg, 0).unwrap();
        assert_eq!(loaded[0].frame(0).data(), regen.series.frame(0).data());
        assert!(crate::phantom::sibling_gt_dir(&out).join("phantom-000").exists());
    }
}
