//! Planted-signal synthetic corpus.
//!
//! Every voxel carries a subject-specific baseline plus unit-variance
//! Gaussian noise. Each subject also belongs to one of two signal classes;
//! a class adds a Gaussian blob at its own location whose amplitude is
//! `snr · sin(2π t / period + φ)`, with a class-specific period and a random
//! phase per run. Labels follow the signal class, unless `shuffle_labels`
//! is set, in which case the label column is randomly permuted across
//! subjects so that labels are independent of the signal.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::manifest::{DatasetManifest, ManifestRecord};
use crate::data::mask::{write_mask, Mask};
use crate::data::rawvol::write_rawvol;
use crate::data::{Label, VolumeSeries};
use crate::error::{Error, Result};
use crate::harness::mix_seed;
use crate::tensor::{Real, Tensor};

pub const MIN_GRID_EDGE: usize = 6;
pub const BASELINE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub subjects: usize,
    pub runs: usize,
    pub grid: [usize; 3],
    pub frames: usize,
    pub snr: f64,
    pub seed: u64,
    pub shuffle_labels: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            subjects: 24,
            runs: 4,
            grid: [12, 12, 8],
            frames: 48,
            snr: 10.0,
            seed: 0,
            shuffle_labels: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid.iter().any(|&d| d < MIN_GRID_EDGE) {
            return Err(Error::Config(format!(
                "grid {:?} too small for the signal blobs (every edge must be at least {MIN_GRID_EDGE})",
                self.grid
            )));
        }
        if self.subjects < 2 || self.runs == 0 || self.frames < 2 {
            return Err(Error::Config(format!(
                "need at least 2 subjects, 1 run and 2 frames (got {}, {}, {})",
                self.subjects, self.runs, self.frames
            )));
        }
        if !(self.snr >= 0.0 && self.snr.is_finite()) {
            return Err(Error::Config(format!("snr must be finite and non-negative, got {}", self.snr)));
        }
        Ok(())
    }
}

/// Spatiotemporal signature of one signal class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Signature {
    pub center: [f64; 3],
    pub sigma: f64,
    /// Oscillation period in frames.
    pub period: f64,
}

impl Signature {
    pub fn weight(&self, x: usize, y: usize, z: usize) -> f64 {
        let d2: f64 = [x, y, z]
            .iter()
            .zip(&self.center)
            .map(|(&p, &c)| (p as f64 - c).powi(2))
            .sum();
        (-d2 / (2.0 * self.sigma * self.sigma)).exp()
    }
}

/// Signatures for signal class 0 (control) and 1 (patient).
pub fn signatures(grid: [usize; 3]) -> [Signature; 2] {
    let at = |f: [f64; 3]| [0, 1, 2].map(|i| f[i] * (grid[i] - 1) as f64);
    let sigma = (*grid.iter().min().unwrap() as f64 / 6.0).max(1.0);
    [
        Signature {
            center: at([0.3, 0.35, 0.5]),
            sigma,
            period: 8.0,
        },
        Signature {
            center: at([0.7, 0.65, 0.5]),
            sigma,
            period: 5.0,
        },
    ]
}

/// Ellipsoid inscribed in the grid.
pub fn ellipsoid_mask(grid: [usize; 3]) -> Result<Mask> {
    let mut values = Vec::with_capacity(grid.iter().product());
    for x in 0..grid[0] {
        for y in 0..grid[1] {
            for z in 0..grid[2] {
                let r: f64 = [x, y, z]
                    .iter()
                    .zip(&grid)
                    .map(|(&p, &n)| ((p as f64 - (n as f64 - 1.0) / 2.0) / (n as f64 / 2.0)).powi(2))
                    .sum();
                values.push(r <= 1.0);
            }
        }
    }
    Mask::new(grid, values)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthSubject {
    pub id: String,
    pub label: Label,
    pub signal_class: usize,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub config: SynthConfig,
    pub subjects: Vec<SynthSubject>,
    pub series: Vec<VolumeSeries>,
    pub mask: Mask,
    pub signatures: [Signature; 2],
}

fn assign_labels(cfg: &SynthConfig) -> Vec<SynthSubject> {
    let mut subjects: Vec<SynthSubject> = (0..cfg.subjects)
        .map(|i| SynthSubject {
            id: format!("sub-{i:03}"),
            label: if i % 2 == 1 { Label::Patient } else { Label::Control },
            signal_class: i % 2,
        })
        .collect();
    if cfg.shuffle_labels {
        // Permute the label column so labels are independent of the signal.
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0x5ab1e]));
        let mut labels: Vec<Label> = subjects.iter().map(|s| s.label).collect();
        labels.shuffle(&mut rng);
        for (s, l) in subjects.iter_mut().zip(labels) {
            s.label = l;
        }
    }
    subjects
}

/// Builds the corpus in memory.
pub fn synth_build(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let grid = cfg.grid;
    let mask = ellipsoid_mask(grid)?;
    let sigs = signatures(grid);
    let subjects = assign_labels(cfg);
    let n = mask.values().len();
    let weights: Vec<Vec<f64>> = sigs
        .iter()
        .map(|s| {
            let mut w = Vec::with_capacity(n);
            for x in 0..grid[0] {
                for y in 0..grid[1] {
                    for z in 0..grid[2] {
                        w.push(s.weight(x, y, z));
                    }
                }
            }
            w
        })
        .collect();

    let mut series = Vec::with_capacity(cfg.subjects * cfg.runs);
    for (si, subject) in subjects.iter().enumerate() {
        let mut subject_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0x5b1, si as u64]));
        let baseline: Vec<f64> = (0..n).map(|_| BASELINE + 10.0 * subject_rng.random::<f64>()).collect();
        let sig = &sigs[subject.signal_class];
        let w = &weights[subject.signal_class];
        for run in 0..cfg.runs {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0x7a1, si as u64, run as u64]));
            let phase = rng.random::<f64>() * std::f64::consts::TAU;
            let mut data = vec![0f32; cfg.frames * n];
            for t in 0..cfg.frames {
                let amp = cfg.snr * (std::f64::consts::TAU * t as f64 / sig.period + phase).sin();
                for v in 0..n {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    if mask.values()[v] {
                        data[t * n + v] = (baseline[v] + noise + amp * w[v]) as f32;
                    }
                }
            }
            series.push(VolumeSeries {
                subject_id: subject.id.clone(),
                run_id: run as u32 + 1,
                label: subject.label,
                data: Tensor::from_vec(&[cfg.frames, grid[0], grid[1], grid[2]], data)?,
                voxel_mm: None,
            });
        }
    }
    Ok(SynthData {
        config: *cfg,
        subjects,
        series,
        mask,
        signatures: sigs,
    })
}

/// Paths of a generated dataset directory.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub manifest_path: PathBuf,
    pub mask_path: PathBuf,
    pub rule_path: PathBuf,
    pub data: SynthData,
}

pub fn generator_rule(data: &SynthData) -> String {
    let c = &data.config;
    let mut s = String::new();
    let _ = writeln!(s, "subjects = {}", c.subjects);
    let _ = writeln!(s, "runs = {}", c.runs);
    let _ = writeln!(s, "grid = {}x{}x{}", c.grid[0], c.grid[1], c.grid[2]);
    let _ = writeln!(s, "frames = {}", c.frames);
    let _ = writeln!(s, "snr = {}", c.snr);
    let _ = writeln!(s, "seed = {}", c.seed);
    let _ = writeln!(s, "shuffle_labels = {}", c.shuffle_labels);
    let _ = writeln!(s, "mask = inscribed ellipsoid, {} voxels", data.mask.count());
    let _ = writeln!(s, "voxel(t, v) = baseline_subject(v) + N(0, 1) + snr * w_k(v) * sin(2*pi*t/period_k + phase_run)");
    let _ = writeln!(s, "baseline_subject(v) ~ {BASELINE} + 10 * U(0, 1)");
    for (k, sig) in data.signatures.iter().enumerate() {
        let _ = writeln!(
            s,
            "class {k}: w_k(v) = exp(-|v - ({:.3}, {:.3}, {:.3})|^2 / (2 * {:.3}^2)), period_k = {} frames",
            sig.center[0], sig.center[1], sig.center[2], sig.sigma, sig.period
        );
    }
    let _ = writeln!(s, "decision rule: class with the larger matched-filter power; label = class unless shuffled");
    for subj in &data.subjects {
        let _ = writeln!(s, "subject {} label {} signal_class {}", subj.id, subj.label.index(), subj.signal_class);
    }
    s
}

/// Writes `manifest.csv`, `mask.msk`, `generator.txt` and one `VOL4` file
/// per run under `dir`.
pub fn synth_generate(cfg: &SynthConfig, dir: &Path) -> Result<SynthOutput> {
    let data = synth_build(cfg)?;
    let vol_dir = dir.join("volumes");
    fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
    let mut records = Vec::with_capacity(data.series.len());
    for s in &data.series {
        let path = vol_dir.join(format!("{}_run-{}.vol", s.subject_id, s.run_id));
        write_rawvol(&path, &s.data)?;
        records.push(ManifestRecord {
            subject_id: s.subject_id.clone(),
            run_id: s.run_id,
            label: s.label,
            path,
        });
    }
    let manifest_path = dir.join("manifest.csv");
    DatasetManifest::new(records)?.write(&manifest_path)?;
    let mask_path = dir.join("mask.msk");
    write_mask(&mask_path, &data.mask)?;
    let rule_path = dir.join("generator.txt");
    fs::write(&rule_path, generator_rule(&data)).map_err(|e| Error::io(&rule_path, e))?;
    Ok(SynthOutput {
        manifest_path,
        mask_path,
        rule_path,
        data,
    })
}

/// Signal class whose signature carries the most power in a `(T, X, Y, Z)`
/// window: the window is projected on each blob, demeaned over time, and
/// correlated with the class oscillation in quadrature.
pub fn matched_filter_class<T: Real>(window: &Tensor<T>, sigs: &[Signature; 2]) -> Result<usize> {
    let s = window.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("expected (T, X, Y, Z), got {s:?}")));
    }
    let (frames, grid) = (s[0], [s[1], s[2], s[3]]);
    let n = grid.iter().product::<usize>();
    let mut power = [0f64; 2];
    for (k, sig) in sigs.iter().enumerate() {
        let mut w = Vec::with_capacity(n);
        for x in 0..grid[0] {
            for y in 0..grid[1] {
                for z in 0..grid[2] {
                    w.push(sig.weight(x, y, z));
                }
            }
        }
        let norm: f64 = w.iter().map(|v| v * v).sum();
        let proj: Vec<f64> = window
            .data()
            .chunks_exact(n)
            .map(|f| f.iter().zip(&w).map(|(&a, &b)| a.as_f64() * b).sum())
            .collect();
        let mean = proj.iter().sum::<f64>() / frames as f64;
        let omega = std::f64::consts::TAU / sig.period;
        let (mut re, mut im) = (0.0, 0.0);
        for (t, p) in proj.iter().enumerate() {
            re += (p - mean) * (omega * t as f64).cos();
            im += (p - mean) * (omega * t as f64).sin();
        }
        power[k] = (re * re + im * im) / norm;
    }
    Ok(usize::from(power[1] > power[0]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            subjects: 8,
            runs: 2,
            grid: [8, 8, 6],
            frames: 20,
            ..Default::default()
        }
    }

    #[test]
    fn balanced_and_sized() {
        let d = synth_build(&small()).unwrap();
        assert_eq!(d.series.len(), 16);
        assert_eq!(d.subjects.iter().filter(|s| s.label == Label::Patient).count(), 4);
        assert_eq!(d.series[0].data.shape(), &[20, 8, 8, 6]);
        for sig in &d.signatures {
            let c = sig.center.map(|v| v.round() as usize);
            assert!(d.mask.contains(c[0], c[1], c[2]));
        }
    }

    #[test]
    fn shuffled_labels_are_a_permutation() {
        let cfg = SynthConfig { shuffle_labels: true, subjects: 24, ..small() };
        let d = synth_build(&cfg).unwrap();
        assert_eq!(d.subjects.iter().filter(|s| s.label == Label::Patient).count(), 12);
        assert!(d.subjects.iter().any(|s| s.label.index() != s.signal_class));
        let again = synth_build(&cfg).unwrap();
        assert!(d.subjects.iter().zip(&again.subjects).all(|(a, b)| a.label == b.label));
    }

    #[test]
    fn deterministic() {
        let a = synth_build(&small()).unwrap();
        let b = synth_build(&small()).unwrap();
        assert!(a.series.iter().zip(&b.series).all(|(x, y)| x.data == y.data));
        let c = synth_build(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.series[0].data, c.series[0].data);
    }

    #[test]
    fn matched_filter_recovers_class() {
        let cfg = SynthConfig { subjects: 24, runs: 1, grid: [12, 12, 8], frames: 48, ..Default::default() };
        let d = synth_build(&cfg).unwrap();
        let (mut right, mut total) = (0, 0);
        for (s, subj) in d.series.iter().zip(&d.subjects) {
            for off in 0..=cfg.frames - 16 {
                let w = s.data.slice_outer(off, 16).unwrap();
                right += usize::from(matched_filter_class(&w, &d.signatures).unwrap() == subj.signal_class);
                total += 1;
            }
        }
        assert!(right as f64 / total as f64 >= 0.99, "{right}/{total}");
    }

    #[test]
    fn zero_snr_has_no_signal() {
        let cfg = SynthConfig { snr: 0.0, ..small() };
        let d = synth_build(&cfg).unwrap();
        let e = synth_build(&SynthConfig { snr: 5.0, ..small() }).unwrap();
        // Only the signal term differs between the two corpora.
        let diff = d.series[0].data.max_abs_diff(&e.series[0].data).unwrap();
        assert!(diff > 1.0);
    }

    #[test]
    fn rejects_tiny_grids() {
        let cfg = SynthConfig { grid: [5, 8, 8], ..small() };
        assert!(matches!(synth_build(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let out = synth_generate(&small(), dir.path()).unwrap();
        let m = DatasetManifest::read(&out.manifest_path).unwrap();
        assert_eq!(m.len(), 16);
        let back = crate::data::read_rawvol(&m.records[3].path).unwrap();
        assert_eq!(back, out.data.series[3].data);
        assert_eq!(crate::data::read_mask(&out.mask_path).unwrap(), out.data.mask);
        assert!(fs::read_to_string(&out.rule_path).unwrap().contains("class 1"));
    }
}
