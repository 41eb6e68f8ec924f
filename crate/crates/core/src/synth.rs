//! Synthetic slides with planted circular lesions.
//!
//! Each slide is a `grid_w × grid_h` patch grid. Background patches carry
//! i.i.d. Gaussian noise; lesion patches additionally carry the signature of
//! their class. Signatures are mutually orthogonal. Target classes follow `class_mixture`; class 0
//! slides have no lesions, others get one primary lesion of the target class
//! plus optional smaller decoys of other classes, so the largest-area rule
//! recovers the target.

use rayon::prelude::*;

use crate::data::{EmbeddingTable, GradeLabel, PatchRecord, WsiBag};
use crate::error::{GlatError, Result};
use crate::rng::{derive_seed, SplitMix64};
use crate::NUM_CLASSES;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub grid_w: u32,
    pub grid_h: u32,
    pub d: usize,
    pub n_slides: usize,
    /// Inclusive bounds on the lesion count of a lesion-bearing slide.
    pub lesion_count_range: (u32, u32),
    /// Inclusive bounds on lesion radius, in patches.
    pub lesion_radius_range: (u32, u32),
    /// Per-component RMS of each class signature.
    pub class_signal_scale: f64,
    /// Standard deviation of the background noise.
    pub noise_scale: f64,
    pub class_mixture: [f64; NUM_CLASSES],
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            grid_w: 16,
            grid_h: 16,
            d: 32,
            n_slides: 200,
            lesion_count_range: (1, 2),
            lesion_radius_range: (3, 5),
            class_signal_scale: 1.5,
            noise_scale: 0.25,
            class_mixture: [0.25; NUM_CLASSES],
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid_w == 0 || self.grid_h == 0 {
            return Err(GlatError::Config("grid sizes must be >= 1".into()));
        }
        if self.d < NUM_CLASSES - 1 {
            return Err(GlatError::Config(format!("d must be >= {} for orthogonal class signatures", NUM_CLASSES - 1)));
        }
        let (clo, chi) = self.lesion_count_range;
        let (rlo, rhi) = self.lesion_radius_range;
        if clo > chi || rlo > rhi {
            return Err(GlatError::Config("empty lesion range".into()));
        }
        let extent = 2 * rhi as u64 + 1;
        if chi > 0 && (extent > self.grid_w as u64 || extent > self.grid_h as u64) {
            return Err(GlatError::Config(format!(
                "lesion radius {rhi} does not fit a {}x{} grid",
                self.grid_w, self.grid_h
            )));
        }
        if !self.class_signal_scale.is_finite() || self.class_signal_scale <= 0.0 {
            return Err(GlatError::Config("class_signal_scale must be positive".into()));
        }
        if !self.noise_scale.is_finite() || self.noise_scale < 0.0 {
            return Err(GlatError::Config("noise_scale must be >= 0".into()));
        }
        if self.class_mixture.iter().any(|w| w.is_nan() || *w < 0.0) || self.class_mixture.iter().sum::<f64>() <= 0.0 {
            return Err(GlatError::Config("class_mixture needs non-negative weights with a positive sum".into()));
        }
        Ok(())
    }

    /// Mixture normalized to sum 1, with class 0 absorbing everything when
    /// lesions are disabled.
    pub fn effective_mixture(&self) -> [f64; NUM_CLASSES] {
        if self.lesion_count_range.1 == 0 {
            let mut m = [0.0; NUM_CLASSES];
            m[0] = 1.0;
            return m;
        }
        let total: f64 = self.class_mixture.iter().sum();
        self.class_mixture.map(|w| w / total)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lesion {
    pub class: usize,
    pub cx: u32,
    pub cy: u32,
    pub radius: u32,
}

impl Lesion {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        let dx = x as i64 - self.cx as i64;
        let dy = y as i64 - self.cy as i64;
        dx * dx + dy * dy <= (self.radius as i64).pow(2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSlide {
    pub bag: WsiBag,
    pub lesions: Vec<Lesion>,
    /// Lesion class per patch, aligned with the table records; 0 is background.
    pub patch_class: Vec<usize>,
}

impl SynthSlide {
    pub fn lesion_ids(&self) -> Vec<u64> {
        self.bag
            .patches
            .records()
            .iter()
            .zip(&self.patch_class)
            .filter(|(_, &c)| c != 0)
            .map(|(r, _)| r.id)
            .collect()
    }
}

/// Per-class patch means: row 0 (background) is zero, rows 1.. are
/// Gram–Schmidt orthogonalised Gaussian draws rescaled to norm `scale·√d`.
pub fn class_signatures(d: usize, scale: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = SplitMix64::new(seed);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < NUM_CLASSES - 1 {
        let mut v: Vec<f64> = (0..d).map(|_| rng.next_normal()).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(b).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    let target = scale * (d as f64).sqrt();
    std::iter::once(vec![0.0; d])
        .chain(basis.into_iter().map(|b| b.into_iter().map(|a| a * target).collect()))
        .collect()
}

pub fn slide_id(index: usize) -> String {
    format!("slide{index:04}")
}

/// Target class per slide: mixture quotas by largest remainder, then a
/// seeded shuffle, so class counts track the mixture exactly.
pub fn class_schedule(mixture: &[f64; NUM_CLASSES], n: usize, seed: u64) -> Vec<usize> {
    let exact: Vec<f64> = mixture.iter().map(|w| w * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = n - counts.iter().sum::<usize>();
    for &c in order.iter().take(short) {
        counts[c] += 1;
    }
    let mut schedule: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &k)| std::iter::repeat_n(c, k)).collect();
    SplitMix64::new(seed).shuffle(&mut schedule);
    schedule
}

fn place(rng: &mut SplitMix64, spec: &SynthSpec, class: usize, radius: u32) -> Lesion {
    let cx = rng.range_inclusive(radius as u64, (spec.grid_w - 1 - radius) as u64) as u32;
    let cy = rng.range_inclusive(radius as u64, (spec.grid_h - 1 - radius) as u64) as u32;
    Lesion { class, cx, cy, radius }
}

fn generate_slide(spec: &SynthSpec, signatures: &[Vec<f64>], target: usize, index: usize) -> Result<SynthSlide> {
    let mut rng = SplitMix64::new(derive_seed(spec.seed, index as u64 + 2));

    // Decoys first, primary last so it overwrites any overlap.
    let mut lesions = Vec::new();
    if target != 0 {
        let (clo, chi) = spec.lesion_count_range;
        let count = rng.range_inclusive(clo.max(1) as u64, chi as u64) as u32;
        let (rlo, rhi) = spec.lesion_radius_range;
        let primary_r = rng.range_inclusive(rlo as u64, rhi as u64) as u32;
        if primary_r > rlo {
            for _ in 1..count {
                let r = rng.range_inclusive(rlo as u64, primary_r as u64 - 1) as u32;
                let others: Vec<usize> = (1..NUM_CLASSES).filter(|&c| c != target).collect();
                let class = others[rng.below(others.len() as u64) as usize];
                lesions.push(place(&mut rng, spec, class, r));
            }
        }
        lesions.push(place(&mut rng, spec, target, primary_r));
    }

    let n = spec.grid_w as usize * spec.grid_h as usize;
    let mut records = Vec::with_capacity(n);
    let mut patch_class = Vec::with_capacity(n);
    for y in 0..spec.grid_h {
        for x in 0..spec.grid_w {
            let class = lesions.iter().rev().find(|l| l.contains(x, y)).map_or(0, |l| l.class);
            let embedding = signatures[class].iter().map(|s| s + spec.noise_scale * rng.next_normal()).collect();
            records.push(PatchRecord {
                id: y as u64 * spec.grid_w as u64 + x as u64,
                x,
                y,
                embedding,
            });
            patch_class.push(class);
        }
    }

    let label = largest_lesion_class(&lesions, &patch_class, spec.grid_w);
    let table = EmbeddingTable::new(slide_id(index), spec.d, records)?;
    Ok(SynthSlide {
        bag: WsiBag::new(GradeLabel::new(label)?, table)?,
        lesions,
        patch_class,
    })
}

/// Class of the lesion with the largest visible area, 0 without lesions.
/// Ties go to the later-drawn lesion.
fn largest_lesion_class(lesions: &[Lesion], patch_class: &[usize], grid_w: u32) -> usize {
    let mut best = (0usize, 0usize);
    for (k, l) in lesions.iter().enumerate() {
        let visible = patch_class
            .iter()
            .enumerate()
            .filter(|(i, _)| {
                let (x, y) = ((*i as u32) % grid_w, (*i as u32) / grid_w);
                l.contains(x, y) && !lesions[k + 1..].iter().any(|later| later.contains(x, y))
            })
            .count();
        if visible >= best.0 && visible > 0 {
            best = (visible, l.class);
        }
    }
    best.1
}

pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<SynthSlide>> {
    spec.validate()?;
    let signatures = class_signatures(spec.d, spec.class_signal_scale, derive_seed(spec.seed, 0));
    let schedule = class_schedule(&spec.effective_mixture(), spec.n_slides, derive_seed(spec.seed, 1));
    schedule
        .into_par_iter()
        .enumerate()
        .map(|(i, target)| generate_slide(spec, &signatures, target, i))
        .collect()
}
