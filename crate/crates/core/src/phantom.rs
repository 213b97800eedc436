//! Deterministic synthetic two-channel retina phantoms with planted,
//! mask-annotated lesions.
//!
//! Channel 0 imitates an en-face angiogram: bright curvilinear vessels over a
//! mid-intensity capillary speckle, a central dark disc standing in for the
//! foveal avascular zone, and perfusion-loss lesions rendered as
//! multiplicative suppression of the capillary texture. Channel 1 imitates a
//! structural reflectance projection: a smooth bright field with dark fluid
//! blobs. Every lesion's exact pixel support is recorded as a ground-truth
//! mask, and the class label is a pure function of the mask areas.
//!
//! Each scan draws from its own counter-derived random stream, so generation
//! is bitwise reproducible under any parallel schedule.

use crate::diffcore::Tensor;
use crate::imgproc::gaussian_blur_plane;
use crate::par;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("lesion placement overflow: could not fit {kind} blob of radius ~{radius:.1}px after {tries} tries (image {h}x{w}, margin {margin})")]
    Placement {
        kind: &'static str,
        radius: f64,
        tries: usize,
        h: usize,
        w: usize,
        margin: usize,
    },
    #[error("generated label {got:?} does not match requested {want:?} (npa {npa}px, fluid {fluid}px)")]
    LabelMismatch {
        got: Label,
        want: Label,
        npa: usize,
        fluid: usize,
    },
    #[error("bias rectangle {index} ({x},{y}) {rw}x{rh} exceeds image bounds {w}x{h}")]
    RectangleOutOfBounds {
        index: usize,
        x: usize,
        y: usize,
        rw: usize,
        rh: usize,
        w: usize,
        h: usize,
    },
    #[error("bias mode is off in the dataset config")]
    BiasModeOff,
    #[error("subject-level split needs at least 5 subjects, got {0}")]
    TooFewSubjects(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, PhantomError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    NonReferable,
    Referable,
}

impl Label {
    /// Class index; the positive class (referable) is 1 everywhere.
    pub fn index(self) -> usize {
        match self {
            Label::NonReferable => 0,
            Label::Referable => 1,
        }
    }

    pub fn from_index(i: usize) -> Label {
        if i == 1 {
            Label::Referable
        } else {
            Label::NonReferable
        }
    }
}

/// Binary pixel mask over the scan plane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(h: usize, w: usize) -> Self {
        Mask {
            h,
            w,
            data: vec![false; h * w],
        }
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }
}

#[derive(Debug, Clone)]
pub struct PhantomScan {
    /// Two-channel image in [0,1]: channel 0 flow analog, channel 1
    /// reflectance analog.
    pub image: Tensor<f32>,
    pub npa_mask: Mask,
    pub fluid_mask: Mask,
    pub artifact_mask: Mask,
    pub label: Label,
    pub subject_id: u32,
    pub scan_seed: u64,
}

impl PhantomScan {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetConfig {
    /// Scan counts per class; the defaults mirror a 199:257 cohort.
    pub non_referable: usize,
    pub referable: usize,
    pub height: usize,
    pub width: usize,
    pub master_seed: u64,
    /// Central avascular disc radius range, as a fraction of min(H, W).
    pub faz_radius_frac: (f64, f64),
    /// Referability thresholds as area fractions of the image.
    pub npa_min_area_frac: f64,
    pub fluid_min_area_frac: f64,
    /// Planted lesion area fractions for referable scans.
    pub referable_npa_area_frac: (f64, f64),
    pub referable_fluid_area_frac: (f64, f64),
    /// Probability of a small sub-threshold lesion in a non-referable scan.
    pub distractor_npa_prob: f64,
    pub distractor_fluid_prob: f64,
    /// Small bright dots uncorrelated with the label (off by default).
    pub distractor_dot_count: usize,
    pub vessel_count: (usize, usize),
    /// Multiplicative capillary suppression inside perfusion-loss lesions.
    pub npa_suppression: f32,
    /// Additive darkening of fluid blobs in channel 1.
    pub fluid_depth: f32,
    /// Stamp fixed rectangles into every referable scan (bias experiment).
    pub bias: bool,
    pub bias_rect_count: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            non_referable: 199,
            referable: 257,
            height: 64,
            width: 64,
            master_seed: 7,
            faz_radius_frac: (0.055, 0.09),
            npa_min_area_frac: 0.015,
            fluid_min_area_frac: 0.005,
            referable_npa_area_frac: (0.025, 0.06),
            referable_fluid_area_frac: (0.012, 0.035),
            distractor_npa_prob: 0.35,
            distractor_fluid_prob: 0.30,
            distractor_dot_count: 0,
            vessel_count: (4, 7),
            npa_suppression: 0.15,
            fluid_depth: 0.40,
            bias: false,
            bias_rect_count: 5,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        if self.non_referable == 0 || self.referable == 0 {
            issues.push("class counts must be positive".to_string());
        }
        if self.height < 16 || self.width < 16 {
            issues.push(format!("image {}x{} too small (min 16)", self.height, self.width));
        }
        if self.npa_min_area_frac <= 0.0 || self.fluid_min_area_frac <= 0.0 {
            issues.push("referability thresholds must be positive".to_string());
        }
        if self.referable_npa_area_frac.0 < self.npa_min_area_frac {
            issues.push("referable npa area range must start at or above the threshold".into());
        }
        if self.referable_fluid_area_frac.0 < self.fluid_min_area_frac {
            issues.push("referable fluid area range must start at or above the threshold".into());
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(PhantomError::InvalidConfig(issues.join("; ")))
        }
    }

    pub fn total_scans(&self) -> usize {
        self.non_referable + self.referable
    }

    fn npa_min_area(&self) -> usize {
        (self.npa_min_area_frac * (self.height * self.width) as f64).ceil() as usize
    }

    fn fluid_min_area(&self) -> usize {
        (self.fluid_min_area_frac * (self.height * self.width) as f64).ceil() as usize
    }
}

/// The label rule: referable iff either lesion reaches its minimum area.
pub fn label_from_masks(config: &DatasetConfig, npa_area: usize, fluid_area: usize) -> Label {
    if npa_area >= config.npa_min_area() || fluid_area >= config.fluid_min_area() {
        Label::Referable
    } else {
        Label::NonReferable
    }
}

/// Dataset in memory: scans indexed by position; subject ids are unique.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub scans: Vec<PhantomScan>,
    pub config: DatasetConfig,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.scans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scans.is_empty()
    }
}

fn scan_rng(master_seed: u64, subject_id: u32, scan_seed: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[0..8].copy_from_slice(&master_seed.to_le_bytes());
    seed[8..16].copy_from_slice(&(subject_id as u64).to_le_bytes());
    seed[16..24].copy_from_slice(&scan_seed.to_le_bytes());
    seed[24..32].copy_from_slice(b"scanbamf");
    ChaCha8Rng::from_seed(seed)
}

struct Blob {
    cy: f64,
    cx: f64,
    a: f64, // semi-axis along theta
    b: f64,
    theta: f64,
}

impl Blob {
    fn max_radius(&self) -> f64 {
        self.a.max(self.b)
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        let dy = y - self.cy;
        let dx = x - self.cx;
        let (s, c) = self.theta.sin_cos();
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0
    }
}

fn rasterize(blob: &Blob, mask: &mut Mask) -> usize {
    let r = blob.max_radius().ceil() as i64 + 1;
    let mut added = 0;
    for y in (blob.cy as i64 - r).max(0)..=((blob.cy as i64 + r).min(mask.h as i64 - 1)) {
        for x in (blob.cx as i64 - r).max(0)..=((blob.cx as i64 + r).min(mask.w as i64 - 1)) {
            if blob.contains(y as f64, x as f64) {
                let i = y as usize * mask.w + x as usize;
                if !mask.data[i] {
                    mask.data[i] = true;
                    added += 1;
                }
            }
        }
    }
    added
}

/// Places non-overlapping elliptical blobs totalling approximately
/// `target_area` pixels, keeping clear of the central disc and of previously
/// placed blobs. Grows axes slightly until the rasterized area reaches the
/// target when `at_least` is set.
#[allow(clippy::too_many_arguments)]
fn place_blobs(
    rng: &mut ChaCha8Rng,
    mask: &mut Mask,
    kind: &'static str,
    target_area: f64,
    n_blobs: usize,
    at_least: Option<usize>,
    keep_out_center: Option<(f64, f64, f64)>,
    placed: &mut Vec<Blob>,
) -> Result<()> {
    let (h, w) = (mask.h, mask.w);
    let margin = 2usize;
    let per_blob = target_area / n_blobs as f64;
    for _ in 0..n_blobs {
        let aspect = rng.gen_range(1.0..1.8);
        // pi * a * b = per_blob with a = aspect * b
        let b = (per_blob / (std::f64::consts::PI * aspect)).sqrt();
        let a = aspect * b;
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let rmax = a.max(b);
        let tries = 300;
        let mut placed_ok = false;
        for _ in 0..tries {
            let lo_y = margin as f64 + rmax;
            let hi_y = (h - margin) as f64 - rmax;
            let lo_x = margin as f64 + rmax;
            let hi_x = (w - margin) as f64 - rmax;
            if lo_y >= hi_y || lo_x >= hi_x {
                break;
            }
            let cy = rng.gen_range(lo_y..hi_y);
            let cx = rng.gen_range(lo_x..hi_x);
            if let Some((fy, fx, fr)) = keep_out_center {
                let d = ((cy - fy).powi(2) + (cx - fx).powi(2)).sqrt();
                if d < fr + rmax + 1.0 {
                    continue;
                }
            }
            if placed
                .iter()
                .any(|p| ((cy - p.cy).powi(2) + (cx - p.cx).powi(2)).sqrt() < rmax + p.max_radius() + 2.0)
            {
                continue;
            }
            let mut blob = Blob { cy, cx, a, b, theta };
            rasterize(&blob, mask);
            // Discretization can undercut the analytic area; inflate until the
            // mask reaches the requested minimum.
            if let Some(min_area) = at_least {
                let mut guard = 0;
                while mask.area() < min_area && guard < 12 {
                    blob.a *= 1.08;
                    blob.b *= 1.08;
                    rasterize(&blob, mask);
                    guard += 1;
                }
            }
            placed.push(blob);
            placed_ok = true;
            break;
        }
        if !placed_ok {
            return Err(PhantomError::Placement {
                kind,
                radius: rmax,
                tries,
                h,
                w,
                margin,
            });
        }
    }
    Ok(())
}

/// Number of blobs needed so each stays under a per-blob radius cap that can
/// always be placed clear of the central disc.
fn blob_count(rng: &mut ChaCha8Rng, target_area: f64, h: usize, w: usize) -> usize {
    let rcap = 0.11 * h.min(w) as f64;
    let max_area = std::f64::consts::PI * rcap * rcap / 1.4;
    let n = ((target_area / max_area).ceil() as usize).clamp(1, 4);
    if n < 4 && rng.gen_bool(0.35) {
        n + 1
    } else {
        n
    }
}

/// Places one lesion's blobs with internal retries; returns its exact mask.
fn place_lesion(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    kind: &'static str,
    target_area: f64,
    n_blobs: usize,
    at_least: Option<usize>,
    keep_out_center: Option<(f64, f64, f64)>,
) -> Result<Mask> {
    let mut last_err = None;
    for _ in 0..8 {
        let mut mask = Mask::empty(h, w);
        let mut placed = Vec::new();
        match place_blobs(
            rng,
            &mut mask,
            kind,
            target_area,
            n_blobs,
            at_least,
            keep_out_center,
            &mut placed,
        ) {
            Ok(()) => return Ok(mask),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.expect("at least one placement attempt ran"))
}

fn rescale(plane: &mut [f32], lo: f32, hi: f32) {
    let mut mn = f32::INFINITY;
    let mut mx = f32::NEG_INFINITY;
    for &v in plane.iter() {
        mn = mn.min(v);
        mx = mx.max(v);
    }
    let span = (mx - mn).max(1e-6);
    for v in plane.iter_mut() {
        *v = lo + (hi - lo) * (*v - mn) / span;
    }
}

fn stamp_disc(plane: &mut [f32], h: usize, w: usize, cy: f64, cx: f64, r: f64, value: f32) {
    let ri = r.ceil() as i64 + 1;
    for y in (cy as i64 - ri).max(0)..=((cy as i64 + ri).min(h as i64 - 1)) {
        for x in (cx as i64 - ri).max(0)..=((cx as i64 + ri).min(w as i64 - 1)) {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            if d2 <= r * r {
                plane[y as usize * w + x as usize] = value;
            }
        }
    }
}

/// Curvilinear bright strokes: random walks from the border with momentum,
/// occasional branching, rendered into a coverage plane.
fn draw_vessels(rng: &mut ChaCha8Rng, h: usize, w: usize, count: usize) -> Vec<f32> {
    let mut cover = vec![0.0f32; h * w];
    let turn = Normal::new(0.0f64, 0.16).unwrap();
    let mut queue: Vec<(f64, f64, f64, usize, usize)> = Vec::new(); // y, x, dir, steps, depth
    for _ in 0..count {
        // start on a random border, heading inward
        let side = rng.gen_range(0..4u8);
        let (y, x, dir) = match side {
            0 => (0.0, rng.gen_range(0.0..w as f64), rng.gen_range(0.6..2.5)),
            1 => (
                (h - 1) as f64,
                rng.gen_range(0.0..w as f64),
                -rng.gen_range(0.6..2.5),
            ),
            2 => (rng.gen_range(0.0..h as f64), 0.0, rng.gen_range(-0.9..0.9)),
            _ => (
                rng.gen_range(0.0..h as f64),
                (w - 1) as f64,
                std::f64::consts::PI + rng.gen_range(-0.9..0.9),
            ),
        };
        let steps = (1.6 * h.max(w) as f64) as usize;
        queue.push((y, x, dir, steps, 0));
    }
    while let Some((mut y, mut x, mut dir, steps, depth)) = queue.pop() {
        let radius = rng.gen_range(0.5..1.1);
        for _ in 0..steps {
            if y < -2.0 || x < -2.0 || y > h as f64 + 2.0 || x > w as f64 + 2.0 {
                break;
            }
            stamp_disc(&mut cover, h, w, y, x, radius, 1.0);
            dir += turn.sample(rng);
            y += 0.7 * dir.sin();
            x += 0.7 * dir.cos();
            if depth == 0 && rng.gen_bool(0.015) {
                let branch_dir = dir + rng.gen_range(0.5..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                queue.push((y, x, branch_dir, steps / 2, 1));
            }
        }
    }
    gaussian_blur_plane(&cover, h, w, 0.55)
        .into_iter()
        .map(|v| v.min(1.0))
        .collect()
}

/// Generates one scan. Fully determined by
/// `(config.master_seed, subject_id, scan_seed)`.
pub fn generate_scan(
    config: &DatasetConfig,
    subject_id: u32,
    scan_seed: u64,
    want: Label,
) -> Result<PhantomScan> {
    let (h, w) = (config.height, config.width);
    let hw = (h * w) as f64;
    let mut rng = scan_rng(config.master_seed, subject_id, scan_seed);

    // Lesion plan.
    let mut npa_target = 0.0f64;
    let mut fluid_target = 0.0f64;
    let (mut npa_blobs, mut fluid_blobs) = (0usize, 0usize);
    match want {
        Label::Referable => {
            let kind = rng.gen_range(0.0..1.0);
            let with_npa = kind < 0.8; // npa-only 0.4, both 0.4, fluid-only 0.2
            let with_fluid = kind >= 0.4;
            if with_npa {
                let (lo, hi) = config.referable_npa_area_frac;
                npa_target = rng.gen_range(lo..hi) * hw;
                npa_blobs = blob_count(&mut rng, npa_target, h, w);
            }
            if with_fluid {
                let (lo, hi) = config.referable_fluid_area_frac;
                fluid_target = rng.gen_range(lo..hi) * hw;
                fluid_blobs = blob_count(&mut rng, fluid_target, h, w);
            }
        }
        Label::NonReferable => {
            if rng.gen_bool(config.distractor_npa_prob) {
                npa_target = rng.gen_range(0.001..0.006) * hw;
                npa_blobs = 1;
            }
            if rng.gen_bool(config.distractor_fluid_prob) {
                fluid_target = rng.gen_range(0.0005..0.003) * hw;
                fluid_blobs = 1;
            }
        }
    }

    // Channel 0: capillary speckle, vessels, central avascular disc, lesions.
    let mut speckle: Vec<f32> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
    speckle = gaussian_blur_plane(&speckle, h, w, 0.8);
    rescale(&mut speckle, 0.36, 0.64);

    let vessel_n = rng.gen_range(config.vessel_count.0..=config.vessel_count.1);
    let vessels = draw_vessels(&mut rng, h, w, vessel_n);
    let mut ch0: Vec<f32> = speckle
        .iter()
        .zip(&vessels)
        .map(|(&c, &v)| c * (1.0 - v) + (0.88 + 0.1 * c) * v)
        .collect();

    let faz_r = rng.gen_range(config.faz_radius_frac.0..config.faz_radius_frac.1)
        * h.min(w) as f64;
    let faz_cy = h as f64 / 2.0 + rng.gen_range(-1.5..1.5);
    let faz_cx = w as f64 / 2.0 + rng.gen_range(-1.5..1.5);
    for y in 0..h {
        for x in 0..w {
            let d = ((y as f64 - faz_cy).powi(2) + (x as f64 - faz_cx).powi(2)).sqrt();
            // smooth edge over ~1.5 px
            let t = ((d - faz_r) / 1.5).clamp(0.0, 1.0);
            let m = 0.08 + 0.92 * (t * t * (3.0 - 2.0 * t)) as f32;
            ch0[y * w + x] *= m;
        }
    }

    let mut npa_mask = Mask::empty(h, w);
    if npa_blobs > 0 {
        let min_area = if want == Label::Referable && npa_target > 0.0 {
            Some(config.npa_min_area())
        } else {
            None
        };
        npa_mask = place_lesion(
            &mut rng,
            h,
            w,
            "perfusion-loss",
            npa_target,
            npa_blobs,
            min_area,
            Some((faz_cy, faz_cx, faz_r)),
        )?;
        // Soft-edged multiplicative suppression of everything inside.
        let support: Vec<f32> = npa_mask.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let soft = gaussian_blur_plane(&support, h, w, 0.7);
        for (c, s) in ch0.iter_mut().zip(&soft) {
            *c *= 1.0 - (1.0 - config.npa_suppression) * s.min(1.0);
        }
    }

    // Channel 1: smooth bright reflectance with dark fluid blobs.
    let mut low: Vec<f32> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
    low = gaussian_blur_plane(&low, h, w, 3.0);
    rescale(&mut low, 0.52, 0.68);
    let mut ch1 = low;

    let mut fluid_mask = Mask::empty(h, w);
    if fluid_blobs > 0 {
        let min_area = if want == Label::Referable && fluid_target > 0.0 {
            Some(config.fluid_min_area())
        } else {
            None
        };
        fluid_mask = place_lesion(
            &mut rng,
            h,
            w,
            "fluid",
            fluid_target,
            fluid_blobs,
            min_area,
            None,
        )?;
        let support: Vec<f32> = fluid_mask.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let soft = gaussian_blur_plane(&support, h, w, 0.7);
        for (c, s) in ch1.iter_mut().zip(&soft) {
            *c -= config.fluid_depth * s.min(1.0);
        }
    }

    for _ in 0..config.distractor_dot_count {
        let cy = rng.gen_range(3.0..(h - 3) as f64);
        let cx = rng.gen_range(3.0..(w - 3) as f64);
        stamp_disc(&mut ch1, h, w, cy, cx, 1.0, 0.95);
    }

    for v in ch0.iter_mut().chain(ch1.iter_mut()) {
        *v = v.clamp(0.0, 1.0);
    }

    let got = label_from_masks(config, npa_mask.area(), fluid_mask.area());
    if got != want {
        return Err(PhantomError::LabelMismatch {
            got,
            want,
            npa: npa_mask.area(),
            fluid: fluid_mask.area(),
        });
    }

    let mut data = ch0;
    data.extend_from_slice(&ch1);
    let image = Tensor::from_vec(&[2, h, w], data).expect("channel planes sized h*w");
    Ok(PhantomScan {
        image,
        npa_mask,
        fluid_mask,
        artifact_mask: Mask::empty(h, w),
        label: got,
        subject_id,
        scan_seed,
    })
}

fn class_plan(config: &DatasetConfig) -> Vec<Label> {
    // Deterministic interleaving by class ratio; subject ids then carry no
    // positional information about the class boundary.
    let total = config.total_scans();
    let mut plan = Vec::with_capacity(total);
    let mut placed_ref = 0usize;
    for i in 0..total {
        let want_ref = (i + 1) * config.referable / total;
        if want_ref > placed_ref {
            plan.push(Label::Referable);
            placed_ref += 1;
        } else {
            plan.push(Label::NonReferable);
        }
    }
    plan
}

fn generate_dataset_impl(config: &DatasetConfig, sequential: bool) -> Result<Dataset> {
    config.validate()?;
    let plan = class_plan(config);
    let job = |i: usize| generate_scan(config, i as u32, 0, plan[i]);
    let results: Vec<Result<PhantomScan>> = if sequential {
        par::map_indexed_seq(plan.len(), job)
    } else {
        par::map_indexed(plan.len(), job)
    };
    let mut scans = Vec::with_capacity(results.len());
    for r in results {
        scans.push(r?);
    }
    let mut dataset = Dataset {
        scans,
        config: config.clone(),
    };
    if config.bias {
        add_bias_rectangles(&mut dataset, config.bias_rect_count)?;
    }
    Ok(dataset)
}

/// Generates the full dataset; one scan per subject, scans parallel across
/// the pool. Applies the bias rectangles when the config asks for them.
pub fn generate_dataset(config: &DatasetConfig) -> Result<Dataset> {
    generate_dataset_impl(config, false)
}

/// Sequential-path variant of [`generate_dataset`]; bitwise identical output.
pub fn generate_dataset_seq(config: &DatasetConfig) -> Result<Dataset> {
    generate_dataset_impl(config, true)
}

/// Fixed rectangle layout for the bias experiment, in fractions of the image.
const BIAS_RECT_ANCHORS: [(f64, f64); 5] = [
    (0.08, 0.08),
    (0.12, 0.66),
    (0.45, 0.30),
    (0.70, 0.10),
    (0.75, 0.72),
];

/// Stamps `count` bright rectangles into both channels of every referable
/// scan at fixed per-dataset locations and records their union in
/// `artifact_mask`. Non-referable scans are untouched.
pub fn add_bias_rectangles(dataset: &mut Dataset, count: usize) -> Result<()> {
    if count > BIAS_RECT_ANCHORS.len() {
        return Err(PhantomError::InvalidConfig(format!(
            "at most {} bias rectangles are supported, got {count}",
            BIAS_RECT_ANCHORS.len()
        )));
    }
    let (h, w) = (dataset.config.height, dataset.config.width);
    let rh = (h / 12).max(3);
    let rw = (w / 9).max(4);
    let mut rects = Vec::with_capacity(count);
    for (i, &(fy, fx)) in BIAS_RECT_ANCHORS.iter().take(count).enumerate() {
        let y = (fy * h as f64) as usize;
        let x = (fx * w as f64) as usize;
        if y + rh > h || x + rw > w {
            return Err(PhantomError::RectangleOutOfBounds {
                index: i,
                x,
                y,
                rw,
                rh,
                w,
                h,
            });
        }
        rects.push((y, x));
    }
    for scan in dataset.scans.iter_mut() {
        if scan.label != Label::Referable {
            continue;
        }
        let mut mask = Mask::empty(h, w);
        for &(y, x) in &rects {
            for yy in y..y + rh {
                for xx in x..x + rw {
                    mask.data[yy * w + xx] = true;
                    for c in 0..2 {
                        scan.image.data_mut()[c * h * w + yy * w + xx] = 0.92;
                    }
                }
            }
        }
        scan.artifact_mask = mask;
    }
    Ok(())
}

/// Subject-level split assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndex {
    pub train: Vec<u32>,
    pub validation: Vec<u32>,
    pub test: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitPart {
    Train,
    Validation,
    Test,
}

impl SplitIndex {
    pub fn part_of(&self, subject: u32) -> Option<SplitPart> {
        if self.train.contains(&subject) {
            Some(SplitPart::Train)
        } else if self.validation.contains(&subject) {
            Some(SplitPart::Validation)
        } else if self.test.contains(&subject) {
            Some(SplitPart::Test)
        } else {
            None
        }
    }

    /// Indexes of the dataset scans belonging to one split part.
    pub fn scan_indexes(&self, dataset: &Dataset, part: SplitPart) -> Vec<usize> {
        let ids = match part {
            SplitPart::Train => &self.train,
            SplitPart::Validation => &self.validation,
            SplitPart::Test => &self.test,
        };
        dataset
            .scans
            .iter()
            .enumerate()
            .filter(|(_, s)| ids.contains(&s.subject_id))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Splits subjects into train/validation/test by the given fractions. The
/// partition is disjoint and exhaustive; fractions are hit within one subject
/// (rounding).
pub fn split_by_subject(dataset: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<SplitIndex> {
    let mut subjects: Vec<u32> = dataset.scans.iter().map(|s| s.subject_id).collect();
    subjects.sort_unstable();
    subjects.dedup();
    if subjects.len() < 5 {
        return Err(PhantomError::TooFewSubjects(subjects.len()));
    }
    let mut seed_bytes = [0u8; 32];
    seed_bytes[0..8].copy_from_slice(&seed.to_le_bytes());
    seed_bytes[8..16].copy_from_slice(b"splitbam");
    let mut rng = ChaCha8Rng::from_seed(seed_bytes);
    // Fisher-Yates
    for i in (1..subjects.len()).rev() {
        let j = rng.gen_range(0..=i);
        subjects.swap(i, j);
    }
    let n = subjects.len();
    let n_train = (fractions.0 * n as f64).round() as usize;
    let n_val = (fractions.1 * n as f64).round() as usize;
    let n_train = n_train.min(n.saturating_sub(2));
    let n_val = n_val.min(n - n_train - 1);
    let mut train = subjects[..n_train].to_vec();
    let mut validation = subjects[n_train..n_train + n_val].to_vec();
    let mut test = subjects[n_train + n_val..].to_vec();
    train.sort_unstable();
    validation.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndex {
        train,
        validation,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> DatasetConfig {
        DatasetConfig {
            non_referable: 9,
            referable: 12,
            height: 32,
            width: 32,
            master_seed: 5,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn zero_lesion_scan_is_non_referable_with_empty_masks() {
        let mut cfg = small_config();
        cfg.distractor_npa_prob = 0.0;
        cfg.distractor_fluid_prob = 0.0;
        let scan = generate_scan(&cfg, 3, 0, Label::NonReferable).unwrap();
        assert_eq!(scan.label, Label::NonReferable);
        assert_eq!(scan.npa_mask.area(), 0);
        assert_eq!(scan.fluid_mask.area(), 0);
        assert_eq!(scan.artifact_mask.area(), 0);
    }

    #[test]
    fn same_seeds_give_bitwise_identical_scans() {
        let cfg = small_config();
        let a = generate_scan(&cfg, 7, 1, Label::Referable).unwrap();
        let b = generate_scan(&cfg, 7, 1, Label::Referable).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.npa_mask, b.npa_mask);
        assert_eq!(a.fluid_mask, b.fluid_mask);
        let c = generate_scan(&cfg, 8, 1, Label::Referable).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn parallel_and_sequential_datasets_match() {
        let cfg = small_config();
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset_seq(&cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.scans.iter().zip(&b.scans) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.label, y.label);
        }
    }

    #[test]
    fn default_config_class_counts_match_cohort() {
        let cfg = DatasetConfig::default();
        let plan = class_plan(&cfg);
        let referable = plan.iter().filter(|&&l| l == Label::Referable).count();
        assert_eq!(referable, 257);
        assert_eq!(plan.len() - referable, 199);
    }

    #[test]
    fn every_scan_respects_the_label_rule_and_value_range() {
        let cfg = small_config();
        let ds = generate_dataset(&cfg).unwrap();
        assert_eq!(ds.len(), 21);
        for scan in &ds.scans {
            let expect = label_from_masks(&cfg, scan.npa_mask.area(), scan.fluid_mask.area());
            assert_eq!(scan.label, expect);
            assert!(scan.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn faz_disc_is_dark_and_never_in_npa_mask() {
        let cfg = small_config();
        let ds = generate_dataset(&cfg).unwrap();
        let (h, w) = (cfg.height, cfg.width);
        for scan in &ds.scans {
            // center 3x3 neighbourhood sits inside the disc
            let mut acc = 0.0f32;
            for dy in 0..3 {
                for dx in 0..3 {
                    let y = h / 2 - 1 + dy;
                    let x = w / 2 - 1 + dx;
                    acc += scan.image.data()[y * w + x];
                    assert!(!scan.npa_mask.get(y, x), "central disc leaked into npa mask");
                }
            }
            assert!(acc / 9.0 < 0.3, "central disc not dark: {}", acc / 9.0);
        }
    }

    #[test]
    fn channel0_histogram_spans_three_populations() {
        let cfg = small_config();
        let ds = generate_dataset(&cfg).unwrap();
        for scan in ds.scans.iter().filter(|s| s.label == Label::NonReferable) {
            let (h, w) = (cfg.height, cfg.width);
            let mut v: Vec<f32> = scan.image.data()[..h * w].to_vec();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let p01 = v[(0.01 * (v.len() - 1) as f64) as usize];
            let p99 = v[(0.99 * (v.len() - 1) as f64) as usize];
            assert!(p99 - p01 > 0.5, "spread {} too small", p99 - p01);
        }
    }

    #[test]
    fn bias_rectangles_only_touch_referable_scans() {
        let mut cfg = small_config();
        cfg.bias = true;
        let ds = generate_dataset(&cfg).unwrap();
        let rh = (cfg.height / 12).max(3);
        let rw = (cfg.width / 9).max(4);
        for scan in &ds.scans {
            match scan.label {
                Label::Referable => {
                    assert_eq!(scan.artifact_mask.area(), 5 * rh * rw);
                }
                Label::NonReferable => assert_eq!(scan.artifact_mask.area(), 0),
            }
        }
        // count = 0 leaves the dataset unchanged
        let mut plain = generate_dataset(&DatasetConfig { bias: false, ..cfg.clone() }).unwrap();
        let before: Vec<f32> = plain.scans[0].image.data().to_vec();
        add_bias_rectangles(&mut plain, 0).unwrap();
        assert_eq!(plain.scans[0].image.data(), &before[..]);
    }

    #[test]
    fn split_is_a_partition_with_expected_sizes() {
        let mut cfg = small_config();
        cfg.non_referable = 4;
        cfg.referable = 6;
        let ds = generate_dataset(&cfg).unwrap();
        let split = split_by_subject(&ds, (0.6, 0.2, 0.2), 11).unwrap();
        assert_eq!(split.train.len(), 6);
        assert_eq!(split.validation.len(), 2);
        assert_eq!(split.test.len(), 2);
        for scan in &ds.scans {
            let parts = [
                split.train.contains(&scan.subject_id),
                split.validation.contains(&scan.subject_id),
                split.test.contains(&scan.subject_id),
            ];
            assert_eq!(parts.iter().filter(|&&p| p).count(), 1);
        }
        let again = split_by_subject(&ds, (0.6, 0.2, 0.2), 11).unwrap();
        assert_eq!(split, again);
        let other = split_by_subject(&ds, (0.6, 0.2, 0.2), 12).unwrap();
        assert_ne!(split, other);
    }

    #[test]
    fn too_few_subjects_is_an_error() {
        let mut cfg = small_config();
        cfg.non_referable = 2;
        cfg.referable = 2;
        let ds = generate_dataset(&cfg).unwrap();
        assert!(matches!(
            split_by_subject(&ds, (0.6, 0.2, 0.2), 1),
            Err(PhantomError::TooFewSubjects(4))
        ));
    }
}
