//! Volume and label containers, intensity windowing, slab cropping and
//! re-stacking, plus the procedural phantom generator and on-disk format.

mod io;
mod phantom;

pub use io::{
    generate_dataset, read_case, read_manifest, write_case, write_manifest, CaseEntry, CaseMeta,
    CaseRole, DatasetManifest, DatasetSpec, Split, CASE_FORMAT_VERSION, LABELS_FILE, META_FILE, VOLUME_FILE,
};
pub use phantom::{generate_phantom, PhantomSpec};

use ndarray::{concatenate, s, Array3, Array4, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class count of the pelvic configuration: background plus five organs.
pub const NUM_CLASSES: usize = 6;

/// Fixed class order; index is the label value.
pub const CLASS_NAMES: [&str; NUM_CLASSES] =
    ["background", "prostate", "bladder", "rectum", "femur_l", "femur_r"];

/// Organs in report order (classes 1..=5).
pub const ORGAN_NAMES: [&str; NUM_CLASSES - 1] =
    ["prostate", "bladder", "rectum", "femur_l", "femur_r"];

/// Slice thickness and in-plane pixel spacing of the clinical scans.
pub const CLINICAL_SPACING_MM: [f64; 3] = [1.5, 0.97, 0.97];

/// Linear intensity window mapped onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityWindow {
    pub lo: f32,
    pub hi: f32,
}

impl Default for IntensityWindow {
    /// Soft-tissue/bone window in Hounsfield units.
    fn default() -> Self {
        Self {
            lo: -250.0,
            hi: 750.0,
        }
    }
}

/// Single-channel intensity volume indexed `(z, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CtVolume {
    data: Array3<f32>,
    spacing_mm: [f64; 3],
    normalized: bool,
}

fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::Invalid(format!(
            "spacing must be strictly positive, got {spacing:?}"
        )))
    }
}

impl CtVolume {
    pub fn new(data: Array3<f32>, spacing_mm: [f64; 3], normalized: bool) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Shape("volume dimensions must be >= 1".into()));
        }
        check_spacing(spacing_mm)?;
        if normalized && data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid(
                "normalized volume has values outside [0, 1]".into(),
            ));
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
            spacing_mm,
            normalized,
        })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn dims(&self) -> [usize; 3] {
        let (z, h, w) = self.data.dim();
        [z, h, w]
    }

    /// Contiguous values in `(z, h, w)` row-major order.
    pub fn as_slice(&self) -> &[f32] {
        self.data.as_slice().expect("standard layout")
    }

    fn slab(&self, z0: usize, depth: usize) -> Self {
        Self {
            data: self.data.slice(s![z0..z0 + depth, .., ..]).to_owned(),
            spacing_mm: self.spacing_mm,
            normalized: self.normalized,
        }
    }
}

/// Per-voxel class assignment with the same `(z, h, w)` shape as its volume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    classes: Array3<u8>,
    num_classes: usize,
}

impl LabelMap {
    pub fn new(classes: Array3<u8>, num_classes: usize) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Shape("label dimensions must be >= 1".into()));
        }
        if num_classes == 0 || num_classes > u8::MAX as usize + 1 {
            return Err(Error::Invalid(format!("bad class count {num_classes}")));
        }
        if let Some(bad) = classes.iter().find(|&&c| c as usize >= num_classes) {
            return Err(Error::Invalid(format!(
                "label value {bad} >= class count {num_classes}"
            )));
        }
        Ok(Self {
            classes: classes.as_standard_layout().into_owned(),
            num_classes,
        })
    }

    pub fn classes(&self) -> &Array3<u8> {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dims(&self) -> [usize; 3] {
        let (z, h, w) = self.classes.dim();
        [z, h, w]
    }

    pub fn as_slice(&self) -> &[u8] {
        self.classes.as_slice().expect("standard layout")
    }

    /// Voxel count per class.
    pub fn census(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_classes];
        for &c in self.classes.iter() {
            counts[c as usize] += 1;
        }
        counts
    }

    fn slab(&self, z0: usize, depth: usize) -> Self {
        Self {
            classes: self.classes.slice(s![z0..z0 + depth, .., ..]).to_owned(),
            num_classes: self.num_classes,
        }
    }
}

/// Per-voxel class distribution `(c, z, h, w)`; hard maps are exact one-hot.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotMap {
    data: Array4<f32>,
}

impl OneHotMap {
    /// Wrap a distribution, checking that every voxel sums to 1 within 1e-5.
    pub fn new(data: Array4<f32>) -> Result<Self> {
        let (c, z, h, w) = data.dim();
        if c == 0 || z * h * w == 0 {
            return Err(Error::Shape("one-hot map must be non-empty".into()));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::Invalid("probabilities must lie in [0, 1]".into()));
        }
        let sums = data.sum_axis(Axis(0));
        if sums.iter().any(|s| (s - 1.0).abs() > 1e-5) {
            return Err(Error::Invalid(
                "channel probabilities must sum to 1 at every voxel".into(),
            ));
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
        })
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn num_classes(&self) -> usize {
        self.data.dim().0
    }

    pub fn dims(&self) -> [usize; 3] {
        let (_, z, h, w) = self.data.dim();
        [z, h, w]
    }

    pub fn channel(&self, c: usize) -> ArrayView3<'_, f32> {
        self.data.index_axis(Axis(0), c)
    }

    /// Per-voxel argmax; ties resolve to the lowest class index.
    pub fn argmax(&self) -> LabelMap {
        let (c, z, h, w) = self.data.dim();
        let mut out = Array3::<u8>::zeros((z, h, w));
        for ((zi, hi, wi), o) in out.indexed_iter_mut() {
            let mut best = 0;
            let mut best_v = self.data[[0, zi, hi, wi]];
            for ch in 1..c {
                let v = self.data[[ch, zi, hi, wi]];
                if v > best_v {
                    best = ch;
                    best_v = v;
                }
            }
            *o = best as u8;
        }
        LabelMap {
            classes: out,
            num_classes: c,
        }
    }
}

/// Map `[lo, hi]` linearly onto `[0, 1]`, clipping outside the window.
pub fn normalize_intensity(raw: &CtVolume, window: IntensityWindow) -> Result<CtVolume> {
    if raw.normalized {
        return Err(Error::Invalid("volume is already normalized".into()));
    }
    if !(window.hi > window.lo) {
        return Err(Error::Invalid(format!("empty window {window:?}")));
    }
    if let Some(v) = raw.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("raw volume contains {v}")));
    }
    let span = window.hi - window.lo;
    let data = raw
        .data
        .mapv(|v| ((v - window.lo) / span).clamp(0.0, 1.0));
    CtVolume::new(data, raw.spacing_mm, true)
}

/// Uniform slab offset in `[0, z - depth]`.
pub fn crop_offset(z: usize, depth: usize, rng: &mut impl Rng) -> Result<usize> {
    if depth == 0 || depth > z {
        return Err(Error::Invalid(format!(
            "crop depth {depth} not in 1..={z}"
        )));
    }
    Ok(rng.random_range(0..=z - depth))
}

/// Crop `depth` consecutive slices at a seeded uniform offset; labels, when
/// given, are cropped at the same offset.
pub fn random_crop_subvolume(
    vol: &CtVolume,
    labels: Option<&LabelMap>,
    depth: usize,
    rng_seed: u64,
) -> Result<(CtVolume, Option<LabelMap>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    crop_with_rng(vol, labels, depth, &mut rng)
}

pub fn crop_with_rng(
    vol: &CtVolume,
    labels: Option<&LabelMap>,
    depth: usize,
    rng: &mut impl Rng,
) -> Result<(CtVolume, Option<LabelMap>)> {
    if let Some(l) = labels {
        if l.dims() != vol.dims() {
            return Err(Error::Shape(format!(
                "labels {:?} vs volume {:?}",
                l.dims(),
                vol.dims()
            )));
        }
    }
    let z0 = crop_offset(vol.dims()[0], depth, rng)?;
    Ok((vol.slab(z0, depth), labels.map(|l| l.slab(z0, depth))))
}

/// Consecutive non-overlapping slabs of `depth` slices, in order.
pub fn split_for_inference(vol: &CtVolume, depth: usize) -> Result<Vec<CtVolume>> {
    let z = vol.dims()[0];
    if depth == 0 || z % depth != 0 {
        return Err(Error::Invalid(format!(
            "depth {z} is not divisible into slabs of {depth}"
        )));
    }
    Ok((0..z / depth).map(|i| vol.slab(i * depth, depth)).collect())
}

/// Concatenate per-slab predictions back along depth.
pub fn stack_predictions(chunks: &[OneHotMap]) -> Result<OneHotMap> {
    let first = chunks
        .first()
        .ok_or_else(|| Error::Invalid("no chunks to stack".into()))?;
    let (c, _, h, w) = first.data.dim();
    for ch in chunks {
        let (cc, _, hh, ww) = ch.data.dim();
        if cc != c {
            return Err(Error::Shape(format!(
                "channel count {cc} differs from {c}"
            )));
        }
        if (hh, ww) != (h, w) {
            return Err(Error::Shape(format!(
                "in-plane size {:?} differs from {:?}",
                (hh, ww),
                (h, w)
            )));
        }
    }
    let views: Vec<_> = chunks.iter().map(|c| c.data.view()).collect();
    let data = concatenate(Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(OneHotMap { data })
}

/// Hard one-hot encoding: channel `c` is 1 exactly where the label is `c`.
pub fn to_one_hot(labels: &LabelMap) -> Result<OneHotMap> {
    let [z, h, w] = labels.dims();
    let c = labels.num_classes;
    let mut data = Array4::<f32>::zeros((c, z, h, w));
    for ((zi, hi, wi), &cls) in labels.classes.indexed_iter() {
        if cls as usize >= c {
            return Err(Error::Invalid(format!("label {cls} >= {c}")));
        }
        data[[cls as usize, zi, hi, wi]] = 1.0;
    }
    Ok(OneHotMap { data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vol(z: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f32) -> CtVolume {
        CtVolume::new(Array3::from_shape_fn((z, h, w), |(a, b, c)| f(a, b, c)), [1.0; 3], false)
            .unwrap()
    }

    #[test]
    fn window_edges_and_midpoint() {
        let win = IntensityWindow::default();
        let lo = normalize_intensity(&vol(2, 2, 2, |_, _, _| win.lo), win).unwrap();
        assert!(lo.data().iter().all(|&v| v == 0.0));
        let hi = normalize_intensity(&vol(2, 2, 2, |_, _, _| win.hi), win).unwrap();
        assert!(hi.data().iter().all(|&v| v == 1.0));
        let mid = normalize_intensity(&vol(2, 2, 2, |_, _, _| (win.lo + win.hi) / 2.0), win)
            .unwrap();
        assert!(mid.data().iter().all(|&v| v == 0.5));
        assert!(mid.is_normalized());
        let clipped = normalize_intensity(&vol(1, 1, 2, |_, _, w| if w == 0 { -3000.0 } else { 3000.0 }), win).unwrap();
        assert_eq!(clipped.as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn normalize_rejects_non_finite_and_double_application() {
        let bad = vol(1, 1, 2, |_, _, w| if w == 0 { f32::NAN } else { 0.0 });
        assert!(matches!(
            normalize_intensity(&bad, IntensityWindow::default()),
            Err(Error::NonFinite(_))
        ));
        let ok = normalize_intensity(&vol(1, 1, 1, |_, _, _| 0.0), IntensityWindow::default()).unwrap();
        assert!(normalize_intensity(&ok, IntensityWindow::default()).is_err());
    }

    #[test]
    fn volume_invariants_are_enforced() {
        assert!(CtVolume::new(Array3::zeros((1, 1, 1)), [1.0, 0.0, 1.0], false).is_err());
        assert!(CtVolume::new(Array3::from_elem((1, 1, 1), 1.5), [1.0; 3], true).is_err());
        assert!(CtVolume::new(Array3::zeros((0, 1, 1)), [1.0; 3], false).is_err());
        assert!(LabelMap::new(Array3::from_elem((1, 1, 1), 6), 6).is_err());
    }

    #[test]
    fn crop_equal_depth_is_identity_and_seeded() {
        let v = vol(16, 3, 3, |z, h, w| (z * 9 + h * 3 + w) as f32);
        let l = LabelMap::new(Array3::from_shape_fn((16, 3, 3), |(z, _, _)| (z % 6) as u8), 6).unwrap();
        let (cv, cl) = random_crop_subvolume(&v, Some(&l), 16, 3).unwrap();
        assert_eq!(cv, v);
        assert_eq!(cl.unwrap(), l);
        let v64 = vol(64, 2, 2, |z, _, _| z as f32);
        let a = random_crop_subvolume(&v64, None, 16, 42).unwrap().0;
        let b = random_crop_subvolume(&v64, None, 16, 42).unwrap().0;
        assert_eq!(a, b);
        assert!(random_crop_subvolume(&v64, None, 65, 0).is_err());
    }

    #[test]
    fn crop_keeps_labels_aligned() {
        let v = vol(64, 2, 2, |z, _, _| z as f32);
        let l = LabelMap::new(Array3::from_shape_fn((64, 2, 2), |(z, _, _)| (z % 6) as u8), 6).unwrap();
        for seed in 0..20 {
            let (cv, cl) = random_crop_subvolume(&v, Some(&l), 16, seed).unwrap();
            let z0 = cv.data()[[0, 0, 0]] as usize;
            assert!(z0 <= 48);
            assert_eq!(cl.unwrap().classes()[[0, 0, 0]] as usize, z0 % 6);
        }
    }

    #[test]
    fn split_gives_ordered_slabs() {
        let v = vol(64, 2, 2, |z, _, _| z as f32);
        let slabs = split_for_inference(&v, 16).unwrap();
        assert_eq!(slabs.len(), 4);
        for (i, s) in slabs.iter().enumerate() {
            assert_eq!(s.dims(), [16, 2, 2]);
            assert_eq!(s.data()[[0, 0, 0]], (i * 16) as f32);
        }
        assert_eq!(split_for_inference(&vol(16, 1, 1, |_, _, _| 0.0), 16).unwrap().len(), 1);
        assert!(split_for_inference(&v, 24).is_err());
    }

    #[test]
    fn stack_checks_channels_and_shapes() {
        let a = OneHotMap::new(Array4::from_elem((6, 16, 4, 4), 1.0 / 6.0)).unwrap();
        let stacked = stack_predictions(&[a.clone(), a.clone(), a.clone(), a.clone()]).unwrap();
        assert_eq!(stacked.data().dim(), (6, 64, 4, 4));
        assert_eq!(stack_predictions(&[a.clone()]).unwrap(), a);
        let b = OneHotMap::new(Array4::from_elem((2, 16, 4, 4), 0.5)).unwrap();
        assert!(stack_predictions(&[a.clone(), b]).is_err());
        assert!(stack_predictions(&[]).is_err());
    }

    #[test]
    fn one_hot_of_background_and_single_class() {
        let bg = LabelMap::new(Array3::zeros((2, 2, 2)), 6).unwrap();
        let oh = to_one_hot(&bg).unwrap();
        assert!(oh.channel(0).iter().all(|&v| v == 1.0));
        for c in 1..6 {
            assert!(oh.channel(c).iter().all(|&v| v == 0.0));
        }
        // A single voxel of class 3 in an otherwise background 2x2x2 block.
        let mut cls = Array3::zeros((2, 2, 2));
        cls[[1, 0, 1]] = 3;
        let oh = to_one_hot(&LabelMap::new(cls, 6).unwrap()).unwrap();
        for ((z, h, w), &v) in oh.channel(3).indexed_iter() {
            assert_eq!(v, if (z, h, w) == (1, 0, 1) { 1.0 } else { 0.0 });
        }
        assert_eq!(oh.channel(0).sum(), 7.0);
    }

    #[test]
    fn crop_offsets_are_uniform() {
        // Chi-square goodness of fit over 49 offsets with 10^4 draws.
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut counts = [0u32; 49];
        let draws = 20_000;
        for _ in 0..draws {
            counts[crop_offset(64, 16, &mut rng).unwrap()] += 1;
        }
        let expected = draws as f64 / 49.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // Critical value of chi-square with 48 degrees of freedom at p = 0.01.
        assert!(chi2 < 73.68, "chi2 = {chi2}");
        assert!(counts.iter().all(|&c| c > 0));
    }

    proptest! {
        #[test]
        fn split_then_stack_is_identity(nslabs in 1usize..5, depth in 1usize..5, h in 1usize..4, w in 1usize..4, seed in any::<u64>()) {
            let z = nslabs * depth;
            let mut state = seed | 1;
            let labels = LabelMap::new(Array3::from_shape_fn((z, h, w), |_| {
                state ^= state << 13; state ^= state >> 7; state ^= state << 17;
                (state % 6) as u8
            }), 6).unwrap();
            let vol = CtVolume::new(labels.classes().mapv(|c| c as f32 / 5.0), [1.0; 3], true).unwrap();
            let slabs = split_for_inference(&vol, depth).unwrap();
            let chunks: Vec<OneHotMap> = slabs
                .iter()
                .map(|s| {
                    let cls = s.data().mapv(|v| (v * 5.0).round() as u8);
                    to_one_hot(&LabelMap::new(cls, 6).unwrap()).unwrap()
                })
                .collect();
            let stacked = stack_predictions(&chunks).unwrap();
            prop_assert_eq!(stacked.argmax(), labels.clone());
            let joined: Vec<f32> = slabs.iter().flat_map(|s| s.as_slice().to_vec()).collect();
            prop_assert_eq!(joined.as_slice(), vol.as_slice());
        }

        #[test]
        fn one_hot_sums_to_one_and_inverts(z in 1usize..4, h in 1usize..4, w in 1usize..4, c in 1usize..8, seed in any::<u64>()) {
            let mut state = seed | 1;
            let labels = LabelMap::new(Array3::from_shape_fn((z, h, w), |_| {
                state ^= state << 13; state ^= state >> 7; state ^= state << 17;
                (state % c as u64) as u8
            }), c).unwrap();
            let oh = to_one_hot(&labels).unwrap();
            let sums = oh.data().sum_axis(Axis(0));
            prop_assert!(sums.iter().all(|&s| s == 1.0));
            prop_assert_eq!(oh.argmax(), labels);
        }
    }
}
