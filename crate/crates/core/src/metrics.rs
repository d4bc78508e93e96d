//! Overlap and distance metrics between binary masks, computed with an exact
//! separable Euclidean distance transform under anisotropic spacing.
//!
//! Voxel `(z, h, w)` sits at the physical point `(z·s_z, h·s_h, w·s_w)`.

use std::io::Write;
use std::path::Path;

use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::voldata::{LabelMap, ORGAN_NAMES};

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub data: Array3<bool>,
    pub spacing_mm: [f64; 3],
}

impl BinaryMask {
    pub fn new(data: Array3<bool>, spacing_mm: [f64; 3]) -> Result<Self> {
        if spacing_mm.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Invalid(format!("bad spacing {spacing_mm:?}")));
        }
        Ok(Self { data, spacing_mm })
    }

    /// Mask from an explicit voxel list.
    pub fn from_voxels(dims: [usize; 3], voxels: &[[usize; 3]], spacing_mm: [f64; 3]) -> Result<Self> {
        let mut data = Array3::from_elem((dims[0], dims[1], dims[2]), false);
        for v in voxels {
            *data
                .get_mut((v[0], v[1], v[2]))
                .ok_or_else(|| Error::Shape(format!("voxel {v:?} outside {dims:?}")))? = true;
        }
        Self::new(data, spacing_mm)
    }

    /// Voxels equal to `class`.
    pub fn of_class(labels: &LabelMap, class: u8, spacing_mm: [f64; 3]) -> Result<Self> {
        Self::new(labels.classes().mapv(|c| c == class), spacing_mm)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn dims(&self) -> [usize; 3] {
        let (z, h, w) = self.data.dim();
        [z, h, w]
    }
}

fn check_pair(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    if a.spacing_mm != b.spacing_mm {
        return Err(Error::Invalid(format!(
            "spacing {:?} vs {:?}",
            a.spacing_mm, b.spacing_mm
        )));
    }
    Ok(())
}

fn require_nonempty(m: &BinaryMask, which: &str) -> Result<()> {
    if m.is_empty() {
        Err(Error::OrganMissing(format!("{which} mask is empty")))
    } else {
        Ok(())
    }
}

/// `2|A ∩ B| / (|A| + |B|)`; two empty masks score 1.
pub fn dsc(gt: &BinaryMask, pred: &BinaryMask) -> Result<f64> {
    check_pair(gt, pred)?;
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    Zip::from(&gt.data).and(&pred.data).for_each(|&x, &y| {
        a += x as usize;
        b += y as usize;
        inter += (x && y) as usize;
    });
    Ok(if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    })
}

/// Lower envelope of parabolas along one line (Felzenszwalb-Huttenlocher).
/// `f` holds squared distances, `+inf` where unknown; `out[i]` becomes
/// `min_q (i - q)^2 s^2 + f[q]`.
fn edt_line(f: &[f64], spacing: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let pos = |q: usize| q as f64 * spacing;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        let fq = f[q] + pos(q) * pos(q);
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&r) => {
                    let fr = f[r] + pos(r) * pos(r);
                    let s = (fq - fr) / (2.0 * (pos(q) - pos(r)));
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (i, o) in out.iter_mut().enumerate() {
        let p = pos(i);
        while k + 1 < v.len() && z[k + 1] < p {
            k += 1;
        }
        let d = p - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance (mm²) from every voxel to the nearest
/// foreground voxel of `mask`; `+inf` everywhere for an empty mask.
pub fn squared_distance_transform(mask: &BinaryMask) -> Array3<f64> {
    let mut dt = mask.data.mapv(|b| if b { 0.0 } else { f64::INFINITY });
    let mut v = Vec::new();
    let mut z = Vec::new();
    for axis in [2usize, 1, 0] {
        let len = dt.len_of(ndarray::Axis(axis));
        let mut line = vec![0.0; len];
        let mut out = vec![0.0; len];
        for mut lane in dt.lanes_mut(ndarray::Axis(axis)) {
            for (l, x) in line.iter_mut().zip(lane.iter()) {
                *l = *x;
            }
            edt_line(&line, mask.spacing_mm[axis], &mut out, &mut v, &mut z);
            for (x, o) in lane.iter_mut().zip(&out) {
                *x = *o;
            }
        }
    }
    dt
}

/// Mean distance from the voxels of `from` to the nearest voxel of `to`.
fn directed_mean(from: &BinaryMask, to_dt: &Array3<f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    Zip::from(&from.data).and(to_dt).for_each(|&f, &d| {
        if f {
            sum += d.sqrt();
            n += 1;
        }
    });
    sum / n as f64
}

/// Directed mean distances `(gt → pred, pred → gt)` over full voxel sets.
pub fn directed_means(gt: &BinaryMask, pred: &BinaryMask) -> Result<(f64, f64)> {
    check_pair(gt, pred)?;
    require_nonempty(gt, "ground-truth")?;
    require_nonempty(pred, "predicted")?;
    let dt_pred = squared_distance_transform(pred);
    let dt_gt = squared_distance_transform(gt);
    Ok((directed_mean(gt, &dt_pred), directed_mean(pred, &dt_gt)))
}

/// Average Hausdorff distance: the larger of the two directed means.
pub fn ahd(gt: &BinaryMask, pred: &BinaryMask) -> Result<f64> {
    let (a, b) = directed_means(gt, pred)?;
    Ok(a.max(b))
}

/// Foreground voxels with a 6-neighbour outside the foreground; voxels on
/// the volume boundary count as surface.
pub fn extract_surface(mask: &BinaryMask) -> Result<BinaryMask> {
    require_nonempty(mask, "input")?;
    let [d, h, w] = mask.dims();
    let m = &mask.data;
    let surface = Array3::from_shape_fn((d, h, w), |(z, y, x)| {
        if !m[[z, y, x]] {
            return false;
        }
        let interior = z > 0
            && y > 0
            && x > 0
            && z + 1 < d
            && y + 1 < h
            && x + 1 < w
            && m[[z - 1, y, x]]
            && m[[z + 1, y, x]]
            && m[[z, y - 1, x]]
            && m[[z, y + 1, x]]
            && m[[z, y, x - 1]]
            && m[[z, y, x + 1]];
        !interior
    });
    BinaryMask::new(surface, mask.spacing_mm)
}

/// Average surface Hausdorff distance: mean of the directed surface means.
pub fn ashd(gt: &BinaryMask, pred: &BinaryMask) -> Result<f64> {
    check_pair(gt, pred)?;
    require_nonempty(gt, "ground-truth")?;
    require_nonempty(pred, "predicted")?;
    let (a, b) = directed_means(&extract_surface(gt)?, &extract_surface(pred)?)?;
    Ok(0.5 * (a + b))
}

/// `100 (|pred| - |gt|) / |gt|`; negative means under-segmentation.
pub fn volume_difference(gt: &BinaryMask, pred: &BinaryMask) -> Result<f64> {
    check_pair(gt, pred)?;
    let t = gt.count();
    if t == 0 {
        return Err(Error::OrganMissing("ground-truth mask is empty".into()));
    }
    Ok(100.0 * (pred.count() as f64 - t as f64) / t as f64)
}

/// Metrics of one organ in one case; `None` is reported as N/A.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrganMetrics {
    pub dsc: f64,
    pub ahd_mm: Option<f64>,
    pub ashd_mm: Option<f64>,
    pub vd_percent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    /// In `ORGAN_NAMES` order.
    pub organs: Vec<OrganMetrics>,
}

/// All four metrics for classes 1..=5.
pub fn evaluate_case(case_id: &str, gt: &LabelMap, pred: &LabelMap, spacing_mm: [f64; 3]) -> Result<CaseMetrics> {
    if gt.dims() != pred.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", gt.dims(), pred.dims())));
    }
    let mut organs = Vec::with_capacity(ORGAN_NAMES.len());
    for class in 1..=ORGAN_NAMES.len() as u8 {
        let t = BinaryMask::of_class(gt, class, spacing_mm)?;
        let p = BinaryMask::of_class(pred, class, spacing_mm)?;
        let na = |r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::OrganMissing(_)) => Ok(None),
            Err(e) => Err(e),
        };
        organs.push(OrganMetrics {
            dsc: dsc(&t, &p)?,
            ahd_mm: na(ahd(&t, &p))?,
            ashd_mm: na(ashd(&t, &p))?,
            vd_percent: na(volume_difference(&t, &p))?,
        });
    }
    Ok(CaseMetrics {
        case_id: case_id.to_string(),
        organs,
    })
}

/// Mean and sample standard deviation of the available values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub n: usize,
}

impl Stat {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let v: Vec<f64> = values.into_iter().flatten().collect();
        let n = v.len();
        if n == 0 {
            return Self { mean: None, std: None, n };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self {
            mean: Some(mean),
            std: Some(std),
            n,
        }
    }

    /// `mean(±std)` with the given precision, or `N/A`.
    pub fn display(&self, digits: usize) -> String {
        match (self.mean, self.std) {
            (Some(m), Some(s)) => format!("{m:.digits$}(±{s:.digits$})"),
            _ => "N/A".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganSummary {
    pub organ: String,
    pub dsc: Stat,
    pub ahd_mm: Stat,
    pub ashd_mm: Stat,
    pub vd_percent: Stat,
}

/// Per-case metrics plus per-organ aggregates, organs in manifest order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub organ_names: Vec<String>,
    pub cases: Vec<CaseMetrics>,
    pub summary: Vec<OrganSummary>,
}

pub const METRIC_COLUMNS: [&str; 4] = ["dsc", "ahd_mm", "ashd_mm", "vd_percent"];

impl MetricReport {
    pub fn from_cases(cases: Vec<CaseMetrics>) -> Self {
        let summary = ORGAN_NAMES
            .iter()
            .enumerate()
            .map(|(k, name)| OrganSummary {
                organ: name.to_string(),
                dsc: Stat::of(cases.iter().map(|c| Some(c.organs[k].dsc))),
                ahd_mm: Stat::of(cases.iter().map(|c| c.organs[k].ahd_mm)),
                ashd_mm: Stat::of(cases.iter().map(|c| c.organs[k].ashd_mm)),
                vd_percent: Stat::of(cases.iter().map(|c| c.organs[k].vd_percent)),
            })
            .collect();
        Self {
            organ_names: ORGAN_NAMES.iter().map(|s| s.to_string()).collect(),
            cases,
            summary,
        }
    }

    /// Mean over organs of the per-organ mean DSC.
    pub fn mean_dsc(&self) -> f64 {
        let v: Vec<f64> = self.summary.iter().filter_map(|s| s.dsc.mean).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }

    /// Header: `case`, then `<organ>_<metric>` for each organ in reporting order
    /// order (DSC, AHD, ASHD, VD).
    pub fn csv_header(&self) -> Vec<String> {
        let mut h = vec!["case".to_string()];
        for o in &self.organ_names {
            for m in METRIC_COLUMNS {
                h.push(format!("{o}_{m}"));
            }
        }
        h
    }

    /// One row per case and a final `mean(±std)` row; N/A stays N/A.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(self.csv_header())?;
        let fmt = |v: Option<f64>| v.map_or("N/A".to_string(), |x| format!("{x:.6}"));
        for c in &self.cases {
            let mut row = vec![c.case_id.clone()];
            for o in &c.organs {
                row.extend([fmt(Some(o.dsc)), fmt(o.ahd_mm), fmt(o.ashd_mm), fmt(o.vd_percent)]);
            }
            out.write_record(row)?;
        }
        let mut agg = vec!["mean(±std)".to_string()];
        for s in &self.summary {
            agg.extend([
                s.dsc.display(4),
                s.ahd_mm.display(4),
                s.ashd_mm.display(4),
                s.vd_percent.display(2),
            ]);
        }
        out.write_record(agg)?;
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let json = dir.join(format!("{stem}.json"));
        crate::io_util::write_json(&json, self)?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let f = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::io_util::read_json(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const UNIT: [f64; 3] = [1.0; 3];

    fn mask(dims: [usize; 3], voxels: &[[usize; 3]], spacing: [f64; 3]) -> BinaryMask {
        BinaryMask::from_voxels(dims, voxels, spacing).unwrap()
    }

    fn first_n(dims: [usize; 3], range: std::ops::Range<usize>) -> BinaryMask {
        let mut data = Array3::from_elem((dims[0], dims[1], dims[2]), false);
        for (i, v) in data.iter_mut().enumerate() {
            *v = range.contains(&i);
        }
        BinaryMask::new(data, UNIT).unwrap()
    }

    #[test]
    fn dsc_examples() {
        let a = first_n([4, 8, 8], 0..100);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&a, &first_n([4, 8, 8], 150..200)).unwrap(), 0.0);
        // |True| = 100, |Pred| = 60, overlap 50.
        let p = first_n([4, 8, 8], 50..110);
        assert_abs_diff_eq!(dsc(&a, &p).unwrap(), 0.625, epsilon = 1e-15);
        let e = first_n([4, 8, 8], 0..0);
        assert_eq!(dsc(&e, &e).unwrap(), 1.0);
        assert_eq!(dsc(&e, &a).unwrap(), 0.0);
    }

    #[test]
    fn ahd_examples() {
        let d = [1, 1, 5];
        let x = mask(d, &[[0, 0, 0]], UNIT);
        assert_eq!(ahd(&x, &x).unwrap(), 0.0);
        assert_eq!(ahd(&x, &mask(d, &[[0, 0, 3]], UNIT)).unwrap(), 3.0);
        assert_eq!(ahd(&x, &mask(d, &[[0, 0, 0], [0, 0, 4]], UNIT)).unwrap(), 2.0);
        assert!(matches!(ahd(&x, &mask(d, &[], UNIT)), Err(Error::OrganMissing(_))));
    }

    #[test]
    fn surface_examples() {
        let single = mask([3, 3, 3], &[[1, 1, 1]], UNIT);
        assert_eq!(extract_surface(&single).unwrap(), single);
        let mut cube = Array3::from_elem((7, 7, 7), false);
        cube.slice_mut(ndarray::s![1..6, 1..6, 1..6]).fill(true);
        let cube = BinaryMask::new(cube, UNIT).unwrap();
        let s = extract_surface(&cube).unwrap();
        assert_eq!(s.count(), 125 - 27);
        assert_eq!(extract_surface(&s).unwrap(), s);
        // A mask filling the volume is all surface on the boundary.
        let full = BinaryMask::new(Array3::from_elem((3, 3, 3), true), UNIT).unwrap();
        assert_eq!(extract_surface(&full).unwrap().count(), 26);
    }

    #[test]
    fn ashd_examples() {
        let d = [2, 1, 4];
        let x = mask(d, &[[0, 0, 0]], UNIT);
        assert_eq!(ashd(&x, &x).unwrap(), 0.0);
        assert_eq!(ashd(&x, &mask(d, &[[0, 0, 3]], UNIT)).unwrap(), 3.0);
        let sp = [1.5, 0.97, 0.97];
        let a = mask(d, &[[0, 0, 1]], sp);
        let b = mask(d, &[[1, 0, 1]], sp);
        assert_abs_diff_eq!(ashd(&a, &b).unwrap(), 1.5, epsilon = 1e-15);
    }

    #[test]
    fn volume_difference_examples() {
        let t = first_n([4, 8, 8], 0..100);
        assert_eq!(volume_difference(&t, &t).unwrap(), 0.0);
        assert_abs_diff_eq!(volume_difference(&t, &first_n([4, 8, 8], 0..90)).unwrap(), -10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(volume_difference(&t, &first_n([4, 8, 8], 0..110)).unwrap(), 10.0, epsilon = 1e-12);
        assert!(volume_difference(&first_n([4, 8, 8], 0..0), &t).is_err());
    }

    #[test]
    fn edt_of_empty_mask_is_infinite() {
        let e = mask([2, 2, 2], &[], UNIT);
        assert!(squared_distance_transform(&e).iter().all(|v| v.is_infinite()));
    }

    #[test]
    fn evaluate_case_identity_and_missing_organ() {
        use crate::voldata::{generate_phantom, PhantomSpec};
        let (_, gt) = generate_phantom(&PhantomSpec::desk(0)).unwrap();
        let r = evaluate_case("c", &gt, &gt, [1.5, 0.97, 0.97]).unwrap();
        for o in &r.organs {
            assert_eq!(o.dsc, 1.0);
            assert_eq!(o.ahd_mm, Some(0.0));
            assert_eq!(o.ashd_mm, Some(0.0));
            assert_eq!(o.vd_percent, Some(0.0));
        }
        let no_bladder = LabelMap::new(gt.classes().mapv(|c| if c == 2 { 0 } else { c }), 6).unwrap();
        let r = evaluate_case("c", &gt, &no_bladder, [1.5, 0.97, 0.97]).unwrap();
        assert_eq!(r.organs[1].dsc, 0.0);
        assert_eq!(r.organs[1].ahd_mm, None);
        assert_eq!(r.organs[1].ashd_mm, None);
        assert_eq!(r.organs[1].vd_percent, Some(-100.0));
        assert_eq!(r.organs[0].dsc, 1.0);
    }

    #[test]
    fn report_layout_and_na_propagation() {
        let na = OrganMetrics { dsc: 0.0, ahd_mm: None, ashd_mm: None, vd_percent: Some(-100.0) };
        let ok = OrganMetrics { dsc: 0.9, ahd_mm: Some(0.5), ashd_mm: Some(1.0), vd_percent: Some(2.0) };
        let report = MetricReport::from_cases(vec![
            CaseMetrics { case_id: "a".into(), organs: vec![ok, na, ok, ok, ok] },
            CaseMetrics { case_id: "b".into(), organs: vec![ok, na, ok, ok, ok] },
        ]);
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("case,prostate_dsc,prostate_ahd_mm,prostate_ashd_mm,prostate_vd_percent,bladder_dsc"));
        assert!(lines[1].contains(",N/A,N/A,"));
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("mean(±std),0.9000(±0.0000)"));
        assert_eq!(report.summary[1].ahd_mm.display(4), "N/A");
        assert_abs_diff_eq!(report.mean_dsc(), 0.72, epsilon = 1e-12);
    }
}
