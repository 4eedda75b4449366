//! Region and boundary scores for segmentation masks, and structure,
//! alignment, F-measure and absolute-error scores for saliency maps.
//!
//! Masks are row-major `bool` slices; saliency maps are row-major `f64`
//! slices in `[0, 1]`.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};

/// `np.spacing(1)`, the stabiliser the saliency measures use.
const EPS: f64 = f64::EPSILON;

/// Boundary tolerance as a fraction of the image diagonal.
pub const BOUNDARY_TOLERANCE: f64 = 0.008;

pub const BETA_SQ: f64 = 0.3;

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("prediction has {a} pixels, ground truth {b}")));
    }
    Ok(())
}

fn check_dims(len: usize, h: usize, w: usize) -> Result<()> {
    if len != h * w {
        return Err(Error::Shape(format!("{len} pixels do not form a {h}x{w} image")));
    }
    Ok(())
}

/// Intersection over union; two empty masks score 1.
pub fn jaccard(pred: &[bool], gt: &[bool]) -> Result<f64> {
    same_len(pred.len(), gt.len())?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// One-pixel-thick boundary map: a pixel is on the boundary when it differs
/// from its east, south or south-east neighbour, with zeros beyond the image.
/// On the last row only the east neighbour counts, on the last column only
/// the south one, and the bottom-right pixel is never a boundary.
pub fn boundary_map(seg: &[bool], h: usize, w: usize) -> Vec<bool> {
    let at = |y: usize, x: usize| y < h && x < w && seg[y * w + x];
    let mut b = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let s = seg[y * w + x];
            b[y * w + x] = match (y + 1 == h, x + 1 == w) {
                (true, true) => false,
                (true, false) => s != at(y, x + 1),
                (false, true) => s != at(y + 1, x),
                (false, false) => s != at(y, x + 1) || s != at(y + 1, x) || s != at(y + 1, x + 1),
            };
        }
    }
    b
}

/// Dilation by a disk of integer radius `r` (offsets with `dy² + dx² <= r²`).
pub fn dilate_disk(mask: &[bool], h: usize, w: usize, r: usize) -> Vec<bool> {
    let r = r as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
        .collect();
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            for &(dy, dx) in &offsets {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    out[yy as usize * w + xx as usize] = true;
                }
            }
        }
    }
    out
}

/// Boundary matching radius in pixels for a `h x w` image.
pub fn boundary_radius(h: usize, w: usize, tol: f64) -> usize {
    if tol >= 1.0 {
        tol as usize
    } else {
        (tol * ((h * h + w * w) as f64).sqrt()).ceil() as usize
    }
}

/// Boundary F-score with the default tolerance.
pub fn boundary_f(pred: &[bool], gt: &[bool], h: usize, w: usize) -> Result<f64> {
    boundary_f_with(pred, gt, h, w, BOUNDARY_TOLERANCE)
}

/// Boundary F-score: boundary pixels of one mask count as matched when they
/// fall inside the disk-dilated boundary of the other. `tol < 1` is a
/// fraction of the diagonal, otherwise a radius in pixels.
pub fn boundary_f_with(pred: &[bool], gt: &[bool], h: usize, w: usize, tol: f64) -> Result<f64> {
    same_len(pred.len(), gt.len())?;
    check_dims(pred.len(), h, w)?;
    let r = boundary_radius(h, w, tol);
    let bp = boundary_map(pred, h, w);
    let bg = boundary_map(gt, h, w);
    let n_pred = bp.iter().filter(|&&v| v).count();
    let n_gt = bg.iter().filter(|&&v| v).count();
    let (precision, recall) = match (n_pred, n_gt) {
        (0, 0) => (1.0, 1.0),
        (0, _) => (1.0, 0.0),
        (_, 0) => (0.0, 1.0),
        _ => {
            let dp = dilate_disk(&bp, h, w, r);
            let dg = dilate_disk(&bg, h, w, r);
            let pred_hit = bp.iter().zip(&dg).filter(|(&b, &d)| b && d).count();
            let gt_hit = bg.iter().zip(&dp).filter(|(&b, &d)| b && d).count();
            (pred_hit as f64 / n_pred as f64, gt_hit as f64 / n_gt as f64)
        }
    };
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

/// Mean, recall (fraction of values above 0.5) and decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub recall: f64,
    pub decay: f64,
}

/// Splits per-frame scores into four overlapping temporal bins and reports
/// the drop from the first bin's mean to the last one's.
pub fn recall_decay(values: &[f64]) -> Result<Summary> {
    let n = values.len();
    if n < 4 {
        return Err(Error::Data(format!("decay needs at least 4 frames, got {n}")));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let recall = values.iter().filter(|&&v| v > 0.5).count() as f64 / n as f64;
    let ids: Vec<usize> = (0..=4)
        .map(|i| (1.0 + i as f64 * (n - 1) as f64 / 4.0 + 1e-10).round() as usize - 1)
        .collect();
    let bin_mean = |i: usize| {
        let s = &values[ids[i]..=ids[i + 1]];
        s.iter().sum::<f64>() / s.len() as f64
    };
    Ok(Summary {
        mean,
        recall,
        decay: bin_mean(0) - bin_mean(3),
    })
}

fn check_saliency(s: &[f64]) -> Result<()> {
    match s.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(Error::Data(format!("saliency value {v} outside [0, 1]"))),
        None => Ok(()),
    }
}

pub fn mae(sal: &[f64], gt: &[bool]) -> Result<f64> {
    same_len(sal.len(), gt.len())?;
    check_saliency(sal)?;
    if sal.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = sal.iter().zip(gt).map(|(&s, &g)| (s - g as u8 as f64).abs()).sum();
    Ok(s / sal.len() as f64)
}

fn mean(v: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = v.len();
    if n == 0 {
        0.0
    } else {
        v.sum::<f64>() / n as f64
    }
}

/// Object-level similarity of the values selected by the ground truth.
fn s_object(vals: &[f64]) -> f64 {
    let n = vals.len();
    if n == 0 {
        return 0.0;
    }
    let x = vals.iter().sum::<f64>() / n as f64;
    let sigma = if n > 1 {
        (vals.iter().map(|v| (v - x).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn object_score(sal: &[f64], gt: &[bool]) -> f64 {
    let fg: Vec<f64> = sal.iter().zip(gt).filter(|(_, &g)| g).map(|(&s, _)| s).collect();
    let bg: Vec<f64> = sal.iter().zip(gt).filter(|(_, &g)| !g).map(|(&s, _)| 1.0 - s).collect();
    let u = fg.len() as f64 / gt.len() as f64;
    u * s_object(&fg) + (1.0 - u) * s_object(&bg)
}

/// Structural similarity of one block, with sample (n - 1) statistics.
fn block_ssim(sal: &[f64], gt: &[f64]) -> f64 {
    let n = sal.len();
    if n == 0 {
        return 0.0;
    }
    let x = sal.iter().sum::<f64>() / n as f64;
    let y = gt.iter().sum::<f64>() / n as f64;
    let d = (n.max(2) - 1) as f64;
    let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in sal.iter().zip(gt) {
        sx += (a - x).powi(2);
        sy += (b - y).powi(2);
        sxy += (a - x) * (b - y);
    }
    let (sx, sy, sxy) = (sx / d, sy / d, sxy / d);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Split point of the region measure: the rounded foreground centroid plus
/// one, or the image centre plus one for an empty mask.
fn split_point(gt: &[bool], h: usize, w: usize) -> (usize, usize) {
    let (mut sy, mut sx, mut n) = (0.0, 0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if gt[y * w + x] {
                sy += y as f64;
                sx += x as f64;
                n += 1;
            }
        }
    }
    let (cx, cy) = if n == 0 {
        (round_half_even(w as f64 / 2.0), round_half_even(h as f64 / 2.0))
    } else {
        (round_half_even(sx / n as f64), round_half_even(sy / n as f64))
    };
    ((cx as usize + 1).min(w), (cy as usize + 1).min(h))
}

fn round_half_even(v: f64) -> f64 {
    let r = v.round();
    if (v - v.trunc()).abs() == 0.5 && r % 2.0 != 0.0 {
        r - v.signum()
    } else {
        r
    }
}

fn region_score(sal: &[f64], gt: &[bool], h: usize, w: usize) -> f64 {
    let (sx, sy) = split_point(gt, h, w);
    let area = (h * w) as f64;
    let quads = [(0, sy, 0, sx), (0, sy, sx, w), (sy, h, 0, sx), (sy, h, sx, w)];
    let mut total = 0.0;
    for (i, &(y0, y1, x0, x1)) in quads.iter().enumerate() {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for y in y0..y1 {
            for x in x0..x1 {
                a.push(sal[y * w + x]);
                b.push(gt[y * w + x] as u8 as f64);
            }
        }
        let weight = match i {
            0 => (sx * sy) as f64 / area,
            1 => ((w - sx) * sy) as f64 / area,
            2 => (sx * (h - sy)) as f64 / area,
            _ => ((w - sx) * (h - sy)) as f64 / area,
        };
        total += weight * block_ssim(&a, &b);
    }
    total
}

/// Structure measure with `alpha = 0.5`.
pub fn s_measure(sal: &[f64], gt: &[bool], h: usize, w: usize) -> Result<f64> {
    same_len(sal.len(), gt.len())?;
    check_dims(sal.len(), h, w)?;
    check_saliency(sal)?;
    if sal.is_empty() {
        return Ok(1.0);
    }
    let y = gt.iter().filter(|&&g| g).count() as f64 / gt.len() as f64;
    let s = mean(sal.iter().copied());
    Ok(if y == 0.0 {
        1.0 - s
    } else if y == 1.0 {
        s
    } else {
        (0.5 * object_score(sal, gt) + 0.5 * region_score(sal, gt, h, w)).max(0.0)
    })
}

/// The 256 thresholds `i / 255`; a pixel is foreground when `s >= t`.
pub fn default_thresholds() -> Vec<f64> {
    (0..256).map(|i| i as f64 / 255.0).collect()
}

/// Confusion counts at one threshold.
#[derive(Clone, Copy, Debug)]
struct Counts {
    tp: usize,
    fp: usize,
    gt_fg: usize,
    total: usize,
}

fn counts(sal: &[f64], gt: &[bool], t: f64) -> Counts {
    let mut c = Counts {
        tp: 0,
        fp: 0,
        gt_fg: 0,
        total: sal.len(),
    };
    for (&s, &g) in sal.iter().zip(gt) {
        c.gt_fg += g as usize;
        if s >= t {
            if g {
                c.tp += 1;
            } else {
                c.fp += 1;
            }
        }
    }
    c
}

/// Enhanced alignment of a binarised map, averaged over all `N` pixels.
fn enhanced_alignment(c: Counts) -> f64 {
    let n = c.total as f64;
    let pred_fg = (c.tp + c.fp) as f64;
    let sum = if c.gt_fg == 0 {
        n - pred_fg
    } else if c.gt_fg == c.total {
        pred_fg
    } else {
        let fn_ = (c.gt_fg - c.tp) as f64;
        let tn = n - pred_fg - fn_;
        let mp = pred_fg / n;
        let mg = c.gt_fg as f64 / n;
        let (pf, pb, gf, gb) = (1.0 - mp, -mp, 1.0 - mg, -mg);
        let part = |a: f64, b: f64| {
            let align = 2.0 * a * b / (a * a + b * b + EPS);
            (align + 1.0).powi(2) / 4.0
        };
        c.tp as f64 * part(pf, gf) + c.fp as f64 * part(pf, gb) + fn_ * part(pb, gf) + tn * part(pb, gb)
    };
    sum / n
}

fn f_beta(c: Counts) -> f64 {
    let pred_fg = c.tp + c.fp;
    let p = if pred_fg == 0 { 0.0 } else { c.tp as f64 / pred_fg as f64 };
    let r = if c.gt_fg == 0 { 0.0 } else { c.tp as f64 / c.gt_fg as f64 };
    let d = BETA_SQ * p + r;
    if d == 0.0 {
        0.0
    } else {
        (1.0 + BETA_SQ) * p * r / d
    }
}

fn sweep_max(sal: &[f64], gt: &[bool], thresholds: &[f64], f: fn(Counts) -> f64) -> Result<f64> {
    same_len(sal.len(), gt.len())?;
    check_saliency(sal)?;
    if sal.is_empty() {
        return Ok(1.0);
    }
    Ok(thresholds.iter().map(|&t| f(counts(sal, gt, t))).fold(0.0, f64::max))
}

pub fn e_measure_max(sal: &[f64], gt: &[bool]) -> Result<f64> {
    e_measure_max_over(sal, gt, &default_thresholds())
}

pub fn e_measure_max_over(sal: &[f64], gt: &[bool], thresholds: &[f64]) -> Result<f64> {
    sweep_max(sal, gt, thresholds, enhanced_alignment)
}

/// Maximum F-measure with `beta² = 0.3`.
pub fn f_beta_max(sal: &[f64], gt: &[bool]) -> Result<f64> {
    f_beta_max_over(sal, gt, &default_thresholds())
}

pub fn f_beta_max_over(sal: &[f64], gt: &[bool], thresholds: &[f64]) -> Result<f64> {
    sweep_max(sal, gt, thresholds, f_beta)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Binary masks: region and boundary scores.
    Uvos,
    /// Soft maps: saliency scores.
    Vsod,
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uvos" => Ok(Mode::Uvos),
            "vsod" => Ok(Mode::Vsod),
            _ => Err(Error::Config(format!("unknown evaluation mode {s:?}; expected uvos or vsod"))),
        }
    }
}

/// One prediction / ground-truth pair.
pub struct Frame<'a> {
    pub height: usize,
    pub width: usize,
    /// Predicted foreground probability in `[0, 1]`.
    pub pred: &'a [f64],
    pub gt: &'a [bool],
}

/// Scores of one sequence, or their average over sequences. Fields that
/// the mode does not produce are `None`; decay needs four frames.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Scores {
    pub name: String,
    pub frames: usize,
    pub j_mean: Option<f64>,
    pub j_recall: Option<f64>,
    pub j_decay: Option<f64>,
    pub f_mean: Option<f64>,
    pub f_recall: Option<f64>,
    pub f_decay: Option<f64>,
    pub jf_mean: Option<f64>,
    pub s_measure: Option<f64>,
    pub e_measure_max: Option<f64>,
    pub f_beta_max: Option<f64>,
    pub mae: Option<f64>,
}

fn summarise(values: &[f64]) -> (f64, f64, Option<f64>) {
    match recall_decay(values) {
        Ok(s) => (s.mean, s.recall, Some(s.decay)),
        Err(_) => {
            let n = values.len().max(1) as f64;
            let recall = values.iter().filter(|&&v| v > 0.5).count() as f64 / n;
            (values.iter().sum::<f64>() / n, recall, None)
        }
    }
}

/// Scores a sequence. In UVOS mode predictions are binarised at 0.5.
pub fn score_sequence(name: &str, frames: &[Frame], mode: Mode) -> Result<Scores> {
    if frames.is_empty() {
        return Err(Error::Data(format!("sequence {name} has no frames")));
    }
    let mut out = Scores {
        name: name.to_string(),
        frames: frames.len(),
        ..Scores::default()
    };
    match mode {
        Mode::Uvos => {
            let (mut js, mut fs) = (Vec::new(), Vec::new());
            for f in frames {
                let bin: Vec<bool> = f.pred.iter().map(|&p| p > 0.5).collect();
                js.push(jaccard(&bin, f.gt)?);
                fs.push(boundary_f(&bin, f.gt, f.height, f.width)?);
            }
            let (jm, jr, jd) = summarise(&js);
            let (fm, fr, fd) = summarise(&fs);
            out.j_mean = Some(jm);
            out.j_recall = Some(jr);
            out.j_decay = jd;
            out.f_mean = Some(fm);
            out.f_recall = Some(fr);
            out.f_decay = fd;
            out.jf_mean = Some((jm + fm) / 2.0);
        }
        Mode::Vsod => {
            let n = frames.len() as f64;
            let (mut s, mut e, mut fb, mut m) = (0.0, 0.0, 0.0, 0.0);
            for f in frames {
                same_len(f.pred.len(), f.gt.len())?;
                s += s_measure(f.pred, f.gt, f.height, f.width)?;
                e += e_measure_max(f.pred, f.gt)?;
                fb += f_beta_max(f.pred, f.gt)?;
                m += mae(f.pred, f.gt)?;
            }
            out.s_measure = Some(s / n);
            out.e_measure_max = Some(e / n);
            out.f_beta_max = Some(fb / n);
            out.mae = Some(m / n);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub mode: Mode,
    pub sequences: Vec<Scores>,
    /// Unweighted mean over sequences.
    pub aggregate: Scores,
}

impl MetricReport {
    pub fn new(mode: Mode, sequences: Vec<Scores>) -> Self {
        let avg = |f: fn(&Scores) -> Option<f64>| {
            let v: Vec<f64> = sequences.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let aggregate = Scores {
            name: "mean".into(),
            frames: sequences.iter().map(|s| s.frames).sum(),
            j_mean: avg(|s| s.j_mean),
            j_recall: avg(|s| s.j_recall),
            j_decay: avg(|s| s.j_decay),
            f_mean: avg(|s| s.f_mean),
            f_recall: avg(|s| s.f_recall),
            f_decay: avg(|s| s.f_decay),
            jf_mean: None,
            s_measure: avg(|s| s.s_measure),
            e_measure_max: avg(|s| s.e_measure_max),
            f_beta_max: avg(|s| s.f_beta_max),
            mae: avg(|s| s.mae),
        };
        let jf_mean = aggregate.j_mean.zip(aggregate.f_mean).map(|(j, f)| (j + f) / 2.0);
        Self {
            mode,
            sequences,
            aggregate: Scores { jf_mean, ..aggregate },
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "sequence,frames,J_mean,J_recall,J_decay,F_mean,F_recall,F_decay,JF_mean,S_measure,E_measure_max,F_beta_max,MAE\n",
        );
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in self.sequences.iter().chain(std::iter::once(&self.aggregate)) {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.name,
                r.frames,
                cell(r.j_mean),
                cell(r.j_recall),
                cell(r.j_decay),
                cell(r.f_mean),
                cell(r.f_recall),
                cell(r.f_decay),
                cell(r.jf_mean),
                cell(r.s_measure),
                cell(r.e_measure_max),
                cell(r.f_beta_max),
                cell(r.mae)
            );
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `<path>` as CSV or JSON by extension (JSON for `.json`), and
    /// the other format next to it.
    pub fn write(&self, path: &Path) -> Result<()> {
        let is_json = path.extension().is_some_and(|e| e == "json");
        let (csv, json) = if is_json {
            (path.with_extension("csv"), path.to_path_buf())
        } else {
            (path.to_path_buf(), path.with_extension("json"))
        };
        std::fs::write(csv, self.to_csv())?;
        std::fs::write(json, self.to_json()?)?;
        Ok(())
    }
}
