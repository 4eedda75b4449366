//! Sequence loading, clip-wise inference, evaluation over directories, the
//! clip-length sweep and synthetic dataset export.

use std::ops::Range;
use std::path::{Path, PathBuf};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::imageio::{self, clip_tensor, list_images, read_gray, read_rgb, resize_rgb, Gray8, Rgb8};
use crate::metrics::{score_sequence, Frame, MetricReport, Mode};
use crate::model::Model;
use crate::synthetic::make_clip;
use crate::tensor::resize_plane;

/// Consecutive clips covering `0..n`: `n / t` full clips followed by one
/// shorter clip holding the remainder, if any.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipPlan {
    pub clip_len: usize,
    pub clips: Vec<Range<usize>>,
}

impl ClipPlan {
    pub fn count(&self) -> usize {
        self.clips.len()
    }
}

pub fn plan_clips(n: usize, t: usize) -> Result<ClipPlan> {
    if n == 0 || t == 0 {
        return Err(Error::Config(format!("cannot plan clips of length {t} over {n} frames")));
    }
    let clips = (0..n).step_by(t).map(|s| s..(s + t).min(n)).collect();
    Ok(ClipPlan { clip_len: t, clips })
}

/// Frame and flow image paths of one video, with optional ground truth.
#[derive(Clone, Debug)]
pub struct VideoSequence {
    pub name: String,
    pub frames: Vec<PathBuf>,
    /// One per frame; a missing final flow reuses its predecessor.
    pub flows: Vec<PathBuf>,
    pub gt: Option<Vec<PathBuf>>,
}

impl VideoSequence {
    pub fn load(frames_dir: &Path, flows_dir: &Path) -> Result<Self> {
        let frames = list_images(frames_dir)?;
        if frames.is_empty() {
            return Err(Error::Data(format!("no frames in {}", frames_dir.display())));
        }
        let mut flows = list_images(flows_dir)?;
        if flows.len() + 1 == frames.len() && !flows.is_empty() {
            flows.push(flows[flows.len() - 1].clone());
        }
        if flows.len() != frames.len() {
            return Err(Error::Data(format!(
                "{} has {} frames but {} has {} flow images",
                frames_dir.display(),
                frames.len(),
                flows_dir.display(),
                flows.len()
            )));
        }
        let name = frames_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "sequence".into());
        Ok(Self {
            name,
            frames,
            flows,
            gt: None,
        })
    }

    /// Attaches ground-truth masks, matched to frames by file stem.
    pub fn with_gt(mut self, gt_dir: &Path) -> Result<Self> {
        let gts = list_images(gt_dir)?;
        let paths = self
            .frames
            .iter()
            .map(|f| {
                let s = imageio::stem(f);
                gts.iter()
                    .find(|g| imageio::stem(g) == s)
                    .cloned()
                    .ok_or_else(|| Error::Data(format!("no ground truth for frame {s} in {}", gt_dir.display())))
            })
            .collect::<Result<_>>()?;
        self.gt = Some(paths);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Decodes every frame and flow, checking that all share one size.
    pub fn read(&self) -> Result<(Vec<Rgb8>, Vec<Rgb8>)> {
        let frames = self.frames.iter().map(|p| read_rgb(p)).collect::<Result<Vec<_>>>()?;
        let flows = self.flows.iter().map(|p| read_rgb(p)).collect::<Result<Vec<_>>>()?;
        let (w, h) = (frames[0].width, frames[0].height);
        for (img, path) in frames.iter().zip(&self.frames).chain(flows.iter().zip(&self.flows)) {
            if img.width != w || img.height != h {
                return Err(Error::Data(format!(
                    "{} is {}x{}, expected {w}x{h}",
                    path.display(),
                    img.width,
                    img.height
                )));
            }
        }
        Ok((frames, flows))
    }
}

/// Per-frame outputs at the original resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub width: usize,
    pub height: usize,
    /// Foreground probabilities, row-major.
    pub probs: Vec<Vec<f32>>,
}

impl Inference {
    /// Binary masks with foreground 255.
    pub fn masks(&self) -> Vec<Gray8> {
        self.gray(|p| if p > 0.5 { 255 } else { 0 })
    }

    /// Soft saliency maps quantised to 8 bits.
    pub fn saliency(&self) -> Vec<Gray8> {
        self.gray(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
    }

    fn gray(&self, f: impl Fn(f32) -> u8) -> Vec<Gray8> {
        self.probs
            .iter()
            .map(|p| Gray8 {
                width: self.width,
                height: self.height,
                data: p.iter().map(|&v| f(v)).collect(),
            })
            .collect()
    }
}

/// Runs the model clip by clip. Frames are resized to the model's square
/// input, and probabilities are resized back bilinearly.
pub fn infer_frames(model: &Model, frames: &[Rgb8], flows: &[Rgb8], clip_len: usize) -> Result<Inference> {
    if frames.len() != flows.len() {
        return Err(Error::Data(format!("{} frames but {} flows", frames.len(), flows.len())));
    }
    let plan = plan_clips(frames.len(), clip_len)?;
    let side = model.config.input_side;
    let (h, w) = (frames[0].height, frames[0].width);
    let fit = |imgs: &[Rgb8]| imgs.iter().map(|i| resize_rgb(i, side, side)).collect::<Vec<_>>();
    let mut probs = Vec::with_capacity(frames.len());
    for clip in &plan.clips {
        let f = clip_tensor(&fit(&frames[clip.clone()]))?;
        let o = clip_tensor(&fit(&flows[clip.clone()]))?;
        let p = model.predict(&f, &o)?;
        for frame in p.chunks(side * side) {
            probs.push(resize_plane(frame, side, side, h, w));
        }
    }
    Ok(Inference {
        width: w,
        height: h,
        probs,
    })
}

pub fn infer(seq: &VideoSequence, model: &Model, clip_len: usize) -> Result<Inference> {
    let (frames, flows) = seq.read()?;
    infer_frames(model, &frames, &flows, clip_len)
}

/// Writes `masks/<stem>.png` and `saliency/<stem>.png` under `out`.
pub fn write_inference(out: &Path, seq: &VideoSequence, inf: &Inference) -> Result<()> {
    let (md, sd) = (out.join("masks"), out.join("saliency"));
    std::fs::create_dir_all(&md)?;
    std::fs::create_dir_all(&sd)?;
    for ((path, m), s) in seq.frames.iter().zip(inf.masks()).zip(inf.saliency()) {
        let name = format!("{}.png", imageio::stem(path));
        imageio::write_gray(&md.join(&name), &m)?;
        imageio::write_gray(&sd.join(&name), &s)?;
    }
    Ok(())
}

/// Sequences of a ground-truth tree: each subdirectory holding images is a
/// sequence, and a directory of images alone is a single sequence.
fn sequence_dirs(gt_dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(gt_dir)
        .map_err(|e| Error::Data(format!("cannot list {}: {e}", gt_dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    let mut out = Vec::new();
    for d in subdirs {
        if !list_images(&d)?.is_empty() {
            let name = d.file_name().unwrap_or_default().to_string_lossy().into_owned();
            out.push((name.clone(), PathBuf::from(name)));
        }
    }
    if out.is_empty() && !list_images(gt_dir)?.is_empty() {
        out.push((imageio::stem(gt_dir), PathBuf::new()));
    }
    if out.is_empty() {
        return Err(Error::Data(format!("no ground-truth masks under {}", gt_dir.display())));
    }
    Ok(out)
}

/// Scores predictions against ground truth, pairing files by stem.
/// Predictions are 8-bit maps read as probabilities `v / 255`.
pub fn evaluate(pred_dir: &Path, gt_dir: &Path, mode: Mode) -> Result<MetricReport> {
    let mut rows = Vec::new();
    for (name, rel) in sequence_dirs(gt_dir)? {
        let (gdir, pdir) = (gt_dir.join(&rel), pred_dir.join(&rel));
        let preds = list_images(&pdir)?;
        let mut loaded = Vec::new();
        for g in list_images(&gdir)? {
            let s = imageio::stem(&g);
            let p = preds
                .iter()
                .find(|p| imageio::stem(p) == s)
                .ok_or_else(|| Error::Data(format!("no prediction for {s} in {}", pdir.display())))?;
            let (gi, pi) = (read_gray(&g)?, read_gray(p)?);
            if (gi.width, gi.height) != (pi.width, pi.height) {
                return Err(Error::Data(format!(
                    "{} is {}x{} but its ground truth is {}x{}",
                    p.display(),
                    pi.width,
                    pi.height,
                    gi.width,
                    gi.height
                )));
            }
            let gt: Vec<bool> = gi.data.iter().map(|&v| v > 127).collect();
            let pred: Vec<f64> = pi.data.iter().map(|&v| v as f64 / 255.0).collect();
            loaded.push((gi.height, gi.width, pred, gt));
        }
        let frames: Vec<Frame> = loaded
            .iter()
            .map(|(h, w, p, g)| Frame {
                height: *h,
                width: *w,
                pred: p,
                gt: g,
            })
            .collect();
        rows.push(score_sequence(&name, &frames, mode)?);
    }
    Ok(MetricReport::new(mode, rows))
}

/// One row of the clip-length sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub clip_len: usize,
    pub j_mean: f64,
    pub f_mean: f64,
    pub jf_mean: f64,
}

/// The requested clip lengths, deduplicated, sorted and always including 12.
pub fn sweep_lengths(requested: &[usize]) -> Result<Vec<usize>> {
    if requested.contains(&0) {
        return Err(Error::Config("clip lengths must be at least 1".into()));
    }
    let mut ts: Vec<usize> = requested.iter().copied().chain([12]).collect();
    ts.sort_unstable();
    ts.dedup();
    Ok(ts)
}

/// Region and boundary scores of the sequence for each clip length.
pub fn sweep_clip_length(seq: &VideoSequence, model: &Model, lengths: &[usize]) -> Result<Vec<SweepRow>> {
    let gt_paths = seq
        .gt
        .as_ref()
        .ok_or_else(|| Error::Data("the clip-length sweep needs ground-truth masks".into()))?;
    let gts = gt_paths.iter().map(|p| read_gray(p)).collect::<Result<Vec<_>>>()?;
    let (frames, flows) = seq.read()?;
    let mut rows = Vec::new();
    for t in sweep_lengths(lengths)? {
        let inf = infer_frames(model, &frames, &flows, t)?;
        let probs: Vec<Vec<f64>> = inf.probs.iter().map(|p| p.iter().map(|&v| v as f64).collect()).collect();
        let bins: Vec<Vec<bool>> = gts.iter().map(|g| g.data.iter().map(|&v| v > 127).collect()).collect();
        let mut pairs = Vec::new();
        for (p, g) in probs.iter().zip(&bins) {
            if p.len() != g.len() {
                return Err(Error::Data("ground-truth size differs from the frames".into()));
            }
            pairs.push(Frame {
                height: inf.height,
                width: inf.width,
                pred: p,
                gt: g,
            });
        }
        let s = score_sequence(&seq.name, &pairs, Mode::Uvos)?;
        let (j, f) = (s.j_mean.unwrap_or(0.0), s.f_mean.unwrap_or(0.0));
        rows.push(SweepRow {
            clip_len: t,
            j_mean: j,
            f_mean: f,
            jf_mean: (j + f) / 2.0,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("clip_len,J_mean,F_mean,JF_mean\n");
    for r in rows {
        s.push_str(&format!("{},{:.6},{:.6},{:.6}\n", r.clip_len, r.j_mean, r.f_mean, r.jf_mean));
    }
    s
}

/// Renders the configured synthetic video into `frames/`, `flows/` and
/// `masks/` (foreground 255) under `out`, with five-digit file names.
pub fn make_data(cfg: &Config, out: &Path) -> Result<usize> {
    let clip = make_clip(&cfg.data, cfg.frames)?;
    let dirs = ["frames", "flows", "masks"].map(|d| out.join(d));
    for d in &dirs {
        std::fs::create_dir_all(d)?;
    }
    for i in 0..clip.len() {
        let name = format!("{i:05}.png");
        imageio::write_rgb(&dirs[0].join(&name), &clip.frames[i])?;
        imageio::write_rgb(&dirs[1].join(&name), &clip.flows[i])?;
        let m = &clip.masks[i];
        let mask = Gray8 {
            data: m.data.iter().map(|&v| if v > 0 { 255 } else { 0 }).collect(),
            ..m.clone()
        };
        imageio::write_gray(&dirs[2].join(&name), &mask)?;
    }
    Ok(clip.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use proptest::prelude::*;

    #[test]
    fn clip_plans() {
        let p = plan_clips(100, 12).unwrap();
        assert_eq!(p.count(), 9);
        assert_eq!(p.clips[..8].iter().filter(|c| c.len() == 12).count(), 8);
        assert_eq!(p.clips[8], 96..100);
        assert_eq!(plan_clips(12, 12).unwrap().clips, vec![0..12]);
        assert_eq!(plan_clips(5, 12).unwrap().clips, vec![0..5]);
        assert!(plan_clips(0, 3).is_err());
        assert!(plan_clips(3, 0).is_err());
    }

    proptest! {
        #[test]
        fn plans_cover_every_frame_once(n in 1usize..300, t in 1usize..40) {
            let p = plan_clips(n, t).unwrap();
            prop_assert_eq!(p.count(), n / t + usize::from(n % t != 0));
            let flat: Vec<usize> = p.clips.iter().flat_map(|c| c.clone()).collect();
            prop_assert_eq!(flat, (0..n).collect::<Vec<_>>());
            let (last, full) = p.clips.split_last().unwrap();
            prop_assert!(full.iter().all(|c| c.len() == t));
            prop_assert!(last.len() <= t && !last.is_empty());
        }
    }

    #[test]
    fn sweep_lengths_sorted_unique_with_default() {
        assert_eq!(sweep_lengths(&[8, 1, 4, 8, 2]).unwrap(), vec![1, 2, 4, 8, 12]);
        assert_eq!(sweep_lengths(&[16, 12]).unwrap(), vec![12, 16]);
        assert!(sweep_lengths(&[0]).is_err());
    }

    fn small_config(frames: usize) -> Config {
        let mut cfg = Config::toy();
        cfg.model = ModelConfig {
            stage_channels: [8, 8, 16, 16],
            input_side: 32,
            window: 1,
            sr_ratios: [1, 1],
            mlp_ratio: 1,
            encoder_blocks: 1,
            ..ModelConfig::toy()
        };
        cfg.data.canvas = 40;
        cfg.data.object_size = 12;
        cfg.frames = frames;
        cfg
    }

    #[test]
    fn make_data_then_infer_and_evaluate() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(5);
        assert_eq!(make_data(&cfg, dir.path()).unwrap(), 5);
        let seq = VideoSequence::load(&dir.path().join("frames"), &dir.path().join("flows"))
            .unwrap()
            .with_gt(&dir.path().join("masks"))
            .unwrap();
        assert_eq!(seq.len(), 5);
        let model = Model::new(&cfg.model).unwrap();
        let a = infer(&seq, &model, 2).unwrap();
        let b = infer(&seq, &model, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.width, a.height, a.probs.len()), (40, 40, 5));
        let out = dir.path().join("pred");
        write_inference(&out, &seq, &a).unwrap();
        assert_eq!(list_images(&out.join("masks")).unwrap().len(), 5);

        // ground truth scored against itself
        let gt = dir.path().join("masks");
        let r = evaluate(&gt, &gt, Mode::Uvos).unwrap();
        assert_eq!(r.aggregate.j_mean, Some(1.0));
        assert_eq!(r.aggregate.f_mean, Some(1.0));
        let v = evaluate(&gt, &gt, Mode::Vsod).unwrap();
        assert_eq!(v.aggregate.mae, Some(0.0));
        let real = evaluate(&out.join("saliency"), &gt, Mode::Vsod).unwrap();
        assert!(real.aggregate.mae.unwrap() <= 1.0);

        let rows = sweep_clip_length(&seq, &model, &[1, 2]).unwrap();
        assert_eq!(rows.iter().map(|r| r.clip_len).collect::<Vec<_>>(), vec![1, 2, 12]);
        assert!(sweep_csv(&rows).starts_with("clip_len,J_mean,F_mean,JF_mean\n1,"));
    }

    #[test]
    fn inverted_predictions_mae_is_the_pixel_count_ratio() {
        let dir = tempfile::tempdir().unwrap();
        let (gt, pred) = (dir.path().join("gt"), dir.path().join("pred"));
        std::fs::create_dir_all(&gt).unwrap();
        std::fs::create_dir_all(&pred).unwrap();
        let mut wrong = 0usize;
        for (i, fg) in [3usize, 10, 0].into_iter().enumerate() {
            let g = Gray8 {
                width: 5,
                height: 4,
                data: (0..20).map(|k| if k < fg { 255 } else { 0 }).collect(),
            };
            let inv = Gray8 {
                data: g.data.iter().map(|v| 255 - v).collect(),
                ..g.clone()
            };
            imageio::write_gray(&gt.join(format!("{i}.png")), &g).unwrap();
            imageio::write_gray(&pred.join(format!("{i}.png")), &inv).unwrap();
            wrong += g.data.iter().zip(&inv.data).filter(|(a, b)| a != b).count();
        }
        let r = evaluate(&pred, &gt, Mode::Vsod).unwrap();
        assert_eq!(r.aggregate.mae, Some(wrong as f64 / 60.0));
        let u = evaluate(&pred, &gt, Mode::Uvos).unwrap();
        // frame 2 has empty ground truth and a full prediction: J = 0
        assert_eq!(u.sequences[0].j_mean, Some(0.0));
    }

    #[test]
    fn evaluation_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (gt, pred) = (dir.path().join("gt"), dir.path().join("pred"));
        std::fs::create_dir_all(&gt).unwrap();
        std::fs::create_dir_all(&pred).unwrap();
        assert!(evaluate(&pred, &gt, Mode::Uvos).is_err());
        let g = Gray8 {
            width: 2,
            height: 2,
            data: vec![0, 255, 0, 0],
        };
        imageio::write_gray(&gt.join("a.png"), &g).unwrap();
        assert!(evaluate(&pred, &gt, Mode::Uvos).is_err());
        imageio::write_gray(
            &pred.join("a.png"),
            &Gray8 {
                width: 3,
                height: 2,
                data: vec![0; 6],
            },
        )
        .unwrap();
        assert!(evaluate(&pred, &gt, Mode::Uvos).is_err());
    }

    #[test]
    fn sequence_loading() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(4);
        make_data(&cfg, dir.path()).unwrap();
        let flows = dir.path().join("flows");
        std::fs::remove_file(flows.join("00003.png")).unwrap();
        let seq = VideoSequence::load(&dir.path().join("frames"), &flows).unwrap();
        assert_eq!(seq.flows[3], seq.flows[2]);
        std::fs::remove_file(flows.join("00002.png")).unwrap();
        assert!(VideoSequence::load(&dir.path().join("frames"), &flows).is_err());
        assert!(VideoSequence::load(&dir.path().join("nope"), &flows).is_err());
    }

    #[test]
    fn single_frame_sequence() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(1);
        make_data(&cfg, dir.path()).unwrap();
        let seq = VideoSequence::load(&dir.path().join("frames"), &dir.path().join("flows"))
            .unwrap()
            .with_gt(&dir.path().join("masks"))
            .unwrap();
        let model = Model::new(&cfg.model).unwrap();
        assert_eq!(infer(&seq, &model, 12).unwrap().masks().len(), 1);
        let rows = sweep_clip_length(&seq, &model, &[1, 2, 4]).unwrap();
        assert!(rows.windows(2).all(|w| w[0].jf_mean == w[1].jf_mean));
    }
}
