//! Deterministic synthetic sequences and sequence files on disk.
//!
//! A textured rectangle moves over a noisy background. The texture depends
//! only on the texture seed, so sequences sharing it show the same object.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::{iou, BBox};
use crate::error::{Error, Result};
use crate::image::{read_ppm, write_ppm};
use crate::tensor::Tensor;

pub const MIN_TARGET_SIDE: f64 = 8.0;
/// Largest overlap allowed between distractor and target.
pub const MAX_DISTRACTOR_IOU: f64 = 0.1;
const TEXTURE_GRID: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Trajectory {
    /// Constant velocity in pixels per frame; bounces off the frame edges.
    Linear { vx: f64, vy: f64 },
    /// Oscillation about the start position.
    Sinusoidal { ax: f64, ay: f64, period: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub start: BBox,
    pub trajectory: Trajectory,
    /// Relative size change per frame; `0.0` keeps the size fixed.
    pub size_rate: f64,
    pub texture_seed: u64,
    /// Seeds the background and noise.
    pub seed: u64,
    pub distractor: bool,
    /// Standard deviation of per-pixel noise.
    pub noise: f64,
}

impl SequenceSpec {
    /// Linear motion, fixed size, no distractor.
    pub fn easy(frames: usize, texture_seed: u64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe45);
        SequenceSpec {
            frames,
            width: 256,
            height: 192,
            start: BBox::new(
                rng.random_range(90.0..166.0),
                rng.random_range(70.0..122.0),
                44.0,
                36.0,
            ),
            trajectory: Trajectory::Linear {
                vx: rng.random_range(-1.2..1.2),
                vy: rng.random_range(-0.9..0.9),
            },
            size_rate: 0.0,
            texture_seed,
            seed,
            distractor: false,
            noise: 0.03,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.frames == 0 {
            return bad("a sequence needs at least one frame".into());
        }
        if self.width < 32 || self.height < 32 {
            return bad(format!(
                "frame {}x{} is smaller than 32 px",
                self.width, self.height
            ));
        }
        if !self.start.is_valid()
            || self.start.w < MIN_TARGET_SIDE
            || self.start.h < MIN_TARGET_SIDE
        {
            return bad(format!(
                "start box {:?} must be at least {MIN_TARGET_SIDE} px",
                self.start
            ));
        }
        if self.start.w > self.width as f64 || self.start.h > self.height as f64 {
            return bad("start box larger than the frame".into());
        }
        if !(self.noise >= 0.0) || !self.size_rate.is_finite() {
            return bad("noise must be nonnegative and size rate finite".into());
        }
        Ok(())
    }

    fn box_at(&self, t: usize) -> BBox {
        let (fw, fh) = (self.width as f64, self.height as f64);
        let f = (1.0 + self.size_rate).powi(t as i32);
        let w = (self.start.w * f).clamp(MIN_TARGET_SIDE, fw);
        let h = (self.start.h * f).clamp(MIN_TARGET_SIDE, fh);
        let t = t as f64;
        let (cx, cy) = match self.trajectory {
            Trajectory::Linear { vx, vy } => (self.start.cx + vx * t, self.start.cy + vy * t),
            Trajectory::Sinusoidal { ax, ay, period } => {
                let ph = 2.0 * std::f64::consts::PI * t / period.max(1.0);
                (self.start.cx + ax * ph.sin(), self.start.cy + ay * ph.sin())
            }
        };
        BBox::new(
            reflect(cx, w / 2.0, fw - w / 2.0),
            reflect(cy, h / 2.0, fh - h / 2.0),
            w,
            h,
        )
    }
}

/// Folds `x` into `[lo, hi]` as if bouncing off both ends.
fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let m = (x - lo).rem_euclid(2.0 * span);
    lo + if m > span { 2.0 * span - m } else { m }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<Tensor>,
    pub gt: Vec<BBox>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

struct Texture([[f64; 3]; TEXTURE_GRID * TEXTURE_GRID]);

impl Texture {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        Texture(std::array::from_fn(|_| {
            let bright = rng.random_bool(0.5);
            std::array::from_fn(|k| {
                let v = 0.5 * base[k] + rng.random_range(0.0..0.5);
                if bright {
                    v
                } else {
                    v * 0.3
                }
            })
        }))
    }

    /// Color at relative position `(u, v) ∈ [0, 1)²`.
    fn at(&self, u: f64, v: f64) -> [f64; 3] {
        let g = TEXTURE_GRID as f64;
        let i = ((v * g) as usize).min(TEXTURE_GRID - 1);
        let j = ((u * g) as usize).min(TEXTURE_GRID - 1);
        self.0[i * TEXTURE_GRID + j]
    }
}

fn paint(frame: &mut [f64], w: usize, h: usize, b: &BBox, tex: &Texture) {
    let [x0, y0, x1, y1] = b.corners();
    let xs = (x0.floor().max(0.0) as usize)..(x1.ceil().min(w as f64) as usize);
    for y in (y0.floor().max(0.0) as usize)..(y1.ceil().min(h as f64) as usize) {
        let py = y as f64 + 0.5;
        if py < y0 || py >= y1 {
            continue;
        }
        for x in xs.clone() {
            let px = x as f64 + 0.5;
            if px < x0 || px >= x1 {
                continue;
            }
            let c = tex.at((px - x0) / b.w, (py - y0) / b.h);
            frame[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&c);
        }
    }
}

/// Places the distractor diagonally opposite the target, nudging it until
/// the overlap is small enough.
pub fn distractor_box(spec: &SequenceSpec, target: &BBox) -> Result<BBox> {
    let (fw, fh) = (spec.width as f64, spec.height as f64);
    let (w, h) = (target.w * 0.9, target.h * 0.9);
    let fit = |cx: f64, cy: f64| {
        BBox::new(
            cx.clamp(w / 2.0, fw - w / 2.0),
            cy.clamp(h / 2.0, fh - h / 2.0),
            w,
            h,
        )
    };
    let candidates = [
        fit(fw - target.cx, fh - target.cy),
        fit(fw - target.cx, target.cy),
        fit(target.cx, fh - target.cy),
        fit(w / 2.0, h / 2.0),
        fit(fw - w / 2.0, fh - h / 2.0),
        fit(w / 2.0, fh - h / 2.0),
        fit(fw - w / 2.0, h / 2.0),
    ];
    candidates
        .into_iter()
        .find(|d| iou(d, target) <= MAX_DISTRACTOR_IOU)
        .ok_or_else(|| Error::InvalidArgument("no room for a distractor".into()))
}

pub fn synth_sequence(spec: &SequenceSpec) -> Result<Sequence> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let background: Vec<f64> = {
        let phase: [f64; 6] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
        (0..h * w * 3)
            .map(|i| {
                let (y, x, k) = ((i / 3 / w) as f64, ((i / 3) % w) as f64, i % 3);
                0.5 + 0.12 * (x / 23.0 + phase[k]).sin() * (y / 17.0 + phase[k + 3]).cos()
            })
            .collect()
    };
    let tex = Texture::new(spec.texture_seed);
    let distractor_tex = Texture::new(spec.texture_seed.wrapping_add(0x9e37_79b9));
    let mut seq = Sequence {
        name: format!("synthetic-{}-{}", spec.texture_seed, spec.seed),
        frames: Vec::with_capacity(spec.frames),
        gt: Vec::with_capacity(spec.frames),
    };
    for t in 0..spec.frames {
        let gt = spec.box_at(t);
        let mut frame = background.clone();
        if spec.distractor {
            let d = distractor_box(spec, &gt)?;
            debug_assert!(iou(&d, &gt) <= MAX_DISTRACTOR_IOU);
            paint(&mut frame, w, h, &d, &distractor_tex);
        }
        paint(&mut frame, w, h, &gt, &tex);
        if spec.noise > 0.0 {
            for v in &mut frame {
                // Sum of uniforms: cheap, roughly Gaussian noise.
                let n: f64 = (0..3).map(|_| rng.random_range(-1.0..1.0)).sum::<f64>();
                *v = (*v + spec.noise * n).clamp(0.0, 1.0);
            }
        }
        seq.frames.push(Tensor::new([h, w, 3], frame)?);
        seq.gt.push(gt);
    }
    Ok(seq)
}

/// Parses `x,y,w,h` lines (top-left corner). Blank lines are skipped;
/// tabs and spaces are accepted as separators too.
pub fn parse_groundtruth(text: &str) -> Result<Vec<BBox>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let v: Vec<f64> = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Image(format!("groundtruth line {}: {e}", n + 1)))?;
            match v[..] {
                [x, y, w, h] => Ok(BBox::from_xywh(x, y, w, h)),
                _ => Err(Error::Image(format!(
                    "groundtruth line {}: expected 4 values",
                    n + 1
                ))),
            }
        })
        .collect()
}

pub fn format_groundtruth(boxes: &[BBox]) -> String {
    boxes
        .iter()
        .map(|b| {
            let [x, y, w, h] = b.xywh();
            format!("{x},{y},{w},{h}\n")
        })
        .collect()
}

/// Reads `*.ppm` frames in name order plus `groundtruth.txt`.
pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")))
        .collect();
    paths.sort();
    let gt = parse_groundtruth(&fs::read_to_string(dir.join("groundtruth.txt"))?)?;
    if paths.len() != gt.len() {
        return Err(Error::Image(format!(
            "{} frames but {} groundtruth lines in {}",
            paths.len(),
            gt.len(),
            dir.display()
        )));
    }
    let frames = paths.iter().map(|p| read_ppm(p)).collect::<Result<_>>()?;
    Ok(Sequence {
        name: dir
            .file_name()
            .map_or_else(|| "sequence".into(), |n| n.to_string_lossy().into_owned()),
        frames,
        gt,
    })
}

pub fn save_sequence(seq: &Sequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in seq.frames.iter().enumerate() {
        write_ppm(&dir.join(format!("{:05}.ppm", i + 1)), f)?;
    }
    fs::write(dir.join("groundtruth.txt"), format_groundtruth(&seq.gt))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_inside_frame() {
        let spec = SequenceSpec::easy(20, 3, 4);
        let a = synth_sequence(&spec).unwrap();
        assert_eq!(a, synth_sequence(&spec).unwrap());
        for b in &a.gt {
            let [x0, y0, x1, y1] = b.corners();
            assert!(x0 >= 0.0 && y0 >= 0.0 && x1 <= 256.0 && y1 <= 192.0);
        }
        let other = synth_sequence(&SequenceSpec::easy(20, 3, 5)).unwrap();
        assert_ne!(a.frames[0], other.frames[0]);
    }

    #[test]
    fn distractor_keeps_clear_of_target() {
        let spec = SequenceSpec {
            distractor: true,
            trajectory: Trajectory::Sinusoidal {
                ax: 60.0,
                ay: 30.0,
                period: 25.0,
            },
            size_rate: 0.01,
            ..SequenceSpec::easy(60, 1, 2)
        };
        let seq = synth_sequence(&spec).unwrap();
        for gt in &seq.gt {
            assert!(iou(&distractor_box(&spec, gt).unwrap(), gt) <= MAX_DISTRACTOR_IOU);
            assert!(gt.w >= MIN_TARGET_SIDE && gt.h >= MIN_TARGET_SIDE);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = SequenceSpec::easy(5, 0, 0);
        spec.start.w = 4.0;
        assert!(synth_sequence(&spec).is_err());
        assert!(synth_sequence(&SequenceSpec {
            frames: 0,
            ..SequenceSpec::easy(5, 0, 0)
        })
        .is_err());
    }

    #[test]
    fn reflection_stays_in_range() {
        for x in [-500.0, -3.0, 0.0, 7.5, 10.0, 33.0, 1e4] {
            let r = reflect(x, 2.0, 10.0);
            assert!((2.0..=10.0).contains(&r));
        }
        assert_eq!(reflect(12.0, 2.0, 10.0), 8.0);
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let seq = synth_sequence(&SequenceSpec::easy(3, 1, 1)).unwrap();
        save_sequence(&seq, dir.path()).unwrap();
        let back = load_sequence(dir.path()).unwrap();
        assert_eq!(back.gt, seq.gt);
        assert!(back.frames[2].max_abs_diff(&seq.frames[2]) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn groundtruth_parsing() {
        let b = parse_groundtruth("1,2,3,4\n\n5\t6 7,8\n").unwrap();
        assert_eq!(b[1].xywh(), [5.0, 6.0, 7.0, 8.0]);
        assert!(parse_groundtruth("1,2,3").is_err());
        assert!(parse_groundtruth("1,2,x,4").is_err());
    }
}
