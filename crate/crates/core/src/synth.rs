//! Synthetic hand/object videos whose classes differ only in how entities
//! change over time, plus box corruptions and the on-disk dataset format.
//!
//! Every video is rendered from a canonical frame sequence `c_0 … c_{T-1}`.
//! The reversed classes (`uncover`, `move-away`) show `c_0` followed by the
//! remaining frames backwards, so each shares its first frame and its whole
//! set of frames with its forward partner drawn from the same seed.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::roi::{Entity, RoiBox};
use crate::tensor::io::{load_tensor, save_tensor};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SynthClass {
    PutBeside,
    Cover,
    Uncover,
    Swap,
    MoveAway,
    Split,
}

impl SynthClass {
    pub const ALL: [SynthClass; 6] = [
        SynthClass::PutBeside,
        SynthClass::Cover,
        SynthClass::Uncover,
        SynthClass::Swap,
        SynthClass::MoveAway,
        SynthClass::Split,
    ];

    pub fn id(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).expect("listed")
    }

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL
            .get(id)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown class id {id}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            SynthClass::PutBeside => "put-beside",
            SynthClass::Cover => "cover",
            SynthClass::Uncover => "uncover",
            SynthClass::Swap => "swap",
            SynthClass::MoveAway => "move-away",
            SynthClass::Split => "split",
        }
    }

    /// Forward script this class is drawn from, and whether it is replayed
    /// backwards.
    fn script(self) -> (SynthClass, bool) {
        match self {
            SynthClass::Uncover => (SynthClass::Cover, true),
            SynthClass::MoveAway => (SynthClass::PutBeside, true),
            other => (other, false),
        }
    }
}

impl fmt::Display for SynthClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SynthClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown class `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthVideo {
    /// `[T, W, H, 3]`, values roughly in `[0, 1]`.
    pub frames: Tensor<f32>,
    pub rois: Vec<RoiBox>,
    pub label: usize,
    pub seed: u64,
}

impl SynthVideo {
    pub fn num_frames(&self) -> usize {
        self.frames.dim(0)
    }
}

const NOISE_LEVEL: f64 = 0.04;
const BACKGROUND: f64 = 0.12;
const HAND_COLOR: [f64; 3] = [0.92, 0.62, 0.45];
const PALETTE: [[f64; 3]; 5] = [
    [0.15, 0.75, 0.25],
    [0.2, 0.35, 0.95],
    [0.95, 0.9, 0.15],
    [0.65, 0.2, 0.85],
    [0.1, 0.85, 0.85],
];

#[derive(Debug, Clone, Copy)]
struct Rect {
    x: i64,
    y: i64,
    w: i64,
    h: i64,
}

impl Rect {
    fn lerp(a: Rect, b: Rect, k: f64) -> Rect {
        let mix = |p: i64, q: i64| (p as f64 + (q - p) as f64 * k).round() as i64;
        Rect {
            x: mix(a.x, b.x),
            y: mix(a.y, b.y),
            w: a.w,
            h: a.h,
        }
    }

    fn shifted(self, dx: i64, dy: i64) -> Rect {
        Rect {
            x: self.x + dx,
            y: self.y + dy,
            ..self
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Sprite {
    rect: Rect,
    color: [f64; 3],
    entity: Entity,
}

/// Sprites of one frame, painted in order.
type Scene = Vec<Sprite>;

struct Params {
    size: i64,
    hand_color: [f64; 3],
    colors: [[f64; 3]; 2],
    mirror: bool,
}

fn jitter<R: Rng>(rng: &mut R, color: [f64; 3]) -> [f64; 3] {
    color.map(|c| (c + rng.gen_range(-0.06..0.06)).clamp(0.0, 1.0))
}

fn span<R: Rng>(rng: &mut R, size: i64, lo: f64, hi: f64) -> i64 {
    let (a, b) = (
        (lo * size as f64).round() as i64,
        (hi * size as f64).round() as i64,
    );
    rng.gen_range(a..=b.max(a))
}

/// Fraction of the script completed at frame `t`, reaching 1 at `end`.
fn progress(t: usize, end: usize) -> f64 {
    (t as f64 / end.max(1) as f64).min(1.0)
}

fn cover_script<R: Rng>(rng: &mut R, p: &Params, frames: usize) -> Vec<Scene> {
    let s = p.size;
    let (ow, oh) = (span(rng, s, 0.19, 0.26), span(rng, s, 0.19, 0.26));
    let (hw, hh) = (ow + span(rng, s, 0.1, 0.16), oh + span(rng, s, 0.1, 0.16));
    let obj = Rect {
        x: rng.gen_range(s * 3 / 8..=s * 5 / 8 - ow),
        y: rng.gen_range(s / 4..=s * 3 / 4 - oh),
        w: ow,
        h: oh,
    };
    let target = Rect {
        x: obj.x - (hw - ow) / 2,
        y: obj.y - (hh - oh) / 2,
        w: hw,
        h: hh,
    };
    let start = Rect {
        x: rng.gen_range(0..=s / 16),
        y: rng.gen_range(0..=s - hh),
        w: hw,
        h: hh,
    };
    (0..frames)
        .map(|t| {
            let hand = Rect::lerp(start, target, progress(t, frames.saturating_sub(3)));
            vec![
                Sprite {
                    rect: obj,
                    color: p.colors[0],
                    entity: Entity::Object,
                },
                Sprite {
                    rect: hand,
                    color: p.hand_color,
                    entity: Entity::Hand,
                },
            ]
        })
        .collect()
}

fn put_beside_script<R: Rng>(rng: &mut R, p: &Params, frames: usize) -> Vec<Scene> {
    let s = p.size;
    let (ow, oh) = (span(rng, s, 0.16, 0.22), span(rng, s, 0.16, 0.22));
    let (hw, hh) = (span(rng, s, 0.2, 0.26), span(rng, s, 0.14, 0.19));
    let anchor = Rect {
        x: rng.gen_range(s * 5 / 8..=s - ow - 2),
        y: rng.gen_range(s / 3..=s * 2 / 3 - oh),
        w: ow,
        h: oh,
    };
    let carried_end = Rect {
        x: anchor.x - ow - rng.gen_range(1..=2),
        y: anchor.y + rng.gen_range(-2..=2),
        w: ow,
        h: oh,
    };
    let carried_start = Rect {
        x: rng.gen_range(0..=s / 8),
        y: rng.gen_range(s / 8..=s - oh - hh),
        w: ow,
        h: oh,
    };
    let grip = |o: Rect| Rect {
        x: o.x + (ow - hw) / 2,
        y: o.y + oh - 1,
        w: hw,
        h: hh,
    };
    let release = frames.saturating_sub(3);
    (0..frames)
        .map(|t| {
            let carried = Rect::lerp(carried_start, carried_end, progress(t, release));
            let hand = if t <= release {
                grip(carried)
            } else {
                grip(carried_end).shifted(0, (s / 6) * (t - release) as i64)
            };
            vec![
                Sprite {
                    rect: anchor,
                    color: p.colors[1],
                    entity: Entity::Object,
                },
                Sprite {
                    rect: hand,
                    color: p.hand_color,
                    entity: Entity::Hand,
                },
                Sprite {
                    rect: carried,
                    color: p.colors[0],
                    entity: Entity::Object,
                },
            ]
        })
        .collect()
}

fn swap_script<R: Rng>(rng: &mut R, p: &Params, frames: usize) -> Vec<Scene> {
    let s = p.size;
    let (ow, oh) = (span(rng, s, 0.16, 0.22), span(rng, s, 0.16, 0.22));
    let (hw, hh) = (span(rng, s, 0.2, 0.26), span(rng, s, 0.12, 0.16));
    let y = rng.gen_range(s * 3 / 8..=s * 5 / 8 - oh);
    let left = Rect {
        x: rng.gen_range(1..=s / 6),
        y,
        w: ow,
        h: oh,
    };
    let right = Rect {
        x: rng.gen_range(s * 5 / 6 - ow..=s - ow - 1),
        y,
        w: ow,
        h: oh,
    };
    let lift = s as f64 / 4.0;
    (0..frames)
        .map(|t| {
            let k = progress(t, frames - 1);
            let arc = (lift * (std::f64::consts::PI * k).sin()).round() as i64;
            let a = Rect::lerp(left, right, k).shifted(0, -arc);
            let b = Rect::lerp(right, left, k).shifted(0, arc);
            let hand = Rect {
                x: a.x + (ow - hw) / 2,
                y: a.y - hh + 1,
                w: hw,
                h: hh,
            };
            vec![
                Sprite {
                    rect: a,
                    color: p.colors[0],
                    entity: Entity::Object,
                },
                Sprite {
                    rect: b,
                    color: p.colors[1],
                    entity: Entity::Object,
                },
                Sprite {
                    rect: hand,
                    color: p.hand_color,
                    entity: Entity::Hand,
                },
            ]
        })
        .collect()
}

fn split_script<R: Rng>(rng: &mut R, p: &Params, frames: usize) -> Vec<Scene> {
    let s = p.size;
    let half = span(rng, s, 0.12, 0.16);
    let oh = span(rng, s, 0.16, 0.22);
    let (hw, hh) = (span(rng, s, 0.2, 0.26), span(rng, s, 0.14, 0.19));
    let whole = Rect {
        x: rng.gen_range(s * 3 / 8 - half..=s * 5 / 8 - half),
        y: rng.gen_range(s / 3..=s * 2 / 3 - oh),
        w: 2 * half,
        h: oh,
    };
    let hand_end = Rect {
        x: whole.x + half - hw / 2,
        y: whole.y - hh - 1,
        w: hw,
        h: hh,
    };
    let hand_start = Rect {
        x: rng.gen_range(0..=s - hw),
        y: 0,
        w: hw,
        h: hh,
    };
    let cut = frames / 2;
    (0..frames)
        .map(|t| {
            let hand = Sprite {
                rect: Rect::lerp(hand_start, hand_end, progress(t, cut)),
                color: p.hand_color,
                entity: Entity::Hand,
            };
            if t < cut {
                return vec![
                    Sprite {
                        rect: whole,
                        color: p.colors[0],
                        entity: Entity::Object,
                    },
                    hand,
                ];
            }
            let gap = 2 * (t - cut + 1) as i64;
            let l = Rect { w: half, ..whole }.shifted(-gap / 2, 0);
            let r = Rect { w: half, ..whole }.shifted(half + gap - gap / 2, 0);
            vec![
                Sprite {
                    rect: l,
                    color: p.colors[0],
                    entity: Entity::Object,
                },
                Sprite {
                    rect: r,
                    color: p.colors[0],
                    entity: Entity::Object,
                },
                hand,
            ]
        })
        .collect()
}

/// Paints one frame into `out` (a `[W, H, 3]` slab) and returns the tight
/// box of every sprite with at least one visible pixel.
fn render<R: Rng>(
    scene: &Scene,
    p: &Params,
    frame: usize,
    rng: &mut R,
    out: &mut [f32],
) -> Vec<RoiBox> {
    let s = p.size as usize;
    let mut owner = vec![usize::MAX; s * s];
    for px in out.chunks_exact_mut(3) {
        let base = BACKGROUND + rng.gen_range(-NOISE_LEVEL..NOISE_LEVEL);
        for c in px.iter_mut() {
            *c = (base + rng.gen_range(-NOISE_LEVEL..NOISE_LEVEL) * 0.5) as f32;
        }
    }
    for (id, sprite) in scene.iter().enumerate() {
        let r = sprite.rect;
        let r = if p.mirror {
            Rect {
                x: p.size - r.x - r.w,
                ..r
            }
        } else {
            r
        };
        for x in r.x.max(0)..(r.x + r.w).min(p.size) {
            for y in r.y.max(0)..(r.y + r.h).min(p.size) {
                let cell = x as usize * s + y as usize;
                owner[cell] = id;
                for (ch, &v) in sprite.color.iter().enumerate() {
                    out[cell * 3 + ch] = (v + rng.gen_range(-NOISE_LEVEL..NOISE_LEVEL)) as f32;
                }
            }
        }
    }
    let mut boxes = Vec::new();
    for (id, sprite) in scene.iter().enumerate() {
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for (cell, _) in owner.iter().enumerate().filter(|(_, &o)| o == id) {
            let (x, y) = (cell / s, cell % s);
            bounds = Some(match bounds {
                None => (x, y, x, y),
                Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
            });
        }
        if let Some((x0, y0, x1, y1)) = bounds {
            let n = s as f64;
            boxes.push(RoiBox::new(
                frame,
                x0 as f64 / n,
                y0 as f64 / n,
                (x1 + 1) as f64 / n,
                (y1 + 1) as f64 / n,
                sprite.entity,
            ));
        }
    }
    boxes
}

/// Renders one video of `class`. `size` is the square frame side in pixels.
pub fn generate(seed: u64, class: SynthClass, frames: usize, size: usize) -> Result<SynthVideo> {
    if frames < 4 {
        return Err(Error::Config(format!(
            "need at least 4 frames, got {frames}"
        )));
    }
    if size < 16 {
        return Err(Error::Config(format!(
            "frame side must be at least 16, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.gen_range(0..PALETTE.len());
    let second = (first + rng.gen_range(1..PALETTE.len())) % PALETTE.len();
    let params = Params {
        size: size as i64,
        hand_color: jitter(&mut rng, HAND_COLOR),
        colors: [
            jitter(&mut rng, PALETTE[first]),
            jitter(&mut rng, PALETTE[second]),
        ],
        mirror: rng.gen_bool(0.5),
    };
    let (script, reversed) = class.script();
    let scenes = match script {
        SynthClass::Cover => cover_script(&mut rng, &params, frames),
        SynthClass::PutBeside => put_beside_script(&mut rng, &params, frames),
        SynthClass::Swap => swap_script(&mut rng, &params, frames),
        SynthClass::Split => split_script(&mut rng, &params, frames),
        SynthClass::Uncover | SynthClass::MoveAway => {
            unreachable!("reversed classes map to a forward script")
        }
    };
    let slab = size * size * 3;
    let mut canonical = vec![0f32; frames * slab];
    let mut canonical_boxes = Vec::with_capacity(frames);
    for (t, scene) in scenes.iter().enumerate() {
        canonical_boxes.push(render(
            scene,
            &params,
            t,
            &mut rng,
            &mut canonical[t * slab..(t + 1) * slab],
        ));
    }
    let order: Vec<usize> = if reversed {
        std::iter::once(0).chain((1..frames).rev()).collect()
    } else {
        (0..frames).collect()
    };
    let mut data = Vec::with_capacity(frames * slab);
    let mut rois = Vec::new();
    for (t, &src) in order.iter().enumerate() {
        data.extend_from_slice(&canonical[src * slab..(src + 1) * slab]);
        rois.extend(
            canonical_boxes[src]
                .iter()
                .map(|b| RoiBox { frame: t, ..*b }),
        );
    }
    Ok(SynthVideo {
        frames: Tensor::new(vec![frames, size, size, 3], data)?,
        rois,
        label: class.id(),
        seed,
    })
}

/// Seed of the `index`-th video of a dataset.
pub fn video_seed(dataset_seed: u64, index: usize) -> u64 {
    let mut z = dataset_seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetSpec {
    pub classes: usize,
    pub per_class: usize,
    pub frames: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            classes: SynthClass::ALL.len(),
            per_class: 100,
            frames: 8,
            size: 32,
            seed: 7,
        }
    }
}

/// Classes interleaved so every prefix is balanced to within one video.
pub fn build_dataset(spec: &DatasetSpec) -> Result<Vec<SynthVideo>> {
    if spec.classes == 0 || spec.classes > SynthClass::ALL.len() {
        return Err(Error::Config(format!(
            "class count must be in 1..={}, got {}",
            SynthClass::ALL.len(),
            spec.classes
        )));
    }
    let total = spec.classes * spec.per_class;
    let videos: Vec<Result<SynthVideo>> = {
        use rayon::prelude::*;
        (0..total)
            .into_par_iter()
            .map(|i| {
                generate(
                    video_seed(spec.seed, i),
                    SynthClass::ALL[i % spec.classes],
                    spec.frames,
                    spec.size,
                )
            })
            .collect()
    };
    videos.into_iter().collect()
}

/// Box perturbations applied at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Corruption {
    /// Shift every box along x so its IoU with the original is the target.
    Iou(f64),
    DropHands,
    DropObjects,
    DropAll,
}

impl Corruption {
    pub const SWEEP: [Corruption; 6] = [
        Corruption::Iou(0.5),
        Corruption::Iou(0.25),
        Corruption::Iou(0.05),
        Corruption::DropHands,
        Corruption::DropObjects,
        Corruption::DropAll,
    ];
}

impl FromStr for Corruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drop-hands" => Ok(Corruption::DropHands),
            "drop-objects" => Ok(Corruption::DropObjects),
            "drop-all" => Ok(Corruption::DropAll),
            _ => {
                let alpha = s
                    .strip_prefix("iou@")
                    .and_then(|a| a.parse::<f64>().ok())
                    .filter(|a| *a > 0.0 && *a <= 1.0)
                    .ok_or_else(|| Error::Config(format!("unknown corruption `{s}`")))?;
                Ok(Corruption::Iou(alpha))
            }
        }
    }
}

impl fmt::Display for Corruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Corruption::Iou(a) => write!(f, "iou@{a:.2}"),
            Corruption::DropHands => f.write_str("drop-hands"),
            Corruption::DropObjects => f.write_str("drop-objects"),
            Corruption::DropAll => f.write_str("drop-all"),
        }
    }
}

/// Shift, as a fraction of box width, giving IoU `alpha` with the original.
pub fn shift_fraction(alpha: f64) -> f64 {
    (1.0 - alpha) / (1.0 + alpha)
}

pub fn corrupt_rois(rois: &[RoiBox], mode: Corruption) -> Vec<RoiBox> {
    match mode {
        Corruption::DropAll => Vec::new(),
        Corruption::DropHands => rois
            .iter()
            .filter(|r| r.entity != Entity::Hand)
            .copied()
            .collect(),
        Corruption::DropObjects => rois
            .iter()
            .filter(|r| r.entity != Entity::Object)
            .copied()
            .collect(),
        Corruption::Iou(alpha) => rois
            .iter()
            .map(|r| {
                let d = shift_fraction(alpha) * r.width();
                let d = if r.x2 + d <= 1.0 || r.x1 - d < 0.0 {
                    d
                } else {
                    -d
                };
                let moved = RoiBox {
                    x1: r.x1 + d,
                    x2: r.x2 + d,
                    ..*r
                };
                moved.clipped().unwrap_or(*r)
            })
            .collect(),
    }
}

pub const MANIFEST: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "# path\tlabel\tframes\tboxes";

fn format_boxes(rois: &[RoiBox]) -> String {
    rois.iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{}",
                r.frame, r.x1, r.y1, r.x2, r.y2, r.entity
            )
        })
        .collect::<Vec<_>>()
        .join(";")
}

fn parse_boxes(s: &str) -> Result<Vec<RoiBox>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|b| {
            let f: Vec<&str> = b.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Format(format!("box `{b}` needs 6 fields")));
            }
            let num = |x: &str| {
                x.parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad coordinate `{x}`")))
            };
            Ok(RoiBox::new(
                f[0].parse()
                    .map_err(|_| Error::Format(format!("bad frame `{}`", f[0])))?,
                num(f[1])?,
                num(f[2])?,
                num(f[3])?,
                num(f[4])?,
                f[5].parse()?,
            ))
        })
        .collect()
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub label: usize,
    pub frames: usize,
    pub rois: Vec<RoiBox>,
}

impl ManifestRecord {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}",
            self.path.display(),
            self.label,
            self.frames,
            format_boxes(&self.rois)
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::Format(format!(
                "manifest line needs 4 tab-separated fields: `{line}`"
            )));
        }
        let int = |x: &str| {
            x.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad integer `{x}`")))
        };
        Ok(Self {
            path: PathBuf::from(f[0]),
            label: int(f[1])?,
            frames: int(f[2])?,
            rois: parse_boxes(f[3])?,
        })
    }
}

/// Writes `dir/manifest.txt` plus one tensor file per video under
/// `dir/videos`. Existing datasets are kept unless `force` is set.
pub fn save_dataset(dir: &Path, videos: &[SynthVideo], force: bool) -> Result<()> {
    let manifest = dir.join(MANIFEST);
    if manifest.exists() && !force {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::AlreadyExists,
            format!(
                "{} already exists; pass --force to overwrite",
                manifest.display()
            ),
        )));
    }
    fs::create_dir_all(dir.join("videos"))?;
    let mut out = BufWriter::new(fs::File::create(&manifest)?);
    writeln!(out, "{MANIFEST_HEADER}")?;
    for (i, v) in videos.iter().enumerate() {
        let rel = PathBuf::from("videos").join(format!("{i:06}.tensor"));
        save_tensor(&dir.join(&rel), &v.frames)?;
        let record = ManifestRecord {
            path: rel,
            label: v.label,
            frames: v.num_frames(),
            rois: v.rois.clone(),
        };
        writeln!(out, "{}", record.to_line())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io_at(path, e))?;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        records.push(ManifestRecord::parse(&line)?);
    }
    Ok(records)
}

/// Loads a dataset written by [`save_dataset`]. Video seeds are not stored
/// and come back as zero.
pub fn load_dataset(dir: &Path) -> Result<Vec<SynthVideo>> {
    read_manifest(&dir.join(MANIFEST))?
        .into_iter()
        .map(|r| {
            let frames: Tensor<f32> = load_tensor(&dir.join(&r.path))?;
            if frames.rank() != 4 || frames.dim(0) != r.frames {
                return Err(Error::Format(format!(
                    "{} has shape {:?}, manifest says {} frames",
                    r.path.display(),
                    frames.shape(),
                    r.frames
                )));
            }
            Ok(SynthVideo {
                frames,
                rois: r.rois,
                label: r.label,
                seed: 0,
            })
        })
        .collect()
}
