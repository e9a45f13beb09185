//! Image→scene analyzer and the exact caption-consistency metric.
//!
//! The analyzer inverts the rasterizer: dominant-color vote for the canvas,
//! 4-connected components over non-canvas pixels, per-component color by
//! nearest palette distance, shape/size by exact template match against the
//! rasterizer's own masks with ratio heuristics as a fallback for imperfect
//! (tokenizer-roundtripped or generated) images. On clean renders it must
//! recover the source spec exactly — that property gates every downstream
//! metric that uses it.

use thiserror::Error;

use crate::image::ImageU8;
use crate::scene::{
    caption_of, parse_caption, shape_offsets, Cell, ColorName, Fact, ObjectSpec, SceneError,
    SceneSpec, Shape, SizeClass, PALETTE, SHAPES,
};

/// Components smaller than this are treated as noise, not objects; the
/// smallest rasterizer template is 25 pixels.
pub const MIN_COMPONENT_PIXELS: usize = 9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("no scorable pairs")]
    Empty,
}

/// One detected component; `shape: None` means unclassifiable, which counts
/// as unsatisfied for every fact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnalyzedObject {
    pub shape: Option<Shape>,
    pub color: ColorName,
    pub cell: Cell,
    pub size: SizeClass,
    pub pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnalyzedScene {
    pub canvas: ColorName,
    pub objects: Vec<AnalyzedObject>,
}

impl AnalyzedScene {
    /// Reassembles a valid `SceneSpec`; `None` if any component is
    /// unclassifiable or the detections violate the scene invariants.
    pub fn to_spec(&self) -> Option<SceneSpec> {
        let objects: Option<Vec<ObjectSpec>> = self
            .objects
            .iter()
            .map(|o| {
                o.shape.map(|shape| ObjectSpec {
                    shape,
                    color: o.color,
                    cell: o.cell,
                    size: o.size,
                })
            })
            .collect();
        SceneSpec::new(self.canvas, objects?).ok()
    }

    pub fn satisfies(&self, f: &Fact) -> bool {
        self.objects
            .iter()
            .any(|o| o.shape == Some(f.shape) && o.color == f.color && o.cell == f.cell)
    }
}

fn palette_index(c: ColorName) -> usize {
    PALETTE.iter().position(|&p| p == c).expect("palette member")
}

pub fn analyze_image(img: &ImageU8) -> AnalyzedScene {
    let (h, w) = (img.height(), img.width());
    let mut cls = vec![0u8; h * w];
    let mut votes = [0usize; PALETTE.len()];
    for y in 0..h {
        for x in 0..w {
            let idx = palette_index(ColorName::nearest(img.get(y, x)));
            cls[y * w + x] = idx as u8;
            votes[idx] += 1;
        }
    }
    let canvas_idx = votes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .expect("palette non-empty")
        .0;
    let canvas = PALETTE[canvas_idx];

    let mut seen = vec![false; h * w];
    let mut objects = Vec::new();
    for start in 0..h * w {
        if seen[start] || cls[start] as usize == canvas_idx {
            continue;
        }
        let mut queue = vec![start];
        seen[start] = true;
        let mut pix = Vec::new();
        while let Some(p) = queue.pop() {
            pix.push((p / w, p % w));
            let (y, x) = (p / w, p % w);
            let mut push = |ny: usize, nx: usize| {
                let q = ny * w + nx;
                if !seen[q] && cls[q] as usize != canvas_idx {
                    seen[q] = true;
                    queue.push(q);
                }
            };
            if y > 0 {
                push(y - 1, x);
            }
            if y + 1 < h {
                push(y + 1, x);
            }
            if x > 0 {
                push(y, x - 1);
            }
            if x + 1 < w {
                push(y, x + 1);
            }
        }
        if pix.len() >= MIN_COMPONENT_PIXELS {
            objects.push(classify_component(img, &pix));
        }
    }
    objects.sort_by_key(|o| (o.cell.raster_index(), palette_index(o.color)));
    AnalyzedScene { canvas, objects }
}

/// Template pixel set shifted to its bounding-box origin, sorted.
fn normalized_template(shape: Shape, size: SizeClass) -> Vec<(i32, i32)> {
    let offs = shape_offsets(shape, size);
    let y0 = offs.iter().map(|p| p.0).min().expect("non-empty");
    let x0 = offs.iter().map(|p| p.1).min().expect("non-empty");
    let mut rel: Vec<(i32, i32)> = offs.iter().map(|&(y, x)| (y - y0, x - x0)).collect();
    rel.sort_unstable();
    rel
}

fn classify_component(img: &ImageU8, pix: &[(usize, usize)]) -> AnalyzedObject {
    let n = pix.len();
    let mut sum = [0u64; 3];
    let (mut sy, mut sx) = (0usize, 0usize);
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for &(y, x) in pix {
        let rgb = img.get(y, x);
        for c in 0..3 {
            sum[c] += rgb[c] as u64;
        }
        sy += y;
        sx += x;
        y0 = y0.min(y);
        y1 = y1.max(y);
        x0 = x0.min(x);
        x1 = x1.max(x);
    }
    let mean = [
        (sum[0] as f64 / n as f64).round() as u8,
        (sum[1] as f64 / n as f64).round() as u8,
        (sum[2] as f64 / n as f64).round() as u8,
    ];
    let color = ColorName::nearest(mean);
    let cy = (sy as f64 / n as f64).round() as usize;
    let cx = (sx as f64 / n as f64).round() as usize;
    let cell = Cell::of_point(cy, cx);

    let mut rel: Vec<(i32, i32)> = pix.iter().map(|&(y, x)| ((y - y0) as i32, (x - x0) as i32)).collect();
    rel.sort_unstable();
    for shape in SHAPES {
        for size in [SizeClass::Small, SizeClass::Large] {
            if rel == normalized_template(shape, size) {
                return AnalyzedObject { shape: Some(shape), color, cell, size, pixels: n };
            }
        }
    }

    // Fallback for inexact components: the three shapes separate on how wide
    // their top and bottom rows are relative to the bounding box.
    let (bw, bh) = (x1 - x0 + 1, y1 - y0 + 1);
    let size = if bw.max(bh) <= 9 { SizeClass::Small } else { SizeClass::Large };
    let shape = if bw < 3 || bh < 3 {
        None
    } else {
        let top = rel.iter().filter(|p| p.0 == 0).count() as f64 / bw as f64;
        let bot = rel.iter().filter(|p| p.0 == (bh - 1) as i32).count() as f64 / bw as f64;
        let fill = n as f64 / (bw * bh) as f64;
        const WIDE: f64 = 2.0 / 3.0;
        if fill < 0.35 {
            None
        } else if top >= WIDE && bot >= WIDE {
            Some(Shape::Square)
        } else if bot >= WIDE {
            Some(Shape::Triangle)
        } else if top < WIDE {
            Some(Shape::Circle)
        } else {
            // Wide top over a narrow base matches no rasterizer output.
            None
        }
    };
    AnalyzedObject { shape, color, cell, size, pixels: n }
}

/// One caption scored against one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageConsistency {
    pub analyzed: AnalyzedScene,
    pub facts: Vec<Fact>,
    pub satisfied: usize,
    pub score: f64,
}

/// Fraction of the caption's (shape, color, position) facts satisfied by the
/// analyzed image; 1 iff every fact is satisfied. Errors on captions outside
/// the closed grammar.
pub fn consistency_score(caption: &str, img: &ImageU8) -> Result<ImageConsistency, EvalError> {
    let facts = parse_caption(caption)?;
    let analyzed = analyze_image(img);
    let satisfied = facts.iter().filter(|f| analyzed.satisfies(f)).count();
    let score = satisfied as f64 / facts.len() as f64;
    Ok(ImageConsistency { analyzed, facts, satisfied, score })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    pub per_image: Vec<ImageConsistency>,
    pub mean: f64,
    pub count: usize,
}

pub fn mean_consistency<'a, I>(pairs: I) -> Result<ConsistencyReport, EvalError>
where
    I: IntoIterator<Item = (&'a str, &'a ImageU8)>,
{
    let mut per_image = Vec::new();
    for (caption, img) in pairs {
        per_image.push(consistency_score(caption, img)?);
    }
    if per_image.is_empty() {
        return Err(EvalError::Empty);
    }
    let mean = per_image.iter().map(|c| c.score).sum::<f64>() / per_image.len() as f64;
    Ok(ConsistencyReport { count: per_image.len(), mean, per_image })
}

/// Fact-set overlap between a generated caption and the source scene:
/// |parsed ∩ source| / max(|parsed|, |source|), deduplicated. Total — an
/// unparseable caption scores 0 so generated text can always be graded.
pub fn caption_fact_accuracy(caption: &str, spec: &SceneSpec) -> f64 {
    let parsed = match parse_caption(caption) {
        Ok(f) => f,
        Err(_) => return 0.0,
    };
    let mut p: Vec<Fact> = parsed;
    p.sort_by_key(fact_key);
    p.dedup();
    let mut s: Vec<Fact> = spec.facts();
    s.sort_by_key(fact_key);
    s.dedup();
    let inter = p.iter().filter(|f| s.contains(f)).count();
    inter as f64 / p.len().max(s.len()) as f64
}

fn fact_key(f: &Fact) -> (usize, usize, usize) {
    (
        f.cell.raster_index(),
        palette_index(f.color),
        SHAPES.iter().position(|&s| s == f.shape).expect("shape"),
    )
}

/// Self-description of a rendered spec; by construction scores 1.0.
pub fn self_consistency(spec: &SceneSpec) -> Result<ImageConsistency, EvalError> {
    consistency_score(&caption_of(spec), &crate::scene::render(spec))
}
