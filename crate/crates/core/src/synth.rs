//! Procedural incremental-detection benchmark and AP evaluation.
//!
//! Each task draws its images on a background of one hue (the task
//! signature); every class is an axis-aligned rectangle with its own color
//! and aspect (wide or tall). Images hold 1 to 3 non-overlapping objects
//! whose centers fall in distinct patch cells, plus Gaussian pixel noise.

use crate::boxes::{iou, BBox, Detection};
use crate::error::{LabError, Result};
use crate::io;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const MAX_TASKS: usize = 13;
pub const NOISE_STD: f64 = 0.05;

const CLASS_NAMES: [&str; 26] = [
    "adenoma",
    "bleb",
    "cyst",
    "drusen",
    "exudate",
    "fibroid",
    "glioma",
    "hematoma",
    "infarct",
    "keloid",
    "lipoma",
    "melanoma",
    "nevus",
    "osteoma",
    "papilloma",
    "queloid",
    "ranula",
    "sarcoma",
    "thrombus",
    "ulcer",
    "varix",
    "wart",
    "xanthoma",
    "yaws",
    "zoster",
    "abscess",
];

pub const PRETASK_NAMES: [&str; 4] = ["pre-lime", "pre-azure", "pre-violet", "pre-amber"];

/// Every class name the text encoder knows: pretask names first, then the
/// benchmark names in global class order.
pub fn vocabulary() -> Vec<String> {
    PRETASK_NAMES
        .iter()
        .chain(CLASS_NAMES.iter())
        .map(|s| s.to_string())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shot {
    K(usize),
    Full,
}

impl std::str::FromStr for Shot {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(Shot::Full);
        }
        s.parse::<usize>()
            .ok()
            .filter(|&k| k > 0)
            .map(Shot::K)
            .ok_or_else(|| LabError::Config(format!("bad shot setting {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub n_tasks: usize,
    pub classes_per_task: usize,
    pub train_images: usize,
    pub test_images: usize,
    pub shots: Vec<Shot>,
    pub seed: u64,
    pub image_size: usize,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            n_tasks: 4,
            classes_per_task: 2,
            train_images: 64,
            test_images: 32,
            shots: vec![Shot::K(1), Shot::K(10), Shot::K(50), Shot::Full],
            seed: 0,
            image_size: 32,
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_tasks == 0 || self.n_tasks > MAX_TASKS {
            return Err(LabError::Config(format!(
                "n_tasks must be in 1..={MAX_TASKS}"
            )));
        }
        if self.n_tasks * self.classes_per_task > CLASS_NAMES.len() || self.classes_per_task == 0 {
            return Err(LabError::Config(
                "too many classes for the vocabulary".into(),
            ));
        }
        if self.image_size < 16 || self.train_images == 0 || self.test_images == 0 {
            return Err(LabError::Config(
                "image_size >= 16 and nonempty splits required".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: BBox,
    /// Global class id (index into the benchmark name list).
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[H, W, 3]`, values roughly in `[0, 1]`.
    pub image: Tensor,
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task_id: usize,
    pub class_ids: Vec<usize>,
    pub class_names: Vec<String>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Background color of the task. Test oracles only.
    pub signature: [f64; 3],
}

pub fn class_name(class_id: usize) -> &'static str {
    CLASS_NAMES[class_id]
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

pub fn task_signature(task_id: usize) -> [f64; 3] {
    hsv(0.02 + task_id as f64 * 0.618_034, 0.8, 0.6)
}

pub fn class_color(class_id: usize) -> [f64; 3] {
    hsv(0.42 + class_id as f64 * 0.381_966, 0.85, 0.95)
}

/// Even class ids are wide, odd ones tall.
pub fn class_is_wide(class_id: usize) -> bool {
    class_id.is_multiple_of(2)
}

struct Placed {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
}

/// Tries to place a `w x h` rectangle that keeps a one-pixel gap to
/// `placed` and whose center cell is unused.
fn place(
    size: usize,
    cell: usize,
    w: usize,
    h: usize,
    placed: &[Placed],
    rng: &mut SplitMix64,
) -> Option<Placed> {
    let center_cell = |p: &Placed| ((2 * p.x0 + p.w) / (2 * cell), (2 * p.y0 + p.h) / (2 * cell));
    for _ in 0..64 {
        let cand = Placed {
            x0: rng.below(size - w + 1),
            y0: rng.below(size - h + 1),
            w,
            h,
        };
        let clash = placed.iter().any(|p| {
            let apart = cand.x0 > p.x0 + p.w
                || p.x0 > cand.x0 + cand.w
                || cand.y0 > p.y0 + p.h
                || p.y0 > cand.y0 + cand.h;
            !apart || center_cell(p) == center_cell(&cand)
        });
        if !clash {
            return Some(cand);
        }
    }
    None
}

fn paint(img: &mut [f64], size: usize, p: &Placed, color: [f64; 3]) {
    for y in p.y0..p.y0 + p.h {
        for x in p.x0..p.x0 + p.w {
            let o = (y * size + x) * 3;
            img[o..o + 3].copy_from_slice(&color);
        }
    }
}

struct ObjectStyle {
    class_id: usize,
    color: [f64; 3],
    w: usize,
    h: usize,
}

fn render(
    size: usize,
    background: [f64; 3],
    styles: &[ObjectStyle],
    rng: &mut SplitMix64,
) -> Sample {
    let mut img = vec![0.0; size * size * 3];
    for px in img.chunks_exact_mut(3) {
        px.copy_from_slice(&background);
    }
    let cell = 4;
    let mut placed = Vec::new();
    let mut annotations = Vec::new();
    for st in styles {
        if let Some(p) = place(size, cell, st.w, st.h, &placed, rng) {
            paint(&mut img, size, &p, st.color);
            let s = size as f64;
            annotations.push(Annotation {
                bbox: BBox::from_corners(
                    p.x0 as f64 / s,
                    p.y0 as f64 / s,
                    (p.x0 + p.w) as f64 / s,
                    (p.y0 + p.h) as f64 / s,
                ),
                class_id: st.class_id,
            });
            placed.push(p);
        }
    }
    for v in img.iter_mut() {
        *v += NOISE_STD * rng.normal();
    }
    Sample {
        image: Tensor::new(vec![size, size, 3], img).expect("shape matches buffer"),
        annotations,
    }
}

fn benchmark_style(class_id: usize, size: usize, rng: &mut SplitMix64) -> ObjectStyle {
    let long = size * 3 / 8 + rng.below(size * 3 / 16 + 1);
    let short = size / 4 + rng.below(size * 3 / 32 + 1);
    let (w, h) = if class_is_wide(class_id) {
        (long, short)
    } else {
        (short, long)
    };
    ObjectStyle {
        class_id,
        color: class_color(class_id),
        w,
        h,
    }
}

fn task_sample(task_id: usize, class_ids: &[usize], size: usize, rng: &mut SplitMix64) -> Sample {
    loop {
        let n = 1 + rng.below(3);
        let styles: Vec<ObjectStyle> = (0..n)
            .map(|_| {
                let c = class_ids[rng.below(class_ids.len())];
                benchmark_style(c, size, rng)
            })
            .collect();
        let s = render(size, task_signature(task_id), &styles, rng);
        if !s.annotations.is_empty() {
            return s;
        }
    }
}

pub fn generate(spec: &BenchmarkSpec) -> Result<Vec<TaskDataset>> {
    spec.validate()?;
    let mut tasks = Vec::with_capacity(spec.n_tasks);
    for t in 0..spec.n_tasks {
        let class_ids: Vec<usize> =
            (t * spec.classes_per_task..(t + 1) * spec.classes_per_task).collect();
        let mut rng = SplitMix64::derive(spec.seed, 0x7A5C_0000 + t as u64);
        let train = (0..spec.train_images)
            .map(|_| task_sample(t, &class_ids, spec.image_size, &mut rng))
            .collect();
        let test = (0..spec.test_images)
            .map(|_| task_sample(t, &class_ids, spec.image_size, &mut rng))
            .collect();
        tasks.push(TaskDataset {
            task_id: t,
            class_names: class_ids
                .iter()
                .map(|&c| CLASS_NAMES[c].to_string())
                .collect(),
            class_ids,
            train,
            test,
            signature: task_signature(t),
        });
    }
    Ok(tasks)
}

/// Held-out pretraining distribution: four classes drawn like benchmark
/// classes (even ids wide, odd ids tall) but in fixed colors outside the
/// benchmark palette, on random backgrounds. Class ids index
/// [`PRETASK_NAMES`].
pub fn generate_pretask(n_images: usize, image_size: usize, seed: u64) -> Vec<Sample> {
    let mut rng = SplitMix64::derive(seed, 0x9E7A);
    let mut out = Vec::with_capacity(n_images);
    while out.len() < n_images {
        let bg = hsv(rng.uniform(), 0.8, 0.6);
        let n = 1 + rng.below(3);
        let styles: Vec<ObjectStyle> = (0..n)
            .map(|_| {
                let class_id = rng.below(PRETASK_NAMES.len());
                let mut st = benchmark_style(class_id, image_size, &mut rng);
                st.color = pretask_color(class_id);
                st
            })
            .collect();
        let s = render(image_size, bg, &styles, &mut rng);
        if !s.annotations.is_empty() {
            out.push(s);
        }
    }
    out
}

pub fn pretask_color(class_id: usize) -> [f64; 3] {
    hsv(0.2 + class_id as f64 * 0.25, 0.85, 0.95)
}

/// Task visiting order for a run seed (Fisher-Yates over `0..n`).
pub fn task_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::derive(seed, 0x0DE5).shuffle(&mut order);
    order
}

/// Indices of a k-shot subset: images are visited in a seeded random order
/// and kept while they contribute a class that still has fewer than `k`
/// boxes. Returned indices are ascending.
pub fn k_shot_indices(samples: &[Sample], class_ids: &[usize], k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    SplitMix64::derive(seed, 0x5407).shuffle(&mut order);
    let mut counts: BTreeMap<usize, usize> = class_ids.iter().map(|&c| (c, 0)).collect();
    let mut chosen = Vec::new();
    for i in order {
        if counts.values().all(|&n| n >= k) {
            break;
        }
        let useful = samples[i]
            .annotations
            .iter()
            .any(|a| counts.get(&a.class_id).is_some_and(|&n| n < k));
        if useful {
            for a in &samples[i].annotations {
                if let Some(n) = counts.get_mut(&a.class_id) {
                    *n += 1;
                }
            }
            chosen.push(i);
        }
    }
    chosen.sort_unstable();
    chosen
}

pub fn shot_subset(samples: &[Sample], class_ids: &[usize], shot: Shot, seed: u64) -> Vec<Sample> {
    match shot {
        Shot::Full => samples.to_vec(),
        Shot::K(k) => k_shot_indices(samples, class_ids, k, seed)
            .into_iter()
            .map(|i| samples[i].clone())
            .collect(),
    }
}

/// A detection labelled with a global class id, as consumed by AP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

impl ScoredBox {
    /// Maps a detector output through the class list it was queried with.
    pub fn from_detection(d: &Detection, class_ids: &[usize]) -> Self {
        Self {
            bbox: d.bbox,
            class_id: class_ids[d.category],
            score: d.score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub per_class: BTreeMap<usize, f64>,
    /// Mean over classes with ground truth; 0 when there are none.
    pub mean: f64,
}

/// Single-threshold AP with all-point interpolation. `dets[i]` and `gts[i]`
/// belong to image `i`. Detections are ranked by score (ties keep image
/// order, then list order) and each claims the unmatched ground truth of its
/// class with the highest IoU at or above `iou_thresh`.
pub fn average_precision(
    dets: &[Vec<ScoredBox>],
    gts: &[Vec<Annotation>],
    iou_thresh: f64,
) -> ApReport {
    let mut classes: Vec<usize> = gts.iter().flatten().map(|a| a.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut per_class = BTreeMap::new();
    for &c in &classes {
        let n_gt = gts.iter().flatten().filter(|a| a.class_id == c).count();
        let mut ranked: Vec<(usize, &ScoredBox)> = dets
            .iter()
            .enumerate()
            .flat_map(|(i, ds)| ds.iter().filter(|d| d.class_id == c).map(move |d| (i, d)))
            .collect();
        ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
        let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = 0usize;
        let mut curve = Vec::with_capacity(ranked.len());
        for (k, (img, d)) in ranked.iter().enumerate() {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts[*img].iter().enumerate() {
                if g.class_id != c || used[*img][j] {
                    continue;
                }
                let o = iou(&d.bbox, &g.bbox);
                if o >= iou_thresh && best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((j, o));
                }
            }
            if let Some((j, _)) = best {
                used[*img][j] = true;
                tp += 1;
            }
            curve.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
        }
        per_class.insert(c, interpolated_area(&curve));
    }
    let mean = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    ApReport { per_class, mean }
}

/// Area under the precision envelope of `(recall, precision)` points given in
/// rank order.
fn interpolated_area(curve: &[(f64, f64)]) -> f64 {
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.1).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut area = 0.0;
    let mut prev_r = 0.0;
    for (i, &(r, _)) in curve.iter().enumerate() {
        area += (r - prev_r) * envelope[i];
        prev_r = r;
    }
    area
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CocoImage {
    id: usize,
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CocoAnnotation {
    id: usize,
    image_id: usize,
    bbox: [f64; 4],
    category_id: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CocoCategory {
    id: usize,
    name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TaskMeta {
    task_id: usize,
    class_ids: Vec<usize>,
    class_names: Vec<String>,
    signature: [f64; 3],
}

fn save_split(dir: &Path, samples: &[Sample], categories: &[CocoCategory]) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    let mut coco = CocoFile {
        images: Vec::new(),
        annotations: Vec::new(),
        categories: categories.to_vec(),
    };
    for (i, s) in samples.iter().enumerate() {
        let file_name = format!("images/{i:05}.bin");
        io::write_tensor(&dir.join(&file_name), &s.image)?;
        coco.images.push(CocoImage {
            id: i,
            file_name,
            width: s.image.shape()[1],
            height: s.image.shape()[0],
        });
        for a in &s.annotations {
            coco.annotations.push(CocoAnnotation {
                id: coco.annotations.len(),
                image_id: i,
                bbox: a.bbox.to_xywh(),
                category_id: a.class_id,
            });
        }
    }
    std::fs::write(
        dir.join("annotations.json"),
        serde_json::to_string_pretty(&coco)?,
    )?;
    Ok(())
}

fn load_split(dir: &Path) -> Result<Vec<Sample>> {
    let coco: CocoFile = serde_json::from_slice(&std::fs::read(dir.join("annotations.json"))?)?;
    let mut samples = Vec::with_capacity(coco.images.len());
    for im in &coco.images {
        if im.id != samples.len() {
            return Err(LabError::Format(
                "image ids must be dense and ordered".into(),
            ));
        }
        samples.push(Sample {
            image: io::read_tensor(&dir.join(&im.file_name))?,
            annotations: Vec::new(),
        });
    }
    for a in coco.annotations {
        let s = samples.get_mut(a.image_id).ok_or_else(|| {
            LabError::Format(format!("annotation {} names a missing image", a.id))
        })?;
        s.annotations.push(Annotation {
            bbox: BBox::from_xywh(a.bbox),
            class_id: a.category_id,
        });
    }
    Ok(samples)
}

/// Writes `task_XX/{task.json, train/, test/}` under `root`.
pub fn save_benchmark(root: &Path, tasks: &[TaskDataset]) -> Result<()> {
    for t in tasks {
        let dir = root.join(format!("task_{:02}", t.task_id));
        std::fs::create_dir_all(&dir)?;
        let categories: Vec<CocoCategory> = t
            .class_ids
            .iter()
            .zip(&t.class_names)
            .map(|(&id, name)| CocoCategory {
                id,
                name: name.clone(),
            })
            .collect();
        let meta = TaskMeta {
            task_id: t.task_id,
            class_ids: t.class_ids.clone(),
            class_names: t.class_names.clone(),
            signature: t.signature,
        };
        std::fs::write(dir.join("task.json"), serde_json::to_string_pretty(&meta)?)?;
        save_split(&dir.join("train"), &t.train, &categories)?;
        save_split(&dir.join("test"), &t.test, &categories)?;
    }
    Ok(())
}

pub fn load_benchmark(root: &Path) -> Result<Vec<TaskDataset>> {
    let mut dirs: Vec<_> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join("task.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(LabError::Format(format!(
            "no task directories under {}",
            root.display()
        )));
    }
    let mut tasks = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let meta: TaskMeta = serde_json::from_slice(&std::fs::read(dir.join("task.json"))?)?;
        tasks.push(TaskDataset {
            task_id: meta.task_id,
            class_ids: meta.class_ids,
            class_names: meta.class_names,
            train: load_split(&dir.join("train"))?,
            test: load_split(&dir.join("test"))?,
            signature: meta.signature,
        });
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchmarkSpec {
        BenchmarkSpec {
            train_images: 12,
            test_images: 4,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for (s, t) in x.train.iter().zip(&y.train) {
                assert!(s.image.bit_eq(&t.image));
                assert_eq!(s.annotations, t.annotations);
            }
        }
    }

    #[test]
    fn class_sets_disjoint() {
        let tasks = generate(&small()).unwrap();
        let mut all: Vec<&String> = tasks.iter().flat_map(|t| &t.class_names).collect();
        let n = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), n);
    }

    #[test]
    fn annotations_are_valid_and_cell_distinct() {
        for t in generate(&small()).unwrap() {
            for s in t.train.iter().chain(&t.test) {
                assert!((1..=3).contains(&s.annotations.len()));
                let mut cells = Vec::new();
                for a in &s.annotations {
                    let (x0, y0, x1, y1) = a.bbox.corners();
                    assert!(x0 >= 0.0 && y0 >= 0.0 && x1 <= 1.0 && y1 <= 1.0);
                    assert!(t.class_ids.contains(&a.class_id));
                    cells.push(((a.bbox.cx * 8.0) as usize, (a.bbox.cy * 8.0) as usize));
                }
                cells.sort_unstable();
                let n = cells.len();
                cells.dedup();
                assert_eq!(cells.len(), n);
            }
        }
    }

    #[test]
    fn one_shot_covers_every_class() {
        let t = &generate(&small()).unwrap()[0];
        let idx = k_shot_indices(&t.train, &t.class_ids, 1, 3);
        for &c in &t.class_ids {
            assert!(idx
                .iter()
                .any(|&i| t.train[i].annotations.iter().any(|a| a.class_id == c)));
        }
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert!(idx.len() <= t.class_ids.len());
    }

    #[test]
    fn shot_parsing() {
        assert_eq!("full".parse::<Shot>().unwrap(), Shot::Full);
        assert_eq!("10".parse::<Shot>().unwrap(), Shot::K(10));
        assert!("0".parse::<Shot>().is_err());
    }

    #[test]
    fn task_order_is_permutation() {
        let mut o = task_order(13, 5);
        o.sort_unstable();
        assert_eq!(o, (0..13).collect::<Vec<_>>());
    }

    fn gt(cx: f64) -> Annotation {
        Annotation {
            bbox: BBox::new(cx, 0.5, 0.1, 0.1),
            class_id: 0,
        }
    }

    fn det(cx: f64, score: f64) -> ScoredBox {
        ScoredBox {
            bbox: BBox::new(cx, 0.5, 0.1, 0.1),
            class_id: 0,
            score,
        }
    }

    #[test]
    fn ap_exact_single() {
        let r = average_precision(&[vec![det(0.3, 1.0)]], &[vec![gt(0.3)]], 0.5);
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn ap_no_predictions() {
        let r = average_precision(&[vec![]], &[vec![gt(0.3)]], 0.5);
        assert_eq!(r.mean, 0.0);
    }

    #[test]
    fn ap_hand_curve() {
        let r = average_precision(
            &[vec![det(0.2, 0.9), det(0.8, 0.8), det(0.5, 0.7)]],
            &[vec![gt(0.2), gt(0.5)]],
            0.5,
        );
        assert!((r.mean - (0.5 + 2.0 / 3.0 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn ap_excludes_classes_without_gt() {
        let mut stray = det(0.2, 0.9);
        stray.class_id = 7;
        let r = average_precision(&[vec![det(0.2, 0.9), stray]], &[vec![gt(0.2)]], 0.5);
        assert_eq!(r.per_class.len(), 1);
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn persistence_roundtrip() {
        let tasks = generate(&BenchmarkSpec {
            n_tasks: 2,
            train_images: 3,
            test_images: 2,
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_benchmark(dir.path(), &tasks).unwrap();
        let back = load_benchmark(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in tasks.iter().zip(&back) {
            assert_eq!(a.class_names, b.class_names);
            for (s, t) in a.test.iter().zip(&b.test) {
                assert!(s.image.bit_eq(&t.image));
                for (x, y) in s.annotations.iter().zip(&t.annotations) {
                    assert!((x.bbox.cx - y.bbox.cx).abs() < 1e-12);
                    assert_eq!(x.class_id, y.class_id);
                }
            }
        }
    }
}
