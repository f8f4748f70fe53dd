//! Synthetic varying-channel corpus generator.
//!
//! Classes are encoded purely in blob morphology (count, ring radius, size,
//! eccentricity) and every channel of an image shares the same geometry, so
//! any single channel carries the class. Channels differ in gain and noise;
//! group factors (cell_line / plate / source) shift brightness, background
//! and noise level to give the out-of-distribution splits a real, if mild,
//! technical shift. Images land on disk as unfolded 16-bit grayscale strips
//! next to a metadata CSV, mirroring the loader's expected layout.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{write_metadata, ImageStore, MetadataRecord};
use crate::error::{Error, Result};
use crate::registry::ChannelRegistry;

/// Morphology parameters of one synthetic class, in normalized units.
#[derive(Clone, Debug)]
pub struct SynthClass {
    pub name: String,
    pub blob_count: usize,
    pub ring_radius: f64,
    pub blob_sigma: f64,
    pub eccentricity: f64,
}

/// Generation plan: datasets, classes, and per-split image counts.
#[derive(Clone, Debug)]
pub struct SynthSpec {
    /// (dataset name, channel count); counts must be distinct.
    pub datasets: Vec<(String, usize)>,
    pub classes: Vec<SynthClass>,
    /// The first `train_classes` classes appear in train and the standard
    /// OOD tasks; the rest are reserved for the novel-label tasks.
    pub train_classes: usize,
    pub image_size: usize,
    pub train_per_dataset: usize,
    pub test_per_task: usize,
    pub novel_test_per_task: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let class = |name: &str, blob_count, ring_radius, blob_sigma, eccentricity| SynthClass {
            name: name.to_string(),
            blob_count,
            ring_radius,
            blob_sigma,
            eccentricity,
        };
        SynthSpec {
            datasets: vec![
                ("SYNTH3".into(), 3),
                ("SYNTH4".into(), 4),
                ("SYNTH5".into(), 5),
            ],
            classes: vec![
                class("c0", 1, 0.00, 0.140, 1.0),
                class("c1", 3, 0.17, 0.070, 1.0),
                class("c2", 6, 0.30, 0.045, 2.2),
                class("c3", 2, 0.25, 0.090, 1.6),
                class("c4", 4, 0.10, 0.055, 1.0),
                class("c5", 8, 0.33, 0.030, 2.8),
            ],
            train_classes: 3,
            image_size: 64,
            train_per_dataset: 510,
            test_per_task: 120,
            novel_test_per_task: 150,
        }
    }
}

impl SynthSpec {
    /// A reduced corpus for fast tests.
    pub fn tiny() -> Self {
        SynthSpec {
            train_per_dataset: 90,
            test_per_task: 30,
            novel_test_per_task: 40,
            image_size: 48,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.datasets.len() < 2 {
            return Err(Error::contract("synth spec needs >= 2 datasets"));
        }
        let mut counts: Vec<usize> = self.datasets.iter().map(|(_, c)| *c).collect();
        counts.sort_unstable();
        counts.dedup();
        if counts.len() != self.datasets.len() {
            return Err(Error::contract(
                "synth datasets must have distinct channel counts".to_string(),
            ));
        }
        if self.classes.len() < 3 || self.train_classes < 3 {
            return Err(Error::contract("synth spec needs >= 3 train classes"));
        }
        if self.train_classes > self.classes.len() {
            return Err(Error::contract("train_classes exceeds class list"));
        }
        if self.image_size < 16 {
            return Err(Error::contract("synth image size too small"));
        }
        Ok(())
    }
}

const BASE_CELL_LINES: [&str; 3] = ["CL1", "CL2", "CL3"];
const BASE_PLATES: [&str; 4] = ["P1", "P2", "P3", "P4"];
const BASE_SOURCES: [&str; 2] = ["S1", "S2"];
const NOVEL_CELL_LINE: &str = "CL9";
const NOVEL_PLATE: &str = "P9";
const NOVEL_SOURCE: &str = "S9";

fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for part in parts {
        for &b in *part {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

/// Uniform [0,1) value derived from a group name, for stable group effects.
fn group_unit(name: &str, salt: u64) -> f64 {
    let h = fnv1a(&[name.as_bytes(), &salt.to_le_bytes()]);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

struct GroupEffect {
    brightness: f64,
    background: f64,
    noise: f64,
}

fn group_effect(cell_line: &str, plate: &str, source: &str) -> GroupEffect {
    GroupEffect {
        brightness: 0.85 + 0.25 * group_unit(cell_line, 1),
        background: 0.02 + 0.06 * group_unit(plate, 2),
        noise: 0.008 + 0.012 * group_unit(source, 3),
    }
}

/// Render the shared blob field of one image (normalized coordinates).
fn render_field(class: &SynthClass, size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    struct Blob {
        cx: f64,
        cy: f64,
        angle: f64,
        amp: f64,
    }
    let blobs: Vec<Blob> = (0..class.blob_count)
        .map(|b| {
            let angle = theta
                + std::f64::consts::TAU * b as f64 / class.blob_count as f64
                + rng.gen_range(-0.15..0.15);
            let radius = class.ring_radius * rng.gen_range(0.88..1.12);
            Blob {
                cx: 0.5 + radius * angle.cos(),
                cy: 0.5 + radius * angle.sin(),
                angle,
                amp: rng.gen_range(0.75..1.0),
            }
        })
        .collect();
    let s = class.blob_sigma;
    let e = class.eccentricity;
    let (su, sv) = (s / e, s * e);
    let mut field = vec![0.0f64; size * size];
    for row in 0..size {
        let y = (row as f64 + 0.5) / size as f64;
        for col in 0..size {
            let x = (col as f64 + 0.5) / size as f64;
            let mut acc = 0.0;
            for b in &blobs {
                let dx = x - b.cx;
                let dy = y - b.cy;
                let (sin, cos) = b.angle.sin_cos();
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                acc += b.amp * (-0.5 * ((u / su).powi(2) + (v / sv).powi(2))).exp();
            }
            field[row * size + col] = acc.min(1.0);
        }
    }
    field
}

struct PlanEntry {
    split: String,
    dataset: String,
    channels: usize,
    count: usize,
    classes: std::ops::Range<usize>,
    cell_lines: Vec<String>,
    plates: Vec<String>,
    sources: Vec<String>,
}

fn build_plan(spec: &SynthSpec) -> Vec<PlanEntry> {
    let base_cl: Vec<String> = BASE_CELL_LINES.iter().map(|s| s.to_string()).collect();
    let base_pl: Vec<String> = BASE_PLATES.iter().map(|s| s.to_string()).collect();
    let base_src: Vec<String> = BASE_SOURCES.iter().map(|s| s.to_string()).collect();
    let train_cls = 0..spec.train_classes;
    let novel_cls = spec.train_classes..spec.classes.len();

    // dataset roles follow channel-count order: [0] -> W tasks, [1] -> H, [2] -> C
    let mut ordered: Vec<(String, usize)> = spec.datasets.clone();
    ordered.sort_by_key(|&(_, c)| c);

    let mut plan = Vec::new();
    for (name, channels) in &ordered {
        plan.push(PlanEntry {
            split: "train".into(),
            dataset: name.clone(),
            channels: *channels,
            count: spec.train_per_dataset,
            classes: train_cls.clone(),
            cell_lines: base_cl.clone(),
            plates: base_pl.clone(),
            sources: base_src.clone(),
        });
    }
    let task = |split: &str,
                    ds: usize,
                    count: usize,
                    classes: std::ops::Range<usize>,
                    cl: Vec<String>,
                    pl: Vec<String>,
                    src: Vec<String>| PlanEntry {
        split: split.into(),
        dataset: ordered[ds].0.clone(),
        channels: ordered[ds].1,
        count,
        classes,
        cell_lines: cl,
        plates: pl,
        sources: src,
    };
    let n = spec.test_per_task;
    let nn = spec.novel_test_per_task;
    plan.push(task("W1", 0, n, train_cls.clone(), base_cl.clone(), base_pl.clone(), base_src.clone()));
    plan.push(task("W2", 0, n, train_cls.clone(), base_cl.clone(), base_pl.clone(), vec![NOVEL_SOURCE.into()]));
    plan.push(task("H1", 1, n, train_cls.clone(), base_cl.clone(), base_pl.clone(), base_src.clone()));
    plan.push(task("H2", 1, n, train_cls.clone(), vec![NOVEL_CELL_LINE.into()], base_pl.clone(), base_src.clone()));
    plan.push(task("H3", 1, nn, novel_cls.clone(), base_cl.clone(), base_pl.clone(), base_src.clone()));
    plan.push(task("C1", 2, n, train_cls.clone(), base_cl.clone(), base_pl.clone(), base_src.clone()));
    plan.push(task("C2", 2, n, train_cls.clone(), base_cl.clone(), vec![NOVEL_PLATE.into()], base_src.clone()));
    plan.push(task("C3", 2, n, train_cls.clone(), base_cl.clone(), base_pl.clone(), vec![NOVEL_SOURCE.into()]));
    plan.push(task("C4", 2, nn, novel_cls, base_cl, base_pl, base_src));
    plan
}

/// Generate the corpus under `out_dir`: unfolded 16-bit PNG strips in
/// `images/<dataset>/`, plus `metadata.csv` and `registry.csv`.
/// Deterministic: the same spec and seed produce byte-identical output.
pub fn synth_generate(spec: &SynthSpec, seed: u64, out_dir: &Path) -> Result<Vec<MetadataRecord>> {
    spec.validate()?;
    let plan = build_plan(spec);
    let size = spec.image_size;
    let mut records = Vec::new();
    for entry in &plan {
        let dir = out_dir.join("images").join(&entry.dataset);
        std::fs::create_dir_all(&dir)?;
        let n_classes = entry.classes.len();
        for idx in 0..entry.count {
            let image_id = format!("{}_{}_{idx:05}", entry.dataset, entry.split);
            let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(&[
                &seed.to_le_bytes(),
                image_id.as_bytes(),
            ]));
            let class_idx = entry.classes.start + idx % n_classes;
            let class = &spec.classes[class_idx];
            let cell_line = entry.cell_lines[idx % entry.cell_lines.len()].clone();
            let plate = entry.plates[(idx / entry.cell_lines.len()) % entry.plates.len()].clone();
            let source = entry.sources[idx % entry.sources.len()].clone();
            let effect = group_effect(&cell_line, &plate, &source);

            let field = render_field(class, size, &mut rng);
            let mut strip = vec![0u16; entry.channels * size * size];
            for c in 0..entry.channels {
                let gain = effect.brightness * (0.6 + 0.4 * (c + 1) as f64 / entry.channels as f64);
                for p in 0..size * size {
                    let noise: f64 = rng.gen_range(-1.0..1.0) * effect.noise;
                    let v = (effect.background + gain * field[p] + noise).clamp(0.0, 1.0);
                    strip[c * size * size + p] = (v * 65535.0).round() as u16;
                }
            }
            let rel_path = format!("images/{}/{image_id}.png", entry.dataset);
            let buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
                image::ImageBuffer::from_raw((size) as u32, (entry.channels * size) as u32, strip)
                    .expect("buffer size");
            buf.save_with_format(out_dir.join(&rel_path), image::ImageFormat::Png)?;
            records.push(MetadataRecord {
                image_id,
                path: rel_path,
                dataset: entry.dataset.clone(),
                channel_count: entry.channels,
                label: class.name.clone(),
                split: entry.split.clone(),
                cell_line,
                plate,
                source,
            });
        }
    }
    write_metadata(&out_dir.join("metadata.csv"), &records)?;
    let mut registry = ChannelRegistry::new();
    for (name, channels) in &spec.datasets {
        registry.add_dataset_unnamed(name, *channels)?;
    }
    registry.to_csv(&out_dir.join("registry.csv"))?;
    Ok(records)
}

/// Class-separability oracle run over raw pixels: block-mean each channel to
/// 8x8, concatenate channels, and score a cosine 1-NN against the dataset's
/// train rows with macro-F1. Self-contained on purpose; this is the sanity
/// bar the learned models have to clear, not the evaluation engine.
pub fn raw_pixel_knn_f1(
    records: &[MetadataRecord],
    store: &ImageStore,
    task_split: &str,
) -> Result<f64> {
    let task_rows: Vec<&MetadataRecord> =
        records.iter().filter(|r| r.split == task_split).collect();
    if task_rows.is_empty() {
        return Err(Error::contract(format!("no rows in split {task_split}")));
    }
    let dataset = &task_rows[0].dataset;
    let train_rows: Vec<&MetadataRecord> = records
        .iter()
        .filter(|r| r.split == "train" && &r.dataset == dataset)
        .collect();
    if train_rows.is_empty() {
        return Err(Error::contract(format!("no train rows for {dataset}")));
    }

    let downsample = |id: &str| -> Result<Vec<f64>> {
        let img = store
            .get(id)
            .ok_or_else(|| Error::contract(format!("image {id} not loaded")))?;
        let (c, h, w) = (
            img.data.shape()[0],
            img.data.shape()[1],
            img.data.shape()[2],
        );
        let g = 8usize.min(h).min(w);
        let mut out = vec![0.0f64; c * g * g];
        for ch in 0..c {
            for bi in 0..g {
                let (h0, h1) = (bi * h / g, ((bi + 1) * h).div_ceil(g));
                for bj in 0..g {
                    let (w0, w1) = (bj * w / g, ((bj + 1) * w).div_ceil(g));
                    let mut acc = 0.0;
                    for row in h0..h1 {
                        for col in w0..w1 {
                            acc += f64::from(img.data.data()[(ch * h + row) * w + col]);
                        }
                    }
                    out[(ch * g + bi) * g + bj] = acc / ((h1 - h0) * (w1 - w0)) as f64;
                }
            }
        }
        Ok(out)
    };

    let train_vecs: Vec<(Vec<f64>, &str)> = train_rows
        .iter()
        .map(|r| downsample(&r.image_id).map(|v| (v, r.label.as_str())))
        .collect::<Result<_>>()?;
    let cosine = |a: &[f64], b: &[f64]| {
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for (x, y) in a.iter().zip(b) {
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        dot / (na.sqrt() * nb.sqrt()).max(1e-30)
    };

    let mut pred = Vec::with_capacity(task_rows.len());
    let mut truth = Vec::with_capacity(task_rows.len());
    for r in &task_rows {
        let v = downsample(&r.image_id)?;
        let mut best = (f64::NEG_INFINITY, "");
        for (tv, label) in &train_vecs {
            let s = cosine(&v, tv);
            if s > best.0 {
                best = (s, label);
            }
        }
        pred.push(best.1.to_string());
        truth.push(r.label.clone());
    }

    // plain per-class F1 over classes present in truth
    let mut classes: Vec<&String> = truth.iter().collect();
    classes.sort();
    classes.dedup();
    let mut f1_sum = 0.0;
    for class in &classes {
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for (p, t) in pred.iter().zip(&truth) {
            let pc = p == *class;
            let tc = t == *class;
            match (pc, tc) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        if precision + recall > 0.0 {
            f1_sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    Ok(f1_sum / classes.len() as f64)
}
