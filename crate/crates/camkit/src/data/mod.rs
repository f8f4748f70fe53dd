//! Dataset ingestion and bookkeeping: unfolded channel-strip images plus a
//! metadata CSV, task-split definitions, and a synthetic varying-channel
//! corpus generator for desk-scale training and tests.

mod synth;

pub use synth::{raw_pixel_knn_f1, synth_generate, SynthClass, SynthSpec};

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::registry::ChannelRegistry;
use crate::tensor::{Scalar, Tensor};

/// A C×H×W image with values in [0,1], tagged with the dataset whose channel
/// set it carries.
#[derive(Clone, Debug)]
pub struct MultiChannelImage<T> {
    pub data: Tensor<T>,
    /// Dataset id naming the channel set in the registry.
    pub channel_set: String,
    pub image_id: String,
}

impl<T: Scalar> MultiChannelImage<T> {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    /// Validate the type invariants against a registry.
    pub fn validate(&self, registry: &ChannelRegistry) -> Result<()> {
        let expected = registry.channel_count(&self.channel_set)?;
        if self.channels() != expected {
            return Err(Error::Dimension {
                op: "MultiChannelImage",
                lhs: vec![self.channels()],
                rhs: vec![expected],
            });
        }
        for &v in self.data.data() {
            let f = v.to_f64();
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::contract(format!(
                    "image {} has value {f} outside [0,1]",
                    self.image_id
                )));
            }
        }
        Ok(())
    }
}

/// One row of the metadata CSV.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetadataRecord {
    pub image_id: String,
    pub path: String,
    pub dataset: String,
    pub channel_count: usize,
    pub label: String,
    /// "train" or a task id.
    pub split: String,
    pub cell_line: String,
    pub plate: String,
    pub source: String,
}

impl MetadataRecord {
    pub fn annotation(&self, key: GroupKey) -> &str {
        match key {
            GroupKey::CellLine => &self.cell_line,
            GroupKey::Plate => &self.plate,
            GroupKey::Source => &self.source,
        }
    }
}

pub const METADATA_HEADER: [&str; 9] = [
    "image_id",
    "path",
    "dataset",
    "channel_count",
    "label",
    "split",
    "cell_line",
    "plate",
    "source",
];

pub fn read_metadata(path: &Path) -> Result<Vec<MetadataRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        if row.len() < METADATA_HEADER.len() {
            return Err(Error::format(format!(
                "metadata row has {} columns, expected {}: {row:?}",
                row.len(),
                METADATA_HEADER.len()
            )));
        }
        out.push(MetadataRecord {
            image_id: row[0].to_string(),
            path: row[1].to_string(),
            dataset: row[2].to_string(),
            channel_count: row[3]
                .parse()
                .map_err(|_| Error::format(format!("bad channel_count {:?}", &row[3])))?,
            label: row[4].to_string(),
            split: row[5].to_string(),
            cell_line: row[6].to_string(),
            plate: row[7].to_string(),
            source: row[8].to_string(),
        });
    }
    Ok(out)
}

pub fn write_metadata(path: &Path, records: &[MetadataRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(METADATA_HEADER)?;
    for r in records {
        wtr.write_record([
            r.image_id.as_str(),
            r.path.as_str(),
            r.dataset.as_str(),
            &r.channel_count.to_string(),
            r.label.as_str(),
            r.split.as_str(),
            r.cell_line.as_str(),
            r.plate.as_str(),
            r.source.as_str(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Non-label annotation used to sub-group leave-one-out tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupKey {
    CellLine,
    Plate,
    Source,
}

impl GroupKey {
    pub fn name(self) -> &'static str {
        match self {
            GroupKey::CellLine => "cell_line",
            GroupKey::Plate => "plate",
            GroupKey::Source => "source",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    /// Queries scored against the training set of the task's dataset.
    ReferenceTrain,
    /// Novel-label tasks: hide one sub-group at a time; the reference is the
    /// train split plus the test rows of the other sub-groups.
    LeaveOneOut,
}

/// One benchmark task: which split to score, how, and its CPS weight.
#[derive(Clone, Debug)]
pub struct TaskSpec {
    pub task_id: String,
    pub dataset: String,
    pub eval_mode: EvalMode,
    pub group_key: Option<GroupKey>,
    pub cps_weight: f64,
}

/// The nine-task layout over three datasets given in W/H/C role order
/// (3-channel, 4-channel, 5-channel source).
pub fn task_specs_for(w_dataset: &str, h_dataset: &str, c_dataset: &str) -> Vec<TaskSpec> {
    let t = |task_id: &str, dataset: &str, mode, group, weight| TaskSpec {
        task_id: task_id.to_string(),
        dataset: dataset.to_string(),
        eval_mode: mode,
        group_key: group,
        cps_weight: weight,
    };
    vec![
        t("W1", w_dataset, EvalMode::ReferenceTrain, None, 0.0),
        t("W2", w_dataset, EvalMode::ReferenceTrain, None, 1.0 / 3.0),
        t("H1", h_dataset, EvalMode::ReferenceTrain, None, 0.0),
        t("H2", h_dataset, EvalMode::ReferenceTrain, None, 1.0 / 6.0),
        t(
            "H3",
            h_dataset,
            EvalMode::LeaveOneOut,
            Some(GroupKey::CellLine),
            1.0 / 6.0,
        ),
        t("C1", c_dataset, EvalMode::ReferenceTrain, None, 0.0),
        t("C2", c_dataset, EvalMode::ReferenceTrain, None, 1.0 / 9.0),
        t("C3", c_dataset, EvalMode::ReferenceTrain, None, 1.0 / 9.0),
        t(
            "C4",
            c_dataset,
            EvalMode::LeaveOneOut,
            Some(GroupKey::Plate),
            1.0 / 9.0,
        ),
    ]
}

/// Standard task set over the default registry's dataset names.
pub fn chammi_task_specs() -> Vec<TaskSpec> {
    task_specs_for("WTC", "HPA", "CP")
}

/// Derive the nine-task layout from metadata: the three datasets present are
/// assigned W/H/C roles in increasing channel-count order.
pub fn task_specs_from_metadata(records: &[MetadataRecord]) -> Result<Vec<TaskSpec>> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        if let Some(&c) = counts.get(r.dataset.as_str()) {
            if c != r.channel_count {
                return Err(Error::format(format!(
                    "dataset {} has inconsistent channel counts {} and {}",
                    r.dataset, c, r.channel_count
                )));
            }
        } else {
            counts.insert(&r.dataset, r.channel_count);
        }
    }
    if counts.len() != 3 {
        return Err(Error::contract(format!(
            "task derivation needs exactly 3 datasets, found {}",
            counts.len()
        )));
    }
    let mut by_channels: Vec<(&str, usize)> = counts.into_iter().collect();
    by_channels.sort_by_key(|&(_, c)| c);
    if by_channels[0].1 == by_channels[1].1 || by_channels[1].1 == by_channels[2].1 {
        return Err(Error::contract(
            "datasets must have distinct channel counts".to_string(),
        ));
    }
    Ok(task_specs_for(
        by_channels[0].0,
        by_channels[1].0,
        by_channels[2].0,
    ))
}

/// Axis along which channel planes are concatenated in a strip image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FoldAxis {
    #[default]
    Height,
    Width,
}

/// Split an unfolded strip into C equal contiguous blocks along the fold
/// axis and stack them as channels in storage order.
pub fn fold_channels<T: Scalar>(strip: &Tensor<T>, channels: usize, axis: FoldAxis) -> Result<Tensor<T>> {
    if strip.shape().len() != 2 {
        return Err(Error::format(format!(
            "fold_channels expects a 2-D strip, got {:?}",
            strip.shape()
        )));
    }
    if channels == 0 {
        return Err(Error::format("fold_channels: channel count is zero"));
    }
    let (h_total, w_total) = (strip.shape()[0], strip.shape()[1]);
    match axis {
        FoldAxis::Height => {
            if h_total % channels != 0 {
                return Err(Error::format(format!(
                    "strip height {h_total} not divisible by {channels} channels"
                )));
            }
            // contiguous blocks along the first axis are already in layout order
            Ok(strip
                .reshaped(vec![channels, h_total / channels, w_total])
                .expect("divisibility checked"))
        }
        FoldAxis::Width => {
            if w_total % channels != 0 {
                return Err(Error::format(format!(
                    "strip width {w_total} not divisible by {channels} channels"
                )));
            }
            let w = w_total / channels;
            let mut data = vec![T::ZERO; h_total * w_total];
            for c in 0..channels {
                for row in 0..h_total {
                    for col in 0..w {
                        data[(c * h_total + row) * w + col] =
                            strip.data()[row * w_total + c * w + col];
                    }
                }
            }
            Tensor::new(vec![channels, h_total, w], data)
        }
    }
}

/// Inverse of [`fold_channels`] along the height axis.
pub fn unfold_channels<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<T>> {
    if img.shape().len() != 3 {
        return Err(Error::format(format!(
            "unfold_channels expects [C,H,W], got {:?}",
            img.shape()
        )));
    }
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    img.reshaped(vec![c * h, w])
}

/// Decode one grayscale strip image (8/16-bit PNG, or TIFF) to a 2-D tensor
/// scaled to [0,1] by the bit-depth maximum.
pub fn decode_strip(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?;
    match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            let data: Vec<f32> = g.into_raw().iter().map(|&v| v as f32 / 255.0).collect();
            Tensor::new(vec![h, w], data)
        }
        image::DynamicImage::ImageLuma16(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            let data: Vec<f32> = g.into_raw().iter().map(|&v| v as f32 / 65535.0).collect();
            Tensor::new(vec![h, w], data)
        }
        other => Err(Error::format(format!(
            "{}: expected 8- or 16-bit grayscale, got {other:?}",
            path.display()
        ))),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LoadOptions {
    /// Abort on the first bad record instead of skipping and logging.
    pub fail_fast: bool,
    pub axis: FoldAxis,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            fail_fast: true,
            axis: FoldAxis::Height,
        }
    }
}

/// In-memory image store: every image is decoded exactly once, then served
/// from the cache for all later epochs.
pub struct ImageStore {
    images: BTreeMap<String, MultiChannelImage<f32>>,
    decode_count: usize,
    pub skipped: Vec<String>,
}

impl ImageStore {
    /// Decode every record's strip under `root`, fold channels, validate.
    /// Records are processed in parallel; results are ordered by input order.
    pub fn load(
        root: &Path,
        records: &[MetadataRecord],
        registry: &ChannelRegistry,
        opts: LoadOptions,
    ) -> Result<Self> {
        let results: Vec<(usize, std::result::Result<MultiChannelImage<f32>, String>)> = records
            .par_iter()
            .enumerate()
            .map(|(i, r)| (i, load_one(root, r, registry, opts.axis).map_err(|e| format!("{}: {e}", r.image_id))))
            .collect();
        let mut images = BTreeMap::new();
        let mut skipped = Vec::new();
        let mut decode_count = 0;
        for (_, res) in results {
            match res {
                Ok(img) => {
                    decode_count += 1;
                    images.insert(img.image_id.clone(), img);
                }
                Err(msg) => {
                    if opts.fail_fast {
                        return Err(Error::format(msg));
                    }
                    skipped.push(msg);
                }
            }
        }
        Ok(ImageStore {
            images,
            decode_count,
            skipped,
        })
    }

    pub fn get(&self, image_id: &str) -> Option<&MultiChannelImage<f32>> {
        self.images.get(image_id)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Total strip decodes performed. With the store as the per-run cache,
    /// this never exceeds the record count no matter how many epochs run.
    pub fn decode_count(&self) -> usize {
        self.decode_count
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &MultiChannelImage<f32>)> {
        self.images.iter()
    }
}

fn load_one(
    root: &Path,
    record: &MetadataRecord,
    registry: &ChannelRegistry,
    axis: FoldAxis,
) -> Result<MultiChannelImage<f32>> {
    let path: PathBuf = root.join(&record.path);
    if !path.exists() {
        return Err(Error::format(format!("missing file {}", path.display())));
    }
    let strip = decode_strip(&path)?;
    let expected = registry.channel_count(&record.dataset)?;
    if record.channel_count != expected {
        return Err(Error::Dimension {
            op: "load_dataset",
            lhs: vec![record.channel_count],
            rhs: vec![expected],
        });
    }
    let data = fold_channels(&strip, expected, axis)?;
    let img = MultiChannelImage {
        data,
        channel_set: record.dataset.clone(),
        image_id: record.image_id.clone(),
    };
    img.validate(registry)?;
    Ok(img)
}

/// Result of [`split_integrity_check`]: empty means clean.
#[derive(Debug, Default)]
pub struct IntegrityReport {
    pub violations: Vec<String>,
}

impl IntegrityReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Verify that no image id appears in two splits, that leave-one-out records
/// carry their grouping key, and that each task's records come from the
/// task's dataset.
pub fn split_integrity_check(records: &[MetadataRecord], specs: &[TaskSpec]) -> IntegrityReport {
    let mut report = IntegrityReport::default();
    let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
    for r in records {
        if let Some(prev) = seen.insert(&r.image_id, &r.split) {
            report.violations.push(format!(
                "image_id {} appears in splits {} and {}",
                r.image_id, prev, r.split
            ));
        }
    }
    let by_task: BTreeMap<&str, &TaskSpec> =
        specs.iter().map(|s| (s.task_id.as_str(), s)).collect();
    let known_splits: BTreeSet<&str> = std::iter::once("train")
        .chain(specs.iter().map(|s| s.task_id.as_str()))
        .collect();
    for r in records {
        if !known_splits.contains(r.split.as_str()) {
            report
                .violations
                .push(format!("image_id {}: unknown split {}", r.image_id, r.split));
            continue;
        }
        if let Some(spec) = by_task.get(r.split.as_str()) {
            if spec.dataset != r.dataset {
                report.violations.push(format!(
                    "image_id {}: task {} expects dataset {}, found {}",
                    r.image_id, spec.task_id, spec.dataset, r.dataset
                ));
            }
            if let Some(key) = spec.group_key {
                if r.annotation(key).is_empty() {
                    report.violations.push(format!(
                        "image_id {}: task {} requires annotation {}",
                        r.image_id,
                        spec.task_id,
                        key.name()
                    ));
                }
            }
        }
        if r.label.is_empty() {
            report
                .violations
                .push(format!("image_id {}: empty label", r.image_id));
        }
    }
    report
}
