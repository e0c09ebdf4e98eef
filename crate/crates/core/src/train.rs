//! Training and evaluation loops, plus the two desk-scale experiments.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{gen_synthetic, DataConfig, Dataset, LabelMap, NormStats, Sample};
use crate::error::{Error, Result};
use crate::graph::Bindings;
use crate::metrics::{psnr, ConfusionMatrix, MetricsReport};
use crate::model::{build, count_params, shape_check, Connectivity, ModelGraph, PathwaySpec, Task, UmcConfig, INPUT_NAME};
use crate::ops::IGNORE_INDEX;
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{derive_seed, stream, Rng};
use crate::tensor::Tensor;

/// Which sample field supervises a pathway.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Clean,
    Fine,
    Coarse,
    Category,
    CoarseCategory,
}

impl Target {
    pub fn as_str(&self) -> &'static str {
        match self {
            Target::Clean => "clean",
            Target::Fine => "fine",
            Target::Coarse => "coarse",
            Target::Category => "category",
            Target::CoarseCategory => "coarse_category",
        }
    }

    pub fn labels<'a>(&self, s: &'a Sample) -> Option<&'a LabelMap> {
        match self {
            Target::Clean => None,
            Target::Fine => Some(&s.fine),
            Target::Coarse => Some(&s.coarse),
            Target::Category => Some(&s.category),
            Target::CoarseCategory => Some(&s.coarse_category),
        }
    }

    /// Label count of a classification target; `None` for `Clean`.
    pub fn classes(&self, data: &DataConfig) -> Option<usize> {
        match self {
            Target::Clean => None,
            Target::Fine | Target::Coarse => Some(data.n_classes),
            Target::Category | Target::CoarseCategory => Some(data.n_categories),
        }
    }

    /// Target implied by a pathway's name, falling back on its task.
    pub fn infer(pathway: &PathwaySpec) -> Target {
        match pathway.name.as_str() {
            "c_cls" | "coarse" => Target::Coarse,
            "f_cat" | "cat" | "category" => Target::Category,
            "c_cat" | "coarse_category" | "coarsecat" => Target::CoarseCategory,
            "clean" | "denoise" => Target::Clean,
            _ => match pathway.task {
                Task::Regression => Target::Clean,
                Task::Classification => Target::Fine,
            },
        }
    }
}

impl std::str::FromStr for Target {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Target::Clean),
            "fine" => Ok(Target::Fine),
            "coarse" => Ok(Target::Coarse),
            "category" | "cat" => Ok(Target::Category),
            "coarse_category" | "coarsecat" => Ok(Target::CoarseCategory),
            other => Err(Error::invalid(format!("unknown target '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSource {
    #[default]
    Noisy,
    Clean,
}

impl InputSource {
    pub fn image<'a>(&self, s: &'a Sample) -> &'a Tensor<f32> {
        match self {
            InputSource::Noisy => &s.noisy,
            InputSource::Clean => &s.clean,
        }
    }
}

/// Network input plus the supervising field of every pathway.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskBindings {
    pub input: InputSource,
    pub targets: BTreeMap<String, Target>,
}

impl TaskBindings {
    /// Noisy input; targets inferred from pathway names.
    pub fn infer(config: &UmcConfig) -> Self {
        Self {
            input: InputSource::Noisy,
            targets: config.pathways.iter().map(|p| (p.name.clone(), Target::infer(p))).collect(),
        }
    }

    /// Every pathway bound exactly once, with a target of the right kind and
    /// class count for `data`.
    pub fn check(&self, config: &UmcConfig, data: &DataConfig) -> Result<()> {
        if config.in_channels != 3 {
            return Err(Error::ConfigMismatch(format!(
                "model expects {} input channels, images have 3",
                config.in_channels
            )));
        }
        for name in self.targets.keys() {
            if config.pathway(name).is_none() {
                return Err(Error::invalid(format!("binding for unknown pathway '{name}'")));
            }
        }
        for p in &config.pathways {
            let t = self
                .targets
                .get(&p.name)
                .ok_or_else(|| Error::invalid(format!("pathway '{}' has no target binding", p.name)))?;
            match (p.task, t.classes(data)) {
                (Task::Regression, None) => {
                    if p.out_channels != 3 {
                        return Err(Error::ConfigMismatch(format!(
                            "pathway '{}' regresses {} channels, images have 3",
                            p.name, p.out_channels
                        )));
                    }
                }
                (Task::Classification, Some(k)) => {
                    if p.out_channels != k {
                        return Err(Error::ConfigMismatch(format!(
                            "pathway '{}' predicts {} classes but target '{}' has {k}",
                            p.name,
                            p.out_channels,
                            t.as_str()
                        )));
                    }
                }
                _ => {
                    return Err(Error::ConfigMismatch(format!(
                        "pathway '{}' ({:?}) cannot be supervised by '{}'",
                        p.name,
                        p.task,
                        t.as_str()
                    )))
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Exact step count, overriding `epochs`.
    #[serde(default)]
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Evaluate on the training set every this many steps (0: never).
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default = "yes")]
    pub augment: bool,
}

fn yes() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            max_steps: None,
            batch_size: 2,
            lr: AdamConfig::default().lr,
            seed: 0,
            eval_every: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self, n_samples: usize) -> usize {
        let per_epoch = n_samples.div_ceil(self.batch_size.max(1));
        let steps = self.epochs * per_epoch;
        self.max_steps.unwrap_or(steps)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub per_pathway: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub reports: Vec<(String, MetricsReport)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub pathways: Vec<String>,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl RunLog {
    /// `step,loss_total,loss_<pathway>...`, one row per step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss_total");
        for p in &self.pathways {
            write!(out, ",loss_{p}").unwrap();
        }
        out.push('\n');
        for r in &self.steps {
            write!(out, "{},{}", r.step, r.total).unwrap();
            for l in &r.per_pathway {
                write!(out, ",{l}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn totals(&self) -> Vec<f64> {
        self.steps.iter().map(|r| r.total).collect()
    }
}

pub struct TrainOutput {
    pub model: ModelGraph<f32>,
    pub optimizer: AdamState<f32>,
    pub normalization: NormStats,
    pub bindings: TaskBindings,
    pub log: RunLog,
}

impl TrainOutput {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, Some(&self.optimizer), Some(self.normalization))
            .with_bindings(self.bindings.clone())
    }
}

fn stack_images(images: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let shape = images[0].shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(Error::shape(format!("batch mixes {:?} and {:?}", shape, img.shape())));
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Tensor::new(full, data)
}

fn stack_labels(maps: &[&LabelMap]) -> Result<Tensor<f32>> {
    let (h, w) = (maps[0].height, maps[0].width);
    let mut data = Vec::with_capacity(maps.len() * h * w);
    for m in maps {
        data.extend(m.data.iter().map(|&v| v as f32));
    }
    Tensor::new(vec![maps.len(), h, w], data)
}

/// Graph bindings for a batch: normalised input and every pathway target.
pub fn batch_bindings(
    model: &ModelGraph<f32>,
    bindings: &TaskBindings,
    norm: &NormStats,
    batch: &[Sample],
) -> Result<Bindings<f32>> {
    let inputs = batch
        .iter()
        .map(|s| norm.normalize(bindings.input.image(s)))
        .collect::<Result<Vec<_>>>()?;
    let mut b: Bindings<f32> = Bindings::new();
    b.insert(INPUT_NAME.to_string(), stack_images(&inputs)?);
    for p in &model.pathways {
        let target = bindings.targets[&p.name];
        let t = match target.labels(&batch[0]) {
            None => {
                let clean = batch.iter().map(|s| norm.normalize(&s.clean)).collect::<Result<Vec<_>>>()?;
                stack_images(&clean)?
            }
            Some(_) => {
                let maps: Vec<&LabelMap> = batch.iter().map(|s| target.labels(s).unwrap()).collect();
                stack_labels(&maps)?
            }
        };
        b.insert(p.target_input.clone(), t);
    }
    Ok(b)
}

fn check_trainable(config: &UmcConfig, data: &DataConfig) -> Result<()> {
    let [h, w] = data.train_dims();
    shape_check(config, &[1, config.in_channels, h, w])?;
    Ok(())
}

/// Train `config` on `dataset`. A pure function of its arguments: the
/// same inputs give bit-identical parameters, optimizer state and log.
pub fn train(config: &UmcConfig, tc: &TrainConfig, bindings: &TaskBindings, dataset: &Dataset) -> Result<TrainOutput> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    if tc.batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    if !(tc.lr >= 0.0 && tc.lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be >= 0, got {}", tc.lr)));
    }
    bindings.check(config, &dataset.config)?;
    check_trainable(config, &dataset.config)?;

    let norm = dataset.norm_stats()?;
    let mut model = build::<f32>(config, tc.seed)?;
    let mut optimizer = AdamState::new(AdamConfig {
        lr: tc.lr,
        ..AdamConfig::default()
    });
    let mut log = RunLog {
        pathways: config.pathways.iter().map(|p| p.name.clone()).collect(),
        ..RunLog::default()
    };
    let total_steps = tc.total_steps(dataset.len());
    let [ch, cw] = dataset.config.train_dims();
    let (h, w) = (dataset.config.height, dataset.config.width);
    let mut augment = Rng::derived(tc.seed, stream::AUGMENT);
    let shuffle_seed = derive_seed(tc.seed, stream::SHUFFLE);

    let mut step = 0;
    let mut epoch = 0u64;
    'outer: while step < total_steps {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        Rng::derived(shuffle_seed, epoch).shuffle(&mut order);
        epoch += 1;
        for chunk in order.chunks(tc.batch_size) {
            if step >= total_steps {
                break 'outer;
            }
            step += 1;
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    let mut s = dataset.samples[i].clone();
                    if tc.augment {
                        if (ch, cw) != (h, w) {
                            let top = augment.below(h - ch + 1);
                            let left = augment.below(w - cw + 1);
                            s = s.crop(top, left, ch, cw);
                        }
                        if augment.coin(dataset.config.flip_prob) {
                            s = s.hflip();
                        }
                    } else if (ch, cw) != (h, w) {
                        s = s.crop((h - ch) / 2, (w - cw) / 2, ch, cw);
                    }
                    s
                })
                .collect();
            let b = batch_bindings(&model, bindings, &norm, &batch)?;
            model.graph.run(&b, &[model.loss])?;
            let total = model.graph.value(model.loss).expect("loss evaluated").item() as f64;
            if !total.is_finite() {
                return Err(Error::NonFinite(format!("joint loss {total} at step {step}")));
            }
            let per_pathway = model
                .pathways
                .iter()
                .map(|p| model.graph.value(p.loss).expect("loss evaluated").item() as f64)
                .collect();
            log.steps.push(StepRecord {
                step,
                total,
                per_pathway,
            });
            let grads = model.graph.backward(model.loss)?;
            optimizer
                .step_graph(&mut model.graph, &grads)
                .map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("{m} at step {step}")),
                    other => other,
                })?;
            if tc.eval_every > 0 && step % tc.eval_every == 0 {
                let reports = evaluate(&mut model, &norm, bindings, dataset)?;
                log.evals.push(EvalRecord { step, reports });
            }
        }
    }

    Ok(TrainOutput {
        model,
        optimizer,
        normalization: norm,
        bindings: bindings.clone(),
        log,
    })
}

/// Score per-sample predictions. `predict` returns one tensor per pathway:
/// a `[3, H, W]` image in 0..255 for regression, `[K, H, W]` logits for
/// classification.
pub fn evaluate_with(
    config: &UmcConfig,
    bindings: &TaskBindings,
    dataset: &Dataset,
    mut predict: impl FnMut(&Sample) -> Result<Vec<Tensor<f32>>>,
) -> Result<Vec<(String, MetricsReport)>> {
    bindings.check(config, &dataset.config)?;
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let n = config.pathways.len();
    let mut psnr_sum = vec![0.0f64; n];
    let mut cms: Vec<ConfusionMatrix> = config.pathways.iter().map(|p| ConfusionMatrix::new(p.out_channels)).collect();
    for s in &dataset.samples {
        let preds = predict(s)?;
        if preds.len() != n {
            return Err(Error::invalid(format!("{} predictions for {n} pathways", preds.len())));
        }
        for (i, (p, pred)) in config.pathways.iter().zip(&preds).enumerate() {
            match bindings.targets[&p.name].labels(s) {
                None => psnr_sum[i] += psnr(pred, &s.clean, 255.0)?,
                Some(gt) => {
                    let labels = argmax_channels(pred)?;
                    cms[i].accumulate(&labels, &gt.data, IGNORE_INDEX as u8)?;
                }
            }
        }
    }
    config
        .pathways
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let report = match p.task {
                Task::Regression => MetricsReport::from_psnr(psnr_sum[i] / dataset.len() as f64),
                Task::Classification => MetricsReport::from_confusion(&cms[i])?,
            };
            Ok((p.name.clone(), report))
        })
        .collect()
}

/// Per-pixel argmax over the channel axis of `[K, H, W]` (first max wins).
pub fn argmax_channels(logits: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = logits.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("expected [K, H, W] logits, got {s:?}")));
    }
    let (k, hw) = (s[0], s[1] * s[2]);
    let d = logits.data();
    Ok((0..hw)
        .map(|i| {
            let mut best = 0;
            for c in 1..k {
                if d[c * hw + i] > d[best * hw + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect())
}

/// Run the model on one image; returns per-pathway outputs with the batch
/// axis removed (regression outputs denormalised and clamped to 0..255).
pub fn predict(model: &mut ModelGraph<f32>, norm: &NormStats, image: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("expected a [C, H, W] image, got {s:?}")));
    }
    shape_check(&model.config, &[1, s[0], s[1], s[2]])?;
    let x = norm.normalize(image)?.reshape(vec![1, s[0], s[1], s[2]])?;
    let b: Bindings<f32> = [(INPUT_NAME.to_string(), x)].into();
    let ids = model.output_ids();
    model.graph.run(&b, &ids)?;
    model
        .pathways
        .iter()
        .map(|p| {
            let out = model.graph.value(p.output).expect("output evaluated");
            let shape = out.shape()[1..].to_vec();
            let t = out.clone().reshape(shape)?;
            match p.task {
                Task::Regression => Ok(norm.denormalize(&t)?.map(|v| v.clamp(0.0, 255.0))),
                Task::Classification => Ok(t),
            }
        })
        .collect()
}

/// Evaluate without augmentation, one full-size image at a time.
pub fn evaluate(
    model: &mut ModelGraph<f32>,
    norm: &NormStats,
    bindings: &TaskBindings,
    dataset: &Dataset,
) -> Result<Vec<(String, MetricsReport)>> {
    let config = model.config.clone();
    evaluate_with(&config, bindings, dataset, |s| predict(model, norm, bindings.input.image(s)))
}

/// Evaluate a stored checkpoint; its config must fit the dataset.
pub fn evaluate_checkpoint(ck: &Checkpoint, dataset: &Dataset) -> Result<Vec<(String, MetricsReport)>> {
    let bindings = ck.bindings.clone().unwrap_or_else(|| TaskBindings::infer(&ck.config));
    bindings.check(&ck.config, &dataset.config)?;
    let norm = ck.normalization.unwrap_or(NormStats::IDENTITY);
    let mut model = ck.to_model()?;
    evaluate(&mut model, &norm, &bindings, dataset)
}

/// Mean PSNR of the noisy images against their clean versions.
pub fn input_psnr(dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let mut sum = 0.0;
    for s in &dataset.samples {
        sum += psnr(&s.noisy, &s.clean, 255.0)?;
    }
    Ok(sum / dataset.len() as f64)
}

/// Denoising + fine segmentation over noisy input (two pathways).
pub fn denoise_segment_config(filters: &[usize], connectivity: Connectivity, n_classes: usize) -> UmcConfig {
    UmcConfig::umc(
        3,
        filters,
        connectivity,
        vec![
            PathwaySpec::new("denoise", 3, Task::Regression),
            PathwaySpec::new("seg", n_classes, Task::Classification),
        ],
    )
}

pub fn denoise_segment_bindings() -> TaskBindings {
    TaskBindings {
        input: InputSource::Noisy,
        targets: [("denoise".to_string(), Target::Clean), ("seg".to_string(), Target::Fine)].into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub miou: f64,
    pub psnr_db: f64,
    pub params: usize,
}

/// σ × connectivity results; `cells[i][j]` is `sigmas[i]`, `connectivities[j]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOneTable {
    pub sigmas: Vec<f64>,
    pub connectivities: Vec<Connectivity>,
    pub cells: Vec<Vec<GridCell>>,
}

impl ExperimentOneTable {
    /// Rows per σ, cells `mIoU (PSNRdB)` with mIoU in percent, then a `P#` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sigma");
        for c in &self.connectivities {
            write!(out, ",{}", c.as_str()).unwrap();
        }
        out.push('\n');
        for (s, row) in self.sigmas.iter().zip(&self.cells) {
            write!(out, "{s}").unwrap();
            for cell in row {
                write!(out, ",{:.2} ({:.2}dB)", 100.0 * cell.miou, cell.psnr_db).unwrap();
            }
            out.push('\n');
        }
        if let Some(row) = self.cells.first() {
            out.push_str("P#");
            for cell in row {
                write!(out, ",{}", crate::model::format_millions(cell.params)).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Train and evaluate the 2-pathway UMC over a σ × connectivity grid.
/// Every connectivity at a given σ sees the same training and evaluation
/// data (same seeds).
pub fn experiment_one(
    sigmas: &[f64],
    connectivities: &[Connectivity],
    train_data: &DataConfig,
    eval_data: &DataConfig,
    filters: &[usize],
    tc: &TrainConfig,
) -> Result<ExperimentOneTable> {
    let bindings = denoise_segment_bindings();
    let mut cells = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        let train_set = gen_synthetic(&DataConfig {
            sigma,
            ..train_data.clone()
        })?;
        let eval_set = gen_synthetic(&DataConfig {
            sigma,
            ..eval_data.clone()
        })?;
        let mut row = Vec::with_capacity(connectivities.len());
        for &c in connectivities {
            let config = denoise_segment_config(filters, c, train_data.n_classes);
            let mut out = train(&config, tc, &bindings, &train_set)?;
            let reports = evaluate(&mut out.model, &out.normalization, &bindings, &eval_set)?;
            let get = |name: &str| reports.iter().find(|(n, _)| n == name).map(|(_, r)| r.clone()).unwrap();
            row.push(GridCell {
                miou: get("seg").miou.unwrap_or(f64::NAN),
                psnr_db: get("denoise").psnr_db.unwrap_or(f64::NAN),
                params: count_params(&config)?,
            });
        }
        cells.push(row);
    }
    Ok(ExperimentOneTable {
        sigmas: sigmas.to_vec(),
        connectivities: connectivities.to_vec(),
        cells,
    })
}

/// Output groups, coarse-to-fine.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    FCls,
    CClsFCls,
    CCatFCls,
    CCatFCatFCls,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::FCls, Group::CClsFCls, Group::CCatFCls, Group::CCatFCatFCls];

    pub fn pathways(&self) -> &'static [&'static str] {
        match self {
            Group::FCls => &["f_cls"],
            Group::CClsFCls => &["c_cls", "f_cls"],
            Group::CCatFCls => &["c_cat", "f_cls"],
            Group::CCatFCatFCls => &["c_cat", "f_cat", "f_cls"],
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Group::FCls => "f_cls",
            Group::CClsFCls => "c_cls,f_cls",
            Group::CCatFCls => "c_cat,f_cls",
            Group::CCatFCatFCls => "c_cat,f_cat,f_cls",
        }
    }

    /// Model and bindings for this group. A single pathway is the plain
    /// U-Net (transposed upsampling) whatever `connectivity` says.
    pub fn setup(&self, filters: &[usize], connectivity: Connectivity, data: &DataConfig) -> (UmcConfig, TaskBindings) {
        let mut targets = BTreeMap::new();
        let specs: Vec<PathwaySpec> = self
            .pathways()
            .iter()
            .map(|&name| {
                let target = match name {
                    "c_cls" => Target::Coarse,
                    "c_cat" => Target::CoarseCategory,
                    "f_cat" => Target::Category,
                    _ => Target::Fine,
                };
                targets.insert(name.to_string(), target);
                PathwaySpec::new(name, target.classes(data).unwrap(), Task::Classification)
            })
            .collect();
        let config = if specs.len() == 1 {
            UmcConfig::unet(3, filters, specs.into_iter().next().unwrap())
        } else {
            UmcConfig::umc(3, filters, connectivity, specs)
        };
        (
            config,
            TaskBindings {
                input: InputSource::Clean,
                targets,
            },
        )
    }
}

impl std::str::FromStr for Group {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        Group::ALL
            .into_iter()
            .find(|g| g.as_str() == norm)
            .ok_or_else(|| Error::invalid(format!("unknown group '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTwoRow {
    pub group: Group,
    pub approach: String,
    pub pixel_accuracy: f64,
    pub miou: f64,
    pub params: usize,
}

impl ExperimentTwoRow {
    pub const CSV_HEADER: &'static str = "group,approach,f_cls_acc,f_cls_miou,params";

    pub fn csv_row(&self) -> String {
        format!(
            "\"{}\",{},{:.2},{:.2},{}",
            self.group.as_str(),
            self.approach,
            100.0 * self.pixel_accuracy,
            100.0 * self.miou,
            crate::model::format_millions(self.params)
        )
    }
}

/// Train one output group on clean images and score its fine-class pathway.
pub fn experiment_two(
    group: Group,
    connectivity: Connectivity,
    train_set: &Dataset,
    eval_set: &Dataset,
    filters: &[usize],
    tc: &TrainConfig,
) -> Result<ExperimentTwoRow> {
    let (config, bindings) = group.setup(filters, connectivity, &train_set.config);
    let mut out = train(&config, tc, &bindings, train_set)?;
    let reports = evaluate(&mut out.model, &out.normalization, &bindings, eval_set)?;
    let fine = &reports.iter().find(|(n, _)| n == "f_cls").expect("f_cls pathway").1;
    Ok(ExperimentTwoRow {
        group,
        approach: if config.pathways.len() == 1 {
            "UNet".into()
        } else {
            format!("UMC {}", connectivity.as_str())
        },
        pixel_accuracy: fine.pixel_accuracy.unwrap_or(f64::NAN),
        miou: fine.miou.unwrap_or(f64::NAN),
        params: count_params(&config)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{UpsampleMode, TINY_FILTERS};

    fn tiny_data(n: usize) -> Dataset {
        gen_synthetic(&DataConfig::new(n, 16, 4, 2, 3, 20.0)).unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            max_steps: Some(3),
            seed: 9,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let ds = tiny_data(3);
        let cfg = denoise_segment_config(&TINY_FILTERS, Connectivity::Dense, 4);
        let tc = TrainConfig { lr: 0.0, ..quick() };
        let out = train(&cfg, &tc, &denoise_segment_bindings(), &ds).unwrap();
        let init = build::<f32>(&cfg, tc.seed).unwrap();
        for ((_, a), (_, b)) in out.model.graph.params().zip(init.graph.params()) {
            assert_eq!(a, b);
        }
        assert_eq!(out.log.steps.len(), 3);
    }

    #[test]
    fn deterministic_runs() {
        let ds = tiny_data(3);
        let cfg = denoise_segment_config(&TINY_FILTERS, Connectivity::Causal, 4);
        let a = train(&cfg, &quick(), &denoise_segment_bindings(), &ds).unwrap();
        let b = train(&cfg, &quick(), &denoise_segment_bindings(), &ds).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.checkpoint().to_bytes().unwrap(), b.checkpoint().to_bytes().unwrap());
        let csv = a.log.to_csv();
        assert!(csv.starts_with("step,loss_total,loss_denoise,loss_seg\n1,"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn step_count() {
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 2,
            max_steps: None,
            ..TrainConfig::default()
        };
        assert_eq!(tc.total_steps(5), 9);
        assert_eq!(TrainConfig { max_steps: Some(4), ..tc.clone() }.total_steps(5), 4);
        assert_eq!(TrainConfig { max_steps: Some(40), ..tc }.total_steps(5), 40);
    }

    #[test]
    fn binding_checks() {
        let ds = tiny_data(1);
        let cfg = denoise_segment_config(&TINY_FILTERS, Connectivity::Dense, 7);
        let b = denoise_segment_bindings();
        assert!(matches!(b.check(&cfg, &ds.config), Err(Error::ConfigMismatch(_))));
        let cfg = denoise_segment_config(&TINY_FILTERS, Connectivity::Dense, 4);
        let mut missing = b.clone();
        missing.targets.remove("seg");
        assert!(missing.check(&cfg, &ds.config).is_err());
        let mut wrong = b.clone();
        wrong.targets.insert("denoise".into(), Target::Fine);
        assert!(wrong.check(&cfg, &ds.config).is_err());
        assert!(train(&cfg, &quick(), &b, &tiny_data(0)).is_err());
    }

    #[test]
    fn oracles() {
        let ds = tiny_data(4);
        let cfg = denoise_segment_config(&TINY_FILTERS, Connectivity::SharedEncoder, 4);
        let b = denoise_segment_bindings();
        let reports = evaluate_with(&cfg, &b, &ds, |s| {
            let mut onehot = vec![0f32; 4 * s.fine.data.len()];
            let hw = s.fine.data.len();
            for (i, &l) in s.fine.data.iter().enumerate() {
                onehot[l as usize * hw + i] = 1.0;
            }
            Ok(vec![s.noisy.clone(), Tensor::new(vec![4, s.height(), s.width()], onehot)?])
        })
        .unwrap();
        assert_eq!(reports[1].1.miou, Some(1.0));
        assert_eq!(reports[1].1.pixel_accuracy, Some(1.0));
        assert!((reports[0].1.psnr_db.unwrap() - input_psnr(&ds).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn groups() {
        let data = DataConfig::new(1, 32, 30, 8, 0, 0.0);
        let (c, b) = Group::FCls.setup(&TINY_FILTERS, Connectivity::Dense, &data);
        assert_eq!(c.pathways.len(), 1);
        assert_eq!(c.upsample_mode, UpsampleMode::Transposed2x2);
        assert_eq!(b.input, InputSource::Clean);
        let (c, _) = Group::CCatFCatFCls.setup(&TINY_FILTERS, Connectivity::Causal, &data);
        let names: Vec<_> = c.pathways.iter().map(|p| (p.name.as_str(), p.out_channels)).collect();
        assert_eq!(names, vec![("c_cat", 8), ("f_cat", 8), ("f_cls", 30)]);
        assert_eq!("c_cat, f_cls".parse::<Group>().unwrap(), Group::CCatFCls);
    }
}
