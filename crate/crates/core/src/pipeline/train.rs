//! Joint optimization of the Gaussian scene and the per-view enhancement.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::{Modules, RunConfig};
use crate::colorspace::ViewColorMatrix;
use crate::error::{Error, Result};
use crate::generators::{curve_bias_forward, generator_backward, prior_params_forward, GeneratorWeights, Head};
use crate::losses::{l_curve, l_reg, l_spa, l_total, l_tv, LossReport};
use crate::optim::{adam_step, AdamState, Constraint, GroupKind, ParamGroup, Update};
use crate::refine::{refine_step, GradAccumulator};
use crate::render::{project_backward, render_backward_2d, render_cloud, CloudGrad, RenderConfig};
use crate::scene::{new_cloud_random, Aabb, GaussianCloud, ViewRecord};
use crate::tonecurve::{
    curve_table, enhance_backward, enhance_forward, he_cdf_target, identity_ramp, prior_curve_backward,
    prior_curve_with, ComposedCurve, GlobalCurve, PriorParams,
};

pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const CURVE_DIR: &str = "curves";

/// Everything that is learned.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cloud: GaussianCloud,
    pub global_curve: GlobalCurve,
    pub matrices: Vec<ViewColorMatrix>,
    pub curve_gen: GeneratorWeights,
    pub param_gen: GeneratorWeights,
}

impl Model {
    pub fn init(cfg: &RunConfig, views: usize, bounds: Aabb) -> Result<Self> {
        Ok(Self {
            cloud: new_cloud_random(cfg.init_gaussians, bounds, cfg.seed)?,
            global_curve: GlobalCurve::identity(),
            matrices: vec![ViewColorMatrix::identity(); views],
            curve_gen: GeneratorWeights::init(Head::CurveBias, cfg.seed ^ 0xB1A5),
            param_gen: GeneratorWeights::init(Head::PriorParams, cfg.seed ^ 0x9A4A),
        })
    }

    /// Composed curve of one view under the given module switches.
    pub fn view_curve(&self, view: &ViewRecord, modules: Modules) -> Result<ComposedCurve> {
        let bias = if modules.curve_bias {
            curve_bias_forward(&view.input_image, &view.camera, &self.curve_gen)?.0
        } else {
            vec![0.0; self.global_curve.values.len()]
        };
        Ok(ComposedCurve::compose(&self.global_curve, &bias))
    }
}

/// Resumable training state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed iterations.
    pub iteration: u64,
    pub render: RenderConfig,
    pub model: Model,
    pub adam: AdamState,
    pub acc: GradAccumulator,
}

/// Gradient of one view's objective w.r.t. the model.
#[derive(Clone, Debug)]
pub struct ModelGrad {
    pub cloud: CloudGrad,
    pub global_curve: Vec<f64>,
    pub matrix: [f64; 9],
    pub curve_gen: GeneratorWeights,
    pub param_gen: GeneratorWeights,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: LossReport,
    pub grad: ModelGrad,
    /// Screen-space mean-gradient norm per Gaussian (zero when not visible).
    pub screen_norms: Vec<f64>,
}

/// Forward and backward pass of the full objective on view `k`.
///
/// `iteration` is 1-based and only drives the curve-loss weight schedule.
pub fn evaluate(
    model: &Model,
    k: usize,
    view: &ViewRecord,
    cdf: &[f64],
    iteration: u64,
    cfg: &RunConfig,
) -> Result<Evaluation> {
    let modules = cfg.variant.modules();
    let input = &view.input_image;
    let lut = model.global_curve.values.len();
    let matrix = model
        .matrices
        .get(k)
        .ok_or_else(|| Error::Contract(format!("no color matrix for view {k}")))?;

    let bias_pass = if modules.curve_bias {
        Some(curve_bias_forward(input, &view.camera, &model.curve_gen)?)
    } else {
        None
    };
    let bias = bias_pass.as_ref().map_or_else(|| vec![0.0; lut], |(b, _)| b.clone());
    let curve = ComposedCurve::compose(&model.global_curve, &bias);
    let (target_out, etape) = enhance_forward(input, matrix, &curve, cfg.lut_domain)?;

    let out = render_cloud(&model.cloud, &view.camera, &cfg.render)?;
    let reg = l_reg(&out.image_in, input, &out.image_out, &target_out, &cfg.loss)?;
    let mut d_pred_out = reg.d_pred_out;
    let mut spa = 0.0;
    if modules.spatial_loss {
        let (v, d) = l_spa(&out.image_out, input, &cfg.loss)?;
        spa = v;
        add_into(&mut d_pred_out.data, &d.data, 1.0);
    }

    let curve_trained = modules.global_curve || modules.curve_bias;
    let mut d_curve = vec![0.0; lut];
    let (mut lc, mut ltv) = (0.0, 0.0);
    let mut prior_pass = None;
    if modules.curve_loss {
        let (prior, tape) = if modules.prior_generator {
            let (p, t) = prior_params_forward(input, &view.camera, &model.param_gen)?;
            (p, Some(t))
        } else {
            (PriorParams::neutral(), None)
        };
        let prior_curve = prior_curve_with(&prior, cfg.prior_combine);
        let c = l_curve(&curve.values, cdf, &prior_curve, iteration, &cfg.loss)?;
        lc = c.value;
        add_into(&mut d_curve, &c.d_curve, cfg.loss.curve_weight);
        prior_pass = Some((prior, tape, c.d_prior));
    }
    if curve_trained {
        let (v, d) = l_tv(&curve.values);
        ltv = v;
        add_into(&mut d_curve, &d, 1.0);
    }
    let mut report = l_total(reg.value, spa, lc, ltv, &cfg.loss);

    // Backward.
    let grads2d = render_backward_2d(&out, &reg.d_pred_in, &d_pred_out)?;
    let screen_norms = screen_norms(model.cloud.count(), &out.projected, &grads2d);
    let mut cloud_grad = project_backward(&model.cloud, &view.camera, &out.projected, &grads2d);
    if !modules.color_adjust {
        cloud_grad.color_gains.iter_mut().for_each(|g| *g = 0.0);
        cloud_grad.color_offsets.iter_mut().for_each(|g| *g = 0.0);
    }

    let mut d_matrix = [0.0; 9];
    if curve_trained || modules.color_matrix {
        let eg = enhance_backward(&etape, &reg.d_target_out)?;
        add_into(&mut d_curve, &eg.d_curve, 1.0);
        if modules.color_matrix {
            d_matrix = eg.d_matrix;
        }
    }
    let global_grad = if modules.global_curve { d_curve.clone() } else { vec![0.0; lut] };
    let curve_gen_grad = match &bias_pass {
        Some((_, tape)) => generator_backward(&model.curve_gen, Some(tape), &d_curve)?,
        None => model.curve_gen.zeros_like(),
    };
    let param_gen_grad = match &prior_pass {
        Some((prior, Some(tape), d_prior)) => {
            let scaled: Vec<f64> = d_prior.iter().map(|v| v * cfg.loss.curve_weight).collect();
            let d = prior_curve_backward(prior, cfg.prior_combine, &scaled);
            generator_backward(&model.param_gen, Some(tape), &d)?
        }
        _ => model.param_gen.zeros_like(),
    };

    let grad = ModelGrad {
        cloud: cloud_grad,
        global_curve: global_grad,
        matrix: d_matrix,
        curve_gen: curve_gen_grad,
        param_gen: param_gen_grad,
    };
    report.grad_norms = grad_norms(&grad);
    Ok(Evaluation {
        report,
        grad,
        screen_norms,
    })
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn screen_norms(n: usize, projected: &[crate::render::ProjectedGaussian], g: &[crate::render::ProjectedGrad]) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (p, g) in projected.iter().zip(g) {
        out[p.source_index] = g.mean2d[0].hypot(g.mean2d[1]);
    }
    out
}

fn generator_norm(w: &GeneratorWeights) -> f64 {
    w.tensors().iter().map(|(_, t)| t.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

/// Gradient norm per parameter group, in `GROUP_NAMES` order.
pub fn grad_norms(g: &ModelGrad) -> Vec<(String, f64)> {
    let c = &g.cloud;
    let values = [
        norm(&c.positions),
        norm(&c.log_scales),
        norm(&c.rotations),
        norm(&c.opacity_logits),
        norm(&c.color_logits),
        norm(&c.color_gains),
        norm(&c.color_offsets),
        norm(&g.matrix),
        norm(&g.global_curve),
        generator_norm(&g.curve_gen),
        generator_norm(&g.param_gen),
    ];
    GROUP_NAMES.iter().zip(values).map(|(n, v)| (n.to_string(), v)).collect()
}

pub const GROUP_NAMES: [&str; 11] = [
    "positions",
    "log_scales",
    "rotations",
    "opacity",
    "colors",
    "color_gains",
    "color_offsets",
    "view_matrix",
    "global_curve",
    "curve_generator",
    "prior_generator",
];

/// Optimizer groups for a run, in `GROUP_NAMES` order.
pub fn param_groups(cfg: &RunConfig, extent: f64) -> Vec<ParamGroup> {
    let lr = &cfg.lr;
    vec![
        ParamGroup::new("positions", GroupKind::GaussianGeometry, lr.positions * extent),
        ParamGroup::new("log_scales", GroupKind::GaussianGeometry, lr.scales),
        ParamGroup::new("rotations", GroupKind::GaussianGeometry, lr.rotations).with_constraint(Constraint::UnitQuaternions),
        ParamGroup::new("opacity", GroupKind::GaussianGeometry, lr.opacity),
        ParamGroup::new("colors", GroupKind::GaussianColor, lr.colors),
        ParamGroup::new("color_gains", GroupKind::ColorAdjustAb, lr.color_adjust),
        ParamGroup::new("color_offsets", GroupKind::ColorAdjustAb, lr.color_adjust),
        ParamGroup::new("view_matrix", GroupKind::ViewMatrices, lr.matrices)
            .with_decay(lr.matrices_decay, Some(ViewColorMatrix::identity().m.to_vec()))
            .with_constraint(Constraint::InvertibleMatrices),
        ParamGroup::new("global_curve", GroupKind::GlobalCurve, lr.global_curve)
            .with_decay(lr.global_curve_decay, Some(identity_ramp())),
        ParamGroup::new("curve_generator", GroupKind::GeneratorWeights, lr.generators).with_decay(lr.generators_decay, None),
        ParamGroup::new("prior_generator", GroupKind::GeneratorWeights, lr.generators).with_decay(lr.generators_decay, None),
    ]
}

/// Cloud row strides, matching `GROUP_NAMES[..7]`.
const CLOUD_STRIDES: [usize; 7] = [3, 3, 4, 1, 3, 3, 3];

fn generator_updates<'a>(
    group: &'a ParamGroup,
    w: &'a mut GeneratorWeights,
    g: &'a GeneratorWeights,
    out: &mut Vec<Update<'a>>,
) {
    let names: Vec<&str> = g.tensors().iter().map(|(n, _)| *n).collect();
    for ((t, (_, gt)), name) in w.tensors_mut().into_iter().zip(g.tensors()).zip(names) {
        out.push(Update::new(group, t, gt).with_slot(format!("{}/{}", group.name, name)));
    }
}

/// Applies one Adam step for view `k`, touching only the trainable modules.
pub fn apply_gradients(
    model: &mut Model,
    adam: &mut AdamState,
    groups: &[ParamGroup],
    grad: &ModelGrad,
    k: usize,
    modules: Modules,
) -> Result<()> {
    let Model {
        cloud,
        global_curve,
        matrices,
        curve_gen,
        param_gen,
    } = model;
    let gc = &grad.cloud;
    let mut updates = vec![
        Update::new(&groups[0], &mut cloud.positions, &gc.positions),
        Update::new(&groups[1], &mut cloud.log_scales, &gc.log_scales),
        Update::new(&groups[2], &mut cloud.rotations, &gc.rotations),
        Update::new(&groups[3], &mut cloud.opacity_logits, &gc.opacity_logits),
        Update::new(&groups[4], &mut cloud.color_logits, &gc.color_logits),
    ];
    if modules.color_adjust {
        updates.push(Update::new(&groups[5], &mut cloud.color_gains, &gc.color_gains));
        updates.push(Update::new(&groups[6], &mut cloud.color_offsets, &gc.color_offsets));
    }
    if modules.color_matrix {
        updates.push(Update::new(&groups[7], &mut matrices[k].m, &grad.matrix).with_slot(format!("view_matrix/{k}")));
    }
    if modules.global_curve {
        updates.push(Update::new(&groups[8], &mut global_curve.values, &grad.global_curve));
    }
    if modules.curve_bias {
        generator_updates(&groups[9], curve_gen, &grad.curve_gen, &mut updates);
    }
    if modules.curve_loss && modules.prior_generator {
        generator_updates(&groups[10], param_gen, &grad.param_gen, &mut updates);
    }
    let outcomes = adam_step(adam, &mut updates)?;
    if outcomes.iter().any(|o| !o.rolled_back.is_empty()) {
        log::warn!("view {k}: color matrix step rolled back by the determinant guard");
    }
    Ok(())
}

/// Per-iteration log line.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub iteration: u64,
    pub view: usize,
    pub report: LossReport,
    pub pruned: usize,
    pub cloned: usize,
    pub count: usize,
}

pub fn log_header() -> String {
    let mut s = String::from("iteration,view,l_reg,l_spa,l_curve,l_tv,l_total");
    for n in GROUP_NAMES {
        let _ = write!(s, ",grad_{n}");
    }
    s.push_str(",pruned,cloned,count");
    s
}

impl StepRecord {
    pub fn csv_line(&self) -> String {
        let r = &self.report;
        let mut s = format!(
            "{},{},{:e},{:e},{:e},{:e},{:e}",
            self.iteration, self.view, r.l_reg, r.l_spa, r.l_curve, r.l_tv, r.l_total
        );
        for (_, g) in &r.grad_norms {
            let _ = write!(s, ",{g:e}");
        }
        let _ = write!(s, ",{},{},{}", self.pruned, self.cloned, self.count);
        s
    }
}

/// Owns the state of a run and advances it one iteration at a time.
pub struct Trainer {
    pub cfg: RunConfig,
    pub state: TrainState,
    pub views: Vec<ViewRecord>,
    cdfs: Vec<Vec<f64>>,
    groups: Vec<ParamGroup>,
}

impl Trainer {
    pub fn new(views: Vec<ViewRecord>, bounds: Aabb, cfg: RunConfig) -> Result<Self> {
        let model = Model::init(&cfg, views.len(), bounds)?;
        let n = model.cloud.count();
        let state = TrainState {
            iteration: 0,
            render: cfg.render.clone(),
            model,
            adam: AdamState::new(),
            acc: GradAccumulator::new(n),
        };
        Self::from_state(views, bounds, cfg, state)
    }

    pub fn from_state(views: Vec<ViewRecord>, bounds: Aabb, cfg: RunConfig, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        if views.len() < 2 {
            return Err(Error::InvalidArgument("training needs at least two views".into()));
        }
        if state.model.matrices.len() != views.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} view matrices, dataset has {} views",
                state.model.matrices.len(),
                views.len()
            )));
        }
        let cdfs = views.iter().map(|v| he_cdf_target(&v.input_image)).collect::<Result<Vec<_>>>()?;
        let groups = param_groups(&cfg, bounds.diagonal());
        for g in &groups {
            g.validate()?;
        }
        Ok(Self {
            cfg,
            state,
            views,
            cdfs,
            groups,
        })
    }

    pub fn cdf(&self, k: usize) -> &[f64] {
        &self.cdfs[k]
    }

    /// Runs one iteration. Nothing is modified when the loss or a gradient is not finite.
    pub fn step(&mut self) -> Result<StepRecord> {
        let it = self.state.iteration + 1;
        let k = ((it - 1) % self.views.len() as u64) as usize;
        let modules = self.cfg.variant.modules();
        let ev = evaluate(&self.state.model, k, &self.views[k], &self.cdfs[k], it, &self.cfg)?;
        if !ev.report.is_finite() {
            return Err(Error::NonFinite(format!("loss at iteration {it}")));
        }
        apply_gradients(&mut self.state.model, &mut self.state.adam, &self.groups, &ev.grad, k, modules)?;
        self.state.acc.add(&ev.screen_norms);
        let (mut pruned, mut cloned) = (0, 0);
        if self.cfg.refine.due(it) {
            let out = refine_step(&mut self.state.model.cloud, &mut self.state.acc, &self.cfg.refine, it, self.cfg.seed)?;
            for (name, stride) in GROUP_NAMES.iter().zip(CLOUD_STRIDES) {
                self.state.adam.remap_rows(name, stride, &out.rows);
            }
            pruned = out.pruned;
            cloned = out.cloned;
        }
        self.state.iteration = it;
        Ok(StepRecord {
            iteration: it,
            view: k,
            report: ev.report,
            pruned,
            cloned,
            count: self.state.model.cloud.count(),
        })
    }

    /// Composed curve for every view.
    pub fn curves(&self) -> Result<Vec<ComposedCurve>> {
        let modules = self.cfg.variant.modules();
        self.views.iter().map(|v| self.state.model.view_curve(v, modules)).collect()
    }

    /// Writes the global curve and each view's composed curve as text tables.
    pub fn write_curves(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("global.txt");
        std::fs::write(&p, curve_table(&self.state.model.global_curve.values)).map_err(|e| Error::io(&p, e))?;
        for (k, c) in self.curves()?.iter().enumerate() {
            let p = dir.join(format!("view_{k:03}.txt"));
            std::fs::write(&p, curve_table(&c.values)).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Outcome of a training run.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub records: Vec<StepRecord>,
    pub checkpoint: PathBuf,
    pub state: TrainState,
}

fn checkpoint_path(out: &Path, it: u64) -> PathBuf {
    out.join(CHECKPOINT_DIR).join(format!("iter_{it:06}.bin"))
}

fn save_all(out: &Path, state: &TrainState) -> Result<()> {
    save_checkpoint(&checkpoint_path(out, state.iteration), state)?;
    save_checkpoint(&out.join(CHECKPOINT_FILE), state)
}

/// Keeps log lines up to and including `iteration`.
fn truncate_log(path: &Path, iteration: u64) -> Result<String> {
    let text = std::fs::read_to_string(path).unwrap_or_default();
    let mut out = log_header();
    out.push('\n');
    for line in text.lines().skip(1) {
        let it: u64 = line.split(',').next().and_then(|s| s.parse().ok()).unwrap_or(u64::MAX);
        if it <= iteration {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Trains on `views`, writing the log, checkpoints and curve tables under `out`.
///
/// With `resume`, training continues from that checkpoint and the log is cut
/// back to its iteration first. On a non-finite loss the run stops with an
/// error and the last written checkpoint is left in place.
pub fn train(
    views: Vec<ViewRecord>,
    bounds: Aabb,
    cfg: &RunConfig,
    out: &Path,
    resume: Option<&Path>,
) -> Result<TrainSummary> {
    std::fs::create_dir_all(out.join(CHECKPOINT_DIR)).map_err(|e| Error::io(out, e))?;
    let log_path = out.join(LOG_FILE);
    let (mut trainer, mut log) = match resume {
        Some(p) => {
            let state = load_checkpoint(p)?;
            let log = truncate_log(&log_path, state.iteration)?;
            (Trainer::from_state(views, bounds, cfg.clone(), state)?, log)
        }
        None => (Trainer::new(views, bounds, cfg.clone())?, log_header() + "\n"),
    };
    let write_log = |log: &str| std::fs::write(&log_path, log).map_err(|e| Error::io(&log_path, e));
    write_log(&log)?;
    let mut records = Vec::new();
    while trainer.state.iteration < cfg.iterations {
        let rec = match trainer.step() {
            Ok(r) => r,
            Err(e) => {
                write_log(&log)?;
                return Err(e);
            }
        };
        log.push_str(&rec.csv_line());
        log.push('\n');
        if rec.iteration % 100 == 0 {
            log::info!(
                "iteration {} view {} l_total {:.5} count {}",
                rec.iteration,
                rec.view,
                rec.report.l_total,
                rec.count
            );
        }
        records.push(rec);
        let it = trainer.state.iteration;
        if it % cfg.checkpoint_interval == 0 || it == cfg.iterations {
            save_all(out, &trainer.state)?;
            write_log(&log)?;
        }
    }
    trainer.write_curves(&out.join(CURVE_DIR))?;
    write_log(&log)?;
    Ok(TrainSummary {
        records,
        checkpoint: out.join(CHECKPOINT_FILE),
        state: trainer.state,
    })
}

/// Flattened model tensors for gradient auditing, with the matching gradient.
pub fn audit_tensors(model: &Model, grads: &[ModelGrad]) -> (Vec<String>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut names = Vec::new();
    let mut params = Vec::new();
    let mut analytic = Vec::new();
    let sum = |f: &dyn Fn(&ModelGrad) -> Vec<f64>| -> Vec<f64> {
        let mut acc = f(&grads[0]);
        for g in &grads[1..] {
            add_into(&mut acc, &f(g), 1.0);
        }
        acc
    };
    let c = &model.cloud;
    let cloud_fields: [(&str, &Vec<f64>, fn(&ModelGrad) -> Vec<f64>); 7] = [
        ("positions", &c.positions, |g| g.cloud.positions.clone()),
        ("log_scales", &c.log_scales, |g| g.cloud.log_scales.clone()),
        ("rotations", &c.rotations, |g| g.cloud.rotations.clone()),
        ("opacity", &c.opacity_logits, |g| g.cloud.opacity_logits.clone()),
        ("colors", &c.color_logits, |g| g.cloud.color_logits.clone()),
        ("color_gains", &c.color_gains, |g| g.cloud.color_gains.clone()),
        ("color_offsets", &c.color_offsets, |g| g.cloud.color_offsets.clone()),
    ];
    for (n, p, f) in cloud_fields {
        names.push(n.to_string());
        params.push(p.clone());
        analytic.push(sum(&f));
    }
    for (k, m) in model.matrices.iter().enumerate() {
        names.push(format!("view_matrix/{k}"));
        params.push(m.m.to_vec());
        analytic.push(grads.get(k).map_or(vec![0.0; 9], |g| g.matrix.to_vec()));
    }
    names.push("global_curve".into());
    params.push(model.global_curve.values.clone());
    analytic.push(sum(&|g: &ModelGrad| g.global_curve.clone()));
    for (prefix, w, pick) in [
        ("curve_generator", &model.curve_gen, (|g: &ModelGrad| &g.curve_gen) as fn(&ModelGrad) -> &GeneratorWeights),
        ("prior_generator", &model.param_gen, |g: &ModelGrad| &g.param_gen),
    ] {
        for (i, (n, t)) in w.tensors().into_iter().enumerate() {
            names.push(format!("{prefix}/{n}"));
            params.push(t.clone());
            analytic.push(sum(&|g: &ModelGrad| pick(g).tensors()[i].1.clone()));
        }
    }
    (names, params, analytic)
}

/// Inverse of the parameter half of `audit_tensors`.
pub fn model_from_tensors(template: &Model, params: &[Vec<f64>]) -> Model {
    let mut m = template.clone();
    let mut it = params.iter();
    let c = &mut m.cloud;
    for field in [
        &mut c.positions,
        &mut c.log_scales,
        &mut c.rotations,
        &mut c.opacity_logits,
        &mut c.color_logits,
        &mut c.color_gains,
        &mut c.color_offsets,
    ] {
        field.clone_from(it.next().unwrap());
    }
    for mat in &mut m.matrices {
        mat.m.copy_from_slice(it.next().unwrap());
    }
    m.global_curve.values.clone_from(it.next().unwrap());
    for t in m.curve_gen.tensors_mut() {
        t.clone_from(it.next().unwrap());
    }
    for t in m.param_gen.tensors_mut() {
        t.clone_from(it.next().unwrap());
    }
    m
}

/// Total objective summed over `views` (view `k` uses matrix `k`).
pub fn total_loss(model: &Model, views: &[ViewRecord], cdfs: &[Vec<f64>], iteration: u64, cfg: &RunConfig) -> Result<(f64, Vec<ModelGrad>)> {
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(views.len());
    for (k, v) in views.iter().enumerate() {
        let ev = evaluate(model, k, v, &cdfs[k], iteration, cfg)?;
        total += ev.report.l_total;
        grads.push(ev.grad);
    }
    Ok((total, grads))
}

/// Mean absolute deviation between each view's curve and its target.
pub fn curve_target_deviation(curves: &[ComposedCurve], cdfs: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (c, t) in curves.iter().zip(cdfs) {
        for (a, b) in c.values.iter().zip(t) {
            sum += (a - b).abs();
            n += 1;
        }
    }
    sum / n.max(1) as f64
}

