//! Source pretraining and the source-free adaptation loop.
//!
//! [`adapt`] receives a [`TargetTask`], which holds the labeled target rows
//! and the *features* of the unlabeled rows, nothing else. Ground truth for
//! the unlabeled and test rows lives in [`Diagnostics`], which only exposes
//! scoring methods, so no loss can depend on it.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::AdaptConfig;
use crate::error::{Error, Result};
use crate::harness::dataset::{Dataset, Split};
use crate::linalg::{row_softmax, Matrix};
use crate::losses::{
    cross_entropy, diversity_loss, entropy_loss, hard_pseudo_label, one_hot, pseudo_ce_loss,
    smooth_labels, total_reg, vat_loss, LossBundle, LossComponents, Term, VatConfig,
};
use crate::model::{
    backward, bottleneck_features, forward, init_model, predict_proba, Dense, DenseGrad, Dropout,
    Gradients, Group, ModelParams,
};
use crate::propagation::{build_graph, propagate, write_debug_dump, GraphLayout};
use crate::uncertainty::{estimate_uncertainty, select_low_uncertainty, AugmentedSeeds};

/// Learning rate per parameter group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupRates {
    pub encoder: f64,
    pub bottleneck: f64,
    pub classifier: f64,
}

impl GroupRates {
    fn of(&self, g: Group) -> f64 {
        match g {
            Group::Encoder => self.encoder,
            Group::Bottleneck => self.bottleneck,
            Group::Classifier => self.classifier,
        }
    }
}

/// SGD with heavy-ball momentum: `v ← μv + g`, `θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<Option<DenseGrad>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Applies one update. Groups without a gradient (frozen) are untouched.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &Gradients,
        rates: GroupRates,
    ) -> Result<()> {
        let flat: Vec<(Group, Option<&DenseGrad>)> = {
            let mut v: Vec<(Group, Option<&DenseGrad>)> = match &grads.encoder {
                Some(e) => e.iter().map(|g| (Group::Encoder, Some(g))).collect(),
                None => params
                    .encoder()
                    .iter()
                    .map(|_| (Group::Encoder, None))
                    .collect(),
            };
            v.push((Group::Bottleneck, grads.bottleneck.as_ref()));
            v.push((Group::Classifier, grads.classifier.as_ref()));
            v
        };
        if flat.len() != params.encoder().len() + 2 {
            return Err(Error::Contract(
                "gradient depth does not match model".into(),
            ));
        }
        if self.velocity.len() != flat.len() {
            self.velocity = vec![None; flat.len()];
        }
        let mu = self.momentum;
        for (((group, layer), (ggroup, grad)), vel) in
            params.layers_mut().zip(flat).zip(self.velocity.iter_mut())
        {
            debug_assert_eq!(group, ggroup);
            let Some(grad) = grad else { continue };
            let v = vel.get_or_insert_with(|| DenseGrad {
                weight: Matrix::zeros(grad.weight.rows(), grad.weight.cols()),
                bias: vec![0.0; grad.bias.len()],
            });
            let lr = rates.of(group);
            update(layer, v, grad, mu, lr)?;
        }
        Ok(())
    }
}

fn update(layer: &mut Dense, v: &mut DenseGrad, g: &DenseGrad, mu: f64, lr: f64) -> Result<()> {
    layer.weight.check_same_shape(&g.weight, "sgd step")?;
    for ((w, vel), gv) in layer
        .weight
        .as_mut_slice()
        .iter_mut()
        .zip(v.weight.as_mut_slice())
        .zip(g.weight.as_slice())
    {
        *vel = mu * *vel + gv;
        *w -= lr * *vel;
    }
    for ((b, vel), gv) in layer.bias.iter_mut().zip(v.bias.iter_mut()).zip(&g.bias) {
        *vel = mu * *vel + gv;
        *b -= lr * *vel;
    }
    Ok(())
}

/// Endless stream of shuffled index batches over `0..n`.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn next_batch(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size && !self.order.is_empty() {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Fraction of rows whose dropout-free argmax equals `y`.
pub fn accuracy(params: &ModelParams, x: &Matrix, y: &[usize]) -> Result<f64> {
    if x.rows() == 0 {
        return Err(Error::Param("accuracy of an empty set".into()));
    }
    if y.len() != x.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} rows",
            y.len(),
            x.rows()
        )));
    }
    let pred = hard_pseudo_label(&predict_proba(params, x)?);
    let hits = pred.iter().zip(y).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / y.len() as f64)
}

/// Accuracy against each row's ground truth.
pub fn evaluate(params: &ModelParams, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Param("cannot evaluate on an empty dataset".into()));
    }
    accuracy(params, &data.features, &data.scoring_labels()?)
}

/// Builds a fresh network sized for `data` and trains it on the labeled
/// source rows.
pub fn init_and_pretrain(source: &Dataset, cfg: &AdaptConfig) -> Result<ModelParams> {
    let model = init_model(
        &cfg.model_dims(source.dim(), source.num_classes),
        cfg.activation,
        cfg.seed,
    )?;
    pretrain_source(model, source, cfg)
}

/// Trains all three groups on the `train` split with label-smoothed
/// cross-entropy and returns the checkpoint with the best `val` accuracy.
pub fn pretrain_source(
    mut model: ModelParams,
    source: &Dataset,
    cfg: &AdaptConfig,
) -> Result<ModelParams> {
    cfg.validate()?;
    source.validate()?;
    let k = source.num_classes;
    if model.num_classes() != k || model.input_dim() != source.dim() {
        return Err(Error::Shape(format!(
            "model {:?} does not fit data with {} features and {k} classes",
            model.dims(),
            source.dim()
        )));
    }
    let labels_of = |idx: &[usize]| -> Result<Vec<usize>> {
        idx.iter()
            .map(|&i| {
                usize::try_from(source.labels[i])
                    .map_err(|_| Error::Data(format!("source row {i} is unlabeled")))
            })
            .collect()
    };
    let train_idx = source.indices_of(Split::Train);
    let val_idx = source.indices_of(Split::Val);
    let train_y = labels_of(&train_idx)?;
    let val_y = labels_of(&val_idx)?;
    let mut counts = vec![0usize; k];
    for &c in &train_y {
        counts[c] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n < 2) {
        return Err(Error::Data(format!(
            "class {c} has {} training samples, need at least 2",
            counts[c]
        )));
    }
    if val_idx.is_empty() {
        return Err(Error::Data("source has no validation rows".into()));
    }
    let train_x = source.features.select_rows(&train_idx);
    let val_x = source.features.select_rows(&val_idx);

    for g in Group::ALL {
        model.unfreeze(g);
    }
    let rates = GroupRates {
        encoder: cfg.lr_encoder,
        bottleneck: cfg.lr_bottleneck,
        classifier: cfg.lr_classifier,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5052_4554_5241_494e);
    let mut opt = Sgd::new(cfg.momentum);
    let mut order: Vec<usize> = (0..train_idx.len()).collect();
    let mut best: Option<(f64, ModelParams)> = None;

    for _epoch in 0..cfg.pretrain_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = train_x.select_rows(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| train_y[i]).collect();
            let dropout = train_dropout(cfg, &mut rng);
            let (logits, cache) = forward(&model, &xb, dropout)?;
            let targets = smooth_labels(&yb, k, cfg.eps_smooth)?;
            let (_, d) = cross_entropy(&row_softmax(&logits), targets.matrix())?;
            let grads = backward(&model, &cache, &d)?;
            opt.step(&mut model, &grads, rates)?;
        }
        let acc = accuracy(&model, &val_x, &val_y)?;
        if best.as_ref().is_none_or(|(b, _)| acc > *b) {
            best = Some((acc, model.clone()));
        }
    }
    Ok(best.map_or(model, |(_, m)| m))
}

fn train_dropout(cfg: &AdaptConfig, rng: &mut ChaCha8Rng) -> Dropout {
    let seed = rng.random::<u64>();
    if cfg.train_dropout {
        Dropout::on(cfg.dropout_rate, seed)
    } else {
        Dropout::OFF
    }
}

/// Everything adaptation may see: labeled target rows and unlabeled
/// target features.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetTask {
    pub labeled_x: Matrix,
    pub labeled_y: Vec<usize>,
    pub unlabeled_x: Matrix,
    pub num_classes: usize,
}

/// Hidden ground truth used for progress reporting only.
#[derive(Debug, Clone)]
pub struct Diagnostics {
    unlabeled_truth: Option<Vec<usize>>,
    test: Option<(Matrix, Vec<usize>)>,
}

impl Diagnostics {
    pub fn none() -> Self {
        Self {
            unlabeled_truth: None,
            test: None,
        }
    }

    pub fn new(unlabeled_truth: Option<Vec<usize>>, test: Option<(Matrix, Vec<usize>)>) -> Self {
        Self {
            unlabeled_truth,
            test: test.filter(|(x, _)| x.rows() > 0),
        }
    }

    fn pseudo_accuracy(&self, pseudo: &[usize]) -> Option<f64> {
        let truth = self.unlabeled_truth.as_ref()?;
        if truth.len() != pseudo.len() || truth.is_empty() {
            return None;
        }
        let hits = truth.iter().zip(pseudo).filter(|(a, b)| a == b).count();
        Some(hits as f64 / truth.len() as f64)
    }

    fn seed_accuracy(&self, seeds: &AugmentedSeeds) -> Option<f64> {
        let truth = self.unlabeled_truth.as_ref()?;
        if seeds.is_empty() {
            return None;
        }
        let hits = seeds
            .indices
            .iter()
            .zip(&seeds.classes)
            .filter(|(&i, &c)| truth.get(i) == Some(&c))
            .count();
        Some(hits as f64 / seeds.len() as f64)
    }

    fn test_accuracy(&self, model: &ModelParams) -> Result<Option<f64>> {
        match &self.test {
            Some((x, y)) => accuracy(model, x, y).map(Some),
            None => Ok(None),
        }
    }
}

impl TargetTask {
    /// Splits a tagged target dataset into what adaptation may see and the
    /// diagnostics that score it. `labeled` rows form the labeled set,
    /// `unlabeled` rows the unlabeled set and `test` rows the held-out set.
    pub fn from_dataset(target: &Dataset) -> Result<(TargetTask, Diagnostics)> {
        target.validate()?;
        let lab_idx = target.indices_of(Split::Labeled);
        let unl_idx = target.indices_of(Split::Unlabeled);
        let test_idx = target.indices_of(Split::Test);
        let labeled_y = lab_idx
            .iter()
            .map(|&i| {
                usize::try_from(target.labels[i])
                    .map_err(|_| Error::Data(format!("row {i} is tagged labeled but has no label")))
            })
            .collect::<Result<Vec<_>>>()?;
        let truth: Option<Vec<usize>> = unl_idx
            .iter()
            .map(|&i| usize::try_from(target.truth[i]).ok())
            .collect();
        let test = if test_idx.is_empty() {
            None
        } else {
            let test_ds = target.subset(&test_idx);
            test_ds.scoring_labels().ok().map(|y| (test_ds.features, y))
        };
        let task = TargetTask {
            labeled_x: target.features.select_rows(&lab_idx),
            labeled_y,
            unlabeled_x: target.features.select_rows(&unl_idx),
            num_classes: target.num_classes,
        };
        Ok((task, Diagnostics::new(truth, test)))
    }
}

/// Loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub l_lab: f64,
    pub l_ent: f64,
    pub l_ps: f64,
    pub l_vadv: f64,
    pub l_div: f64,
    pub l_reg: f64,
    pub l_total: f64,
}

impl From<&LossBundle> for LossValues {
    fn from(b: &LossBundle) -> Self {
        Self {
            l_lab: b.l_lab,
            l_ent: b.l_ent,
            l_ps: b.l_ps,
            l_vadv: b.l_vadv,
            l_div: b.l_div,
            l_reg: b.l_reg,
            l_total: b.l_total,
        }
    }
}

impl LossValues {
    fn mean_of(items: &[LossValues]) -> LossValues {
        let n = items.len().max(1) as f64;
        let mut m = LossValues::default();
        for v in items {
            m.l_lab += v.l_lab;
            m.l_ent += v.l_ent;
            m.l_ps += v.l_ps;
            m.l_vadv += v.l_vadv;
            m.l_div += v.l_div;
            m.l_reg += v.l_reg;
            m.l_total += v.l_total;
        }
        LossValues {
            l_lab: m.l_lab / n,
            l_ent: m.l_ent / n,
            l_ps: m.l_ps / n,
            l_vadv: m.l_vadv / n,
            l_div: m.l_div / n,
            l_reg: m.l_reg / n,
            l_total: m.l_total / n,
        }
    }
}

/// Summary of one adaptation epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    /// Number of low-uncertainty seeds added to the graph.
    pub num_seeds: usize,
    /// Mean of the per-step losses.
    pub losses: LossValues,
    pub pseudo_accuracy: Option<f64>,
    pub seed_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub step_losses: Vec<LossValues>,
    pub final_accuracy: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "na".into(), |x| format!("{x:.6}"))
}

impl TrainReport {
    pub const COLUMNS: &'static [&'static str] = &[
        "epoch",
        "steps",
        "seeds",
        "l_lab",
        "l_ent",
        "l_ps",
        "l_vadv",
        "l_div",
        "l_reg",
        "l_total",
        "pseudo_acc",
        "seed_acc",
        "test_acc",
    ];

    /// Tab-separated, one row per epoch, fixed column order.
    pub fn to_text(&self) -> String {
        let mut s = Self::COLUMNS.join("\t");
        s.push('\n');
        for e in &self.epochs {
            let l = &e.losses;
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{}\t{}\t{}",
                e.epoch,
                e.steps,
                e.num_seeds,
                l.l_lab,
                l.l_ent,
                l.l_ps,
                l.l_vadv,
                l.l_div,
                l.l_reg,
                l.l_total,
                fmt_opt(e.pseudo_accuracy),
                fmt_opt(e.seed_accuracy),
                fmt_opt(e.test_accuracy),
            );
        }
        let _ = writeln!(s, "# final_acc\t{}", fmt_opt(self.final_accuracy));
        s
    }
}

/// Pseudo labels for every unlabeled row plus the seeds used to get them.
#[derive(Debug, Clone)]
struct Pseudo {
    labels: Vec<usize>,
    seeds: AugmentedSeeds,
}

fn compute_pseudo_labels(
    model: &ModelParams,
    task: &TargetTask,
    cfg: &AdaptConfig,
    mc_seed: u64,
) -> Result<Pseudo> {
    let k = task.num_classes;
    let m = task.unlabeled_x.rows();
    let seeds = if cfg.ablation.no_augmentation {
        AugmentedSeeds::empty()
    } else {
        let report = estimate_uncertainty(
            model,
            &task.unlabeled_x,
            cfg.mc_passes,
            cfg.dropout_rate,
            mc_seed,
        )?;
        select_low_uncertainty(&report, k)
    };

    // node order: labeled, augmented seeds, remaining unlabeled
    let mut is_seed = vec![false; m];
    for &i in &seeds.indices {
        is_seed[i] = true;
    }
    let rest: Vec<usize> = (0..m).filter(|&i| !is_seed[i]).collect();
    let unl_order: Vec<usize> = seeds
        .indices
        .iter()
        .copied()
        .chain(rest.iter().copied())
        .collect();

    let lab_feat = bottleneck_features(model, &task.labeled_x)?;
    let unl_feat = bottleneck_features(model, &task.unlabeled_x.select_rows(&unl_order))?;
    let features = lab_feat.vstack(&unl_feat)?;
    let layout = GraphLayout {
        labeled: task.labeled_x.rows(),
        augmented: seeds.len(),
        unlabeled: rest.len(),
    };
    let seed_classes: Vec<usize> = task
        .labeled_y
        .iter()
        .chain(&seeds.classes)
        .copied()
        .collect();
    let graph = build_graph(&features, layout, &seed_classes, k, cfg.k_hat)?;
    let result = propagate(&graph, cfg.alpha)?;
    if let Some(path) = &cfg.debug_graph {
        write_debug_dump(&graph, &result, path)?;
    }

    let mut labels = vec![0; m];
    let offset = layout.labeled;
    for (node, &u) in unl_order.iter().enumerate() {
        labels[u] = result.labels[offset + node];
    }
    Ok(Pseudo { labels, seeds })
}

/// One optimisation step of `L_lab + L_reg` on a joint batch.
///
/// Returns the loss bundle and the summed gradients of the clean and
/// perturbed branches.
#[allow(clippy::too_many_arguments)]
pub fn adapt_step(
    model: &ModelParams,
    xl: &Matrix,
    yl: &[usize],
    xu: &Matrix,
    pseudo: Option<&[usize]>,
    cfg: &AdaptConfig,
    dropout: Dropout,
    vat_seed: u64,
) -> Result<(LossBundle, Gradients)> {
    let k = model.num_classes();
    let (bl, bu) = (xl.rows(), xu.rows());
    let n = bl + bu;
    let x = xl.vstack(xu)?;
    let (logits, cache) = forward(model, &x, dropout)?;
    let p = row_softmax(&logits);
    let pl = p.select_rows(&(0..bl).collect::<Vec<_>>());
    let pu = p.select_rows(&(bl..n).collect::<Vec<_>>());
    let ab = cfg.ablation;

    let lab = {
        let (v, d) = cross_entropy(&pl, &one_hot(yl, k)?)?;
        Term::embedded(v, &d, 0, n)
    };
    let ent = if ab.no_ent || bu == 0 {
        Term::zero(n, k)
    } else {
        let (v, d) = entropy_loss(&pu);
        Term::embedded(v, &d, bl, n)
    };
    let ps = match pseudo {
        Some(q) if !ab.no_ps && bu > 0 => {
            let (v, d) = pseudo_ce_loss(&pu, q)?;
            Term::embedded(v, &d, bl, n)
        }
        _ => Term::zero(n, k),
    };
    let div = if ab.no_div || bu == 0 {
        Term::zero(n, k)
    } else {
        let (v, d) = diversity_loss(&pu);
        Term::embedded(v, &d, bl, n)
    };
    let vat = if ab.no_vat {
        None
    } else {
        let vcfg = VatConfig {
            eps: cfg.eps_vat,
            xi: cfg
                .vat_xi
                .unwrap_or_else(|| VatConfig::default_xi(x.cols())),
            power_iters: cfg.vat_power_iters,
        };
        Some(vat_loss(model, &x, vcfg, vat_seed)?)
    };
    let vadv = match &vat {
        Some(v) => Term {
            value: v.loss,
            dlogits: v.dlogits.clone(),
        },
        None => Term::zero(n, k),
    };

    let bundle = total_reg(
        LossComponents {
            lab,
            ps,
            ent,
            vadv,
            div,
        },
        cfg.lambda0,
    )?;
    let mut grads = backward(model, &cache, &bundle.clean_dlogits)?;
    if let Some(v) = &vat {
        grads.accumulate(&backward(model, &v.cache, &bundle.vat_dlogits)?)?;
    }
    if !grads.all_finite() {
        return Err(Error::Internal("non-finite gradient".into()));
    }
    Ok((bundle, grads))
}

/// Adapts encoder and bottleneck to the target task with the classifier
/// frozen.
///
/// Per epoch: (optionally) select one low-uncertainty seed per predicted
/// class, propagate labels over the bottleneck-feature graph, then run
/// `steps_per_epoch` SGD steps of `L_lab + λ₀L_ps + L_ent + L_vadv + L_div`.
pub fn adapt(
    mut model: ModelParams,
    task: &TargetTask,
    cfg: &AdaptConfig,
    diagnostics: &Diagnostics,
) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    let k = task.num_classes;
    if model.num_classes() != k || model.input_dim() != task.unlabeled_x.cols() {
        return Err(Error::Shape(format!(
            "model {:?} does not fit a {k}-class task with {} features",
            model.dims(),
            task.unlabeled_x.cols()
        )));
    }
    if task.labeled_x.rows() != task.labeled_y.len() {
        return Err(Error::Shape(
            "labeled features and labels differ in length".into(),
        ));
    }
    let mut present = vec![false; k];
    for &c in &task.labeled_y {
        if c >= k {
            return Err(Error::Data(format!("labeled class {c} out of range")));
        }
        present[c] = true;
    }
    if let Some(c) = present.iter().position(|p| !p) {
        return Err(Error::Data(format!(
            "no labeled target sample for class {c}"
        )));
    }
    let m = task.unlabeled_x.rows();
    if m == 0 {
        return Err(Error::Data("target task has no unlabeled rows".into()));
    }

    model.freeze(Group::Classifier);
    let frozen_snapshot = model.classifier().clone();

    let r = task.labeled_x.rows();
    let bu = cfg.batch_size.min(m);
    let bl = cfg.batch_size.min(r);
    let steps = cfg.steps_per_epoch.unwrap_or(m.div_ceil(cfg.batch_size));
    let rates = GroupRates {
        encoder: cfg.lr_encoder,
        bottleneck: cfg.lr_bottleneck,
        classifier: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4144_4150_5400_0000);
    let mut lab_cycle = Cycler::new(r, &mut rng);
    let mut unl_cycle = Cycler::new(m, &mut rng);
    let mut opt = Sgd::new(cfg.momentum);
    let mut report = TrainReport::default();

    for epoch in 0..cfg.epochs {
        let mc_seed = rng.random::<u64>();
        let pseudo = if cfg.ablation.no_ps {
            None
        } else {
            Some(compute_pseudo_labels(&model, task, cfg, mc_seed)?)
        };

        let mut epoch_losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let li = lab_cycle.next_batch(bl, &mut rng);
            let ui = unl_cycle.next_batch(bu, &mut rng);
            let dropout = train_dropout(cfg, &mut rng);
            let vat_seed = rng.random::<u64>();
            let xl = task.labeled_x.select_rows(&li);
            let yl: Vec<usize> = li.iter().map(|&i| task.labeled_y[i]).collect();
            let xu = task.unlabeled_x.select_rows(&ui);
            let pu: Option<Vec<usize>> = pseudo
                .as_ref()
                .map(|p| ui.iter().map(|&i| p.labels[i]).collect());
            let (bundle, grads) =
                adapt_step(&model, &xl, &yl, &xu, pu.as_deref(), cfg, dropout, vat_seed)?;
            opt.step(&mut model, &grads, rates)?;
            epoch_losses.push(LossValues::from(&bundle));
        }

        let record = EpochRecord {
            epoch,
            steps,
            num_seeds: pseudo.as_ref().map_or(0, |p| p.seeds.len()),
            losses: LossValues::mean_of(&epoch_losses),
            pseudo_accuracy: pseudo
                .as_ref()
                .and_then(|p| diagnostics.pseudo_accuracy(&p.labels)),
            seed_accuracy: pseudo
                .as_ref()
                .and_then(|p| diagnostics.seed_accuracy(&p.seeds)),
            test_accuracy: diagnostics.test_accuracy(&model)?,
        };
        report.step_losses.extend(epoch_losses);
        report.epochs.push(record);
    }

    if model.classifier() != &frozen_snapshot {
        return Err(Error::Internal(
            "frozen classifier changed during adaptation".into(),
        ));
    }
    report.final_accuracy = diagnostics.test_accuracy(&model)?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synth::{gen_synthetic_shift, split_nshot, SyntheticSpec};
    use crate::model::{init_model, Activation};

    fn small_cfg() -> AdaptConfig {
        AdaptConfig {
            epochs: 3,
            pretrain_epochs: 5,
            hidden_dims: vec![8],
            bottleneck_dim: 4,
            batch_size: 32,
            ..AdaptConfig::default()
        }
    }

    fn small_task(seed: u64) -> (Dataset, Dataset) {
        let spec = SyntheticSpec {
            num_classes: 3,
            n_source: 150,
            m_target: 150,
            dim: 5,
            ..SyntheticSpec::default()
        };
        let (s, t) = gen_synthetic_shift(&spec, seed).unwrap();
        (s, split_nshot(&t, 3, 0.2, seed).unwrap())
    }

    #[test]
    fn sgd_skips_frozen_groups() {
        let mut m = init_model(&[3, 6, 4, 3], Activation::Tanh, 1).unwrap();
        m.freeze(Group::Classifier);
        let before = m.classifier().clone();
        let x = Matrix::from_rows(&[[0.1, 0.2, 0.3], [0.3, -0.2, 0.9]]).unwrap();
        let (logits, cache) = forward(&m, &x, Dropout::OFF).unwrap();
        let g = backward(&m, &cache, &logits).unwrap();
        let mut opt = Sgd::new(0.9);
        let rates = GroupRates {
            encoder: 0.1,
            bottleneck: 0.1,
            classifier: 0.1,
        };
        let enc_before = m.encoder()[0].clone();
        opt.step(&mut m, &g, rates).unwrap();
        assert_eq!(m.classifier(), &before);
        assert_ne!(m.encoder()[0], enc_before);
    }

    #[test]
    fn pretrain_is_deterministic_and_checks_data() {
        let (s, _) = small_task(1);
        let cfg = small_cfg();
        let a = init_and_pretrain(&s, &cfg).unwrap();
        let b = init_and_pretrain(&s, &cfg).unwrap();
        assert_eq!(a, b);

        let mut thin = s.clone();
        for (l, sp) in thin.labels.iter().zip(thin.splits.iter_mut()) {
            if *l == 2 && *sp == Split::Train {
                *sp = Split::Val;
            }
        }
        assert!(matches!(
            init_and_pretrain(&thin, &cfg),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn adapt_requires_every_class() {
        let (s, t) = small_task(2);
        let cfg = small_cfg();
        let model = init_and_pretrain(&s, &cfg).unwrap();
        let (mut task, diag) = TargetTask::from_dataset(&t).unwrap();
        let keep: Vec<usize> = (0..task.labeled_y.len())
            .filter(|&i| task.labeled_y[i] != 1)
            .collect();
        task.labeled_x = task.labeled_x.select_rows(&keep);
        task.labeled_y = keep.iter().map(|&i| task.labeled_y[i]).collect();
        assert!(matches!(
            adapt(model, &task, &cfg, &diag),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn adapt_reports_every_epoch_and_is_deterministic() {
        let (s, t) = small_task(3);
        let cfg = small_cfg();
        let model = init_and_pretrain(&s, &cfg).unwrap();
        let (task, diag) = TargetTask::from_dataset(&t).unwrap();
        let (m1, r1) = adapt(model.clone(), &task, &cfg, &diag).unwrap();
        let (m2, r2) = adapt(model.clone(), &task, &cfg, &diag).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(m1, m2);
        assert_eq!(r1.epochs.len(), cfg.epochs);
        assert_eq!(m1.classifier(), model.classifier());
        for l in &r1.step_losses {
            let sum = l.l_lab + l.lambda0_free_sum(cfg.lambda0);
            assert!((l.l_total - sum).abs() < 1e-9);
        }
        assert!(r1
            .epochs
            .iter()
            .all(|e| e.num_seeds <= 3 && e.pseudo_accuracy.is_some()));
        let text = r1.to_text();
        assert_eq!(text.lines().count(), cfg.epochs + 2);
    }

    impl LossValues {
        fn lambda0_free_sum(&self, lambda0: f64) -> f64 {
            lambda0 * self.l_ps + self.l_ent + self.l_vadv + self.l_div
        }
    }

    #[test]
    fn evaluate_examples() {
        let (s, _) = small_task(4);
        let m = init_model(&[5, 8, 4, 3], Activation::Tanh, 0).unwrap();
        assert!(matches!(evaluate(&m, &s.subset(&[])), Err(Error::Param(_))));
        let acc = evaluate(&m, &s).unwrap();
        let mut idx: Vec<usize> = (0..s.len()).collect();
        idx.reverse();
        assert_eq!(evaluate(&m, &s.subset(&idx)).unwrap(), acc);
    }
}
