//! Batch objective and the training loop.

use crate::assignment::{match_detections, CostWeights, MatchResult};
use crate::autograd::{adam_step, AdamState, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{composite_loss_graph, IouTargets, LossBreakdown, LossWeights};
use crate::model::{detections, Detection, Model};
use crate::rng::RngState;
use crate::synthdata::{GroundTruthObject, Image, Scene};

/// Substream index of the batch shuffler.
pub const SHUFFLE_STREAM: u64 = 0x5348_5546;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub cost: CostWeights,
    pub loss: LossWeights,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            seed: 1,
            lr: 1e-3,
            batch_size: 8,
            steps: 3000,
            cost: CostWeights::default(),
            loss: LossWeights::default(),
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Domain(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Domain("batch size must be positive".into()));
        }
        self.cost.validate()?;
        self.loss.validate()
    }
}

/// Matching of every layer against every image, `[layer][image]`.
pub fn match_layers(
    dets: &[Vec<Vec<Detection>>],
    gts: &[Vec<GroundTruthObject>],
    w: &CostWeights,
) -> Result<Vec<Vec<MatchResult>>> {
    dets.iter()
        .map(|layer| layer.iter().zip(gts).map(|(d, g)| match_detections(d, g, w)).collect())
        .collect()
}

/// A recorded batch loss, ready for `backward`.
pub struct BatchLoss {
    pub graph: Graph,
    pub loss: Var,
    pub param_vars: Vec<Var>,
    pub breakdown: LossBreakdown,
    pub matches: Vec<Vec<MatchResult>>,
    pub iou_targets: IouTargets,
}

/// Records forward pass and composite loss. Matching (and the VFL IoU
/// targets) are recomputed from the current predictions unless `frozen`
/// supplies them.
pub fn batch_loss(
    model: &Model,
    images: &[&Image],
    gts: &[Vec<GroundTruthObject>],
    cost: &CostWeights,
    weights: &LossWeights,
    frozen: Option<(&[Vec<MatchResult>], &IouTargets)>,
) -> Result<BatchLoss> {
    if images.len() != gts.len() {
        return Err(Error::Input(format!("{} images but {} annotation lists", images.len(), gts.len())));
    }
    let mut graph = Graph::new();
    let pass = model.forward_graph(&mut graph, images)?;
    let (matches, frozen_iou) = match frozen {
        Some((m, q)) => (m.to_vec(), Some(q)),
        None => {
            let dets = pass.layers.iter().map(|l| detections(&graph, l)).collect::<Result<Vec<_>>>()?;
            (match_layers(&dets, gts, cost)?, None)
        }
    };
    let out = composite_loss_graph(&mut graph, &pass.layers, gts, &matches, weights, frozen_iou)?;
    Ok(BatchLoss {
        graph,
        loss: out.loss,
        param_vars: pass.param_vars,
        breakdown: out.breakdown,
        matches,
        iou_targets: out.iou_targets,
    })
}

/// Loss breakdown and the gradient of every model parameter, in parameter order.
pub fn loss_and_gradients(
    model: &Model,
    images: &[&Image],
    gts: &[Vec<GroundTruthObject>],
    cost: &CostWeights,
    weights: &LossWeights,
) -> Result<(BatchLoss, Vec<Tensor>)> {
    let mut b = batch_loss(model, images, gts, cost, weights, None)?;
    b.graph.backward(b.loss)?;
    let grads = b
        .param_vars
        .iter()
        .zip(model.params())
        .map(|(&v, p)| b.graph.grad(v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect();
    Ok((b, grads))
}

/// Seeded epoch-wise batch order: a shuffled permutation is consumed in
/// consecutive slices and reshuffled whenever the next slice would run past
/// its end.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: RngState,
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
}

impl BatchSampler {
    pub fn new(seed: u64, n: usize, batch_size: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Input("cannot sample batches from an empty dataset".into()));
        }
        let batch = batch_size.min(n);
        let mut rng = RngState::substream(seed, SHUFFLE_STREAM);
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        Ok(BatchSampler { rng, order, cursor: 0, batch })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor + self.batch > self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        out
    }
}

/// Failure of a training step.
#[derive(Debug, thiserror::Error)]
#[error("training failed at step {step}: {source}")]
pub struct TrainError {
    /// One-based step number.
    pub step: usize,
    #[source]
    pub source: Error,
}

impl TrainError {
    /// Whether the failure was a numeric divergence rather than bad input.
    pub fn is_divergence(&self) -> bool {
        matches!(self.source, Error::Numeric { .. })
    }
}

/// One optimizer step on the given scenes; returns the pre-update loss.
pub fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    scenes: &[&Scene],
    s: &TrainSettings,
) -> Result<LossBreakdown> {
    let images: Vec<&Image> = scenes.iter().map(|sc| &sc.image).collect();
    let gts: Vec<Vec<GroundTruthObject>> = scenes.iter().map(|sc| sc.objects.clone()).collect();
    let (b, grads) = loss_and_gradients(model, &images, &gts, &s.cost, &s.loss)?;
    if !b.breakdown.total.is_finite() {
        return Err(Error::Numeric { op: "loss", detail: format!("total {}", b.breakdown.total) });
    }
    for (p, g) in model.params_mut().iter_mut().zip(grads) {
        p.grad = Some(g);
    }
    adam_step(model.params_mut(), adam, s.lr)?;
    if let Some(p) = model.params().iter().find(|p| p.value.data().iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric { op: "adam", detail: format!("parameter `{}` is no longer finite", p.name) });
    }
    Ok(b.breakdown)
}

/// Runs `s.steps` steps, calling `on_step(step, loss)` with one-based steps.
pub fn train(
    model: &mut Model,
    scenes: &[Scene],
    s: &TrainSettings,
    mut on_step: impl FnMut(usize, &LossBreakdown),
) -> std::result::Result<AdamState, TrainError> {
    let fail = |step, source| TrainError { step, source };
    s.validate().map_err(|e| fail(0, e))?;
    let mut sampler = BatchSampler::new(s.seed, scenes.len(), s.batch_size).map_err(|e| fail(0, e))?;
    let mut adam = AdamState::new();
    for step in 1..=s.steps {
        let batch: Vec<&Scene> = sampler.next_batch().into_iter().map(|i| &scenes[i]).collect();
        let loss = train_step(model, &mut adam, &batch, s).map_err(|e| fail(step, e))?;
        on_step(step, &loss);
    }
    Ok(adam)
}

/// Header of the per-step loss log.
pub const LOSS_LOG_HEADER: &str = "step,total,vfl,bbox,giou,maturity";

pub fn loss_log_row(step: usize, b: &LossBreakdown) -> String {
    format!("{step},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}", b.total, b.vfl, b.bbox_l1, b.giou, b.maturity)
}
