//! End-to-end finite-difference check of the composite loss gradient.
//!
//! A reduced model sees a small random batch; the analytic gradient of every
//! parameter entry is compared with a central difference taken with the
//! matching and the VFL IoU targets held at their unperturbed values.

use crate::assignment::{CostWeights, MatchResult};
use crate::error::Result;
use crate::geometry::BoxCXCYWH;
use crate::losses::{IouTargets, LossWeights};
use crate::model::{Model, ModelConfig};
use crate::rng::RngState;
use crate::synthdata::{GroundTruthObject, Image};
use crate::train::{batch_loss, loss_and_gradients};

pub const TOLERANCE: f64 = 1e-5;
/// Central-difference step relative to `max(1, |θ|)`.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-3;
const BATCH: usize = 2;

/// Deliberate faults for negative controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Scales the analytic gradient of the first parameter by 1.01.
    ScaledGradient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Random images and 1 to 2 annotated objects per image.
pub fn random_batch(config: &ModelConfig, rng: &mut RngState) -> Result<(Vec<Image>, Vec<Vec<GroundTruthObject>>)> {
    let mut images = Vec::with_capacity(BATCH);
    let mut gts = Vec::with_capacity(BATCH);
    for _ in 0..BATCH {
        let n = config.image_size * config.image_size * 3;
        images.push(Image::new(config.image_size, (0..n).map(|_| rng.uniform()).collect())?);
        let k = rng.int_range(1, 2);
        let objects = (0..k)
            .map(|_| {
                let b = BoxCXCYWH::new(
                    rng.uniform_range(0.2, 0.8),
                    rng.uniform_range(0.2, 0.8),
                    rng.uniform_range(0.1, 0.4),
                    rng.uniform_range(0.1, 0.4),
                )?;
                GroundTruthObject::from_stage(b, rng.int_range(0, 2) as u8)
            })
            .collect::<Result<Vec<_>>>()?;
        gts.push(objects);
    }
    Ok((images, gts))
}

struct Frozen<'a> {
    images: Vec<&'a Image>,
    gts: &'a [Vec<GroundTruthObject>],
    matches: Vec<Vec<MatchResult>>,
    iou: IouTargets,
    cost: CostWeights,
    weights: LossWeights,
}

impl Frozen<'_> {
    fn loss(&self, model: &Model) -> Result<f64> {
        let b = batch_loss(model, &self.images, self.gts, &self.cost, &self.weights, Some((&self.matches, &self.iou)))?;
        Ok(b.graph.value(b.loss).item())
    }

    fn central(&self, model: &mut Model, p: usize, j: usize, h: f64) -> Result<f64> {
        let theta = model.params()[p].value.data()[j];
        model.params_mut()[p].value.data_mut()[j] = theta + h;
        let up = self.loss(model)?;
        model.params_mut()[p].value.data_mut()[j] = theta - h;
        let down = self.loss(model);
        model.params_mut()[p].value.data_mut()[j] = theta;
        Ok((up - down?) / (2.0 * h))
    }
}

/// Checks every parameter entry of a reduced model initialized from `seed`.
///
/// An entry that disagrees at the default step is retried at a step ten
/// times smaller; the smaller error is kept. This only matters when the
/// perturbation crosses a ReLU kink or a box min/max switch.
pub fn gradcheck(seed: u64, fault: Fault) -> Result<GradcheckReport> {
    let config = ModelConfig::reduced();
    let mut model = Model::init(config, seed)?;
    let mut rng = RngState::substream(seed, 0x4743);
    let (images, gts) = random_batch(&config, &mut rng)?;
    let cost = CostWeights::default();
    let weights = LossWeights::default();
    let refs: Vec<&Image> = images.iter().collect();

    let (b, mut grads) = loss_and_gradients(&model, &refs, &gts, &cost, &weights)?;
    if fault == Fault::ScaledGradient {
        grads[0].data_mut().iter_mut().for_each(|g| *g *= 1.01);
    }
    let frozen = Frozen { images: refs, gts: &gts, matches: b.matches, iou: b.iou_targets, cost, weights };

    let mut report = GradcheckReport {
        seed,
        checked: 0,
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (p, grad) in grads.iter().enumerate() {
        for (j, &a) in grad.data().iter().enumerate() {
            let h = FD_STEP * model.params()[p].value.data()[j].abs().max(1.0);
            let mut n = frozen.central(&mut model, p, j, h)?;
            let mut err = relative_error(a, n);
            if err > TOLERANCE {
                let n2 = frozen.central(&mut model, p, j, h / 10.0)?;
                let err2 = relative_error(a, n2);
                if err2 < err {
                    (n, err) = (n2, err2);
                }
            }
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = model.params()[p].name.clone();
                report.worst_index = j;
                report.analytic = a;
                report.numeric = n;
            }
        }
    }
    Ok(report)
}
