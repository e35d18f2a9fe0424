use betadet_core::assignment::{match_detections, CostWeights, MatchResult};
use betadet_core::autograd::Graph;
use betadet_core::betax::{BetaParams, Maturity};
use betadet_core::geometry::BoxCXCYWH;
use betadet_core::losses::*;
use betadet_core::model::{detections, Detection, Model, ModelConfig};
use betadet_core::rng::RngState;
use betadet_core::synthdata::{generate, GroundTruthObject};
use proptest::prelude::*;

fn random_box(rng: &mut RngState) -> BoxCXCYWH {
    BoxCXCYWH::new(rng.uniform(), rng.uniform(), rng.uniform_range(0.02, 0.6), rng.uniform_range(0.02, 0.6)).unwrap()
}

fn random_detection(rng: &mut RngState) -> Detection {
    Detection {
        bbox: random_box(rng),
        p_obj: rng.uniform_range(0.001, 0.999),
        maturity: BetaParams::new(rng.uniform_range(0.5, 20.0), rng.uniform_range(0.5, 20.0)).unwrap(),
    }
}

fn random_case(rng: &mut RngState, layers: usize) -> (Vec<Vec<Detection>>, Vec<GroundTruthObject>, Vec<MatchResult>) {
    let g = rng.int_range(0, 4);
    let gts: Vec<GroundTruthObject> =
        (0..g).map(|_| GroundTruthObject::from_stage(random_box(rng), rng.int_range(0, 2) as u8).unwrap()).collect();
    let dets: Vec<Vec<Detection>> = (0..layers).map(|_| (0..6).map(|_| random_detection(rng)).collect()).collect();
    let matches = dets.iter().map(|d| match_detections(d, &gts, &CostWeights::default()).unwrap()).collect();
    (dets, gts, matches)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

#[test]
fn total_is_weighted_sum_of_breakdown() {
    let mut rng = RngState::new(1);
    let w = LossWeights { lambda_vfl: 1.3, lambda_bbox: 4.0, lambda_giou: 2.5, lambda_maturity: 0.7, lambda_reg: 0.01 };
    for _ in 0..200 {
        let (dets, gts, matches) = random_case(&mut rng, 3);
        let b = composite_loss(&dets, &gts, &matches, &w).unwrap();
        let resum = w.lambda_vfl * b.vfl + w.lambda_bbox * b.bbox_l1 + w.lambda_giou * b.giou + w.lambda_maturity * b.maturity;
        assert!(close(b.total, resum, 1e-10));
        let layer_sum: f64 = b.per_layer.iter().map(|t| t.total).sum();
        assert!(close(b.total, layer_sum, 1e-10));
        assert!(b.vfl >= 0.0 && b.bbox_l1 >= 0.0 && b.giou >= 0.0 && b.maturity.is_finite());
    }
}

#[test]
fn deep_supervision_is_additive() {
    let mut rng = RngState::new(2);
    let w = LossWeights::default();
    for _ in 0..200 {
        let (dets, gts, matches) = random_case(&mut rng, 3);
        let all = composite_loss(&dets, &gts, &matches, &w).unwrap().total;
        let singles: f64 = (0..3)
            .map(|l| composite_loss(&dets[l..l + 1], &gts, &matches[l..l + 1], &w).unwrap().total)
            .sum();
        assert!(close(all, singles, 1e-10));
    }
}

#[test]
fn no_objects_and_tiny_scores_cost_nothing() {
    let bbox = BoxCXCYWH::new(0.5, 0.5, 0.1, 0.1).unwrap();
    let det = Detection { bbox, p_obj: 1e-8, maturity: BetaParams::new(1.0, 1.0).unwrap() };
    let dets = vec![vec![det; 5]];
    let m = match_detections(&dets[0], &[], &CostWeights::default()).unwrap();
    let b = composite_loss(&dets, &[], &[m], &LossWeights::default()).unwrap();
    assert!(b.total < 1e-15);
}

#[test]
fn perfect_prediction_costs_nothing() {
    let bbox = BoxCXCYWH::new(0.4, 0.6, 0.2, 0.3).unwrap();
    let gt = GroundTruthObject::from_stage(bbox, 1).unwrap();
    let det = Detection { bbox, p_obj: 1.0 - 1e-8, maturity: BetaParams::new(1.0, 1.0).unwrap() };
    let w = LossWeights { lambda_reg: 0.0, ..LossWeights::default() };
    let m = match_detections(&[det], &[gt], &CostWeights::default()).unwrap();
    let b = composite_loss(&[vec![det]], &[gt], &[m], &w).unwrap();
    assert_eq!(b.bbox_l1, 0.0);
    assert_eq!(b.giou, 0.0);
    assert!(b.maturity.abs() < 1e-14);
    assert!(b.total < 1e-7);
}

#[test]
fn mismatched_layer_count_is_error() {
    let mut rng = RngState::new(3);
    let (dets, gts, matches) = random_case(&mut rng, 2);
    assert!(composite_loss(&dets, &gts, &matches[..1], &LossWeights::default()).is_err());
}

#[test]
fn graph_loss_agrees_with_plain_loss() {
    let config = ModelConfig { image_size: 64, num_queries: 8, ..ModelConfig::reduced() };
    let model = Model::init(config, 4).unwrap();
    let scenes = generate(9, 3).unwrap();
    let images: Vec<_> = scenes.iter().map(|s| &s.image).collect();
    let gts: Vec<Vec<GroundTruthObject>> = scenes.iter().map(|s| s.objects.clone()).collect();
    let w = LossWeights { lambda_reg: 0.02, ..LossWeights::default() };

    let mut g = Graph::new();
    let pass = model.forward_graph(&mut g, &images).unwrap();
    let dets: Vec<Vec<Vec<Detection>>> = pass.layers.iter().map(|l| detections(&g, l).unwrap()).collect();
    let matches: Vec<Vec<MatchResult>> = dets
        .iter()
        .map(|layer| layer.iter().zip(&gts).map(|(d, o)| match_detections(d, o, &CostWeights::default()).unwrap()).collect())
        .collect();
    let out = composite_loss_graph(&mut g, &pass.layers, &gts, &matches, &w, None).unwrap();

    let per_image: Vec<LossBreakdown> = (0..scenes.len())
        .map(|b| {
            let layers: Vec<Vec<Detection>> = dets.iter().map(|l| l[b].clone()).collect();
            let m: Vec<MatchResult> = matches.iter().map(|l| l[b].clone()).collect();
            composite_loss(&layers, &gts[b], &m, &w).unwrap()
        })
        .collect();
    let plain = LossBreakdown::mean(&per_image);
    let graph_total = g.value(out.loss).item();
    assert!(close(graph_total, plain.total, 1e-10), "{graph_total} vs {}", plain.total);
    assert!(close(out.breakdown.total, plain.total, 1e-10));
    assert!(close(out.breakdown.vfl, plain.vfl, 1e-10));
    assert!(close(out.breakdown.bbox_l1, plain.bbox_l1, 1e-10));
    assert!(close(out.breakdown.giou, plain.giou, 1e-10));
    assert!(close(out.breakdown.maturity, plain.maturity, 1e-10));
    assert_eq!(out.iou_targets.len(), config.decoder_layers);
}

proptest! {
    #[test]
    fn components_are_nonnegative(p in 1e-9f64..1.0, q in 0.0f64..=1.0, pos in any::<bool>()) {
        prop_assert!(vfl(p.min(1.0 - 1e-9), q, pos).unwrap() >= 0.0);
    }

    #[test]
    fn giou_loss_in_range(a in (0.0f64..1.0, 0.0f64..1.0, 0.01f64..1.0, 0.01f64..1.0),
                          b in (0.0f64..1.0, 0.0f64..1.0, 0.01f64..1.0, 0.01f64..1.0)) {
        let a = BoxCXCYWH::new(a.0, a.1, a.2, a.3).unwrap();
        let b = BoxCXCYWH::new(b.0, b.1, b.2, b.3).unwrap();
        let l = giou_loss(&a, &b);
        prop_assert!((0.0..2.0).contains(&l));
    }

    #[test]
    fn maturity_loss_is_finite_and_swap_symmetric(a in 0.5f64..50.0, b in 0.5f64..50.0, y in 0.0f64..=1.0, r in 0.0f64..0.1) {
        let p = BetaParams::new(a, b).unwrap();
        let l = maturity_loss(p, Maturity::new(y).unwrap(), r);
        prop_assert!(l.is_finite());
        let s = maturity_loss(p.swapped(), Maturity::new(1.0 - y).unwrap(), r);
        prop_assert!((l - s).abs() <= 1e-9 * (1.0 + l.abs()));
    }

    #[test]
    fn regularizer_strictly_increases(a in 0.5f64..50.0, b in 0.5f64..50.0, y in 0.01f64..0.99, r in 0.0f64..0.1, dr in 1e-4f64..0.1) {
        let p = BetaParams::new(a, b).unwrap();
        let y = Maturity::new(y).unwrap();
        prop_assert!(maturity_loss(p, y, r + dr) > maturity_loss(p, y, r));
    }
}
