use coopdet::attention::AttentionState;
use coopdet::eval::{evaluate_policy, Bucket, FrameResult};
use coopdet::experiment::{compare, ExperimentConfig};
use coopdet::geometry::{Box3D, ObjectClass};
use coopdet::netsim::{run_policy, FrameFeatures, LinkModel, Policy, RunOptions};
use coopdet::pillars::{PillarEncoder, PillarGrid, SPointNetWeights};
use coopdet::rng::SeededRng;
use coopdet::scenegen::{build_frame, generate_scene, oracle_best_infrastructure, oracle_detect, OracleParams, SceneConfig, SceneObject};

fn car(x: f64, y: f64, id: u32) -> SceneObject {
    SceneObject { id, class: ObjectClass::Car, bbox: Box3D::new([x, y, 0.8], 1.8, 4.5, 1.6, 0.0).unwrap() }
}

/// A wall hides one car from the vehicle; only infrastructure 2 sees it.
fn occluded_scene() -> coopdet::scenegen::SceneFrame {
    let mut cfg = SceneConfig::t_junction();
    cfg.infrastructures = vec![[-25.0, -20.0, 2.0, 0.0], [-25.0, 20.0, 2.0, 0.0], [28.0, 6.0, 2.0, 3.0]];
    cfg.obstacles = vec![[10.0, 0.0, 2.5, 12.0, 1.0, 5.0, 0.0]];
    cfg.vehicles = [0, 0];
    cfg.pedestrians = [0, 0];
    build_frame(&cfg, 0, 9, vec![car(20.0, 0.0, 0), car(-12.0, 4.0, 1)]).unwrap()
}

#[test]
fn occluded_object_needs_the_right_infrastructure() {
    let f = occluded_scene();
    assert!(f.vehicle.visibility[0].points < 5);
    assert!(f.infrastructures[2].visibility[0].points >= 5);
    assert!(f.infrastructures[..2].iter().all(|i| i.visibility[0].points < 5));
    assert_eq!(oracle_best_infrastructure(&f, 5), Some(2));

    let encoder = PillarEncoder::new(PillarGrid::default(), 100, SPointNetWeights::seeded(64, 0));
    let features = FrameFeatures::compute(&f, &encoder).unwrap();
    let links = vec![LinkModel::default(); 3];
    let params = OracleParams::default();
    let detects_hidden = |p: &Policy| {
        let out = run_policy(&features, p, &links, RunOptions::default()).unwrap();
        let dets = oracle_detect(&f, &out.sensors(), &params, 0);
        dets.iter().any(|d| d.bbox == f.to_vehicle_frame(&f.objects[0].bbox))
    };
    assert!(!detects_hidden(&Policy::LocVehicle));
    assert!(detects_hidden(&Policy::CombAll));
    for seed in 0..20 {
        let picked = run_policy(&features, &Policy::RandSelect { seed }, &links, RunOptions::default()).unwrap().participants;
        assert_eq!(detects_hidden(&Policy::RandSelect { seed }), picked == vec![2]);
    }
}

#[test]
fn pooled_metrics_ignore_frame_order() {
    let scene = SceneConfig::roundabout();
    let frames = generate_scene(&scene, 12, 3).unwrap();
    let params = OracleParams { noise: 0.2, ..OracleParams::default() };
    let mut results: Vec<FrameResult> = frames
        .iter()
        .map(|f| FrameResult { detections: oracle_detect(f, &[0, 1], &params, f.seed), ground_truth: f.ground_truth() })
        .collect();
    let before = evaluate_policy("p", &results, 1.0, 0.7).unwrap();
    let mut rng = SeededRng::new(4);
    for i in (1..results.len()).rev() {
        results.swap(i, rng.index(i + 1));
    }
    assert_eq!(evaluate_policy("p", &results, 1.0, 0.7).unwrap(), before);
}

#[test]
fn cooperation_never_hurts_on_the_occlusion_scenario() {
    let mut config = ExperimentConfig::default();
    config.run.scenario = "occlusion_heavy".into();
    config.run.rand_select_seeds = vec![1, 2];
    let frames = generate_scene(&config.scene_config().unwrap(), 12, 5).unwrap();
    let state: AttentionState = config.initial_attention();
    let cmp = compare(&frames, &config, Some(&state)).unwrap();
    let loc = cmp.baseline.map_of(Bucket::All).unwrap();
    for e in &cmp.evals {
        assert!(e.map_of(Bucket::All).unwrap() >= loc, "{} below LocVehicle", e.policy);
    }
    let comb = cmp.eval_of("CombAll").unwrap().map_of(Bucket::All).unwrap();
    assert!(cmp.evals.iter().all(|e| e.map_of(Bucket::All).unwrap() <= comb));
}
