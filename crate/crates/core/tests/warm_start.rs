use cmpc::planner::{BaselineKind, Observation, Planner, PlannerConfig};
use cmpc::sim::{approach_speed, guide_point, Scenario, World};

/// Paired measurement along a closed-loop canonical run: the branch
/// gradient at the starting point of the first ADMM iteration, warm started
/// from the previous cycle versus built from scratch for the same
/// observation.
#[test]
fn warm_start_lowers_the_first_iteration_gradient() {
    let scenario = Scenario::canonical();
    let cfg = scenario.configure(&BaselineKind::Cmpc.configure(&PlannerConfig::default()));
    let reach = (cfg.horizon - 1) as f64 * cfg.dt;
    let goal = *scenario.guide_path.last().unwrap();
    let mut warm = Planner::new(cfg.clone()).unwrap();
    let mut cold = Planner::new(cfg.clone()).unwrap();
    let mut world = World::new(&scenario, 0);
    let mut ratios = vec![];
    // the first cycle has nothing to warm start from
    for cycle in 0..51 {
        let obs = Observation {
            state: world.robot,
            prev_control: world.control,
            visible: world.visible_obstacles(),
            guide_point: guide_point(&scenario.guide_path, world.robot.position(), scenario.v_ref * reach),
            v_ref: approach_speed(scenario.v_ref, world.robot.distance_to(goal), reach),
        };
        cold.reset();
        let c = cold.plan(&obs).unwrap().report;
        let w = warm.plan(&obs).unwrap().report;
        if cycle > 0 {
            ratios.push(w.initial_grad_norm / c.initial_grad_norm);
        }
        world.tick(cfg.limits.clamp(w.applied_control)).unwrap();
    }
    ratios.sort_by(|a, b| a.total_cmp(b));
    let median = 0.5 * (ratios[24] + ratios[25]);
    assert!(median < 1.0, "median warm/cold ratio {median}");
}
