//! Acceptance suite: one PASS/FAIL line per criterion.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sandbot::commands::load_scenario;
use sandbot::gateway::{serve, GatewayConfig};
use sandbot::journal::{replay, Journal};
use sandbot::protocol::{ClientEnvelope, ClientMessage, ServerEnvelope, ServerMessage, PROTOCOL_VERSION};
use sandbot_core::autonomy::{
    arbitrate, command, map_correction, CommandVector, CorrectionInput, CouplingWeights, SafetyBox, SaturationSet,
};
use sandbot_core::driver::Driver;
use sandbot_core::exec::Parallelism;
use sandbot_core::kinematics::{
    is_reachable, tool_pose_for_surface, IkConfig, IkOutcome, JointConfig, Reachability, RobotModel, solve_ik,
};
use sandbot_core::perception::{auto_register, PoseNudge};
use sandbot_core::pose::Pose;
use sandbot_core::scenario::Scenario;
use sandbot_core::script::{play, run_headless, OperatorScript, ScriptStep};
use sandbot_core::session::{OperatorAction, Phase, Session};
use sandbot_core::task::SegmentStatus;
use sandbot_core::workpiece::{
    change_sandpaper, removal_step, wear_update, MaterialParams, SandpaperState, SurfaceGeometry, SurfaceGrid, SurfaceShape, ToolContact,
};

type Outcome = Result<String, String>;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn scenario(name: &str) -> Scenario {
    Scenario::from_path(&root().join("scenarios").join(name)).unwrap()
}

fn script(name: &str) -> OperatorScript {
    OperatorScript::from_path(&root().join("scenarios").join(name)).unwrap()
}

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    check(elapsed.as_secs_f64() < limit_s, format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64()))
}

fn random_interior(rng: &mut impl Rng, b: &SafetyBox) -> CommandVector {
    CommandVector::from_array(std::array::from_fn(|i| {
        let [lo, hi] = b.bounds()[i];
        rng.random_range(lo..=hi)
    }))
}

fn random_input(rng: &mut impl Rng) -> CorrectionInput {
    if rng.random_bool(0.5) {
        CorrectionInput::coupled(rng.random_range(-1.0..=1.0))
    } else {
        CorrectionInput::independent(std::array::from_fn(|_| rng.random_range(-1.0..=1.0)))
    }
}

fn correction_suite() -> Outcome {
    let start = Instant::now();
    let (sat, w, b) = (SaturationSet::default(), CouplingWeights::default(), SafetyBox::default());
    let s = sat.to_array();
    let full = map_correction(&CorrectionInput::coupled(1.0), &sat, &w).to_array();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut violations = Vec::new();
    let cases = 10_000;
    for case in 0..cases {
        let x = random_interior(&mut rng, &b);
        let neutral = command(&x, &CorrectionInput::neutral(), &sat, &w, &b);
        if neutral.to_array().map(f64::to_bits) != x.to_array().map(f64::to_bits) {
            violations.push(format!("case {case}: neutral input moved the command"));
        }

        let input = random_input(&mut rng);
        let out = command(&x, &input, &sat, &w, &b).to_array();
        let xa = x.to_array();
        for i in 0..4 {
            if (out[i] - xa[i]).abs() > s[i] * (1.0 + 1e-12) {
                violations.push(format!("case {case}: axis {i} moved beyond its saturation"));
            }
        }
        if !b.contains(&CommandVector::from_array(out)) {
            violations.push(format!("case {case}: command left the safety box"));
        }

        let u: f64 = rng.random_range(-1.0..=1.0);
        let d = map_correction(&CorrectionInput::coupled(u), &sat, &w).to_array();
        if (0..4).any(|i| (d[i] - u * full[i]).abs() > 1e-15) {
            violations.push(format!("case {case}: coupled correction off the weight line"));
        }

        let axis = rng.random_range(0..4);
        let (a, c): (f64, f64) = (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
        let (lo, hi) = (a.min(c), a.max(c));
        let at = |v: f64| {
            let mut axes = [0.0; 4];
            axes[axis] = v;
            arbitrate(&x, &map_correction(&CorrectionInput::independent(axes), &sat, &w), &b).to_array()[axis]
        };
        let (yl, yh) = (at(lo), at(hi));
        if yl > yh {
            violations.push(format!("case {case}: axis {axis} not monotone"));
        }
        if yh - yl > s[axis] * (hi - lo) + 1e-12 {
            violations.push(format!("case {case}: axis {axis} jumps"));
        }
    }
    check(violations.is_empty(), format!("{} violations, first: {}", violations.len(), violations.first().map_or("", |v| v)))?;
    within(start.elapsed(), 5.0)?;
    Ok(format!("{cases} cases, 0 violations, {:.2}s", start.elapsed().as_secs_f64()))
}

fn random_config(robot: &RobotModel, rng: &mut impl Rng) -> JointConfig {
    JointConfig(robot.joint_limits.iter().map(|&[lo, hi]| rng.random_range(lo..hi)).collect())
}

fn kinematics_suite() -> Outcome {
    let start = Instant::now();
    let robot = RobotModel::franka();
    let cfg = IkConfig::default();
    let seeds = robot.default_seeds();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let targets = 500;
    let mut solved = 0;
    for _ in 0..targets {
        let target = robot.forward_kinematics(&random_config(&robot, &mut rng)).unwrap();
        let hit = seeds.iter().find_map(|seed| match solve_ik(&robot, &target, seed, &cfg).unwrap() {
            IkOutcome::Converged(sol) => Some(sol),
            IkOutcome::NotReachable => None,
        });
        if let Some(sol) = hit {
            let (dp, da) = robot.forward_kinematics(&sol.q).unwrap().distance_to(&target);
            if dp < 1e-3 && da < 1e-2 {
                solved += 1;
            }
        }
    }
    let rate = solved as f64 / targets as f64;
    check(rate >= 0.99, format!("IK success {solved}/{targets}"))?;

    // A panel large enough to straddle the workspace boundary.
    let geom = SurfaceGeometry { shape: SurfaceShape::Cylinder { radius_m: 0.7 }, width_m: 1.4, height_m: 1.0 };
    let pose = Pose::from_parts_scaled_axis([0.55, 0.0, 0.1].into(), [0.0, 0.0, 0.3].into());
    let grid = SurfaceGrid::new("wide", geom, 0.01, 0.0, pose).unwrap();
    let [hu, hv] = geom.half_extent();
    let points: Vec<_> = (0..1000)
        .map(|_| {
            let uv = [rng.random_range(-hu..hu), rng.random_range(-hv..hv)];
            grid.surface_target(uv, Some([1.0, 0.0]))
        })
        .collect();
    let standoff = Pose::identity();
    let statuses = Reachability::new(&robot).grid(&points, &standoff, Parallelism::default()).unwrap();
    let mut mismatches = 0;
    for (p, st) in points.iter().zip(&statuses) {
        let pose = tool_pose_for_surface(&p.point, &p.normal, p.tangent.as_ref()) * standoff;
        if is_reachable(&robot, &pose, &seeds, &cfg).unwrap() != *st {
            mismatches += 1;
        }
    }
    let reachable = statuses.iter().filter(|s| s.is_reachable()).count();
    check(mismatches == 0, format!("{mismatches} grid points disagree with point-wise reachability"))?;
    check(reachable > 0 && reachable < 1000, format!("grid not mixed ({reachable} reachable)"))?;
    within(start.elapsed(), 60.0)?;
    Ok(format!(
        "IK {solved}/{targets}, grid 1000/1000 consistent ({reachable} reachable), {:.1}s",
        start.elapsed().as_secs_f64()
    ))
}

fn random_nudge(rng: &mut impl Rng, max_t: f64, max_r: f64) -> PoseNudge {
    let unit = |rng: &mut ChaCha8Rng| loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 && n <= 1.0 {
            break v.map(|x| x / n);
        }
    };
    let mut r = ChaCha8Rng::seed_from_u64(rng.random());
    let (t, a) = (rng.random_range(0.0..=max_t), rng.random_range(0.0..=max_r));
    PoseNudge { translation_m: unit(&mut r).map(|x| x * t), rotation_rad: unit(&mut r).map(|x| x * a) }
}

fn registration_suite() -> Outcome {
    let start = Instant::now();
    let mut sc = scenario("structured_panel.json");
    let robot = sc.load_robot(None).unwrap();
    let geometry = *sc.geometry(&sc.workpiece.geometry_id).unwrap();

    sc.scan.noise_sigma_m = 0.0;
    let mut s = Session::new(sc.clone(), robot.clone(), 0).unwrap();
    s.apply(&OperatorAction::Scan).unwrap();
    let truth = s.grid.object_pose;
    let fixed = auto_register(s.last_scan().unwrap(), &geometry, &truth, &sc.registration).unwrap();
    let (dp0, da0) = fixed.object_pose.distance_to(&truth);
    check(dp0 < 1e-6 && da0 < 1e-6, format!("zero-noise fixed point moved {dp0:.2e} m / {da0:.2e} rad"))?;

    sc.scan.noise_sigma_m = 0.002;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let trials = 50;
    let (mut good, mut monotone) = (0, 0);
    let mut worst = (0.0f64, 0.0f64);
    for trial in 0..trials {
        let mut s = Session::new(sc.clone(), robot.clone(), 1000 + trial).unwrap();
        s.apply(&OperatorAction::Scan).unwrap();
        let truth = s.grid.object_pose;
        let init = random_nudge(&mut rng, 0.020, 5f64.to_radians()).apply(&truth);
        let r = auto_register(s.last_scan().unwrap(), &geometry, &init, &sc.registration).unwrap();
        let (dp, da) = r.object_pose.distance_to(&truth);
        worst = (worst.0.max(dp), worst.1.max(da));
        if dp < 0.005 && da < 2f64.to_radians() {
            good += 1;
        }
        if r.residual_history.windows(2).all(|w| w[1] <= w[0]) {
            monotone += 1;
        }
    }
    check(good * 10 >= trials * 9, format!("{good}/{trials} trials within 5 mm / 2 deg"))?;
    check(monotone == trials, format!("residual rose in {} trials", trials - monotone))?;
    within(start.elapsed(), 120.0)?;
    Ok(format!(
        "fixed point {dp0:.1e} m; {good}/{trials} within 5 mm/2 deg (worst {:.2} mm, {:.2} deg); residuals monotone; {:.1}s",
        worst.0 * 1e3,
        worst.1.to_degrees(),
        start.elapsed().as_secs_f64()
    ))
}

/// Dwell under wear: efficiency falls linearly, so removal integrates to
/// `k * p * v * (t - t^2 / (2 T))` from a fresh disc while above the floor.
fn dwell_error() -> f64 {
    let params = MaterialParams::default();
    let geom = SurfaceGeometry { shape: SurfaceShape::Flat, width_m: 0.3, height_m: 0.3 };
    let mut g = SurfaceGrid::new("plate", geom, params.cell_size_m(), 100.0, Pose::identity()).unwrap();
    let force = 12.0;
    let contact = ToolContact {
        center_uv: [0.0, 0.0],
        heading_uv: [1.0, 0.0],
        normal_force_n: force,
        tangential_speed_mm_s: 0.0,
        pitch_rad: 0.0,
        engaged: true,
    };
    let mut paper = SandpaperState::fresh();
    let (dt, steps) = (0.02, 250);
    for _ in 0..steps {
        removal_step(&mut g, &contact, &paper, dt, &params).unwrap();
        paper = wear_update(&paper, dt, true, &params).unwrap();
    }
    let r = params.disc_radius_mm;
    let t = dt * steps as f64;
    // Each step removes at the efficiency it started with; the step sum of the
    // linear decay is exact.
    let eta_integral = t - (t * t - dt * t) / (2.0 * params.wear_time_s);
    let analytic = params.k_preston() * force / (std::f64::consts::PI * r * r) * params.orbital_speed_mm_s * eta_integral;
    let mut worst: f64 = 0.0;
    for uv in [[0.0005, 0.0005], [0.03, -0.01], [-0.02, 0.04]] {
        let (i, j) = g.cell_at(uv[0], uv[1]).unwrap();
        let removed = 100.0 - g.coating_um[g.index(i, j)];
        worst = worst.max((removed - analytic).abs() / analytic);
    }
    worst
}

fn material_episode(seed: u64, shape: SurfaceShape) -> Result<(), String> {
    let params = MaterialParams { wear_time_s: 40.0, ..MaterialParams::default() };
    let geom = SurfaceGeometry { shape, width_m: 0.2, height_m: 0.14 };
    let mut g = SurfaceGrid::new("p", geom, 0.002, 100.0, Pose::identity()).unwrap();
    let initial = g.total_coating_volume_mm3();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut paper = SandpaperState::fresh();
    let [hu, hv] = geom.half_extent();
    let mut c = [0.0f64, 0.0];
    for tick in 0..10_000 {
        c = [
            (c[0] + rng.random_range(-0.004..0.004)).clamp(-hu, hu),
            (c[1] + rng.random_range(-0.004..0.004)).clamp(-hv, hv),
        ];
        let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let contact = ToolContact {
            center_uv: c,
            heading_uv: [a.cos(), a.sin()],
            normal_force_n: rng.random_range(0.0..40.0),
            tangential_speed_mm_s: rng.random_range(0.0..150.0),
            pitch_rad: rng.random_range(-params.pitch_max_rad..=params.pitch_max_rad),
            engaged: rng.random_bool(0.9),
        };
        let dt = rng.random_range(0.001..0.05);
        let before = g.coating_um.clone();
        removal_step(&mut g, &contact, &paper, dt, &params).map_err(|e| e.to_string())?;
        if !g.coating_um.iter().zip(&before).all(|(now, was)| now <= was && *now >= 0.0) {
            return Err(format!("seed {seed} tick {tick}: coating rose or went negative"));
        }
        paper = if rng.random_bool(0.001) {
            change_sandpaper(&paper)
        } else {
            let next = wear_update(&paper, dt, contact.engaged, &params).map_err(|e| e.to_string())?;
            if next.efficiency > paper.efficiency || next.efficiency < params.eta_min {
                return Err(format!("seed {seed} tick {tick}: efficiency not monotone"));
            }
            next
        };
    }
    let booked = g.removed_volume_mm3;
    let actual = initial - g.total_coating_volume_mm3();
    check((actual - booked).abs() <= 1e-6 * booked.max(1.0), format!("seed {seed}: booked {booked} vs {actual} mm^3"))
}

fn material_suite() -> Outcome {
    let start = Instant::now();
    let err = dwell_error();
    check(err < 0.01, format!("dwell removal off the analytic integral by {:.3}%", err * 100.0))?;
    let shapes = [
        SurfaceShape::Flat,
        SurfaceShape::Cylinder { radius_m: 0.3 },
        SurfaceShape::Cylinder { radius_m: -0.3 },
    ];
    let mut episodes = 0;
    for (k, shape) in shapes.into_iter().enumerate() {
        for seed in 0..3 {
            material_episode(100 * k as u64 + seed, shape)?;
            episodes += 1;
        }
    }
    Ok(format!(
        "dwell error {:.3}%; {episodes} episodes x 10000 ticks clean; {:.1}s",
        err * 100.0,
        start.elapsed().as_secs_f64()
    ))
}

fn statuses(session: &Session) -> Vec<SegmentStatus> {
    session.program.as_ref().map(|p| p.statuses()).unwrap_or_default()
}

fn structured_end_to_end() -> Outcome {
    let start = Instant::now();
    let sc = scenario("structured_panel.json");
    let full = script("structured_panel.script.json");
    let split = full
        .steps
        .iter()
        .position(|s| matches!(s, ScriptStep::Action(OperatorAction::Reposition { .. })))
        .ok_or("script has no reposition")?;
    let part = |steps: &[ScriptStep]| OperatorScript { steps: steps.to_vec() };

    let robot = sc.load_robot(None).unwrap();
    let mut driver = Driver::new(Session::new(sc.clone(), robot, sc.seed).unwrap());
    play(&mut driver, &part(&full.steps[..split])).map_err(|e| e.to_string())?;
    let first = statuses(&driver.session);
    let unreachable: Vec<usize> = (0..first.len()).filter(|&i| first[i] == SegmentStatus::Unreachable).collect();
    let completed: Vec<usize> = (0..first.len()).filter(|&i| first[i] == SegmentStatus::Completed).collect();
    check(!unreachable.is_empty(), "no segment is unreachable in the first configuration")?;

    play(&mut driver, &part(&full.steps[split..=split])).map_err(|e| e.to_string())?;
    let moved = statuses(&driver.session);
    check(completed.iter().all(|&i| moved[i] == SegmentStatus::Completed), "completed segments lost on reposition")?;

    play(&mut driver, &part(&full.steps[split + 1..])).map_err(|e| e.to_string())?;
    let session = driver.into_session();
    let last = statuses(&session);
    check(unreachable.iter().all(|&i| last[i] == SegmentStatus::Completed), "unreachable segments not completed after reposition")?;
    check(completed.iter().all(|&i| last[i] == SegmentStatus::Completed), "completed segments reopened")?;
    let removed = session.coverage().removed_fraction;
    check(removed >= 0.95, format!("removed_fraction {removed:.4}"))?;

    let a = run_headless(&sc, &full, sc.seed, None).map_err(|e| e.to_string())?;
    let b = run_headless(&sc, &full, sc.seed, None).map_err(|e| e.to_string())?;
    let bytes = |r: &sandbot_core::script::HeadlessRun| {
        (r.log.to_jsonl(), serde_json::to_string(&r.metrics).unwrap())
    };
    check(bytes(&a) == bytes(&b), "repeat runs differ")?;
    check(a.log.removal_only_while_executing(), "material changed outside execution")?;
    check(a.log.to_jsonl() == session.log.to_jsonl(), "split playback differs from the whole script")?;
    within(start.elapsed(), 300.0)?;
    Ok(format!(
        "removed_fraction {removed:.4}; {} unreachable segments completed after reposition; {} completed kept; replay identical; {:.1}s",
        unreachable.len(),
        completed.len(),
        start.elapsed().as_secs_f64()
    ))
}

fn unstructured_end_to_end() -> Outcome {
    let start = Instant::now();
    let sc = scenario("unstructured_plate.json");
    let robot = sc.load_robot(None).unwrap();
    let main = script("unstructured_plate.script.json");

    // Waypoint spacing check right after the markers are placed.
    let until_markers = main
        .steps
        .iter()
        .position(|s| matches!(s, ScriptStep::Action(OperatorAction::SetMarkers { .. })))
        .ok_or("script sets no markers")?;
    let mut driver = Driver::new(Session::new(sc.clone(), robot, sc.seed).unwrap());
    play(&mut driver, &OperatorScript { steps: main.steps[..=until_markers].to_vec() }).map_err(|e| e.to_string())?;
    let s = &driver.session;
    let mask = s.quad_mask().ok_or("no quad after markers")?;
    let waypoints: Vec<[f64; 2]> =
        s.program.iter().flat_map(|p| &p.segments).flat_map(|seg| seg.waypoints.iter().map(|w| w.uv)).collect();
    let r = sc.calibration.disc_radius_m();
    let mut far = 0;
    let mut cells = 0;
    for idx in (0..s.grid.len()).filter(|&i| mask[i]) {
        cells += 1;
        let c = s.grid.cell_uv_index(idx);
        let near = waypoints.iter().any(|w| (w[0] - c[0]).hypot(w[1] - c[1]) <= r);
        far += usize::from(!near);
    }
    check(far == 0, format!("{far}/{cells} quad cells farther than r from every waypoint"))?;

    let run = run_headless(&sc, &main, sc.seed, None).map_err(|e| e.to_string())?;
    check(run.log.removal_only_while_executing(), "material changed outside execution")?;
    let quad = run.metrics.quad_coverage.ok_or("no quad coverage")?;
    check(quad.removed_fraction >= 0.99, format!("quad removed_fraction {:.4}", quad.removed_fraction))?;

    let under = |name: &str| -> Result<f64, String> {
        let r = run_headless(&sc, &script(name), sc.seed, None).map_err(|e| e.to_string())?;
        Ok(r.metrics.quad_coverage.ok_or("no quad coverage")?.undersand_area_m2)
    };
    let baseline = under("unstructured_plate.baseline.script.json")?;
    let backtrack = under("unstructured_plate.backtrack.script.json")?;
    check(backtrack < baseline, format!("backtrack undersand {backtrack:.4} m^2 vs baseline {baseline:.4} m^2"))?;
    within(start.elapsed(), 180.0)?;
    Ok(format!(
        "{cells} quad cells within r of a waypoint; quad removed_fraction {:.4}; undersand {baseline:.4} -> {backtrack:.4} m^2; {:.1}s",
        quad.removed_fraction,
        start.elapsed().as_secs_f64()
    ))
}

type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

struct Client {
    ws: Ws,
    seq: u64,
}

impl Client {
    async fn send(&mut self, message: ClientMessage) {
        use futures::SinkExt;
        self.seq += 1;
        let env = ClientEnvelope { protocol_version: PROTOCOL_VERSION, session_id: "acceptance".into(), seq: self.seq, message };
        let text = serde_json::to_string(&env).unwrap();
        self.ws.send(tokio_tungstenite::tungstenite::Message::text(text)).await.unwrap();
    }

    async fn wait_phase(&mut self, phase: Phase) -> Result<(), String> {
        use futures::StreamExt;
        loop {
            let frame = tokio::time::timeout(Duration::from_secs(120), self.ws.next())
                .await
                .map_err(|_| format!("timed out waiting for {phase:?}"))?
                .ok_or("socket closed")?
                .map_err(|e| e.to_string())?;
            if let tokio_tungstenite::tungstenite::Message::Text(t) = frame {
                let env: ServerEnvelope = serde_json::from_str(&t).map_err(|e| e.to_string())?;
                if let ServerMessage::StateSnapshot { snapshot, .. } = env.message {
                    if snapshot.phase == phase {
                        return Ok(());
                    }
                }
            }
        }
    }
}

/// Drives the unstructured demo over the websocket with a 30 Hz correction
/// stream, then replays the recorded journal headless.
async fn live_session(dir: &Path) -> Result<(Session, String, Scenario), String> {
    let path = root().join("scenarios/unstructured_plate.json");
    let (sc, robot) = load_scenario(&path).map_err(|e| e.to_string())?;
    let main = script("unstructured_plate.script.json");
    let find = |f: fn(&OperatorAction) -> bool| {
        main.steps.iter().find_map(|s| match s {
            ScriptStep::Action(a) if f(a) => Some(a.clone()),
            _ => None,
        })
    };
    let markers = find(|a| matches!(a, OperatorAction::SetMarkers { .. })).ok_or("no markers")?;
    let params = find(|a| matches!(a, OperatorAction::SetParameters { .. })).ok_or("no parameters")?;

    let session = Session::new(sc.clone(), robot, sc.seed).map_err(|e| e.to_string())?;
    let config = GatewayConfig {
        session_id: "acceptance".into(),
        record: Some(dir.join("journal.jsonl")),
        events: Some(dir.join("events.jsonl")),
        snapshot_every: 10,
        pace: 40.0,
    };
    let handle = serve(session, "127.0.0.1:0".parse().unwrap(), config).await.map_err(|e| e.to_string())?;
    let (ws, _) = tokio_tungstenite::connect_async(format!("ws://{}/ws", handle.addr)).await.map_err(|e| e.to_string())?;
    let mut c = Client { ws, seq: 0 };
    let action = |a: OperatorAction| ClientMessage::PhaseAction { action: a };
    c.send(action(OperatorAction::Scan)).await;
    c.send(action(OperatorAction::ScanComplete)).await;
    c.send(action(markers)).await;
    c.send(action(params)).await;
    c.wait_phase(Phase::ReachabilityReview).await?;
    c.send(action(OperatorAction::Start)).await;
    c.wait_phase(Phase::Executing).await?;
    let mut tick = tokio::time::interval(Duration::from_millis(33));
    for i in 0..90 {
        tick.tick().await;
        let u = 0.6 * (i as f64 * 0.2).sin();
        let input = if i % 30 < 20 { CorrectionInput::coupled(u) } else { CorrectionInput::independent([0.0, 0.0, u, 0.0]) };
        c.send(ClientMessage::CorrectionStream { input }).await;
    }
    c.send(ClientMessage::CorrectionStream { input: CorrectionInput::neutral() }).await;
    c.wait_phase(Phase::Complete).await?;
    c.ws.close(None).await.map_err(|e| e.to_string())?;
    tokio::time::sleep(Duration::from_millis(100)).await;
    let live = handle.shutdown().await.map_err(|e| e.to_string())?;
    let events = std::fs::read_to_string(dir.join("events.jsonl")).map_err(|e| e.to_string())?;
    Ok((live, events, sc))
}

fn replay_suite() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(|e| e.to_string())?;
    let (live, events, sc) = rt.block_on(live_session(dir.path()))?;
    check(events == live.log.to_jsonl(), "events file differs from the live log")?;
    let consumed = live.log.named("correction_consumed").count();
    check(consumed >= 20, format!("only {consumed} corrections consumed"))?;

    let journal = Journal::parse(&std::fs::read_to_string(dir.path().join("journal.jsonl")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let robot = sc.load_robot(None).unwrap();
    let replayed = replay(&sc, robot, sc.seed, &journal, Parallelism::Sequential).map_err(|e| e.to_string())?;
    check(replayed.log.to_jsonl() == events, "replayed event log differs from the live one")?;
    check(replayed.grid == live.grid, "replayed coating differs")?;
    Ok(format!(
        "{} events, {} journal lines, {consumed} corrections consumed; replay identical; {:.1}s",
        live.log.len(),
        journal.lines.len(),
        start.elapsed().as_secs_f64()
    ))
}

fn main() -> ExitCode {
    type Suite = (&'static str, fn() -> Outcome);
    let suites: [Suite; 7] = [
        ("correction mapping and arbitration", correction_suite),
        ("inverse kinematics and reachability", kinematics_suite),
        ("registration", registration_suite),
        ("material removal", material_suite),
        ("structured end-to-end", structured_end_to_end),
        ("unstructured end-to-end", unstructured_end_to_end),
        ("live session replay", replay_suite),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, suite) in suites {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        match std::panic::catch_unwind(suite) {
            Ok(Ok(detail)) => println!("PASS {name}: {detail}"),
            Ok(Err(why)) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
            Err(_) => {
                failed += 1;
                println!("FAIL {name}: panicked");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
