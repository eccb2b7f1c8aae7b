use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::sync::Arc;

use cicada_core::catalog::{
    generate_model, parse_weight_shard, write_weight_files, CostProfile, Manifest, ManifestEntry, ModelDescriptor,
    ModelFamily, WeightShard,
};
use cicada_core::decoupler::{DiskDelay, EngineConfig, RetrievalError};
use cicada_core::metrics::{Stage, StageInterval};
use cicada_core::pipeline::{
    InferenceRequest, PipelineError, Runtime, RuntimeConfig, SimConfig, Simulator, StrategyConfig,
};
use cicada_core::scheduler::Action;
use tempfile::TempDir;

struct Fixture {
    _dir: TempDir,
    model: Arc<ModelDescriptor>,
    weights: Arc<Manifest>,
}

fn fixture(family: ModelFamily, layers: u32, profile: &CostProfile) -> Fixture {
    let model = generate_model(family, layers, 17, profile).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let weights = write_weight_files(&model, 23, dir.path()).unwrap();
    Fixture { _dir: dir, model: Arc::new(model), weights: Arc::new(weights) }
}

fn small_profile() -> CostProfile {
    CostProfile { custom_kernel: (6, 4), jitter: 0.3, ..CostProfile::default() }
}

fn request(f: &Fixture, id: u64, arrival: u64) -> InferenceRequest {
    let input = (0..f.model.input_len()).map(|i| (i as f32 + 1.0) * 0.25 - id as f32 * 0.1).collect();
    InferenceRequest {
        request_id: id,
        model: Arc::clone(&f.model),
        weights: Arc::clone(&f.weights),
        input,
        arrival_ts: arrival,
        init_seed: 5,
    }
}

fn find(events: &[StageInterval], stage: Stage, layer: usize) -> StageInterval {
    *events
        .iter()
        .find(|e| e.stage == stage && e.layer_index as usize == layer)
        .unwrap_or_else(|| panic!("missing {stage} {layer}"))
}

/// Reference forward pass straight from the files on disk.
fn reference_output(f: &Fixture, input: &[f32]) -> Vec<f32> {
    let mut x = input.to_vec();
    for spec in &f.model.layers {
        let bytes = fs::read(f.weights.file_path(spec.layer_index).unwrap()).unwrap();
        let w: Vec<f32> = parse_weight_shard(&bytes).unwrap().values().collect();
        let (rows, cols) = (spec.kernel_rows as usize, spec.kernel_cols as usize);
        let mut y = vec![0f32; rows];
        for r in 0..rows {
            let mut acc = 0f32;
            for c in 0..cols {
                acc += w[r * cols + c] * x[c];
            }
            y[r] = acc + w[rows * cols + r];
        }
        x = y;
    }
    x
}

fn check_ordering(events: &[StageInterval], n: usize) {
    for i in 0..n {
        let (l, r, a, e) = (
            find(events, Stage::L, i),
            find(events, Stage::R, i),
            find(events, Stage::A, i),
            find(events, Stage::E, i),
        );
        assert!(l.end <= a.start, "L{i} {l:?} vs A{i} {a:?}");
        assert!(r.end <= a.start, "R{i} {r:?} vs A{i} {a:?}");
        assert!(a.end <= e.start, "A{i} vs E{i}");
        if i > 0 {
            assert!(find(events, Stage::A, i - 1).end <= a.start, "A{} vs A{i}", i - 1);
            assert!(find(events, Stage::E, i - 1).end <= e.start, "E{} vs E{i}", i - 1);
        }
    }
}

#[test]
fn identity_layer_returns_its_input() {
    let profile = CostProfile { custom_kernel: (1, 1), ..CostProfile::default() };
    let model = generate_model(ModelFamily::Custom, 1, 0, &profile).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let shard = WeightShard::from_values(0, &[1.0, 0.0]);
    fs::write(dir.path().join("id.cica"), shard.to_bytes()).unwrap();
    let manifest = Manifest {
        dir: dir.path().to_path_buf(),
        entries: vec![ManifestEntry {
            path: "id.cica".into(),
            layer_index: 0,
            element_count: 2,
            crc32: shard.checksum,
        }],
    };
    let f = Fixture { _dir: dir, model: Arc::new(model), weights: Arc::new(manifest) };
    for strategy in StrategyConfig::ALL {
        let mut req = request(&f, 0, 0);
        req.input = vec![3.5];
        let out = Simulator::new(SimConfig::for_strategy(strategy)).run(vec![req]);
        let res = out.results[0].as_ref().unwrap();
        assert_eq!(res.output, vec![3.5], "{}", strategy.name);
    }
}

#[test]
fn every_strategy_matches_the_reference_bit_for_bit() {
    let f = fixture(ModelFamily::Custom, 5, &small_profile());
    let reqs: Vec<_> = (0..3).map(|i| request(&f, i, i * 700)).collect();
    for strategy in StrategyConfig::ALL {
        let out = Simulator::new(SimConfig::for_strategy(strategy)).run(reqs.clone());
        for (req, res) in reqs.iter().zip(&out.results) {
            let res = res.as_ref().unwrap();
            let want = reference_output(&f, &req.input);
            assert_eq!(
                res.output.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                want.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                "{}",
                strategy.name
            );
            check_ordering(&res.events, 5);
        }
    }
}

#[test]
fn sp_retrieves_each_layer_after_the_previous_apply() {
    let f = fixture(ModelFamily::VGGLike, 6, &CostProfile::default());
    let out = Simulator::new(SimConfig::for_strategy(StrategyConfig::SP)).run(vec![request(&f, 0, 0)]);
    let ev = &out.results[0].as_ref().unwrap().events;
    for i in 1..6 {
        assert!(find(ev, Stage::R, i).start >= find(ev, Stage::A, i - 1).end);
        assert!(find(ev, Stage::R, i).start >= find(ev, Stage::L, i).end);
    }
    assert!(out.decisions.is_empty());
}

#[test]
fn decoupled_retrieval_starts_at_admission() {
    let f = fixture(ModelFamily::VGGLike, 6, &CostProfile::default());
    let out = Simulator::new(SimConfig::for_strategy(StrategyConfig::PRELOAD)).run(vec![request(&f, 0, 40)]);
    let ev = &out.results[0].as_ref().unwrap().events;
    assert_eq!(find(ev, Stage::R, 0).start, 40);
    assert_eq!(find(ev, Stage::L, 0).start, 40);
}

#[test]
fn out_of_order_retrieval_still_applies_in_order() {
    let f = fixture(ModelFamily::Custom, 4, &small_profile());
    let mut cfg = SimConfig::for_strategy(StrategyConfig::CICADA);
    cfg.max_parallel_reads = 4;
    cfg.disk_delay = DiskDelay::PerLayer(BTreeMap::from([(0, 50_000)]));
    // boosting would hold layers 1..3 behind the late layer 0
    cfg.scheduler.enabled = false;
    let out = Simulator::new(cfg).run(vec![request(&f, 0, 0)]);
    let res = out.results[0].as_ref().unwrap();
    assert!(find(&res.events, Stage::R, 1).end < find(&res.events, Stage::R, 0).end);
    check_ordering(&res.events, 4);
    assert_eq!(res.output, reference_output(&f, &request(&f, 0, 0).input));
}

#[test]
fn stall_boosts_are_not_repeated() {
    let f = fixture(ModelFamily::Custom, 6, &small_profile());
    let mut cfg = SimConfig::for_strategy(StrategyConfig::CICADA);
    cfg.disk_delay = DiskDelay::Seeded { seed: 3, max_us: 20_000 };
    let reqs: Vec<_> = (0..4).map(|i| request(&f, i, i * 100)).collect();
    let out = Simulator::new(cfg).run(reqs);
    assert!(out.results.iter().all(Result::is_ok));
    let mut seen = HashSet::new();
    for d in out.decisions.iter().filter(|d| d.action == Action::StallBoost) {
        assert!(seen.insert((d.request_id, d.layer_index)), "repeated stall boost {d:?}");
    }
    assert!(out.decisions.iter().any(|d| d.action != Action::Resume));
}

#[test]
fn missing_file_fails_only_its_request() {
    let f = fixture(ModelFamily::Custom, 3, &small_profile());
    fs::remove_file(f.weights.file_path(1).unwrap()).unwrap();
    let other = fixture(ModelFamily::Custom, 3, &small_profile());
    for strategy in StrategyConfig::ALL {
        let out = Simulator::new(SimConfig::for_strategy(strategy)).run(vec![request(&f, 0, 0), request(&other, 1, 0)]);
        let err = &out.results[0].as_ref().unwrap_err().error;
        assert!(
            matches!(err, PipelineError::Retrieval { layer: 1, source: RetrievalError::NotFound(_) }),
            "{}: {err}",
            strategy.name
        );
        assert!(out.results[1].is_ok(), "{}", strategy.name);
        assert_eq!(out.memory.net_bytes(0), 0);
    }
}

#[test]
fn corrupt_file_is_reported() {
    let f = fixture(ModelFamily::Custom, 2, &small_profile());
    let path = f.weights.file_path(0).unwrap();
    let mut bytes = fs::read(&path).unwrap();
    *bytes.last_mut().unwrap() ^= 1;
    fs::write(&path, bytes).unwrap();
    let out = Simulator::new(SimConfig::default()).run(vec![request(&f, 0, 0)]);
    let err = &out.results[0].as_ref().unwrap_err().error;
    assert!(matches!(err, PipelineError::Retrieval { layer: 0, source: RetrievalError::Corrupt { .. } }), "{err}");
}

#[test]
fn wrong_input_length_is_rejected() {
    let f = fixture(ModelFamily::Custom, 2, &small_profile());
    let mut req = request(&f, 0, 0);
    req.input.push(1.0);
    let out = Simulator::new(SimConfig::default()).run(vec![req]);
    assert!(matches!(out.results[0].as_ref().unwrap_err().error, PipelineError::InputLength { .. }));
}

#[test]
fn simulation_is_deterministic() {
    let f = fixture(ModelFamily::ResNetLike, 8, &CostProfile::default());
    let reqs: Vec<_> = (0..5).map(|i| request(&f, i, i * 3_000)).collect();
    let cfg = SimConfig { disk_delay: DiskDelay::Seeded { seed: 1, max_us: 4_000 }, ..SimConfig::default() };
    let a = Simulator::new(cfg.clone()).run(reqs.clone());
    let b = Simulator::new(cfg).run(reqs);
    assert_eq!(a.events, b.events);
    assert_eq!(a.decisions, b.decisions);
    assert_eq!(a.memory, b.memory);
}

#[test]
fn decoupled_run_frees_all_memory() {
    let f = fixture(ModelFamily::VGGLike, 6, &CostProfile::default());
    for strategy in StrategyConfig::ALL {
        let out = Simulator::new(SimConfig::for_strategy(strategy)).run(vec![request(&f, 0, 0), request(&f, 1, 10)]);
        assert_eq!(out.memory.net_bytes(0), 0);
        assert_eq!(out.memory.net_bytes(1), 0);
        assert!(out.peak_resident > 0);
    }
}

#[test]
fn realtime_matches_simulation_output() {
    let f = fixture(ModelFamily::Custom, 4, &small_profile());
    let sim = Simulator::new(SimConfig::default()).run(vec![request(&f, 0, 0)]);
    let want = &sim.results[0].as_ref().unwrap().output;
    for strategy in StrategyConfig::ALL {
        let rt = Runtime::start(RuntimeConfig {
            strategy,
            time_scale: 1.0 / 64.0,
            engine: EngineConfig { max_parallel_reads: 2, ..EngineConfig::default() },
            ..RuntimeConfig::default()
        });
        let handles: Vec<_> = (0..3)
            .map(|id| {
                let mut req = request(&f, id, 0);
                req.input = request(&f, 0, 0).input;
                rt.submit(req)
            })
            .collect();
        for h in handles {
            let res = h.wait().unwrap();
            assert_eq!(&res.output, want, "{}", strategy.name);
            check_ordering(&res.events, 4);
            assert!(res.latency > 0);
        }
        assert!((0..3).all(|id| rt.memory().request_bytes(id) == 0));
    }
}

#[test]
fn realtime_missing_file_fails_request() {
    let f = fixture(ModelFamily::Custom, 3, &small_profile());
    fs::remove_file(f.weights.file_path(2).unwrap()).unwrap();
    for strategy in [StrategyConfig::SP, StrategyConfig::CICADA] {
        let rt = Runtime::start(RuntimeConfig { strategy, time_scale: 1.0 / 64.0, ..RuntimeConfig::default() });
        let err = rt.run_request(request(&f, 7, 0)).unwrap_err();
        assert!(matches!(err, PipelineError::Retrieval { layer: 2, .. }), "{err}");
    }
}
