use candle_core::{DType, Device, Tensor};
use oogan_core::checkpoint::{checkpoint_path, load_checkpoint, load_models};
use oogan_core::config::TrainConfig;
use oogan_core::critic::QMode;
use oogan_core::data::{synth_factors, FactorDataset, SynthSpec};
use oogan_core::generator::ImageGenerator;
use oogan_core::trainer::{train, RunLayout, TrainState};

fn config() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        iterations: 6,
        img_size: 16,
        img_channels: 1,
        d: 3,
        n_z: 4,
        g_channels: Some(vec![8, 8, 4]),
        d_channels: Some(vec![4, 8, 9]),
        q_branch_level: 1,
        q_mode: QMode::Probabilistic,
        snapshot_every: 3,
        log_every: 2,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn data() -> FactorDataset {
    synth_factors(&SynthSpec {
        img_size: 16,
        positions_x: 4,
        positions_y: 4,
        sizes: 2,
        brightness: 2,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn probe_inputs() -> (Tensor, Tensor) {
    let c = Tensor::new(&[[0.1f32, 0.5, 0.9], [1.0, 0.0, 0.3]], &Device::Cpu).unwrap();
    let z = Tensor::new(&[[0.2f32, -1.0, 0.7, 0.0], [-0.4, 0.3, 1.2, -0.8]], &Device::Cpu).unwrap();
    (c, z)
}

fn flat(t: &Tensor) -> Vec<f32> {
    t.to_dtype(DType::F32).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

#[test]
fn run_directory_holds_echo_csv_and_snapshots() {
    let ds = data();
    let dir = tempfile::tempdir().unwrap();
    let run = RunLayout::new(dir.path());
    let mut state = TrainState::new(config(), ds.len()).unwrap();
    let summary = train(&mut state, &ds, &run).unwrap();

    assert_eq!(TrainConfig::load(&run.config_echo()).unwrap(), config());
    let csv = std::fs::read_to_string(run.metrics_csv()).unwrap();
    // Header plus iterations 2, 4 and 6.
    assert_eq!(csv.lines().count(), 4);
    for i in [3, 6] {
        assert!(checkpoint_path(&run.checkpoints(), i).is_file());
    }
    assert_eq!(summary.final_checkpoint, checkpoint_path(&run.checkpoints(), 6));
}

#[test]
fn loaded_models_render_like_the_trained_ones() {
    let ds = data();
    let dir = tempfile::tempdir().unwrap();
    let run = RunLayout::new(dir.path());
    let mut state = TrainState::new(config(), ds.len()).unwrap();
    let summary = train(&mut state, &ds, &run).unwrap();

    let (c, z) = probe_inputs();
    let (cfg, generator, _) = load_models(&summary.final_checkpoint).unwrap();
    assert_eq!(cfg, config());
    assert_eq!(flat(&generator.render(&c, &z).unwrap()), flat(&state.generator().render(&c, &z).unwrap()));
}

#[test]
fn resumed_run_appends_to_the_same_csv() {
    let ds = data();
    let dir = tempfile::tempdir().unwrap();
    let run = RunLayout::new(dir.path());
    let mut state = TrainState::new(TrainConfig { iterations: 3, ..config() }, ds.len()).unwrap();
    let first = train(&mut state, &ds, &run).unwrap();

    let mut resumed = load_checkpoint(&first.final_checkpoint).unwrap();
    assert_eq!(resumed.iteration(), 3);
    resumed.extend_to(6).unwrap();
    assert!(resumed.extend_to(2).is_err());
    train(&mut resumed, &ds, &run).unwrap();

    let csv = std::fs::read_to_string(run.metrics_csv()).unwrap();
    let header = csv.lines().next().unwrap();
    assert_eq!(csv.lines().filter(|l| *l == header).count(), 1);
    // Rows for 2 and 3 (end of the first leg), then 4 and 6.
    assert_eq!(csv.lines().count(), 5);
    assert!(checkpoint_path(&run.checkpoints(), 6).is_file());
}
