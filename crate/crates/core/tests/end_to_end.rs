use macil_core::eval::evaluate;
use macil_core::features::{load_manifest, Split};
use macil_core::network::NetworkConfig;
use macil_core::synth::{generate_dataset, SynthConfig};
use macil_core::trainer::{fit, TrainConfig};

#[test]
fn zero_noise_training_reaches_ceiling_through_disk_round_trip() {
    let synth = SynthConfig {
        n_videos: 200,
        noise_sigma: 0.0,
        seed: 3,
        ..SynthConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&synth).unwrap().write(dir.path()).unwrap();
    let train = load_manifest(dir.path().join("train.jsonl"), dir.path()).unwrap();
    let test = load_manifest(dir.path().join("test.jsonl"), dir.path()).unwrap();
    assert_eq!((train.split, test.split), (Split::Train, Split::Test));

    let net = NetworkConfig {
        d_model: 32,
        n_heads: 4,
        ffn_dim: 64,
        ..NetworkConfig::new(synth.d_audio, synth.d_visual)
    };
    let config = TrainConfig {
        epochs: 30,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let out = fit(&config, &net, &train.records, None).unwrap();
    let report = evaluate(&out.state.params, &net, &test.records).unwrap();
    assert_eq!(report.frame_ap, Some(1.0), "video accuracy {}", report.video_accuracy);
    assert_eq!(report.video_accuracy, 1.0);
}
