//! Pipeline behaviour on small runs: hard-point mining on the desk-scale
//! reverse Duffing problem, and bit-for-bit reproducibility.

use std::fs;
use std::path::{Path, PathBuf};

use kkl_core::pipeline::{self, load_net, RunConfig};

fn desk_config(seed: u64, out: &Path) -> RunConfig {
    let path =
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/reverse_duffing_desk.toml");
    let mut cfg = RunConfig::load(&path).unwrap().with_seed(seed);
    cfg.out_dir = out.to_path_buf();
    cfg
}

#[test]
fn mining_lowers_the_mined_residual_and_the_certified_bound() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk_config(1, dir.path());
    pipeline::gen_data(&cfg).unwrap();
    pipeline::train(&cfg).unwrap();
    let paths = cfg.paths();
    let before =
        pipeline::certify_residual_of(&cfg, &load_net(&paths.forward_pretrained()).unwrap())
            .unwrap();
    let report = pipeline::finetune(&cfg).unwrap();
    let after = pipeline::certify_residual_of(&cfg, &load_net(&paths.forward()).unwrap()).unwrap();
    let means: Vec<f64> = report.rounds.iter().map(|r| r.mined_mean).collect();
    println!("mined means {means:?}, final {}", report.final_mined_mean);
    println!("certified residual {before:.4e} -> {after:.4e}");
    assert_eq!(report.rounds.len(), 10);
    assert!(report.non_increasing_rounds() >= 8, "{means:?}");
    assert!(after <= before, "{before} -> {after}");
}

fn tiny_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::from_toml_str(
        r#"
        [data.initial]
        lower = [-1.0, -1.0]
        upper = [1.0, 1.0]

        [region]
        kind = "energy_box"
        initial = { lower = [-1.0, -1.0], upper = [1.0, 1.0] }

        [training]
        p = 12
        horizon = 4.0
        collocation_runs = 12
        hidden_layers = 2
        layer_width = 12
        epochs = 2
        finetune_rounds = 2
        pool_size = 256
        finetune_iters = 5
        inverse_epochs = 2
        inverse_samples = 400
        seed = 5
        "#,
    )
    .unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg
}

fn stage_files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let names = [
        "dataset/pairs.csv",
        "dataset/initial.csv",
        "dataset/collocation.csv",
        "dataset/dataset.json",
        "forward_pretrained.json",
        "forward.json",
        "inverse.json",
        "finetune.json",
        "loss_forward.csv",
        "loss_inverse.csv",
    ];
    names
        .iter()
        .map(|n| {
            (
                n.to_string(),
                fs::read(root.join(n)).unwrap_or_else(|e| panic!("{n}: {e}")),
            )
        })
        .collect()
}

#[test]
fn three_stage_training_is_reproducible() {
    let runs: Vec<_> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let cfg = tiny_config(dir.path());
            pipeline::gen_data(&cfg).unwrap();
            pipeline::train(&cfg).unwrap();
            pipeline::finetune(&cfg).unwrap();
            pipeline::train_inverse_stage(&cfg).unwrap();
            let files = stage_files(dir.path());
            (dir, files)
        })
        .collect();
    for ((name, a), (_, b)) in runs[0].1.iter().zip(&runs[1].1) {
        assert!(a == b, "{name} differs between identical runs");
    }
}
