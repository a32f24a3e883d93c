use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use s2rl_cli::{cli_run, EXIT_OK};
use s2rl_core::datastore::{collect_episodes, save_dataset, DatasetManifest, Generator, ReturnStats, FORMAT_VERSION};
use s2rl_core::envsim::{make_env, EnvSpec, Family, Role, UniformPolicy};
use serde_json::json;

fn write_config(dir: &Path) -> std::path::PathBuf {
    let spec = EnvSpec::base(Family::Pendulum, Role::Real);
    let env = make_env(&spec).unwrap();
    let policy = UniformPolicy {
        dim: 1,
        bound: env.action_bound(),
    };
    let ts = collect_episodes(&env, &policy, 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let manifest = DatasetManifest {
        env_spec: spec,
        generator: Generator::Random,
        transition_count: 0,
        obs_dim: 3,
        act_dim: 1,
        policy_return: ReturnStats::default(),
        reference: None,
        threshold_fraction: None,
        training_steps: 0,
        format_version: FORMAT_VERSION,
        content_checksum: 0,
    };
    let data = dir.join("offline.bin");
    save_dataset(&data, &ts, &manifest).unwrap();
    let config = json!({
        "output_dir": dir.join("from-config"),
        "trainer": {
            "model": { "members": 2, "elites": 1, "hidden": [8], "batch_size": 32, "max_epochs": 2 },
            "sac": { "hidden": [8], "batch_size": 16 },
            "phase1": { "sac_updates": 4, "rollout_interval": 2, "rollout_starts": 4 },
            "eval_episodes": 1
        },
        "dataset": { "path": data, "generate": false }
    });
    let path = dir.join("config.json");
    std::fs::write(&path, config.to_string()).unwrap();
    path
}

fn has_runs(root: &Path) -> bool {
    root.join("runs").is_dir()
}

// Lives in its own test binary because it sets a process-wide variable.
#[test]
fn flag_beats_environment_beats_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let config = config.to_str().unwrap();
    let (from_config, from_env, from_flag) =
        (dir.path().join("from-config"), dir.path().join("from-env"), dir.path().join("from-flag"));

    assert_eq!(cli_run(["s2rl", "--config", config, "train-single"]), EXIT_OK);
    assert!(has_runs(&from_config));

    unsafe { std::env::set_var("S2RL_OUT", &from_env) };
    assert_eq!(cli_run(["s2rl", "--config", config, "train-single"]), EXIT_OK);
    assert!(has_runs(&from_env));

    assert_eq!(
        cli_run(["s2rl", "--config", config, "--out", from_flag.to_str().unwrap(), "train-single"]),
        EXIT_OK
    );
    assert!(has_runs(&from_flag));
    unsafe { std::env::remove_var("S2RL_OUT") };
}
