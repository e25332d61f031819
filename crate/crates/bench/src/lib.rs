//! Shared fixtures for the benchmarks.

use driftopt_core::env::generate_synthetic_env;
use driftopt_core::{EnvConfig, EnvSpec, LoggedInteraction, SimRng};

/// Desk-scale environment and its logged data for a given seed.
pub fn desk_fixture(seed: u64) -> (EnvSpec, Vec<LoggedInteraction>) {
    let cfg = EnvConfig {
        horizon: 20_000,
        change_period: 2_000,
        ..Default::default()
    };
    let env = generate_synthetic_env(&cfg, &mut SimRng::named(seed, "env")).expect("valid preset");
    let log = env.simulate_log(&mut SimRng::named(seed, "log"));
    (env, log)
}
