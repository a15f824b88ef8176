//! Train from an inline TOML run config and read back the summary.

use macgrad::cli::{format_summary, run_training, RunConfig};

const RUN: &str = r#"
seed = 1
out = "unused"

[model]
input = [2]
layers = [{ kind = "linear", out = 32 }, { kind = "relu" }, { kind = "linear", out = 2 }]

[data]
source = { kind = "two_moons", n = 1000, noise = 0.1 }

[optimizer]
name = "mac"
lr = 0.05

[schedule]
epochs = 5
batch_size = 50
lr_schedule = "cosine"
log_every = 5
"#;

fn main() -> macgrad::Result<()> {
    let dir = tempfile::tempdir()?;
    let mut cfg = RunConfig::parse(RUN)?;
    cfg.out = dir.path().to_path_buf();
    let summary = run_training(&cfg)?;
    println!("{}", format_summary(&summary));
    Ok(())
}
