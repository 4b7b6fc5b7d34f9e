//! Experiment configuration: a TOML file with one section per
//! experiment kind plus shared keys. Command-line flags override file
//! keys (flag > file > default).

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    /// Seeds to run; the --seed flag replaces the whole list.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Output CSV path; a manifest is written next to it.
    #[serde(default = "default_out")]
    pub out: String,
    /// "expand", "reduce" or "both".
    #[serde(default = "default_flavour")]
    pub flavour: String,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub timing: TimingConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub marglik: MargLikFileConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_out() -> String {
    "results.csv".into()
}

fn default_flavour() -> String {
    "both".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    /// "deep-linear" or "attention".
    pub model: String,
    /// Layer widths from input to output (deep-linear model).
    pub dims: Vec<usize>,
    pub r: usize,
    pub n: usize,
    /// "expand" or "reduce".
    pub setting: String,
    /// "identity" or "random" (SPD).
    pub sigma: String,
    /// Aggregation scale for reduce models.
    pub agg_scale: f64,
    /// Expand input-factor normalisation: "rows" (1/(N·R)) or
    /// "examples" (1/N).
    pub expand_scaling: String,
    /// Write oracle/approximation/error grids next to the CSV.
    pub dump_matrices: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            model: "deep-linear".into(),
            dims: vec![8, 8, 8],
            r: 2,
            n: 4,
            setting: "expand".into(),
            sigma: "random".into(),
            agg_scale: 1.0,
            expand_scaling: "rows".into(),
            dump_matrices: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimingConfig {
    pub r_sweep: Vec<usize>,
    pub p: usize,
    pub n: usize,
    pub repeats: usize,
    pub warmup: usize,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            r_sweep: vec![8, 16, 32, 64],
            p: 64,
            n: 32,
            repeats: 20,
            warmup: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// "deep-linear", "attention-moons" or "graph-motifs".
    pub task: String,
    pub examples: usize,
    pub target: f64,
    pub budget: usize,
    pub gd_budget: usize,
    pub gd_grid: Vec<f64>,
    pub kfac_lr_grid: Vec<f64>,
    pub kfac_damping_grid: Vec<f64>,
    pub trace: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: "deep-linear".into(),
            examples: 64,
            target: 1e-6,
            budget: 200,
            gd_budget: 800,
            gd_grid: vec![0.003, 0.01, 0.03, 0.1, 0.3, 1.0],
            kfac_lr_grid: vec![0.3, 0.5, 1.0],
            kfac_damping_grid: vec![1e-3, 1e-2, 1e-1, 1.0],
            trace: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MargLikFileConfig {
    pub examples: usize,
    pub val_examples: usize,
    pub input_dim: usize,
    pub noise_std: f64,
    pub passes: usize,
    pub steps_per_pass: usize,
    pub select_every: usize,
    pub ascent_steps: usize,
    pub ascent_step_size: f64,
    pub initial_delta: f64,
    /// Also run a selection-off control at the initial δ.
    pub control: bool,
}

impl Default for MargLikFileConfig {
    fn default() -> Self {
        Self {
            examples: 32,
            val_examples: 32,
            input_dim: 3,
            noise_std: 0.5,
            passes: 40,
            steps_per_pass: 8,
            select_every: 5,
            ascent_steps: 10,
            ascent_step_size: 0.5,
            initial_delta: 1.0,
            control: true,
        }
    }
}

impl ExperimentFile {
    pub fn load(path: Option<&str>) -> anyhow::Result<Self> {
        match path {
            None => Ok(Self {
                seeds: default_seeds(),
                out: default_out(),
                flavour: default_flavour(),
                ..Default::default()
            }),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| anyhow::anyhow!("cannot read config {p}: {e}"))?;
                let parsed: Self = toml::from_str(&text)
                    .map_err(|e| anyhow::anyhow!("config parse error in {p}: {e}"))?;
                Ok(parsed)
            }
        }
    }
}
