//! Compare one flavour against the exact block oracle on a deep linear
//! weight-sharing model.
//!
//! Run with `cargo run -p kfac-lab --example quickstart`.

use kfac_lab::curvature::exact_block_ggn;
use kfac_lab::kfac::{analytic_factors, approximation_errors, Flavour};
use kfac_lab::net::Setting;
use kfac_lab::scenarios::DeepLinearScenario;

fn main() -> kfac_lab::Result<()> {
    let scenario = DeepLinearScenario {
        dims: vec![8, 8, 8],
        r: 2,
        n: 4,
        setting: Setting::Expand,
        agg_scale: 1.0,
        weighted_agg: None,
    };
    let (model, batch) = scenario.build(kfac_lab::Tensor::identity(8), 0)?;
    let oracle = exact_block_ggn(&model, &batch)?;
    for flavour in [Flavour::Expand, Flavour::Reduce] {
        let factors = analytic_factors(&model, &batch, flavour, false)?;
        let errors: Vec<String> = approximation_errors(&factors, &oracle)
            .iter()
            .map(|e| format!("{e:.3e}"))
            .collect();
        println!(
            "{}: per-layer relative error [{}]",
            flavour.label(),
            errors.join(", ")
        );
    }
    Ok(())
}
