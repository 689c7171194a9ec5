use std::path::Path;

use serde::Serialize;

use super::trainer::{evaluate, train, PreparedSample, TrainConfig};
use crate::data::Sample;
use crate::decoder::{NUM_NUTRIENTS, NUTRIENTS};
use crate::encoder::ModelConfig;
use crate::error::Result;
use crate::fusion::FusionKind;
use crate::model::NuNet;

/// Variants accepted by [`ablate`] besides the fusion kinds.
pub const SINGLE_SCALE: &str = "single-scale";
pub const MULTI_SCALE: &str = "multi-scale";

pub const ABLATION_VARIANTS: [&str; 10] = [
    "fl-add-only",
    "fl-wmsa-only",
    "fl-mul",
    "fe-plain-concat",
    "fe-no-swmsa",
    "fe-concat-only",
    "fe-mul-only",
    "fe-add-only",
    SINGLE_SCALE,
    MULTI_SCALE,
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub params: usize,
    /// Parameters of the fusion modules only.
    pub fusion_params: usize,
    pub final_train_loss: f64,
    pub mean_mape: f64,
    pub mape: [f64; NUM_NUTRIENTS],
}

/// Model configuration for a named variant.
pub fn variant_config(base: &ModelConfig, variant: &str) -> Result<ModelConfig> {
    let mut config = base.clone();
    match variant {
        SINGLE_SCALE => config.multi_scale = false,
        MULTI_SCALE => {}
        other => other.parse::<FusionKind>()?.apply(&mut config),
    }
    Ok(config)
}

/// Trains and evaluates every variant from the same seed and budget.
pub fn ablate(
    base: &ModelConfig,
    train_config: &TrainConfig,
    train_set: &[Sample],
    test_set: &[PreparedSample],
    variants: &[String],
    out: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let configs = variants
        .iter()
        .map(|v| variant_config(base, v))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(variants.len());
    let mut writer = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut w = csv::Writer::from_path(dir.join("ablate.csv"))?;
            let mut header = vec!["variant", "params", "fusion_params", "final_train_loss", "mean_mape"]
                .into_iter()
                .map(String::from)
                .collect::<Vec<_>>();
            header.extend(NUTRIENTS.iter().map(|n| format!("mape_{n}")));
            w.write_record(&header)?;
            w.flush()?;
            Some(w)
        }
        None => None,
    };
    for (variant, config) in variants.iter().zip(configs) {
        let (net, mut params) = NuNet::new(&config)?;
        let fusion_params = params.num_elements_with_prefix("fl") + params.num_elements_with_prefix("fe.");
        let tc = TrainConfig {
            eval_every: 0,
            checkpoint_every: None,
            ..train_config.clone()
        };
        let outcome = train(&net, &mut params, train_set, &[], &tc, None)?;
        let report = evaluate(&net, &params, test_set)?;
        let row = AblationRow {
            variant: variant.clone(),
            params: params.num_elements(),
            fusion_params,
            final_train_loss: outcome.step_losses.last().copied().unwrap_or(f64::NAN),
            mean_mape: report.mean_mape,
            mape: report.mape,
        };
        if let Some(w) = writer.as_mut() {
            let mut rec = vec![
                row.variant.clone(),
                row.params.to_string(),
                row.fusion_params.to_string(),
                row.final_train_loss.to_string(),
                row.mean_mape.to_string(),
            ];
            rec.extend(row.mape.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
            w.flush()?;
        }
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn variant_configs() {
        let base = ModelConfig::default();
        assert!(!variant_config(&base, SINGLE_SCALE).unwrap().multi_scale);
        assert_eq!(variant_config(&base, MULTI_SCALE).unwrap(), base);
        assert_eq!(
            variant_config(&base, "fe-no-swmsa").unwrap().fe_variant,
            crate::encoder::FeVariant::NoSwmsa
        );
        assert!(matches!(variant_config(&base, "nope"), Err(Error::Config(_))));
        for v in ABLATION_VARIANTS {
            variant_config(&base, v).unwrap();
        }
    }
}
