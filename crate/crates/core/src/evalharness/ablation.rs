use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::oneshot::EpisodeKey;
use super::{build_episodes, eval_one_shot, eval_referring, EvalConfig, OneShotMode};
use crate::backbone::BackboneVariant;
use crate::error::{Error, Result};
use crate::training::{load_data, train_experiment, BackboneChoice, DataSpec, ExperimentConfig};
use crate::visual_prompts::{DEFAULT_RECIPE, HIGHLIGHT_RECIPE};

/// A named change to the base experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationDelta {
    pub name: String,
    /// Dotted config paths and their new values.
    pub overrides: Vec<(String, Value)>,
    /// Replace the backbone with randomly initialized weights.
    pub random_backbone: bool,
    /// Recipe for the visual column, when the delta changes it.
    pub eval_recipe: Option<String>,
}

impl AblationDelta {
    fn named(name: &str, overrides: Vec<(&str, Value)>) -> Self {
        Self {
            name: name.to_string(),
            overrides: overrides.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            random_backbone: false,
            eval_recipe: None,
        }
    }
}

/// Understands the shorthand rows "base", "D=16", "only layer 3",
/// "no visual", "highlight mask" and "no pre-training", plus generic
/// `path.to.field=value` overrides (value parsed as JSON, else a string).
pub fn parse_delta(s: &str) -> Result<AblationDelta> {
    let s = s.trim();
    let lower = s.to_lowercase();
    if lower == "base" {
        return Ok(AblationDelta::named(s, vec![]));
    }
    if let Some(d) = lower.strip_prefix("d=") {
        let width: usize = d
            .parse()
            .map_err(|_| Error::config(format!("bad decoder width in {s:?}")))?;
        return Ok(AblationDelta::named(s, vec![("decoder.width", Value::from(width))]));
    }
    if let Some(l) = lower.strip_prefix("only layer ") {
        let layer: usize = l
            .parse()
            .map_err(|_| Error::config(format!("bad layer in {s:?}")))?;
        return Ok(AblationDelta::named(
            s,
            vec![("decoder.readout_layers", Value::from(vec![layer]))],
        ));
    }
    match lower.as_str() {
        "no visual" => return Ok(AblationDelta::named(s, vec![("train.interpolation", Value::Bool(false))])),
        "highlight mask" => {
            let mut d = AblationDelta::named(s, vec![("train.support_recipe", Value::from(HIGHLIGHT_RECIPE))]);
            d.eval_recipe = Some(HIGHLIGHT_RECIPE.to_string());
            return Ok(d);
        }
        "no pre-training" | "no pretraining" | "no clip pre-training" => {
            let mut d = AblationDelta::named(s, vec![]);
            d.random_backbone = true;
            return Ok(d);
        }
        _ => {}
    }
    if let Some((path, value)) = s.split_once('=') {
        let value = serde_json::from_str(value.trim()).unwrap_or_else(|_| Value::from(value.trim()));
        return Ok(AblationDelta::named(s, vec![(path.trim(), value)]));
    }
    Err(Error::config(format!("unknown ablation {s:?}")))
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("{path}: {part} is not inside a section")))?;
        if !obj.contains_key(*part) {
            return Err(Error::config(format!("unknown config field {path}")));
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*part).expect("checked");
    }
    unreachable!("split yields at least one part")
}

/// The base experiment with `delta` applied.
pub fn apply_delta(base: &ExperimentConfig, delta: &AblationDelta) -> Result<ExperimentConfig> {
    let mut v = serde_json::to_value(base)?;
    for (path, value) in &delta.overrides {
        set_path(&mut v, path, value.clone())?;
    }
    let mut cfg: ExperimentConfig =
        serde_json::from_value(v).map_err(|e| Error::config(format!("ablation {:?}: {e}", delta.name)))?;
    if delta.random_backbone {
        let mut bb = cfg.backbone.resolve()?;
        bb.variant = BackboneVariant::StandInRandom;
        bb.weights = None;
        bb.tokenizer = None;
        bb.seed = bb.seed.wrapping_add(0x9e37_79b9);
        cfg.backbone = BackboneChoice::Config(bb);
    }
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub base: ExperimentConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Held-out data; the training data when unset.
    #[serde(default)]
    pub eval_data: Option<DataSpec>,
    pub deltas: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub parameters: usize,
    pub text_miou: f64,
    pub text_ap: Option<f64>,
    pub visual_miou: Option<f64>,
    pub visual_ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{:.1}", 100.0 * x));
        let mut out = String::from("| variant | params | text mIoU | text AP | visual mIoU | visual AP |\n");
        out.push_str("|---|---:|---:|---:|---:|---:|\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} |",
                r.name,
                r.parameters,
                fmt(Some(r.text_miou)),
                fmt(r.text_ap),
                fmt(r.visual_miou),
                fmt(r.visual_ap)
            );
        }
        out
    }
}

/// Train and evaluate the base experiment and every delta. Each variant
/// writes its training output under `<base output>/<index>`.
pub fn run_ablation(cfg: &AblationConfig) -> Result<AblationTable> {
    let mut deltas = vec![parse_delta("base")?];
    for d in &cfg.deltas {
        let d = parse_delta(d)?;
        if d.name != "base" {
            deltas.push(d);
        }
    }
    // fail on any bad delta before spending time on training
    let experiments: Vec<ExperimentConfig> = deltas
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let mut e = apply_delta(&cfg.base, d)?;
            e.output = cfg.base.output.join(format!("{i:02}"));
            e.validate()?;
            Ok(e)
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(deltas.len());
    for (delta, exp) in deltas.iter().zip(&experiments) {
        tracing::info!(variant = %delta.name, "ablation");
        let (model, _) = train_experiment(exp)?;
        let (records, store) = load_data(cfg.eval_data.as_ref().unwrap_or(&exp.data))?;
        let mut eval = cfg.eval.clone();
        if eval.image_size.is_none() {
            eval.image_size = Some(model.backbone.config().native_size() as u32);
        }
        let text = eval_referring(&model, store.as_ref(), &records, &eval)?;
        let episodes = build_episodes(&records, EpisodeKey::Phrase, &mut ChaCha8Rng::seed_from_u64(exp.train.seed));
        let recipe = delta.eval_recipe.clone().unwrap_or_else(|| DEFAULT_RECIPE.to_string());
        let visual = if episodes.is_empty() {
            None
        } else {
            Some(eval_one_shot(
                &model,
                store.as_ref(),
                &episodes,
                &OneShotMode::Visual { recipe },
                &eval,
            )?)
        };
        rows.push(AblationRow {
            name: delta.name.clone(),
            parameters: model.decoder.parameter_count(),
            text_miou: text.miou,
            text_ap: text.ap,
            visual_miou: visual.as_ref().map(|v| v.miou),
            visual_ap: visual.and_then(|v| v.ap),
        });
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::Decoder;

    fn base() -> ExperimentConfig {
        ExperimentConfig::from_yaml(
            "backbone: {preset: tiny}\ndata: {synthetic: {n: 8}, build: true}\ntrain: {iterations: 2, batch_size: 2}\noutput: out\n",
        )
        .unwrap()
    }

    #[test]
    fn shorthand_rows_map_to_config_fields() {
        let b = base();
        let small = apply_delta(&b, &parse_delta("D=16").unwrap()).unwrap();
        let bb = small.backbone.resolve().unwrap();
        assert_eq!(small.decoder.resolve(&bb).width, 16);
        let wide = Decoder::init(b.decoder.resolve(&bb), 0).unwrap().parameter_count();
        let narrow = Decoder::init(small.decoder.resolve(&bb), 0).unwrap().parameter_count();
        assert!(narrow < wide);

        let one = apply_delta(&b, &parse_delta("only layer 3").unwrap()).unwrap();
        let dc = one.decoder.resolve(&bb);
        assert_eq!((dc.readout_layers.clone(), dc.blocks), (vec![3], 1));

        let hl = parse_delta("highlight mask").unwrap();
        assert_eq!(hl.eval_recipe.as_deref(), Some(HIGHLIGHT_RECIPE));
        assert_eq!(apply_delta(&b, &hl).unwrap().train.support_recipe, HIGHLIGHT_RECIPE);

        let rnd = apply_delta(&b, &parse_delta("no pre-training").unwrap()).unwrap();
        assert_ne!(rnd.backbone.resolve().unwrap().seed, bb.seed);
    }

    #[test]
    fn unknown_fields_are_configuration_errors() {
        let b = base();
        let d = parse_delta("train.momentum=0.9").unwrap();
        assert!(matches!(apply_delta(&b, &d), Err(Error::Config(_))));
        assert!(matches!(parse_delta("more cowbell"), Err(Error::Config(_))));
        let d = parse_delta("train.iterations=5").unwrap();
        assert_eq!(apply_delta(&b, &d).unwrap().train.iterations, 5);
    }
}
