//! Composition recipes: ordered image operations that turn an
//! (image, mask) pair into a prompt image.
//!
//! Recipes have a compact text form, steps joined by `+`:
//! `bg_intensity(0.1)+bg_blur+crop`, `crop(large)`, `outline(red,3)`,
//! `grayscale_dye(red)`, `none`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropContext {
    Tight,
    Large,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Color(pub [f32; 3]);

impl Color {
    pub const RED: Color = Color([1.0, 0.0, 0.0]);

    fn parse(s: &str) -> Result<Color> {
        let s = s.trim();
        let named = match s {
            "red" => Some([1.0, 0.0, 0.0]),
            "green" => Some([0.0, 1.0, 0.0]),
            "blue" => Some([0.0, 0.0, 1.0]),
            "yellow" => Some([1.0, 1.0, 0.0]),
            "white" => Some([1.0, 1.0, 1.0]),
            "black" => Some([0.0, 0.0, 0.0]),
            _ => None,
        };
        if let Some(c) = named {
            return Ok(Color(c));
        }
        let hex = s
            .strip_prefix('#')
            .filter(|h| h.len() == 6)
            .ok_or_else(|| Error::config(format!("unknown color {s:?}")))?;
        let mut c = [0.0; 3];
        for (i, slot) in c.iter_mut().enumerate() {
            let v = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16)
                .map_err(|_| Error::config(format!("bad hex color {s:?}")))?;
            *slot = v as f32 / 255.0;
        }
        Ok(Color(c))
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            [1.0, 0.0, 0.0] => write!(f, "red"),
            [0.0, 1.0, 0.0] => write!(f, "green"),
            [0.0, 0.0, 1.0] => write!(f, "blue"),
            [1.0, 1.0, 0.0] => write!(f, "yellow"),
            [1.0, 1.0, 1.0] => write!(f, "white"),
            [0.0, 0.0, 0.0] => write!(f, "black"),
            c => write!(
                f,
                "#{:02x}{:02x}{:02x}",
                (c[0] * 255.0).round() as u8,
                (c[1] * 255.0).round() as u8,
                (c[2] * 255.0).round() as u8
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositionStep {
    None,
    /// Multiply background RGB by `alpha`.
    BgIntensity(f32),
    /// Gaussian blur of the background; `None` uses the configured sigma.
    BgBlur(Option<f32>),
    Crop(CropContext),
    /// Colored band around the mask; `None` width uses the configured width.
    Outline(Color, Option<u32>),
    /// Grayscale image with the object tinted.
    GrayscaleDye(Color),
}

impl CompositionStep {
    pub fn is_crop(&self) -> bool {
        matches!(self, CompositionStep::Crop(_))
    }

    /// Steps that may alter foreground pixels.
    pub fn touches_foreground(&self) -> bool {
        matches!(
            self,
            CompositionStep::Crop(_) | CompositionStep::Outline(..) | CompositionStep::GrayscaleDye(_)
        )
    }
}

impl fmt::Display for CompositionStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CompositionStep::None => write!(f, "none"),
            CompositionStep::BgIntensity(a) => write!(f, "bg_intensity({a})"),
            CompositionStep::BgBlur(None) => write!(f, "bg_blur"),
            CompositionStep::BgBlur(Some(s)) => write!(f, "bg_blur({s})"),
            CompositionStep::Crop(CropContext::Tight) => write!(f, "crop"),
            CompositionStep::Crop(CropContext::Large) => write!(f, "crop(large)"),
            CompositionStep::Outline(c, None) => write!(f, "outline({c})"),
            CompositionStep::Outline(c, Some(w)) => write!(f, "outline({c},{w})"),
            CompositionStep::GrayscaleDye(c) => write!(f, "grayscale_dye({c})"),
        }
    }
}

fn parse_f32(s: &str, what: &str) -> Result<f32> {
    s.trim()
        .parse::<f32>()
        .map_err(|_| Error::config(format!("{what}: expected a number, got {s:?}")))
}

impl FromStr for CompositionStep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, args) = match s.find('(') {
            Some(i) => {
                let inner = s[i + 1..]
                    .strip_suffix(')')
                    .ok_or_else(|| Error::config(format!("unclosed parenthesis in {s:?}")))?;
                (&s[..i], Some(inner))
            }
            None => (s, None),
        };
        let args: Vec<&str> = args.map(|a| a.split(',').map(str::trim).collect()).unwrap_or_default();
        let step = match (name.trim(), args.as_slice()) {
            ("none", []) => CompositionStep::None,
            ("bg_intensity", [a]) => {
                let alpha = parse_f32(a, "bg_intensity")?;
                if !(0.0..=1.0).contains(&alpha) {
                    return Err(Error::config(format!("bg_intensity alpha {alpha} outside [0, 1]")));
                }
                CompositionStep::BgIntensity(alpha)
            }
            ("bg_blur", []) => CompositionStep::BgBlur(None),
            ("bg_blur", [sigma]) => {
                let sigma = parse_f32(sigma, "bg_blur")?;
                if sigma <= 0.0 {
                    return Err(Error::config("bg_blur sigma must be positive"));
                }
                CompositionStep::BgBlur(Some(sigma))
            }
            ("crop", []) | ("crop", ["tight"]) => CompositionStep::Crop(CropContext::Tight),
            ("crop", ["large"]) => CompositionStep::Crop(CropContext::Large),
            ("outline", []) => CompositionStep::Outline(Color::RED, None),
            ("outline", [c]) => CompositionStep::Outline(Color::parse(c)?, None),
            ("outline", [c, w]) => CompositionStep::Outline(
                Color::parse(c)?,
                Some(
                    w.parse()
                        .map_err(|_| Error::config(format!("outline width {w:?}")))?,
                ),
            ),
            ("grayscale_dye", []) => CompositionStep::GrayscaleDye(Color::RED),
            ("grayscale_dye", [c]) => CompositionStep::GrayscaleDye(Color::parse(c)?),
            _ => return Err(Error::config(format!("unknown composition step {s:?}"))),
        };
        Ok(step)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionRecipe {
    pub id: String,
    pub steps: Vec<CompositionStep>,
}

impl CompositionRecipe {
    pub fn new(id: impl Into<String>, steps: Vec<CompositionStep>) -> Self {
        Self { id: id.into(), steps }
    }

    /// Parse the `+`-joined text form; the id is the canonical expression.
    pub fn parse(expr: &str) -> Result<Self> {
        let steps = expr
            .split('+')
            .map(str::parse)
            .collect::<Result<Vec<CompositionStep>>>()?;
        if steps.is_empty() {
            return Err(Error::config("empty recipe"));
        }
        let id = steps.iter().map(ToString::to_string).collect::<Vec<_>>().join("+");
        Ok(Self { id, steps })
    }

    pub fn identity() -> Self {
        Self::new("none", vec![CompositionStep::None])
    }

    pub fn has_crop(&self) -> bool {
        self.steps.iter().any(CompositionStep::is_crop)
    }

    pub fn preserves_foreground(&self) -> bool {
        !self.steps.iter().any(CompositionStep::touches_foreground)
    }

    pub fn expression(&self) -> String {
        self.steps.iter().map(ToString::to_string).collect::<Vec<_>>().join("+")
    }
}

/// Id of the best-performing recipe: crop, background at 10% plus blur.
pub const DEFAULT_RECIPE: &str = "crop_bg_intensity_10_bg_blur";

/// Id of the mask-highlighting composition used as an ablation.
pub const HIGHLIGHT_RECIPE: &str = "highlight_mask";

#[derive(Debug, Clone)]
pub struct RecipeRegistry {
    recipes: BTreeMap<String, CompositionRecipe>,
}

impl Default for RecipeRegistry {
    fn default() -> Self {
        let table: &[(&str, &str)] = &[
            ("none", "none"),
            ("bg_intensity_50", "bg_intensity(0.5)"),
            ("bg_intensity_10", "bg_intensity(0.1)"),
            ("bg_intensity_0", "bg_intensity(0)"),
            ("bg_blur", "bg_blur"),
            ("bg_blur_intensity_10", "bg_blur+bg_intensity(0.1)"),
            ("crop_large", "crop(large)"),
            ("crop", "crop"),
            ("crop_bg_blur", "bg_blur+crop"),
            ("crop_bg_intensity_10", "bg_intensity(0.1)+crop"),
            (DEFAULT_RECIPE, "bg_intensity(0.1)+bg_blur+crop"),
            ("outline", "outline(red)"),
            ("dye_red_grayscale", "grayscale_dye(red)"),
            (HIGHLIGHT_RECIPE, "outline(red)+bg_intensity(0.5)"),
        ];
        let recipes = table
            .iter()
            .map(|(id, expr)| {
                let steps = CompositionRecipe::parse(expr).expect("built-in recipe parses").steps;
                (id.to_string(), CompositionRecipe::new(*id, steps))
            })
            .collect();
        Self { recipes }
    }
}

impl RecipeRegistry {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.recipes.keys().map(String::as_str)
    }

    pub fn get(&self, id: &str) -> Option<&CompositionRecipe> {
        self.recipes.get(id)
    }

    pub fn insert(&mut self, recipe: CompositionRecipe) -> Result<()> {
        if self.recipes.contains_key(&recipe.id) {
            return Err(Error::config(format!("recipe id {:?} already registered", recipe.id)));
        }
        self.recipes.insert(recipe.id.clone(), recipe);
        Ok(())
    }

    /// A registered id, or else a recipe expression.
    pub fn resolve(&self, id_or_expr: &str) -> Result<CompositionRecipe> {
        match self.get(id_or_expr) {
            Some(r) => Ok(r.clone()),
            None => CompositionRecipe::parse(id_or_expr)
                .map_err(|e| Error::config(format!("unknown recipe {id_or_expr:?} ({e})"))),
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &CompositionRecipe> {
        self.recipes.values()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expressions_parse_and_print_canonically() {
        let r = CompositionRecipe::parse("bg_intensity(0.1) + bg_blur + crop(tight)").unwrap();
        assert_eq!(r.id, "bg_intensity(0.1)+bg_blur+crop");
        assert_eq!(
            r.steps,
            vec![
                CompositionStep::BgIntensity(0.1),
                CompositionStep::BgBlur(None),
                CompositionStep::Crop(CropContext::Tight)
            ]
        );
        let back = CompositionRecipe::parse(&r.id).unwrap();
        assert_eq!(back.steps, r.steps);
        let o = CompositionRecipe::parse("outline(#ff0000,5)").unwrap();
        assert_eq!(o.steps, vec![CompositionStep::Outline(Color::RED, Some(5))]);
    }

    #[test]
    fn bad_expressions_are_config_errors() {
        for bad in ["blur", "bg_intensity(2)", "crop(huge)", "outline(mauve)", "bg_blur(-1)", ""] {
            assert!(matches!(CompositionRecipe::parse(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn registry_resolves_ids_and_expressions() {
        let reg = RecipeRegistry::default();
        assert!(reg.get(DEFAULT_RECIPE).unwrap().has_crop());
        assert!(reg.get("bg_blur").unwrap().preserves_foreground());
        assert_eq!(reg.resolve("bg_intensity(0)").unwrap().steps, vec![CompositionStep::BgIntensity(0.0)]);
        assert!(reg.resolve("nope").is_err());
        let mut reg = reg;
        assert!(reg.insert(CompositionRecipe::identity()).is_err());
    }
}
