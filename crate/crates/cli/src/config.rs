//! Optional config file: flat key = value lines grouped in sections, one
//! section per pipeline stage. Command-line flags override file values.

use std::path::Path;

use anyhow::{Context, Result};
use ini::Ini;

#[derive(Debug, Default)]
pub struct FileConfig {
    pub conv_channels: Option<Vec<usize>>,
    pub fc1_units: Option<usize>,
    pub latent: Option<usize>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub position_weight: Option<f64>,
    pub velocity_weight: Option<f64>,
    pub n_filters: Option<usize>,
    pub n_coeffs: Option<usize>,
    pub noise_gain_db: Option<f64>,
    pub lip_upper: Option<usize>,
    pub lip_lower: Option<usize>,
    pub style_weights: Option<Vec<f32>>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let ini = Ini::load_from_file(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = FileConfig::default();
        for (section, props) in ini.iter() {
            let section = section.unwrap_or("");
            for (key, value) in props.iter() {
                cfg.set(section, key, value).with_context(|| {
                    format!("config {}: [{}] {} = {}", path.display(), section, key, value)
                })?;
            }
        }
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        match (section, key) {
            ("net", "conv_channels") => self.conv_channels = Some(parse_list(value)?),
            ("net", "fc1_units") => self.fc1_units = Some(value.parse()?),
            ("net", "latent") => self.latent = Some(value.parse()?),
            ("train", "epochs") => self.epochs = Some(value.parse()?),
            ("train", "learning_rate") => self.learning_rate = Some(value.parse()?),
            ("train", "batch_size") => self.batch_size = Some(value.parse()?),
            ("train", "position_weight") => self.position_weight = Some(value.parse()?),
            ("train", "velocity_weight") => self.velocity_weight = Some(value.parse()?),
            ("audio", "n_filters") => self.n_filters = Some(value.parse()?),
            ("audio", "n_coeffs") => self.n_coeffs = Some(value.parse()?),
            ("audio", "noise_gain_db") => self.noise_gain_db = Some(value.parse()?),
            ("anim", "lip_upper") => self.lip_upper = Some(value.parse()?),
            ("anim", "lip_lower") => self.lip_lower = Some(value.parse()?),
            ("anim", "style_weights") => self.style_weights = Some(parse_list(value)?),
            _ => anyhow::bail!("unknown config entry"),
        }
        Ok(())
    }
}

/// Parse a comma-separated list of values.
pub fn parse_list<T>(text: &str) -> Result<Vec<T>>
where
    T: std::str::FromStr,
    T::Err: std::error::Error + Send + Sync + 'static,
{
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<T>()
                .map_err(|e| anyhow::Error::new(e).context(format!("bad list entry {:?}", t)))
        })
        .collect()
}
