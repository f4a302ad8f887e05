//! Run configuration: one `key = value` per line, `#` comments, dotted
//! section prefixes. Every key is recognized or rejected by name, and
//! `to_text` echoes the fully resolved configuration so a run can be
//! reproduced from its own output directory.

use std::path::{Path, PathBuf};

use crate::cts::CtsConfig;
use crate::error::{Error, Result};
use crate::loss::LossMode;
use crate::metrics::{Connectivity, EvalOptions};
use crate::network::NetworkConfig;
use crate::train::TrainConfig;

pub const DEFAULT_SPLIT_RATIOS: (f64, f64, f64) = (0.7, 0.1, 0.2);

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub cts: CtsConfig,
    pub eval: EvalOptions,
    pub split_ratios: (f64, f64, f64),
    pub split_seed: u64,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            network: NetworkConfig::mini(),
            train: TrainConfig::defaults(),
            cts: CtsConfig::defaults(),
            eval: EvalOptions::default(),
            split_ratios: DEFAULT_SPLIT_RATIOS,
            split_seed: 0,
            data_dir: None,
            out_dir: None,
        }
    }
}

fn parse_scalar<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("config key '{key}': cannot parse value '{value}'")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|p| parse_scalar(key, p.trim())).collect()
}

fn parse_pair(key: &str, value: &str) -> Result<(usize, usize)> {
    let v: Vec<usize> = parse_list(key, value)?;
    if v.len() != 2 {
        return Err(Error::Config(format!("config key '{key}': want two comma-separated values")));
    }
    Ok((v[0], v[1]))
}

fn parse_triple(key: &str, value: &str) -> Result<(f64, f64, f64)> {
    let v: Vec<f64> = parse_list(key, value)?;
    if v.len() != 3 {
        return Err(Error::Config(format!(
            "config key '{key}': want three comma-separated values"
        )));
    }
    Ok((v[0], v[1], v[2]))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "config key '{key}': want 'true' or 'false', got '{value}'"
        ))),
    }
}

impl RunConfig {
    pub fn apply_line(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "network.stage_channels" => self.network.stage_channels = parse_list(key, value)?,
            "network.blocks_per_stage" => self.network.blocks_per_stage = parse_list(key, value)?,
            "network.stage_dilations" => self.network.stage_dilations = parse_list(key, value)?,
            "network.output_stride" => self.network.output_stride = parse_scalar(key, value)?,
            "network.pyramid_bins" => self.network.pyramid_bins = parse_list(key, value)?,
            "network.dropout" => self.network.dropout_rate = parse_scalar(key, value)?,
            "network.num_classes" => self.network.num_classes = parse_scalar(key, value)?,
            "network.input_size" => self.network.input_size = parse_pair(key, value)?,
            "train.batch_size" => self.train.batch_size = parse_scalar(key, value)?,
            "train.learning_rate" => self.train.learning_rate = parse_scalar(key, value)?,
            "train.epochs" => self.train.epochs = parse_scalar(key, value)?,
            "train.validate_every" => self.train.validate_every = parse_scalar(key, value)?,
            "train.loss_mode" => self.train.loss_mode = LossMode::parse(value)?,
            "train.aux_weight" => self.train.aux_weight = parse_scalar(key, value)?,
            "train.ohnem_floor" => self.train.ohnem_floor = parse_scalar(key, value)?,
            "train.seed" => self.train.seed = parse_scalar(key, value)?,
            "train.flip_probability" => self.train.flip_probability = parse_scalar(key, value)?,
            "cts.num_competitors" => self.cts.num_competitors = parse_scalar(key, value)?,
            "cts.stage_epochs" => self.cts.stage_epochs = parse_scalar(key, value)?,
            "cts.num_stages" => self.cts.num_stages = parse_scalar(key, value)?,
            "cts.base_seed" => self.cts.base_seed = parse_scalar(key, value)?,
            "eval.boundary_connectivity" => {
                self.eval.boundary_connectivity = Connectivity::parse(value)?
            }
            "eval.component_connectivity" => {
                self.eval.component_connectivity = Connectivity::parse(value)?
            }
            "eval.min_fraction" => self.eval.min_fraction = parse_scalar(key, value)?,
            "eval.postprocess" => self.eval.postprocess = parse_bool(key, value)?,
            "split.ratios" => self.split_ratios = parse_triple(key, value)?,
            "split.seed" => self.split_seed = parse_scalar(key, value)?,
            "data.dir" => self.data_dir = Some(PathBuf::from(value)),
            "data.out" => self.out_dir = Some(PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: expected 'key = value'", lineno + 1))
            })?;
            cfg.apply_line(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    /// Checks the parts every run depends on. The competitive section is
    /// validated separately because only `compete` uses it.
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.eval.min_fraction) {
            return Err(Error::Config(format!(
                "eval.min_fraction {} must be in [0, 1]",
                self.eval.min_fraction
            )));
        }
        let (a, b, c) = self.split_ratios;
        if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split.ratios {:?} must lie in [0, 1] and sum to 1",
                self.split_ratios
            )));
        }
        Ok(())
    }

    fn list(values: &[usize]) -> String {
        values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }

    /// Full echo of the resolved configuration; parses back to an equal
    /// value (float formatting round-trips exactly).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("# resolved run configuration\n");
        s.push_str(&format!("network.stage_channels = {}\n", Self::list(&self.network.stage_channels)));
        s.push_str(&format!("network.blocks_per_stage = {}\n", Self::list(&self.network.blocks_per_stage)));
        s.push_str(&format!("network.stage_dilations = {}\n", Self::list(&self.network.stage_dilations)));
        s.push_str(&format!("network.output_stride = {}\n", self.network.output_stride));
        s.push_str(&format!("network.pyramid_bins = {}\n", Self::list(&self.network.pyramid_bins)));
        s.push_str(&format!("network.dropout = {}\n", self.network.dropout_rate));
        s.push_str(&format!("network.num_classes = {}\n", self.network.num_classes));
        s.push_str(&format!(
            "network.input_size = {},{}\n",
            self.network.input_size.0, self.network.input_size.1
        ));
        s.push_str(&format!("train.batch_size = {}\n", self.train.batch_size));
        s.push_str(&format!("train.learning_rate = {}\n", self.train.learning_rate));
        s.push_str(&format!("train.epochs = {}\n", self.train.epochs));
        s.push_str(&format!("train.validate_every = {}\n", self.train.validate_every));
        s.push_str(&format!("train.loss_mode = {}\n", self.train.loss_mode.name()));
        s.push_str(&format!("train.aux_weight = {}\n", self.train.aux_weight));
        s.push_str(&format!("train.ohnem_floor = {}\n", self.train.ohnem_floor));
        s.push_str(&format!("train.seed = {}\n", self.train.seed));
        s.push_str(&format!("train.flip_probability = {}\n", self.train.flip_probability));
        s.push_str(&format!("cts.num_competitors = {}\n", self.cts.num_competitors));
        s.push_str(&format!("cts.stage_epochs = {}\n", self.cts.stage_epochs));
        s.push_str(&format!("cts.num_stages = {}\n", self.cts.num_stages));
        s.push_str(&format!("cts.base_seed = {}\n", self.cts.base_seed));
        s.push_str(&format!(
            "eval.boundary_connectivity = {}\n",
            self.eval.boundary_connectivity.name()
        ));
        s.push_str(&format!(
            "eval.component_connectivity = {}\n",
            self.eval.component_connectivity.name()
        ));
        s.push_str(&format!("eval.min_fraction = {}\n", self.eval.min_fraction));
        s.push_str(&format!("eval.postprocess = {}\n", self.eval.postprocess));
        s.push_str(&format!(
            "split.ratios = {},{},{}\n",
            self.split_ratios.0, self.split_ratios.1, self.split_ratios.2
        ));
        s.push_str(&format!("split.seed = {}\n", self.split_seed));
        if let Some(d) = &self.data_dir {
            s.push_str(&format!("data.dir = {}\n", d.display()));
        }
        if let Some(d) = &self.out_dir {
            s.push_str(&format!("data.out = {}\n", d.display()));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_reflect_published_schedule() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.train.batch_size, 2);
        assert_eq!(cfg.train.learning_rate, 1e-3);
        assert_eq!(cfg.train.epochs, 180);
        assert_eq!(cfg.train.validate_every, 30);
        assert_eq!(cfg.network.dropout_rate, 0.1);
        assert_eq!(cfg.cts.num_competitors, 3);
        assert_eq!(cfg.cts.stage_epochs * cfg.cts.num_stages, cfg.train.epochs);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn parse_known_keys() {
        let cfg = RunConfig::parse(
            "# comment\n\
             train.learning_rate = 0.01  # inline comment\n\
             \n\
             network.stage_channels = 8,16\n\
             network.input_size = 32,48\n\
             train.loss_mode = weighted_ce\n\
             eval.postprocess = false\n\
             eval.boundary_connectivity = 26\n\
             split.ratios = 0.5,0.25,0.25\n\
             data.dir = /tmp/volumes\n",
        )
        .unwrap();
        assert_eq!(cfg.train.learning_rate, 0.01);
        assert_eq!(cfg.network.stage_channels, vec![8, 16]);
        assert_eq!(cfg.network.input_size, (32, 48));
        assert_eq!(cfg.train.loss_mode, LossMode::WeightedCe);
        assert!(!cfg.eval.postprocess);
        assert_eq!(cfg.eval.boundary_connectivity, Connectivity::TwentySix);
        assert_eq!(cfg.split_ratios, (0.5, 0.25, 0.25));
        assert_eq!(cfg.data_dir.as_deref(), Some(Path::new("/tmp/volumes")));
        // untouched keys keep their defaults
        assert_eq!(cfg.train.batch_size, 2);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("train.learninng_rate = 0.01\n").err().unwrap();
        let msg = err.to_string();
        assert!(msg.contains("unknown config key 'train.learninng_rate'"), "{msg}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn malformed_lines_are_rejected() {
        assert!(RunConfig::parse("just words\n").is_err());
        let err = RunConfig::parse("train.epochs = ninety\n").err().unwrap();
        assert!(err.to_string().contains("train.epochs"), "{err}");
        assert!(RunConfig::parse("eval.postprocess = yes\n").is_err());
        assert!(RunConfig::parse("network.input_size = 64\n").is_err());
        assert!(RunConfig::parse("split.ratios = 0.7,0.3\n").is_err());
    }

    #[test]
    fn echo_round_trips_exactly() {
        let mut cfg = RunConfig::default();
        cfg.train.learning_rate = 0.0012345;
        cfg.train.seed = 987654321;
        cfg.network.stage_channels = vec![4, 8, 8];
        cfg.network.input_size = (32, 32);
        cfg.eval.min_fraction = 0.12345678901234567;
        cfg.split_ratios = (0.6, 0.2, 0.2);
        cfg.data_dir = Some(PathBuf::from("/tmp/d"));
        cfg.out_dir = Some(PathBuf::from("/tmp/o"));
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn validate_rejects_bad_sections() {
        let mut cfg = RunConfig::default();
        cfg.split_ratios = (0.5, 0.2, 0.2);
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.eval.min_fraction = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.network.output_stride = 3;
        assert!(cfg.validate().is_err());
    }
}
