//! Pipeline configuration: every stage's parameters in one INI file.
//!
//! Keys are `section.key`; [`PipelineConfig::to_ini`] lists them all with
//! their current values, so the defaults double as documentation.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::appearance::ClassifierConfig;
use crate::error::{Error, Result};
use crate::fragments::MatcherConfig;
use crate::joiner::JoinerConfig;
use crate::metrics::{EvalConfig, WindowSpec};
use crate::synth::{NoiseConfig, ScenarioConfig};

/// Where the joiner's initial identities are anchored.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitialSetConfig {
    pub window_seconds: f64,
    /// Only fragments with more detections than this count.
    pub min_length: usize,
}

impl Default for InitialSetConfig {
    fn default() -> Self {
        InitialSetConfig { window_seconds: 30.0, min_length: 100 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub plot_width: usize,
    pub plot_height: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { seed: 1, plot_width: 0, plot_height: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PipelineConfig {
    pub run: RunConfig,
    pub scenario: ScenarioConfig,
    pub noise: NoiseConfig,
    pub matcher: MatcherConfig,
    pub initial: InitialSetConfig,
    pub classifier: ClassifierConfig,
    pub joiner: JoinerConfig,
    pub eval: EvalConfig,
}

fn parse_value<T: FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for {section}.{key}")))
}

fn format_windows(windows: &[WindowSpec]) -> String {
    windows
        .iter()
        .map(|w| format!("{}:{}:{}:{}", w.name, w.span_seconds, w.mt_min_seconds, w.ml_max_seconds))
        .collect::<Vec<_>>()
        .join(";")
}

fn parse_windows(value: &str) -> Result<Vec<WindowSpec>> {
    value
        .split(';')
        .map(|spec| {
            let parts: Vec<&str> = spec.trim().split(':').collect();
            if parts.len() != 4 || parts[0].is_empty() {
                return Err(Error::Config(format!("window '{spec}' must be name:span:mt_min:ml_max")));
            }
            let num = |s: &str| parse_value::<f64>("eval", "windows", s);
            Ok(WindowSpec::new(parts[0], num(parts[1])?, num(parts[2])?, num(parts[3])?))
        })
        .collect()
}

macro_rules! config_table {
    ($( $section:literal => $field:ident { $($key:ident),* $(,)? } )*) => {
        impl PipelineConfig {
            fn set_field(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
                match (section, key) {
                    $($( ($section, stringify!($key)) => self.$field.$key = parse_value(section, key, value)?, )*)*
                    ("eval", "windows") => self.eval.windows = parse_windows(value)?,
                    _ => return Err(Error::Config(format!("unknown config key {section}.{key}"))),
                }
                Ok(())
            }

            fn write_fields(&self, out: &mut String) {
                $(
                    let _ = writeln!(out, "[{}]", $section);
                    $( let _ = writeln!(out, "{} = {}", stringify!($key), self.$field.$key); )*
                    if $section == "eval" {
                        let _ = writeln!(out, "windows = {}", format_windows(&self.eval.windows));
                    }
                    out.push('\n');
                )*
            }
        }
    };
}

config_table! {
    "run" => run { seed, plot_width, plot_height }
    "scenario" => scenario {
        width, height, num_frames, fps, num_agents, stationary_fraction, walker_speed, heading_persistence,
        turn_sigma, jitter_sigma, margin, min_separation, texture_blend, occluded_fraction, occlusions_per_agent, occlusion_min,
        occlusion_max, cell_fraction, cell_visits_per_agent, cell_min, cell_max,
    }
    "noise" => noise { position_error_mean, angle_error_mean, false_positive_rate, miss_rate }
    "fragments" => matcher { w, cost_threshold, max_gap, min_fragment_length }
    "initial" => initial { window_seconds, min_length }
    "classifier" => classifier {
        feature_downsample, learning_rate, background_loss_scale, batch_size, adam_beta1, adam_beta2, adam_epsilon,
    }
    "joiner" => joiner {
        gate_scale, score_cutoff, fragment_head_window, stall_limit, completion_span, loss_gate, phase1_iterations,
        phase2_iterations, phase1_fraction, max_train_steps, buffer_size, background_pool, background_clearance,
    }
    "eval" => eval { match_radius, generic_mt_fraction, generic_ml_fraction, occlusion_lookahead }
}

impl PipelineConfig {
    /// Parses an INI document on top of the defaults. Unknown sections or
    /// keys are errors.
    pub fn from_ini_str(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        cfg.merge_ini_str(text)?;
        Ok(cfg)
    }

    pub fn merge_ini_str(&mut self, text: &str) -> Result<()> {
        let ini = ini::Ini::load_from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if let Some((key, _)) = props.iter().next() {
                    return Err(Error::Config(format!("config key '{key}' outside a section")));
                }
                continue;
            };
            for (key, value) in props.iter() {
                self.set_field(section, key, value)?;
            }
        }
        Ok(())
    }

    /// Applies one `section.key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (path, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{assignment}' must be section.key=value")))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("override key '{path}' must be section.key")))?;
        self.set_field(section, key, value)
    }

    pub fn to_ini(&self) -> String {
        let mut out = String::new();
        self.write_fields(&mut out);
        out.pop();
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.noise.validate()?;
        self.matcher.validate()?;
        self.classifier.validate()?;
        self.joiner.validate()?;
        self.eval.validate()?;
        if !(self.initial.window_seconds > 0.0) {
            return Err(Error::Config("initial.window_seconds must be positive".into()));
        }
        Ok(())
    }

    /// Overlay size: the configured one, or the scenario's frame size.
    pub fn plot_size(&self) -> (usize, usize) {
        let w = if self.run.plot_width == 0 { self.scenario.width } else { self.run.plot_width };
        let h = if self.run.plot_height == 0 { self.scenario.height } else { self.run.plot_height };
        (w, h)
    }
}
