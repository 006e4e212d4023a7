//! Flat `key = value` run configuration with `#` comments, strict key
//! checking, and command-line overrides. The resolved configuration is
//! echoed into every output manifest.

use crate::cnsde::{mix_seed, GeneratorConfig};
use crate::data::WindowSpec;
use crate::error::{Result, SigflowError};
use crate::training::TrainConfig;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // data
    pub data_path: String,
    pub log_transform: bool,
    pub bucket_width: f64,
    pub ar_coeffs: Vec<f64>,
    pub ar_noise_std: f64,
    pub ar_length: usize,
    pub ar_burn_in: usize,
    pub input_len: usize,
    pub output_len: usize,
    pub stride: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub chronological: bool,
    // generator
    pub d_z: usize,
    pub d_w: usize,
    pub d_v: usize,
    pub k: usize,
    pub encoder_depth: usize,
    pub basepoint: bool,
    pub time: bool,
    pub cumsum: bool,
    pub xi2_width: usize,
    pub drift_width: usize,
    pub diffusion_width: usize,
    pub diffusion_shape: String,
    pub solver_steps: usize,
    pub final_tanh: bool,
    // training
    pub batch_size: usize,
    pub m: usize,
    pub m_val: usize,
    pub learning_rate: f64,
    pub max_seconds: f64,
    pub patience: usize,
    pub validation_period: usize,
    pub max_steps: usize,
    pub depth_in: usize,
    pub depth_out: usize,
    pub lambda: f64,
    // seeding
    pub seed: u64,
    // evaluation
    pub eval_m: usize,
    pub eval_repeats: usize,
    pub percentile: f64,
    pub classifier_train_fraction: f64,
    pub ho_depth_in: usize,
    pub ho_depth_out: usize,
    pub extreme_sign: String,
    pub extreme_relative: bool,
    pub metrics: String,
    // io
    pub n_samples: usize,
    pub out_dir: String,
    pub checkpoint_path: String,
    pub generate_input: String,
    pub bench_steps: String,
    pub bench_batch: usize,
    pub bench_m: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_path: String::new(),
            log_transform: false,
            bucket_width: 0.0,
            ar_coeffs: vec![0.4, -0.2, 0.1, -0.05, 0.05],
            ar_noise_std: 1.0,
            ar_length: 2048,
            ar_burn_in: 100,
            input_len: 20,
            output_len: 10,
            stride: 1,
            train_fraction: 0.6,
            val_fraction: 0.2,
            test_fraction: 0.2,
            chronological: true,
            d_z: 16,
            d_w: 16,
            d_v: 3,
            k: 3,
            encoder_depth: 5,
            basepoint: true,
            time: true,
            cumsum: true,
            xi2_width: 32,
            drift_width: 32,
            diffusion_width: 32,
            diffusion_shape: "diagonal".into(),
            solver_steps: 64,
            final_tanh: true,
            batch_size: 32,
            m: 32,
            m_val: 128,
            learning_rate: 1e-3,
            max_seconds: 7200.0,
            patience: 1000,
            validation_period: 50,
            max_steps: 10_000,
            depth_in: 5,
            depth_out: 4,
            lambda: 1e-4,
            seed: 42,
            eval_m: 128,
            eval_repeats: 3,
            percentile: 95.0,
            classifier_train_fraction: 0.7,
            ho_depth_in: 6,
            ho_depth_out: 5,
            extreme_sign: "+".into(),
            extreme_relative: false,
            metrics: "w1_a,w1_b,w1_c,w1_d,classification,ho_sigw1,extreme".into(),
            n_samples: 128,
            out_dir: "out".into(),
            checkpoint_path: String::new(),
            generate_input: String::new(),
            bench_steps: "16,32,64,128,256".into(),
            bench_batch: 2,
            bench_m: 4,
        }
    }
}

fn parse_err(key: &str, value: &str, want: &str) -> SigflowError {
    SigflowError::Config(format!("key `{key}`: cannot parse `{value}` as {want}"))
}

macro_rules! config_fields {
    ($($key:literal => $field:ident : $kind:ident),+ $(,)?) => {
        impl RunConfig {
            /// Assign one key; unknown keys are rejected.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let v = value.trim();
                match key {
                    $($key => self.$field = config_fields!(@parse $kind, $key, v)?,)+
                    other => {
                        return Err(SigflowError::Config(format!(
                            "unknown configuration key `{other}`"
                        )))
                    }
                }
                Ok(())
            }

            /// Echo every key in a parseable `key = value` form.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $(out.push_str(&format!("{} = {}\n", $key, config_fields!(@show $kind, &self.$field)));)+
                out
            }
        }
    };
    (@parse usize, $key:literal, $v:ident) => { $v.parse::<usize>().map_err(|_| parse_err($key, $v, "an unsigned integer")) };
    (@parse u64, $key:literal, $v:ident) => { $v.parse::<u64>().map_err(|_| parse_err($key, $v, "an unsigned integer")) };
    (@parse f64, $key:literal, $v:ident) => { $v.parse::<f64>().map_err(|_| parse_err($key, $v, "a number")) };
    (@parse bool, $key:literal, $v:ident) => {
        match $v {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(parse_err($key, $v, "a boolean (true/false)")),
        }
    };
    (@parse string, $key:literal, $v:ident) => { Ok::<_, SigflowError>($v.to_string()) };
    (@parse f64_list, $key:literal, $v:ident) => {
        $v.split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|_| parse_err($key, $v, "a comma-separated list of numbers"))
    };
    (@show f64_list, $field:expr) => {
        $field.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    };
    (@show $kind:ident, $field:expr) => { $field.to_string() };
}

config_fields! {
    "data_path" => data_path: string,
    "log_transform" => log_transform: bool,
    "bucket_width" => bucket_width: f64,
    "ar_coeffs" => ar_coeffs: f64_list,
    "ar_noise_std" => ar_noise_std: f64,
    "ar_length" => ar_length: usize,
    "ar_burn_in" => ar_burn_in: usize,
    "input_len" => input_len: usize,
    "output_len" => output_len: usize,
    "stride" => stride: usize,
    "train_fraction" => train_fraction: f64,
    "val_fraction" => val_fraction: f64,
    "test_fraction" => test_fraction: f64,
    "chronological" => chronological: bool,
    "d_z" => d_z: usize,
    "d_w" => d_w: usize,
    "d_v" => d_v: usize,
    "k" => k: usize,
    "encoder_depth" => encoder_depth: usize,
    "basepoint" => basepoint: bool,
    "time" => time: bool,
    "cumsum" => cumsum: bool,
    "xi2_width" => xi2_width: usize,
    "drift_width" => drift_width: usize,
    "diffusion_width" => diffusion_width: usize,
    "diffusion_shape" => diffusion_shape: string,
    "solver_steps" => solver_steps: usize,
    "final_tanh" => final_tanh: bool,
    "batch_size" => batch_size: usize,
    "m" => m: usize,
    "m_val" => m_val: usize,
    "learning_rate" => learning_rate: f64,
    "max_seconds" => max_seconds: f64,
    "patience" => patience: usize,
    "validation_period" => validation_period: usize,
    "max_steps" => max_steps: usize,
    "depth_in" => depth_in: usize,
    "depth_out" => depth_out: usize,
    "lambda" => lambda: f64,
    "seed" => seed: u64,
    "eval_m" => eval_m: usize,
    "eval_repeats" => eval_repeats: usize,
    "percentile" => percentile: f64,
    "classifier_train_fraction" => classifier_train_fraction: f64,
    "ho_depth_in" => ho_depth_in: usize,
    "ho_depth_out" => ho_depth_out: usize,
    "extreme_sign" => extreme_sign: string,
    "extreme_relative" => extreme_relative: bool,
    "metrics" => metrics: string,
    "n_samples" => n_samples: usize,
    "out_dir" => out_dir: string,
    "checkpoint_path" => checkpoint_path: string,
    "generate_input" => generate_input: string,
    "bench_steps" => bench_steps: string,
    "bench_batch" => bench_batch: usize,
    "bench_m" => bench_m: usize,
}

impl RunConfig {
    pub fn parse_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                SigflowError::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    lineno + 1
                ))
            })?;
            self.set(key.trim(), value)
                .map_err(|e| SigflowError::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        self.validate()
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            SigflowError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        RunConfig::parse_text(&text)
    }

    /// Apply `key=value` command-line overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (key, value) = o.split_once('=').ok_or_else(|| {
                SigflowError::Config(format!("override `{o}` is not of the form key=value"))
            })?;
            self.set(key.trim(), value)?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let frac_ok = |v: f64| (0.0..=1.0).contains(&v);
        if !frac_ok(self.train_fraction) || !frac_ok(self.val_fraction) || !frac_ok(self.test_fraction)
        {
            return Err(SigflowError::Config(
                "split fractions must lie in [0, 1]".into(),
            ));
        }
        if !(0.0 < self.percentile && self.percentile < 100.0) {
            return Err(SigflowError::Config("percentile must be in (0, 100)".into()));
        }
        if !(0.0 < self.classifier_train_fraction && self.classifier_train_fraction < 1.0) {
            return Err(SigflowError::Config(
                "classifier_train_fraction must be in (0, 1)".into(),
            ));
        }
        if self.eval_repeats == 0 {
            return Err(SigflowError::Config("eval_repeats must be >= 1".into()));
        }
        if self.bucket_width < 0.0 {
            return Err(SigflowError::Config("bucket_width must be >= 0".into()));
        }
        Ok(())
    }

    pub fn window_spec(&self) -> WindowSpec {
        WindowSpec {
            input_len: self.input_len,
            output_len: self.output_len,
            stride: self.stride,
        }
    }

    pub fn gen_config(&self, d_x: usize, d_y: usize) -> GeneratorConfig {
        GeneratorConfig {
            d_x,
            d_y,
            d_z: self.d_z,
            d_w: self.d_w,
            d_v: self.d_v,
            k: self.k,
            encoder_depth: self.encoder_depth,
            basepoint: self.basepoint,
            time: self.time,
            cumsum: self.cumsum,
            xi2_width: self.xi2_width,
            drift_width: self.drift_width,
            diffusion_width: self.diffusion_width,
            diffusion_shape: self.diffusion_shape.clone(),
            output_len: self.output_len,
            solver_steps: self.solver_steps,
            final_tanh: self.final_tanh,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            m: self.m,
            m_val: self.m_val,
            learning_rate: self.learning_rate,
            max_seconds: self.max_seconds,
            patience: self.patience,
            validation_period: self.validation_period,
            depth_in: self.depth_in,
            depth_out: self.depth_out,
            lambda: self.lambda,
            max_steps: self.max_steps,
            train_seed: self.train_seed(),
            eval_seed: self.eval_seed(),
        }
    }

    // seed substreams, all derived from the single master seed
    pub fn data_seed(&self) -> u64 {
        mix_seed(self.seed, 101)
    }

    pub fn train_seed(&self) -> u64 {
        mix_seed(self.seed, 102)
    }

    pub fn eval_seed(&self) -> u64 {
        mix_seed(self.seed, 103)
    }

    pub fn generate_seed(&self) -> u64 {
        mix_seed(self.seed, 104)
    }

    pub fn eval_repeat_seeds(&self) -> Vec<u64> {
        (0..self.eval_repeats)
            .map(|i| mix_seed(self.seed, 200 + i as u64))
            .collect()
    }

    pub fn metric_enabled(&self, name: &str) -> bool {
        self.metrics.split(',').any(|m| m.trim() == name)
    }

    pub fn resolved_checkpoint_path(&self) -> std::path::PathBuf {
        if self.checkpoint_path.is_empty() {
            Path::new(&self.out_dir).join("checkpoint.sigw")
        } else {
            self.checkpoint_path.clone().into()
        }
    }
}
