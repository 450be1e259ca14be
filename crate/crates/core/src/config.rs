//! Flat `key = value` run configuration.
//!
//! Values resolve from four layers, later ones winning: built-in defaults, a
//! config file, `GMGE_<KEY>` environment variables, and command-line flags.
//! Unknown keys are rejected at every layer.

use std::path::{Path, PathBuf};

use crate::ctprep::PrepParams;
use crate::densenet::{DenseBlockConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::gradcam::VoiParams;
use crate::phantom::PhantomSpec;

pub const ENV_PREFIX: &str = "GMGE_";

/// A value that round-trips through its config text form.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{s:?}: {e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
plain_value!(u64, usize, f32, f64, bool);

impl ConfigValue for PathBuf {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok(PathBuf::from(s))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

/// `W x H x D` extent written as `32x32x32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Extent(pub [usize; 3]);

impl ConfigValue for Extent {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split('x').map(str::trim).collect();
        let bad = || format!("{s:?} is not an extent like 32x32x32");
        if parts.len() != 3 {
            return Err(bad());
        }
        let mut e = [0; 3];
        for (slot, p) in e.iter_mut().zip(&parts) {
            *slot = p.parse().map_err(|_| bad())?;
            if *slot == 0 {
                return Err(bad());
            }
        }
        Ok(Extent(e))
    }
    fn render(&self) -> String {
        format!("{}x{}x{}", self.0[0], self.0[1], self.0[2])
    }
}

impl ConfigValue for Vec<usize> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|p| p.trim().parse().map_err(|_| format!("{s:?} is not a comma-separated list of integers")))
            .collect()
    }
    fn render(&self) -> String {
        self.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
    }
}

macro_rules! run_config {
    ($($key:ident: $ty:ty = $default:expr, $doc:literal;)*) => {
        /// Every setting of a run; see [`RunConfig::KEYS`] for documentation.
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $(#[doc = $doc] pub $key: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $($key: $default,)* }
            }
        }

        impl RunConfig {
            /// `(key, description)` in declaration order.
            pub const KEYS: &'static [(&'static str, &'static str)] = &[$((stringify!($key), $doc),)*];

            /// Sets one key from its text form; `location` names the source
            /// in error messages.
            pub fn set(&mut self, key: &str, value: &str, location: &str) -> Result<()> {
                let err = |reason: String| Error::Config { location: location.to_string(), reason };
                match key {
                    $(stringify!($key) => {
                        self.$key = <$ty as ConfigValue>::parse_value(value.trim())
                            .map_err(|e| err(format!("{}: {e}", stringify!($key))))?;
                    })*
                    _ => return Err(err(format!("unknown key {key:?}"))),
                }
                Ok(())
            }

            /// `(key, rendered value)` in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($key), ConfigValue::render(&self.$key)),)*]
            }
        }
    };
}

run_config! {
    seed: u64 = 42, "Master seed for phantoms, splits, initialization and shuffling.";
    data_dir: PathBuf = PathBuf::from("data"), "Directory that synth writes phantoms and manifest.csv into.";
    manifest: PathBuf = PathBuf::new(), "Manifest to read; empty means <data_dir>/manifest.csv.";
    run_dir: PathBuf = PathBuf::from("run"), "Directory that receives every run artifact.";
    phantom_per_class: usize = 100, "Phantoms generated per class.";
    phantom_halo_hu: f32 = 1500.0, "Peak HU contrast of the spiculated halo strands.";
    phantom_noise_hu: f32 = 20.0, "Standard deviation of in-body HU noise.";
    hu_lo: f32 = -400.0, "Lower HU window bound.";
    hu_hi: f32 = 400.0, "Upper HU window bound.";
    target_spacing: f32 = 1.0, "Isotropic resampling spacing, mm.";
    slab_margin_mm: f32 = 4.0, "Margin beyond the nose and acromion slices, mm.";
    input_extent: Extent = Extent([32, 32, 32]), "Extractor input grid, WxHxD.";
    voi_extent: Extent = Extent([16, 16, 12]), "Extracted VOI size, WxHxD.";
    body_floor: f32 = 0.2, "Normalized intensity below which voxels are outside the body.";
    cam_threshold: f64 = 0.6, "Fraction of the heat maximum that enters the VOI centroid.";
    signal_floor: f64 = 0.05, "Heat maximum at or below which extraction fails.";
    stem_stride: usize = 2, "Stride of the first convolution in both networks.";
    extractor_channels: usize = 8, "Extractor stem channels.";
    extractor_growth: usize = 8, "Extractor growth rate.";
    extractor_layers: Vec<usize> = vec![2, 2], "Extractor layers per dense block.";
    extractor_transitions: Vec<usize> = vec![0, 0], "1 puts a transition after that extractor block.";
    classifier_channels: usize = 4, "Classifier stem channels.";
    classifier_growth: usize = 4, "Classifier growth rate.";
    classifier_layers: Vec<usize> = vec![2, 2], "Classifier layers per dense block.";
    classifier_transitions: Vec<usize> = vec![1, 0], "1 puts a transition after that classifier block.";
    extractor_n: usize = 60, "Patients reserved for extractor training.";
    test_frac: f64 = 0.2, "Fraction of the remaining patients held out for testing.";
    folds: usize = 5, "Cross-validation folds over the training patients.";
    extractor_epochs: usize = 30, "Extractor training epochs.";
    classifier_epochs: usize = 6, "Classifier training epochs per fold and model.";
    batch_size: usize = 4, "Mini-batch size.";
    adadelta_rho: f64 = 0.95, "Adadelta decay rate.";
    adadelta_eps: f64 = 1e-6, "Adadelta epsilon.";
    recalibrate_bn: bool = true, "Re-estimate batch-norm statistics over the training set after each epoch.";
    threshold: f64 = 0.5, "Probability at or above which a prediction is positive.";
    alpha: f64 = 0.05, "Significance level of the paired t-test (0.10, 0.05 or 0.01).";
    export_stride: usize = 10, "Slice stride of PGM exports.";
    export_patients: usize = 4, "Patients whose heatmap slices run-all exports.";
    workers: usize = 1, "Worker threads.";
}

impl RunConfig {
    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let location = format!("{source}:{}", i + 1);
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                location: location.clone(),
                reason: format!("expected key = value, got {line:?}"),
            })?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config {
                    location,
                    reason: format!("duplicate key {k:?}"),
                });
            }
            self.set(k, v, &location)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies every `GMGE_<KEY>` variable; other variables are ignored.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        let mut vars: Vec<(String, String)> = vars
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        vars.sort();
        for (k, v) in vars {
            let key = k[ENV_PREFIX.len()..].to_ascii_lowercase();
            self.set(&key, &v, &format!("environment {k}"))?;
        }
        Ok(())
    }

    /// Defaults, then `file`, then environment, then `overrides`.
    pub fn resolve(
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(f) = file {
            cfg.apply_file(f)?;
        }
        cfg.apply_env(env)?;
        for (k, v) in overrides {
            cfg.set(k, v, &format!("flag --{}", k.replace('_', "-")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-field checks that individual parsers cannot make.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| {
            Err(Error::Config {
                location: key.to_string(),
                reason,
            })
        };
        if !(self.hu_lo < self.hu_hi) {
            return bad("hu_lo", format!("window [{}, {}] is empty", self.hu_lo, self.hu_hi));
        }
        if (0..3).any(|a| self.voi_extent.0[a] > self.input_extent.0[a]) {
            return bad("voi_extent", "VOI must fit inside the input extent".into());
        }
        if self.batch_size == 0 || self.workers == 0 || self.export_stride == 0 {
            return bad("batch_size", "batch_size, workers and export_stride must be >= 1".into());
        }
        if !crate::pipeline::stats::ALPHAS.contains(&self.alpha) {
            return bad("alpha", format!("{} is not one of 0.10, 0.05, 0.01", self.alpha));
        }
        for (key, layers, trans) in [
            ("extractor_transitions", &self.extractor_layers, &self.extractor_transitions),
            ("classifier_transitions", &self.classifier_layers, &self.classifier_transitions),
        ] {
            if layers.len() != trans.len() {
                return bad(key, format!("{} flags for {} blocks", trans.len(), layers.len()));
            }
        }
        self.extractor_model().plan()?;
        self.classifier_model(self.voi_extent.0, 0).plan()?;
        self.classifier_model(self.input_extent.0, 0).plan()?;
        Ok(())
    }

    /// The fully resolved configuration as config-file text.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# resolved configuration\n");
        for (k, v) in self.entries() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn manifest_path(&self) -> PathBuf {
        if self.manifest.as_os_str().is_empty() {
            self.data_dir.join("manifest.csv")
        } else {
            self.manifest.clone()
        }
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec {
            halo_hu: self.phantom_halo_hu,
            noise_hu: self.phantom_noise_hu,
            seed: self.seed,
            ..PhantomSpec::default()
        }
    }

    pub fn prep_params(&self) -> PrepParams {
        PrepParams {
            hu_lo: self.hu_lo,
            hu_hi: self.hu_hi,
            target_spacing: self.target_spacing,
            slab_margin_mm: self.slab_margin_mm,
            target_extent: self.input_extent.0,
        }
    }

    pub fn voi_params(&self) -> VoiParams {
        VoiParams {
            cam_threshold: self.cam_threshold,
            signal_floor: self.signal_floor,
        }
    }

    fn model(&self, extent: [usize; 3], channels: usize, growth: usize, layers: &[usize], trans: &[usize], seed: u64) -> ModelConfig {
        let [w, h, d] = extent;
        ModelConfig {
            initial_channels: channels,
            initial_stride: [self.stem_stride; 3],
            blocks: layers.iter().map(|&n| DenseBlockConfig::new(n, growth)).collect(),
            transitions: trans.iter().map(|&t| t != 0).collect(),
            ..ModelConfig::desk([1, d, h, w], seed)
        }
    }

    pub fn extractor_model(&self) -> ModelConfig {
        self.model(
            self.input_extent.0,
            self.extractor_channels,
            self.extractor_growth,
            &self.extractor_layers,
            &self.extractor_transitions,
            self.seed,
        )
    }

    /// Classifier for inputs of `extent` (`[W, H, D]`).
    pub fn classifier_model(&self, extent: [usize; 3], seed: u64) -> ModelConfig {
        self.model(
            extent,
            self.classifier_channels,
            self.classifier_growth,
            &self.classifier_layers,
            &self.classifier_transitions,
            seed,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("seed", "7", "test").unwrap();
        cfg.set("voi_extent", "8x8x6", "test").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text(), "echo").unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_and_malformed_keys() {
        let mut cfg = RunConfig::default();
        let e = cfg.apply_text("seed = 1\nfrobnicate = 2\n", "a.cfg").unwrap_err();
        assert!(matches!(e, Error::Config { ref location, .. } if location == "a.cfg:2"));
        assert!(cfg.apply_text("seed 1", "a.cfg").is_err());
        assert!(cfg.apply_text("seed = x", "a.cfg").is_err());
        assert!(cfg.apply_text("seed = 1\nseed = 2", "a.cfg").is_err());
    }

    #[test]
    fn precedence() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("run.cfg");
        std::fs::write(&f, "seed = 1\nfolds = 3\nbatch_size = 2\n").unwrap();
        let env = vec![
            ("GMGE_FOLDS".to_string(), "4".to_string()),
            ("GMGE_BATCH_SIZE".to_string(), "3".to_string()),
            ("HOME".to_string(), "/x".to_string()),
        ];
        let cli = vec![("batch_size".to_string(), "5".to_string())];
        let cfg = RunConfig::resolve(Some(&f), env, &cli).unwrap();
        assert_eq!((cfg.seed, cfg.folds, cfg.batch_size), (1, 4, 5));
        let bad_env = vec![("GMGE_NOPE".to_string(), "1".to_string())];
        assert!(RunConfig::resolve(None, bad_env, &[]).is_err());
    }

    #[test]
    fn default_models_plan() {
        RunConfig::default().validate().unwrap();
        let cfg = RunConfig {
            alpha: 0.2,
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
