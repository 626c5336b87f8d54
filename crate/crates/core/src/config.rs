//! Hyperparameters and the flat `key = value` config format.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::Activation;

/// Switches that disable parts of the adaptation objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Ablation {
    /// Propagate from labeled targets only (no low-uncertainty seeds).
    pub no_augmentation: bool,
    pub no_ent: bool,
    /// Drops the pseudo-label loss and, with it, label propagation.
    pub no_ps: bool,
    pub no_vat: bool,
    pub no_div: bool,
}

impl Ablation {
    pub const ALL: Ablation = Ablation {
        no_augmentation: true,
        no_ent: true,
        no_ps: true,
        no_vat: true,
        no_div: true,
    };
}

/// Every knob of pretraining and adaptation.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    /// Weight of the pseudo-label loss.
    pub lambda0: f64,
    /// Propagation damping.
    pub alpha: f64,
    /// Neighbours kept per node.
    pub k_hat: usize,
    pub eps_smooth: f64,
    pub eps_vat: f64,
    /// Power-iteration probe scale; `None` means `1e-6 · sqrt(input dim)`.
    pub vat_xi: Option<f64>,
    pub vat_power_iters: usize,
    pub lr_encoder: f64,
    pub lr_bottleneck: f64,
    /// Used during source pretraining only; the classifier is frozen later.
    pub lr_classifier: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// `None` means one pass over the unlabeled rows per epoch.
    pub steps_per_epoch: Option<usize>,
    pub mc_passes: usize,
    pub dropout_rate: f64,
    /// Whether training forward passes use dropout.
    pub train_dropout: bool,
    pub seed: u64,
    pub pretrain_epochs: usize,
    pub hidden_dims: Vec<usize>,
    pub bottleneck_dim: usize,
    pub activation: Activation,
    pub ablation: Ablation,
    /// Writes the propagation graph of the last epoch here when set.
    pub debug_graph: Option<PathBuf>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            lambda0: 0.5,
            alpha: 0.9,
            k_hat: 10,
            eps_smooth: 0.1,
            eps_vat: 1.0,
            vat_xi: None,
            vat_power_iters: 1,
            lr_encoder: 0.001,
            lr_bottleneck: 0.01,
            lr_classifier: 0.01,
            momentum: 0.9,
            batch_size: 64,
            epochs: 30,
            steps_per_epoch: None,
            mc_passes: 10,
            dropout_rate: 0.5,
            train_dropout: false,
            seed: 2021,
            pretrain_epochs: 50,
            hidden_dims: vec![32],
            bottleneck_dim: 16,
            activation: Activation::Tanh,
            ablation: Ablation::default(),
            debug_graph: None,
        }
    }
}

/// Keys accepted by [`AdaptConfig::set`], in the order they are echoed.
pub const KEYS: &[&str] = &[
    "lambda0",
    "alpha",
    "k-hat",
    "eps-smooth",
    "eps-vat",
    "vat-xi",
    "vat-power-iters",
    "lr-encoder",
    "lr-bottleneck",
    "lr-classifier",
    "momentum",
    "batch-size",
    "epochs",
    "steps-per-epoch",
    "mc-passes",
    "dropout-rate",
    "train-dropout",
    "seed",
    "pretrain-epochs",
    "hidden-dims",
    "bottleneck-dim",
    "activation",
    "no-augmentation",
    "no-ent",
    "no-ps",
    "no-vat",
    "no-div",
    "debug-graph",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Param(format!("{key}: cannot parse {v:?}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Param(format!(
            "{key}: expected a boolean, got {v:?}"
        ))),
    }
}

fn optional<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v == "auto" || v == "none" {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

impl AdaptConfig {
    /// Sets one field from its kebab-case key. Underscores are accepted too.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('_', "-");
        let v = value.trim();
        match key.as_str() {
            "lambda0" => self.lambda0 = num(&key, v)?,
            "alpha" => self.alpha = num(&key, v)?,
            "k-hat" => self.k_hat = num(&key, v)?,
            "eps-smooth" => self.eps_smooth = num(&key, v)?,
            "eps-vat" => self.eps_vat = num(&key, v)?,
            "vat-xi" => self.vat_xi = optional(&key, v)?,
            "vat-power-iters" => self.vat_power_iters = num(&key, v)?,
            "lr-encoder" => self.lr_encoder = num(&key, v)?,
            "lr-bottleneck" => self.lr_bottleneck = num(&key, v)?,
            "lr-classifier" => self.lr_classifier = num(&key, v)?,
            "momentum" => self.momentum = num(&key, v)?,
            "batch-size" => self.batch_size = num(&key, v)?,
            "epochs" => self.epochs = num(&key, v)?,
            "steps-per-epoch" => self.steps_per_epoch = optional(&key, v)?,
            "mc-passes" => self.mc_passes = num(&key, v)?,
            "dropout-rate" => self.dropout_rate = num(&key, v)?,
            "train-dropout" => self.train_dropout = flag(&key, v)?,
            "seed" => self.seed = num(&key, v)?,
            "pretrain-epochs" => self.pretrain_epochs = num(&key, v)?,
            "hidden-dims" => {
                self.hidden_dims = v
                    .split(',')
                    .map(|d| num(&key, d.trim()))
                    .collect::<Result<_>>()?
            }
            "bottleneck-dim" => self.bottleneck_dim = num(&key, v)?,
            "activation" => self.activation = v.parse()?,
            "no-augmentation" => self.ablation.no_augmentation = flag(&key, v)?,
            "no-ent" => self.ablation.no_ent = flag(&key, v)?,
            "no-ps" => self.ablation.no_ps = flag(&key, v)?,
            "no-vat" => self.ablation.no_vat = flag(&key, v)?,
            "no-div" => self.ablation.no_div = flag(&key, v)?,
            "debug-graph" => {
                self.debug_graph = if v.is_empty() || v == "none" {
                    None
                } else {
                    Some(PathBuf::from(v))
                }
            }
            _ => return Err(Error::Param(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Current value of a key, formatted as [`AdaptConfig::set`] accepts it.
    pub fn get(&self, key: &str) -> Option<String> {
        let key = key.replace('_', "-");
        let opt = |o: Option<String>| o.unwrap_or_else(|| "auto".into());
        Some(match key.as_str() {
            "lambda0" => self.lambda0.to_string(),
            "alpha" => self.alpha.to_string(),
            "k-hat" => self.k_hat.to_string(),
            "eps-smooth" => self.eps_smooth.to_string(),
            "eps-vat" => self.eps_vat.to_string(),
            "vat-xi" => opt(self.vat_xi.map(|v| v.to_string())),
            "vat-power-iters" => self.vat_power_iters.to_string(),
            "lr-encoder" => self.lr_encoder.to_string(),
            "lr-bottleneck" => self.lr_bottleneck.to_string(),
            "lr-classifier" => self.lr_classifier.to_string(),
            "momentum" => self.momentum.to_string(),
            "batch-size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "steps-per-epoch" => opt(self.steps_per_epoch.map(|v| v.to_string())),
            "mc-passes" => self.mc_passes.to_string(),
            "dropout-rate" => self.dropout_rate.to_string(),
            "train-dropout" => self.train_dropout.to_string(),
            "seed" => self.seed.to_string(),
            "pretrain-epochs" => self.pretrain_epochs.to_string(),
            "hidden-dims" => self
                .hidden_dims
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "bottleneck-dim" => self.bottleneck_dim.to_string(),
            "activation" => self.activation.name().to_string(),
            "no-augmentation" => self.ablation.no_augmentation.to_string(),
            "no-ent" => self.ablation.no_ent.to_string(),
            "no-ps" => self.ablation.no_ps.to_string(),
            "no-vat" => self.ablation.no_vat.to_string(),
            "no-div" => self.ablation.no_div.to_string(),
            "debug-graph" => self
                .debug_graph
                .as_ref()
                .map_or_else(|| "none".into(), |p| p.display().to_string()),
            _ => return None,
        })
    }

    /// Applies a `key = value` document on top of `self`. Blank lines and
    /// lines starting with `#` are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            })?;
            self.set(k, v).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// All keys in a stable order, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("known key"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Param(m));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if !(self.lambda0 >= 0.0) || !self.lambda0.is_finite() {
            return bad(format!("lambda0 must be >= 0, got {}", self.lambda0));
        }
        for (name, lr) in [
            ("lr-encoder", self.lr_encoder),
            ("lr-bottleneck", self.lr_bottleneck),
            ("lr-classifier", self.lr_classifier),
        ] {
            if !(lr > 0.0) || !lr.is_finite() {
                return bad(format!("{name} must be > 0, got {lr}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if !(0.0..1.0).contains(&self.eps_smooth) {
            return bad(format!(
                "eps-smooth must lie in [0, 1), got {}",
                self.eps_smooth
            ));
        }
        if !(self.eps_vat > 0.0) {
            return bad(format!("eps-vat must be > 0, got {}", self.eps_vat));
        }
        if let Some(xi) = self.vat_xi {
            if !(xi > 0.0) {
                return bad(format!("vat-xi must be > 0, got {xi}"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!(
                "dropout-rate must lie in [0, 1), got {}",
                self.dropout_rate
            ));
        }
        for (name, v) in [
            ("k-hat", self.k_hat),
            ("batch-size", self.batch_size),
            ("mc-passes", self.mc_passes),
            ("vat-power-iters", self.vat_power_iters),
            ("bottleneck-dim", self.bottleneck_dim),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps-per-epoch must be at least 1".into());
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return bad(format!(
                "hidden-dims must be nonempty and positive, got {:?}",
                self.hidden_dims
            ));
        }
        Ok(())
    }

    /// Network layout for `input_dim` features and `num_classes` classes.
    pub fn model_dims(&self, input_dim: usize, num_classes: usize) -> Vec<usize> {
        let mut d = vec![input_dim];
        d.extend(&self.hidden_dims);
        d.push(self.bottleneck_dim);
        d.push(num_classes);
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn text_round_trip() {
        let cfg = AdaptConfig {
            lambda0: 0.3,
            hidden_dims: vec![16, 8],
            ablation: Ablation {
                no_vat: true,
                ..Ablation::default()
            },
            steps_per_epoch: Some(7),
            activation: Activation::Relu,
            ..AdaptConfig::default()
        };
        assert_eq!(AdaptConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn parse_accepts_comments_and_underscores() {
        let cfg = AdaptConfig::parse("# comment\n\nk_hat = 5\n  # indented\nno-ps=true\n").unwrap();
        assert_eq!(cfg.k_hat, 5);
        assert!(cfg.ablation.no_ps);
        let cfg = AdaptConfig::parse("debug-graph = out/#1.csv\n").unwrap();
        assert_eq!(cfg.debug_graph, Some(PathBuf::from("out/#1.csv")));
        assert_eq!(AdaptConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn parse_errors_carry_line() {
        assert!(matches!(
            AdaptConfig::parse("alpha = 0.9\nbogus = 1\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            AdaptConfig::parse("alpha 0.9"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            AdaptConfig::parse("epochs = -3"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn validation() {
        assert!(AdaptConfig::default().validate().is_ok());
        for (k, v) in [
            ("alpha", "1.0"),
            ("alpha", "0"),
            ("lambda0", "-0.1"),
            ("lr-encoder", "0"),
            ("k-hat", "0"),
            ("dropout-rate", "1"),
            ("batch-size", "0"),
        ] {
            let mut c = AdaptConfig::default();
            c.set(k, v).unwrap();
            assert!(matches!(c.validate(), Err(Error::Param(_))), "{k}={v}");
        }
    }

    proptest! {
        #[test]
        fn parse_never_panics(s in "\\PC{0,200}") {
            let _ = AdaptConfig::parse(&s);
        }

        #[test]
        fn accepted_text_round_trips(
            key in proptest::sample::select(KEYS),
            value in "[ -~]{0,12}",
        ) {
            if let Ok(cfg) = AdaptConfig::parse(&format!("{key} = {value}")) {
                let again = AdaptConfig::parse(&cfg.to_text()).unwrap();
                prop_assert_eq!(again.to_text(), cfg.to_text());
            }
        }
    }
}
