//! Network config files.
//!
//! One directive per line, `#` starts a comment:
//!
//! ```text
//! input 1 28 28
//! conv 16 5 5 stride=1 pad=2 mode=ternary group=channel
//! bn
//! relu
//! maxpool 2 stride=2
//! fc 256 group=layer
//! hinge squared=true
//! train lr=0.01 decay=15,25 factor=0.1 momentum=0.9 wd=1e-4 batch=50 epochs=10 seed=1 mode=ternary
//! data mnist train=500 val=100
//! ```
//!
//! `data blobs classes=4 train=50 val=20 test=50 dims=8 separation=6` selects
//! synthetic Gaussian blobs instead of MNIST.

use std::collections::BTreeMap;
use std::str::FromStr;

use thiserror::Error;
use twn::nn::{Grouping, LayerSpec, LossKind, WeightMode};
use twn::trainer::TrainConfig;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("config line {line}: {message}")]
pub struct ConfigError {
    /// 1-based; 0 for problems with the file as a whole.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSpec {
    Mnist {
        train_per_class: usize,
        val_per_class: usize,
    },
    Blobs {
        classes: usize,
        train_per_class: usize,
        val_per_class: usize,
        test_per_class: usize,
        dims: usize,
        separation: f32,
    },
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Mnist {
            train_per_class: 500,
            val_per_class: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub input_dims: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    /// Config line of each entry in `layers`.
    pub layer_lines: Vec<usize>,
    pub train: TrainConfig,
    pub data: DataSpec,
}

struct Line<'a> {
    number: usize,
    words: Vec<&'a str>,
    options: BTreeMap<&'a str, &'a str>,
}

impl<'a> Line<'a> {
    fn error(&self, message: impl Into<String>) -> ConfigError {
        ConfigError {
            line: self.number,
            message: message.into(),
        }
    }

    fn positional<T: FromStr>(&self, index: usize, what: &str) -> Result<T, ConfigError> {
        let word = self
            .words
            .get(index)
            .ok_or_else(|| self.error(format!("{} needs {what}", self.words[0])))?;
        word.parse()
            .map_err(|_| self.error(format!("{what} must be a number, got {word:?}")))
    }

    fn optional<T: FromStr>(&self, index: usize, what: &str) -> Result<Option<T>, ConfigError> {
        match self.words.get(index) {
            None => Ok(None),
            Some(_) => self.positional(index, what).map(Some),
        }
    }

    fn max_positional(&self, n: usize) -> Result<(), ConfigError> {
        match self.words.get(n + 1) {
            Some(extra) => Err(self.error(format!("unexpected argument {extra:?} for {}", self.words[0]))),
            None => Ok(()),
        }
    }

    fn only_options(&self, allowed: &[&str]) -> Result<(), ConfigError> {
        match self.options.keys().find(|k| !allowed.contains(k)) {
            Some(k) => Err(self.error(format!("unknown option {k:?} for {}", self.words[0]))),
            None => Ok(()),
        }
    }

    fn option<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.options
            .get(key)
            .map(|v| v.parse::<T>().map_err(|e| self.error(format!("bad value for {key}: {v:?} ({e})"))))
            .transpose()
    }

    fn positive(&self, value: usize, what: &str) -> Result<usize, ConfigError> {
        if value == 0 {
            return Err(self.error(format!("{what} must be positive")));
        }
        Ok(value)
    }
}

fn split_line(number: usize, text: &str) -> Result<Option<Line<'_>>, ConfigError> {
    let text = text.split('#').next().unwrap_or("");
    let mut words = Vec::new();
    let mut options = BTreeMap::new();
    for token in text.split_whitespace() {
        match token.split_once('=') {
            Some((k, v)) if !words.is_empty() => {
                if k.is_empty() || v.is_empty() {
                    return Err(ConfigError {
                        line: number,
                        message: format!("malformed option {token:?}"),
                    });
                }
                if options.insert(k, v).is_some() {
                    return Err(ConfigError {
                        line: number,
                        message: format!("option {k:?} given twice"),
                    });
                }
            }
            _ if !options.is_empty() => {
                return Err(ConfigError {
                    line: number,
                    message: format!("positional argument {token:?} after options"),
                })
            }
            _ => words.push(token),
        }
    }
    Ok((!words.is_empty()).then_some(Line { number, words, options }))
}

fn parse_mode(line: &Line) -> Result<Option<WeightMode>, ConfigError> {
    line.options
        .get("mode")
        .map(|v| v.parse::<WeightMode>().map_err(|e| line.error(e)))
        .transpose()
}

fn parse_grouping(line: &Line) -> Result<Option<Grouping>, ConfigError> {
    line.options
        .get("group")
        .map(|v| v.parse::<Grouping>().map_err(|e| line.error(e)))
        .transpose()
}

fn parse_layer(line: &Line) -> Result<LayerSpec, ConfigError> {
    Ok(match line.words[0] {
        "conv" => {
            line.only_options(&["stride", "pad", "mode", "group"])?;
            line.max_positional(3)?;
            let out = line.positive(line.positional(1, "an output channel count")?, "output channels")?;
            let kh: usize = line.positional(2, "a kernel size")?;
            let kw = line.optional(3, "a kernel width")?.unwrap_or(kh);
            LayerSpec::Conv {
                out,
                kh: line.positive(kh, "kernel height")?,
                kw: line.positive(kw, "kernel width")?,
                stride: line.positive(line.option("stride")?.unwrap_or(1), "stride")?,
                pad: line.option("pad")?.unwrap_or(0),
                mode: parse_mode(line)?,
                grouping: parse_grouping(line)?,
            }
        }
        "fc" | "dense" => {
            line.only_options(&["mode", "group"])?;
            line.max_positional(1)?;
            LayerSpec::Dense {
                out: line.positive(line.positional(1, "an output size")?, "output size")?,
                mode: parse_mode(line)?,
                grouping: parse_grouping(line)?,
            }
        }
        "bn" | "batchnorm" => {
            line.only_options(&[])?;
            line.max_positional(0)?;
            LayerSpec::BatchNorm
        }
        "relu" => {
            line.only_options(&[])?;
            line.max_positional(0)?;
            LayerSpec::Relu
        }
        "maxpool" => {
            line.only_options(&["stride"])?;
            line.max_positional(1)?;
            let size = line.positive(line.positional(1, "a window size")?, "pool size")?;
            LayerSpec::MaxPool {
                size,
                stride: line.positive(line.option("stride")?.unwrap_or(size), "stride")?,
            }
        }
        "hinge" | "svm" => {
            line.only_options(&["squared"])?;
            line.max_positional(0)?;
            LayerSpec::Loss(LossKind::Hinge {
                squared: line.option("squared")?.unwrap_or(true),
            })
        }
        "softmax" => {
            line.only_options(&[])?;
            line.max_positional(0)?;
            LayerSpec::Loss(LossKind::SoftmaxCrossEntropy)
        }
        other => return Err(line.error(format!("unknown directive {other:?}"))),
    })
}

fn parse_train(line: &Line, config: &mut TrainConfig) -> Result<(), ConfigError> {
    line.only_options(&["lr", "decay", "factor", "momentum", "wd", "batch", "epochs", "seed", "mode"])?;
    line.max_positional(0)?;
    if let Some(v) = line.option("lr")? {
        config.initial_lr = v;
    }
    if let Some(v) = line.options.get("decay") {
        config.lr_decay_epochs = if *v == "none" {
            Vec::new()
        } else {
            v.split(',')
                .map(|e| e.parse().map_err(|_| line.error(format!("bad decay epoch {e:?}"))))
                .collect::<Result<_, _>>()?
        };
    }
    if let Some(v) = line.option("factor")? {
        config.lr_decay_factor = v;
    }
    if let Some(v) = line.option("momentum")? {
        config.momentum = v;
    }
    if let Some(v) = line.option("wd")? {
        config.weight_decay = v;
    }
    if let Some(v) = line.option("batch")? {
        config.batch_size = v;
    }
    if let Some(v) = line.option("epochs")? {
        config.epochs = v;
    }
    if let Some(v) = line.option("seed")? {
        config.seed = v;
    }
    if let Some(m) = parse_mode(line)? {
        config.weight_mode = m;
    }
    config.validate().map_err(|e| line.error(e.to_string()))
}

fn parse_data(line: &Line) -> Result<DataSpec, ConfigError> {
    line.max_positional(1)?;
    match line.words.get(1).copied() {
        Some("mnist") => {
            line.only_options(&["train", "val"])?;
            Ok(DataSpec::Mnist {
                train_per_class: line.positive(line.option("train")?.unwrap_or(500), "train")?,
                val_per_class: line.positive(line.option("val")?.unwrap_or(100), "val")?,
            })
        }
        Some("blobs") => {
            line.only_options(&["classes", "train", "val", "test", "dims", "separation"])?;
            let classes = line.positive(line.option("classes")?.unwrap_or(4), "classes")?;
            let separation: f32 = line.option("separation")?.unwrap_or(6.0);
            if !(separation > 0.0 && separation.is_finite()) {
                return Err(line.error("separation must be positive"));
            }
            let dims = line.option("dims")?.unwrap_or(classes);
            if dims < classes {
                return Err(line.error(format!("dims must be at least classes ({classes})")));
            }
            Ok(DataSpec::Blobs {
                classes,
                train_per_class: line.positive(line.option("train")?.unwrap_or(50), "train")?,
                val_per_class: line.positive(line.option("val")?.unwrap_or(20), "val")?,
                test_per_class: line.positive(line.option("test")?.unwrap_or(50), "test")?,
                dims,
                separation,
            })
        }
        Some(other) => Err(line.error(format!("unknown dataset {other:?} (expected mnist or blobs)"))),
        None => Err(line.error("data needs a dataset name")),
    }
}

pub fn parse_config(text: &str) -> Result<NetConfig, ConfigError> {
    let mut input_dims = None;
    let mut layers = Vec::new();
    let mut layer_lines = Vec::new();
    let mut train = TrainConfig::mnist(WeightMode::Ternary, 10, 1);
    let mut data = None;
    let mut seen_train = false;
    for (i, raw) in text.lines().enumerate() {
        let Some(line) = split_line(i + 1, raw)? else {
            continue;
        };
        match line.words[0] {
            "input" => {
                if input_dims.is_some() {
                    return Err(line.error("input given twice"));
                }
                if !layers.is_empty() {
                    return Err(line.error("input must come before the layers"));
                }
                line.only_options(&[])?;
                let dims = (1..line.words.len())
                    .map(|k| line.positional::<usize>(k, "a dimension").and_then(|d| line.positive(d, "input dims")))
                    .collect::<Result<Vec<_>, _>>()?;
                if dims.is_empty() {
                    return Err(line.error("input needs at least one dimension"));
                }
                input_dims = Some(dims);
            }
            "train" => {
                if std::mem::replace(&mut seen_train, true) {
                    return Err(line.error("train given twice"));
                }
                parse_train(&line, &mut train)?;
            }
            "data" => {
                if data.is_some() {
                    return Err(line.error("data given twice"));
                }
                data = Some(parse_data(&line)?);
            }
            _ => {
                if input_dims.is_none() {
                    return Err(line.error("layers must follow an input line"));
                }
                layers.push(parse_layer(&line)?);
                layer_lines.push(line.number);
            }
        }
    }
    let input_dims = input_dims.ok_or(ConfigError {
        line: 0,
        message: "missing input line".into(),
    })?;
    if layers.is_empty() {
        return Err(ConfigError {
            line: 0,
            message: "no layers".into(),
        });
    }
    Ok(NetConfig {
        input_dims,
        layers,
        layer_lines,
        train,
        data: data.unwrap_or_default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const LENET: &str = "\
# reduced LeNet
input 1 28 28
conv 16 5 5 pad=2
bn
relu
maxpool 2
conv 32 5 pad=2 mode=binary group=layer
bn
relu
maxpool 2 stride=2
fc 256
bn
relu
fc 10
hinge

train epochs=3 seed=7 decay=none
data mnist train=100 val=10
";

    #[test]
    fn parses_lenet() {
        let cfg = parse_config(LENET).unwrap();
        assert_eq!(cfg.input_dims, [1, 28, 28]);
        assert_eq!(cfg.layers.len(), 13);
        assert_eq!(cfg.layer_lines[0], 3);
        assert_eq!(
            cfg.layers[4],
            LayerSpec::Conv {
                out: 32,
                kh: 5,
                kw: 5,
                stride: 1,
                pad: 2,
                mode: Some(WeightMode::Binary),
                grouping: Some(Grouping::PerLayer)
            }
        );
        assert_eq!(cfg.layers[7], LayerSpec::MaxPool { size: 2, stride: 2 });
        assert_eq!(cfg.layers[12], LayerSpec::Loss(LossKind::Hinge { squared: true }));
        assert_eq!((cfg.train.epochs, cfg.train.seed), (3, 7));
        assert!(cfg.train.lr_decay_epochs.is_empty());
        assert_eq!(cfg.train.batch_size, 50);
        assert_eq!(
            cfg.data,
            DataSpec::Mnist {
                train_per_class: 100,
                val_per_class: 10
            }
        );
    }

    #[test]
    fn matches_library_lenet() {
        let cfg = parse_config(include_str!("../../../configs/lenet-small.cfg")).unwrap();
        assert_eq!(cfg.layers, twn::nn::lenet_small());
        assert_eq!(cfg.train, TrainConfig::mnist(WeightMode::Ternary, 10, 1));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let cases = [
            ("input 4\nfc 3\nrelu x\n", 3, "unexpected argument"),
            ("input 4\nfc\n", 2, "needs an output size"),
            ("input 4\nfc 3 mode=quinary\n", 2, "unknown weight mode"),
            ("input 4\n\n# c\nconv 3 3 strid=2\n", 4, "unknown option"),
            ("fc 3\n", 1, "must follow an input"),
            ("input 4\nwobble\n", 2, "unknown directive"),
            ("input 4\nfc 3\ntrain batch=1\n", 3, "batch_size"),
            ("input 4\nfc 3\ntrain lr=fast\n", 3, "bad value for lr"),
            ("input 4\nfc 3\ndata cifar\n", 3, "unknown dataset"),
            ("input 0\n", 1, "positive"),
            ("input 4\nfc 3 mode=full 9\n", 2, "after options"),
            ("input 4\nfc 0\n", 2, "positive"),
            ("input 4\ninput 4\n", 2, "twice"),
            ("", 0, "missing input"),
            ("input 4\n", 0, "no layers"),
        ];
        for (text, line, needle) in cases {
            let err = parse_config(text).unwrap_err();
            assert_eq!(err.line, line, "{text:?}: {err}");
            assert!(err.message.contains(needle), "{text:?}: {err}");
        }
    }

    #[test]
    fn blobs_and_defaults() {
        let cfg = parse_config("input 8\nfc 4 group=channel\nsoftmax\ndata blobs classes=4 dims=8 separation=5\n").unwrap();
        assert_eq!(
            cfg.data,
            DataSpec::Blobs {
                classes: 4,
                train_per_class: 50,
                val_per_class: 20,
                test_per_class: 50,
                dims: 8,
                separation: 5.0
            }
        );
        assert_eq!(cfg.layers[1], LayerSpec::Loss(LossKind::SoftmaxCrossEntropy));
        let err = parse_config("input 8\nfc 4\ndata blobs classes=9 dims=8\n").unwrap_err();
        assert_eq!(err.line, 3);
    }
}
