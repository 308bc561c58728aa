//! Text checkpoints with bit-exact parameter round trips.
//!
//! Values are written row-major with 17 significant digits, which is enough
//! to recover every finite `f64` exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::losses::ClassifierHead;
use crate::model::{Activation, Dense, EncoderParams};
use crate::objective::ModelParams;
use crate::params::Parameterized;
use crate::vib::{SigmaLink, VibHeadParams};

pub const FORMAT_TAG: &str = "vibspk-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub config_hash: u64,
    pub params: ModelParams,
}

fn activation_token(a: Activation) -> &'static str {
    match a {
        Activation::Tanh => "tanh",
        Activation::Linear => "linear",
    }
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let p = &self.params;
        let mut out = String::new();
        let _ = writeln!(out, "{FORMAT_TAG} {FORMAT_VERSION}");
        let _ = writeln!(out, "epoch {}", self.epoch);
        let _ = writeln!(out, "config_hash {:016x}", self.config_hash);
        let _ = writeln!(out, "activation {}", activation_token(p.encoder.activation));
        let link = match p.head.link {
            SigmaLink::Softplus => "softplus",
            SigmaLink::Exp => "exp",
        };
        let _ = writeln!(out, "sigma_link {link}");
        let _ = writeln!(out, "classifier_scale {:.16e}", p.classifier.scale);
        let _ = writeln!(out, "classifier_normalized {}", p.classifier.length_normalize);
        for b in p.blocks() {
            let _ = writeln!(out, "block {} {} {}", b.name, b.rows, b.cols);
            for r in 0..b.rows {
                let row: Vec<String> = (0..b.cols)
                    .map(|c| format!("{:.16e}", b.data[c * b.rows + r]))
                    .collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if !self.params.all_finite() {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        crate::io::write_text(path, &self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&crate::io::read_text(path)?, &path.display().to_string())
    }

    pub fn from_text(text: &str, file: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            file: file.to_string(),
            line,
            msg,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let mut header = BTreeMap::new();
        let mut blocks: Vec<(String, usize, usize, Vec<f64>)> = Vec::new();
        let (ln, first) = lines.next().ok_or_else(|| err(1, "empty checkpoint".into()))?;
        if first != format!("{FORMAT_TAG} {FORMAT_VERSION}") {
            return Err(err(ln, format!("unsupported checkpoint header `{first}`")));
        }
        while let Some((ln, line)) = lines.next() {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f[0] != "block" {
                if f.len() != 2 {
                    return Err(err(ln, format!("malformed header line `{line}`")));
                }
                header.insert(f[0].to_string(), (ln, f[1].to_string()));
                continue;
            }
            if f.len() != 4 {
                return Err(err(ln, "expected `block name rows cols`".into()));
            }
            let dims: Vec<usize> = f[2..]
                .iter()
                .map(|t| t.parse().map_err(|_| err(ln, format!("invalid block size `{t}`"))))
                .collect::<Result<_>>()?;
            let (rows, cols) = (dims[0], dims[1]);
            let mut row_major = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (rl, row) = lines
                    .next()
                    .ok_or_else(|| err(ln, format!("block {} is truncated", f[1])))?;
                let vals: Vec<f64> = row
                    .split_whitespace()
                    .map(|t| t.parse().map_err(|_| err(rl, format!("invalid value `{t}`"))))
                    .collect::<Result<_>>()?;
                if vals.len() != cols {
                    return Err(err(rl, format!("expected {cols} values, found {}", vals.len())));
                }
                row_major.extend(vals);
            }
            blocks.push((f[1].to_string(), rows, cols, row_major));
        }
        let mut get = |key: &str| header.remove(key).ok_or_else(|| err(ln, format!("missing `{key}`")));
        let (eln, epoch) = get("epoch")?;
        let epoch = epoch.parse().map_err(|_| err(eln, "invalid epoch".into()))?;
        let (hln, hash) = get("config_hash")?;
        let config_hash = u64::from_str_radix(&hash, 16).map_err(|_| err(hln, "invalid config hash".into()))?;
        let activation = match get("activation")?.1.as_str() {
            "tanh" => Activation::Tanh,
            "linear" => Activation::Linear,
            other => return Err(err(ln, format!("unknown activation `{other}`"))),
        };
        let link = match get("sigma_link")?.1.as_str() {
            "softplus" => SigmaLink::Softplus,
            "exp" => SigmaLink::Exp,
            other => return Err(err(ln, format!("unknown sigma link `{other}`"))),
        };
        let (sln, scale) = get("classifier_scale")?;
        let scale: f64 = scale.parse().map_err(|_| err(sln, "invalid classifier scale".into()))?;
        let normalized = get("classifier_normalized")?.1 == "true";
        let params = assemble(&blocks, activation, link, scale, normalized)?;
        Ok(Self {
            epoch,
            config_hash,
            params,
        })
    }
}

fn assemble(
    blocks: &[(String, usize, usize, Vec<f64>)],
    activation: Activation,
    link: SigmaLink,
    scale: f64,
    normalized: bool,
) -> Result<ModelParams> {
    let shape_of = |name: &str| blocks.iter().find(|b| b.0 == name).map(|b| (b.1, b.2));
    let missing = |name: &str| Error::Config(format!("checkpoint lacks block `{name}`"));
    let mut layers = Vec::new();
    while let Some((rows, cols)) = shape_of(&format!("encoder.{}.weight", layers.len())) {
        layers.push(Dense::zeros(cols, rows));
    }
    let (embed, pooled) = shape_of("head.mu.weight").ok_or_else(|| missing("head.mu.weight"))?;
    let (classes, _) = shape_of("classifier.prototypes").ok_or_else(|| missing("classifier.prototypes"))?;
    let prototypes = DMatrix::zeros(classes, embed);
    let mut classifier = if shape_of("classifier.bias").is_some() {
        ClassifierHead::affine(prototypes, DVector::zeros(classes))
    } else {
        ClassifierHead::angular(prototypes, scale)
    };
    classifier.scale = scale;
    classifier.length_normalize = normalized;
    let mut head = VibHeadParams::zeros(pooled, embed);
    head.link = link;
    let mut params = ModelParams {
        encoder: EncoderParams { layers, activation },
        head,
        classifier,
    };
    let mut seen = 0;
    for dst in params.blocks_mut() {
        let (_, rows, cols, data) = blocks
            .iter()
            .find(|b| b.0 == dst.name)
            .ok_or_else(|| missing(&dst.name))?;
        if (*rows, *cols) != (dst.rows, dst.cols) {
            return Err(Error::shape(
                "checkpoint block",
                format!("{}x{}", dst.rows, dst.cols),
                format!("{rows}x{cols}"),
            ));
        }
        for r in 0..*rows {
            for c in 0..*cols {
                dst.data[c * rows + r] = data[r * cols + c];
            }
        }
        seen += 1;
    }
    if seen != blocks.len() {
        return Err(Error::Config("checkpoint contains unexpected blocks".into()));
    }
    params.encoder.validate()?;
    params.classifier.validate()?;
    if params.head.input_dim() != 2 * params.encoder.output_dim() {
        return Err(Error::shape(
            "checkpoint head input",
            2 * params.encoder.output_dim(),
            params.head.input_dim(),
        ));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::ModelShape;
    use crate::rng::SeedTree;

    fn model(angular: bool) -> ModelParams {
        let shape = ModelShape {
            input_dim: 3,
            frame_layers: vec![4, 2],
            embed_dim: 3,
            num_classes: 5,
            angular,
            scale: 30.0,
            link: SigmaLink::Exp,
        };
        ModelParams::init(&shape, &mut SeedTree::new(4).rng()).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for angular in [false, true] {
            let mut p = model(angular);
            p.encoder.layers[0].weight[(1, 2)] = 1.0 / 3.0;
            p.head.mu_layer.bias[0] = -5e-310;
            p.classifier.prototypes[(4, 0)] = f64::MAX;
            let ck = Checkpoint {
                epoch: 7,
                config_hash: 0xdead_beef,
                params: p,
            };
            let back = Checkpoint::from_text(&ck.to_text(), "ck").unwrap();
            assert_eq!(back, ck);
            for (a, b) in back.params.blocks().iter().zip(ck.params.blocks()) {
                assert!(a.data.iter().zip(b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/model.ckpt");
        let ck = Checkpoint {
            epoch: 1,
            config_hash: 3,
            params: model(false),
        };
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let ck = Checkpoint {
            epoch: 1,
            config_hash: 3,
            params: model(false),
        };
        let text = ck.to_text();
        assert!(Checkpoint::from_text(&text.replacen("vibspk-checkpoint 1", "other 2", 1), "c").is_err());
        let truncated: String = text
            .lines()
            .take(text.lines().count() - 1)
            .map(|l| format!("{l}\n"))
            .collect();
        assert!(Checkpoint::from_text(&truncated, "c").is_err());
        assert!(Checkpoint::from_text(&text.replace("block head.sigma.bias", "block head.extra.bias"), "c").is_err());
    }

    #[test]
    fn non_finite_parameters_not_saved() {
        let mut p = model(false);
        p.head.mu_layer.bias[0] = f64::NAN;
        let dir = tempfile::tempdir().unwrap();
        let ck = Checkpoint {
            epoch: 0,
            config_hash: 0,
            params: p,
        };
        assert!(ck.save(&dir.path().join("x")).is_err());
    }
}
