//! Plain-text parameter checkpoints.
//!
//! ```text
//! p3sgd-checkpoint v1
//! kind=mlp
//! input_dim=16
//! hidden_dim=8
//! activation=tanh
//! seed=7
//! round=100
//! params=145
//! 0.0123...
//! ...
//! ```
//!
//! Values are written with Rust's shortest round-trip float formatting, so
//! reading a checkpoint back yields bit-identical parameters.

use std::fmt::Write as _;
use std::path::Path;

use super::{Activation, ModelKind, ModelSpec};
use crate::error::{Error, Result};
use crate::numkit::ParamVector;

const MAGIC: &str = "p3sgd-checkpoint v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub seed: u64,
    pub round: u64,
    pub theta: ParamVector,
}

impl Checkpoint {
    pub fn new(spec: ModelSpec, seed: u64, round: u64, theta: ParamVector) -> Result<Self> {
        spec.validate()?;
        spec.check_theta(&theta)?;
        Ok(Self {
            spec,
            seed,
            round,
            theta,
        })
    }

    pub fn to_text(&self) -> String {
        let kind = match self.spec.kind {
            ModelKind::Logistic => "logistic",
            ModelKind::Mlp => "mlp",
        };
        let activation = match self.spec.activation {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        };
        let mut out = String::new();
        let _ = writeln!(out, "{MAGIC}");
        let _ = writeln!(out, "kind={kind}");
        let _ = writeln!(out, "input_dim={}", self.spec.input_dim);
        let _ = writeln!(out, "hidden_dim={}", self.spec.hidden_dim);
        let _ = writeln!(out, "activation={activation}");
        let _ = writeln!(out, "seed={}", self.seed);
        let _ = writeln!(out, "round={}", self.round);
        let _ = writeln!(out, "params={}", self.theta.dim());
        for v in self.theta.as_slice() {
            let _ = writeln!(out, "{v:?}");
        }
        out
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: origin.to_string(),
            line: line as u64,
            message,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        match lines.next() {
            Some((_, MAGIC)) => {}
            _ => return Err(err(1, format!("missing `{MAGIC}` header"))),
        }

        let mut header = |key: &str| -> Result<(usize, String)> {
            let (n, line) = lines
                .next()
                .ok_or_else(|| err(0, format!("truncated header, expected `{key}`")))?;
            match line.split_once('=') {
                Some((k, v)) if k == key => Ok((n, v.to_string())),
                _ => Err(err(n, format!("expected `{key}=...`, found `{line}`"))),
            }
        };
        let number =
            |(n, v): (usize, String)| -> Result<u64> { v.parse::<u64>().map_err(|e| err(n, format!("`{v}`: {e}"))) };

        let (n, kind) = header("kind")?;
        let kind = match kind.as_str() {
            "logistic" => ModelKind::Logistic,
            "mlp" => ModelKind::Mlp,
            other => return Err(err(n, format!("unknown model kind `{other}`"))),
        };
        let input_dim = number(header("input_dim")?)? as usize;
        let hidden_dim = number(header("hidden_dim")?)? as usize;
        let (n, act) = header("activation")?;
        let activation = match act.as_str() {
            "tanh" => Activation::Tanh,
            "identity" => Activation::Identity,
            other => return Err(err(n, format!("unknown activation `{other}`"))),
        };
        let seed = number(header("seed")?)?;
        let round = number(header("round")?)?;
        let (params_line, params) = header("params")?;
        let count = number((params_line, params))? as usize;

        let spec = ModelSpec {
            kind,
            input_dim,
            hidden_dim,
            activation,
        };
        spec.validate().map_err(|e| err(params_line, e.to_string()))?;
        if count != spec.param_count() {
            return Err(err(
                params_line,
                format!("params={count} but the model has {} parameters", spec.param_count()),
            ));
        }

        let mut values = Vec::with_capacity(count);
        for (n, line) in lines {
            if line.is_empty() {
                continue;
            }
            let v: f64 = line.parse().map_err(|e| err(n, format!("`{line}`: {e}")))?;
            if !v.is_finite() {
                return Err(err(n, format!("non-finite parameter `{line}`")));
            }
            values.push(v);
        }
        if values.len() != count {
            return Err(err(
                0,
                format!("expected {count} parameter values, found {}", values.len()),
            ));
        }
        Checkpoint::new(spec, seed, round, ParamVector::new(values)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::init_params;
    use crate::numkit::RandomSource;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let spec = ModelSpec::logistic(2);
        let ck = Checkpoint::new(spec, 9, 3, ParamVector::new(vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(
            ck.to_text(),
            "p3sgd-checkpoint v1\nkind=logistic\ninput_dim=2\nhidden_dim=0\nactivation=tanh\nseed=9\nround=3\nparams=3\n0.5\n-1.0\n2.0\n"
        );
    }

    #[test]
    fn rejects_malformed() {
        let spec = ModelSpec::logistic(1);
        let good = Checkpoint::new(spec, 1, 1, ParamVector::zeros(2)).unwrap().to_text();
        assert!(Checkpoint::parse(&good, "x").is_ok());
        assert!(Checkpoint::parse(&good.replace("params=2", "params=3"), "x").is_err());
        let bad_value = good.replacen("\n0.0\n", "\nabc\n", 1);
        match Checkpoint::parse(&bad_value, "ck.txt") {
            Err(Error::Parse { line, path, .. }) => {
                assert_eq!(line, 9);
                assert_eq!(path, "ck.txt");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(Checkpoint::parse("nonsense", "x").is_err());
        assert!(Checkpoint::new(spec, 1, 1, ParamVector::zeros(5)).is_err());
    }

    proptest! {
        #[test]
        fn text_round_trip_is_exact(seed in any::<u64>(), round in 0u64..10_000, d in 1usize..6, h in 1usize..6) {
            let spec = ModelSpec::mlp(d, h);
            let mut rng = RandomSource::new(seed);
            let theta = init_params(&spec, &mut rng).unwrap().scale(1e3 * rng.standard_normal()).unwrap();
            let ck = Checkpoint::new(spec, seed, round, theta).unwrap();
            let back = Checkpoint::parse(&ck.to_text(), "mem").unwrap();
            prop_assert_eq!(back, ck);
        }
    }
}
