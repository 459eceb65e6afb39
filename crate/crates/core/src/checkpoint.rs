//! Model files.
//!
//! A checkpoint is line-oriented ASCII:
//!
//! ```text
//! PAICONV-CHECKPOINT 1
//! variant full
//! conv_channels 16 16 32
//! position_width 8
//! aggregate_width 64
//! fc_widths 32 3
//! k 16
//! kernel_len 16
//! dropout 0.5
//! downsample_ratios
//! pooling max
//! input_features 0
//! classes 3
//! sphere
//! cube
//! torus
//! tensor kernel 16 3
//! <one line per row, values separated by spaces>
//! tensor conv0.filter 384 16
//! ...
//! velocity conv0.filter 384 16
//! ...
//! end
//! ```
//!
//! Values are written in Rust's shortest round-trip notation, so loading
//! restores every parameter bit for bit. Parameter tensors appear in model
//! order, followed by the momentum buffers in the same order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::netcls::{ClassifierConfig, ClassifierState, Pooling};
use crate::numkit::Matrix;

pub const MAGIC: &str = "PAICONV-CHECKPOINT";
pub const VERSION: u32 = 1;

/// A trained model plus the names of the classes its logits score.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: ClassifierState,
    pub class_names: Vec<String>,
}

fn join<T: ToString>(values: &[T]) -> String {
    values
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

fn write_tensor(out: &mut String, tag: &str, name: &str, m: &Matrix) {
    let _ = writeln!(out, "{tag} {name} {} {}", m.rows(), m.cols());
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let c = self.state.config();
        let mut out = format!("{MAGIC} {VERSION}\n");
        let _ = writeln!(out, "variant {}", c.variant);
        let _ = writeln!(out, "conv_channels {}", join(&c.conv_channels));
        let _ = writeln!(out, "position_width {}", c.position_width);
        let _ = writeln!(out, "aggregate_width {}", c.aggregate_width);
        let _ = writeln!(out, "fc_widths {}", join(&c.fc_widths));
        let _ = writeln!(out, "k {}", c.k);
        let _ = writeln!(out, "kernel_len {}", c.kernel_len);
        let _ = writeln!(out, "dropout {:?}", c.dropout);
        let _ = writeln!(out, "downsample_ratios {}", join(&c.downsample_ratios));
        let _ = writeln!(out, "pooling {}", c.pooling.name());
        let _ = writeln!(out, "input_features {}", c.input_features);
        let _ = writeln!(out, "classes {}", self.class_names.len());
        for name in &self.class_names {
            let _ = writeln!(out, "{name}");
        }
        write_tensor(&mut out, "tensor", "kernel", self.state.kernel.points());
        let named = self.state.named_params();
        for (name, m) in &named {
            if name != "kernel" {
                write_tensor(&mut out, "tensor", name, m);
            }
        }
        for ((name, _), v) in named.iter().zip(&self.state.velocity) {
            write_tensor(&mut out, "velocity", name, v);
        }
        out.push_str("end\n");
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut r = Reader {
            lines: text.lines().enumerate(),
        };
        let header = r.line()?;
        let version = header
            .1
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| bad(header.0, "not a PAI-Conv checkpoint"))?;
        if version != VERSION.to_string() {
            return Err(bad(header.0, &format!("unsupported version `{version}`")));
        }

        let config = ClassifierConfig {
            variant: r.field("variant")?.1.parse()?,
            conv_channels: r.list("conv_channels")?,
            position_width: r.scalar("position_width")?,
            aggregate_width: r.scalar("aggregate_width")?,
            fc_widths: r.list("fc_widths")?,
            k: r.scalar("k")?,
            kernel_len: r.scalar("kernel_len")?,
            dropout: r.scalar("dropout")?,
            downsample_ratios: r.list("downsample_ratios")?,
            pooling: Pooling::parse(&r.field("pooling")?.1)?,
            input_features: r.scalar("input_features")?,
        };
        let n_classes: usize = r.scalar("classes")?;
        let mut class_names = Vec::with_capacity(n_classes);
        for _ in 0..n_classes {
            class_names.push(r.line()?.1.to_string());
        }

        let mut state = ClassifierState::build(config, 0)?;
        let kernel = r.tensor("tensor", "kernel", state.kernel.points().shape())?;
        if kernel.row(0).iter().any(|&v| v != 0.0) {
            return Err(Error::Checkpoint("kernel point 0 is not the origin".into()));
        }
        let learnable = state.config().variant.learns_kernel();
        let names: Vec<(String, (usize, usize))> = state
            .named_params()
            .into_iter()
            .map(|(n, m)| (n, m.shape()))
            .collect();
        let mut params = Vec::with_capacity(names.len());
        for (name, shape) in &names {
            if name == "kernel" {
                params.push(kernel.clone());
            } else {
                params.push(r.tensor("tensor", name, *shape)?);
            }
        }
        let mut velocity = Vec::with_capacity(names.len());
        for (name, shape) in &names {
            velocity.push(r.tensor("velocity", name, *shape)?);
        }
        let end = r.line()?;
        if end.1 != "end" {
            return Err(bad(end.0, "expected `end`"));
        }

        if !learnable {
            *state.kernel_points_mut() = kernel;
        }
        for (dst, src) in state.params_mut().into_iter().zip(params) {
            *dst = src;
        }
        state.velocity = velocity;
        Ok(Checkpoint { state, class_names })
    }
}

fn bad(line: usize, msg: &str) -> Error {
    Error::Checkpoint(format!("line {}: {msg}", line + 1))
}

struct Reader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Reader<'a> {
    fn line(&mut self) -> Result<(usize, &'a str)> {
        self.lines
            .next()
            .ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))
    }

    /// `key rest` → `rest`.
    fn field(&mut self, key: &str) -> Result<(usize, String)> {
        let (no, line) = self.line()?;
        let rest = line
            .strip_prefix(key)
            .filter(|r| r.is_empty() || r.starts_with(' '))
            .ok_or_else(|| bad(no, &format!("expected `{key}`")))?;
        Ok((no, rest.trim().to_string()))
    }

    fn scalar<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let (no, v) = self.field(key)?;
        v.parse()
            .map_err(|_| bad(no, &format!("bad value `{v}` for `{key}`")))
    }

    fn list(&mut self, key: &str) -> Result<Vec<usize>> {
        let (no, v) = self.field(key)?;
        v.split_whitespace()
            .map(|t| {
                t.parse()
                    .map_err(|_| bad(no, &format!("bad entry `{t}` in `{key}`")))
            })
            .collect()
    }

    fn tensor(&mut self, tag: &str, name: &str, shape: (usize, usize)) -> Result<Matrix> {
        let (no, head) = self.line()?;
        let expect = format!("{tag} {name} {} {}", shape.0, shape.1);
        if head != expect {
            return Err(bad(no, &format!("expected `{expect}`, found `{head}`")));
        }
        let mut data = Vec::with_capacity(shape.0 * shape.1);
        for _ in 0..shape.0 {
            let (no, row) = self.line()?;
            let before = data.len();
            for t in row.split_whitespace() {
                let v: f64 = t
                    .parse()
                    .map_err(|_| bad(no, &format!("bad number `{t}`")))?;
                if !v.is_finite() {
                    return Err(bad(no, "non-finite value"));
                }
                data.push(v);
            }
            if data.len() - before != shape.1 {
                return Err(bad(no, &format!("expected {} values", shape.1)));
            }
        }
        Matrix::from_vec(shape.0, shape.1, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neighbors::PointCloud;
    use crate::numkit::Rng;
    use crate::paiconv::Variant;

    fn checkpoint(variant: Variant) -> Checkpoint {
        let mut config = ClassifierConfig::desk(3);
        config.conv_channels = vec![4, 6];
        config.aggregate_width = 8;
        config.fc_widths = vec![5, 3];
        config.k = 4;
        config.kernel_len = 5;
        config.variant = variant;
        let mut state = ClassifierState::build(config, 11).unwrap();
        let mut rng = Rng::new(3);
        for v in &mut state.velocity {
            for x in v.as_mut_slice() {
                *x = rng.normal() * 1e-3;
            }
        }
        Checkpoint {
            state,
            class_names: vec!["sphere".into(), "two words".into(), "torus".into()],
        }
    }

    #[test]
    fn round_trip_is_exact_for_every_variant() {
        for v in Variant::ALL {
            let ck = checkpoint(v);
            let text = ck.to_text();
            let back = Checkpoint::from_text(&text).unwrap();
            assert_eq!(back, ck, "{v}");
            assert_eq!(back.to_text(), text);
        }
    }

    #[test]
    fn restored_model_predicts_identically() {
        let ck = checkpoint(Variant::RandomKernel);
        let back = Checkpoint::from_text(&ck.to_text()).unwrap();
        let cloud = PointCloud::from_points(&[
            [0.0, 0.1, 0.2],
            [1.0, -0.5, 0.3],
            [-0.4, 0.9, 0.0],
            [0.2, 0.2, -1.0],
            [0.7, 0.0, 0.5],
        ])
        .unwrap();
        let a = ck
            .state
            .forward_logits(&cloud, &mut Rng::new(0), false)
            .unwrap()
            .0;
        let b = back
            .state
            .forward_logits(&cloud, &mut Rng::new(0), false)
            .unwrap()
            .0;
        assert_eq!(a, b);
    }

    #[test]
    fn header_and_layout_errors() {
        let text = checkpoint(Variant::Full).to_text();
        assert!(Checkpoint::from_text("hello\n").is_err());
        assert!(Checkpoint::from_text(&text.replace("CHECKPOINT 1", "CHECKPOINT 9")).is_err());
        let truncated: String = text.lines().take(30).collect::<Vec<_>>().join("\n");
        assert!(matches!(
            Checkpoint::from_text(&truncated),
            Err(Error::Checkpoint(_))
        ));
        assert!(Checkpoint::from_text(&text.replace("variant full", "variant bogus")).is_err());
        assert!(Checkpoint::from_text(
            &text.replace("tensor conv0.bias 1 4", "tensor conv0.bias 1 5")
        )
        .is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ck = checkpoint(Variant::LearnableKernel);
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert!(matches!(
            Checkpoint::load(&dir.path().join("missing.ckpt")),
            Err(Error::Io { .. })
        ));
    }
}
