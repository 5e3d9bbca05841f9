//! UBotNet family: a U-shaped encoder/decoder over equirectangular input with
//! attention blocks at the lowest resolution and two per-pixel output heads.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use config::{count_parameters, ModelConfig, Variant};

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{self, aa_maxpool, mhsa2d, Conv2dParams, MhsaParams, PositionEncoding};

/// How a parameter tensor is initialised.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// Zero-mean normal with `std = sqrt(gain / fan_in)`.
    Normal {
        gain: f64,
        fan_in: usize,
    },
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// One parameterised layer of the plan.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: &'static str,
    pub params: Vec<ParamSpec>,
}

impl LayerSpec {
    pub fn count(&self) -> usize {
        self.params.iter().map(ParamSpec::numel).sum()
    }
}

struct Planner {
    layers: Vec<LayerSpec>,
    separable: bool,
}

impl Planner {
    fn push(&mut self, name: String, kind: &'static str, params: Vec<(&str, Vec<usize>, Init)>) {
        let params = params
            .into_iter()
            .map(|(suffix, shape, init)| ParamSpec {
                name: format!("{name}.{suffix}"),
                shape,
                init,
            })
            .collect();
        self.layers.push(LayerSpec { name, kind, params });
    }

    fn conv3(&mut self, name: String, cin: usize, cout: usize) {
        if self.separable {
            self.push(
                name,
                "sepconv3x3",
                vec![
                    ("depthwise", vec![cin, 1, 3, 3], Init::Normal { gain: 2.0, fan_in: 9 }),
                    (
                        "pointwise",
                        vec![cout, cin, 1, 1],
                        Init::Normal { gain: 2.0, fan_in: cin },
                    ),
                    ("bias", vec![cout], Init::Constant(0.0)),
                ],
            );
        } else {
            self.conv(name, "conv3x3", cin, cout, 3, 2.0);
        }
    }

    fn conv(&mut self, name: String, kind: &'static str, cin: usize, cout: usize, k: usize, gain: f64) {
        self.push(
            name,
            kind,
            vec![
                (
                    "weight",
                    vec![cout, cin, k, k],
                    Init::Normal {
                        gain,
                        fan_in: cin * k * k,
                    },
                ),
                ("bias", vec![cout], Init::Constant(0.0)),
            ],
        );
    }

    fn norm(&mut self, name: String, c: usize) {
        self.push(
            name,
            "groupnorm",
            vec![
                ("gamma", vec![c], Init::Constant(1.0)),
                ("beta", vec![c], Init::Constant(0.0)),
            ],
        );
    }

    fn double_conv(&mut self, prefix: &str, cin: usize, cout: usize) {
        self.conv3(format!("{prefix}.conv1"), cin, cout);
        self.norm(format!("{prefix}.norm1"), cout);
        self.conv3(format!("{prefix}.conv2"), cout, cout);
        self.norm(format!("{prefix}.norm2"), cout);
    }
}

/// Ordered parameter layout of a configuration. Forward consumes tensors in
/// exactly this order.
pub fn plan(cfg: &ModelConfig) -> Result<Vec<LayerSpec>> {
    cfg.validate()?;
    let mut p = Planner {
        layers: Vec::new(),
        separable: cfg.variant.separable(),
    };
    for i in 0..cfg.levels {
        let cin = if i == 0 { 3 } else { cfg.channels(i - 1) };
        p.double_conv(&format!("enc{i}"), cin, cfg.channels(i));
    }
    let cb = cfg.bottleneck_channels();
    let m = cfg.bot_width();
    let d = m / cfg.heads;
    let (hb, wb) = cfg.bottleneck_size();
    for j in 0..cfg.bot_blocks_effective() {
        let pre = format!("bot{j}");
        p.conv(format!("{pre}.reduce"), "conv1x1", cb, m, 1, 2.0);
        p.norm(format!("{pre}.norm1"), m);
        let proj = || Init::Normal { gain: 1.0, fan_in: m };
        p.push(
            format!("{pre}.mhsa"),
            "mhsa2d",
            vec![
                ("query", vec![m, m, 1, 1], proj()),
                ("key", vec![m, m, 1, 1], proj()),
                ("value", vec![m, m, 1, 1], proj()),
                ("output", vec![m, m, 1, 1], proj()),
                ("rel_height", vec![2 * hb - 1, d], Init::Constant(0.0)),
                ("rel_width", vec![2 * wb - 1, d], Init::Constant(0.0)),
            ],
        );
        p.norm(format!("{pre}.norm2"), m);
        p.conv(format!("{pre}.expand"), "conv1x1", m, cb, 1, 2.0);
        p.norm(format!("{pre}.norm3"), cb);
    }
    for i in (0..cfg.levels - 1).rev() {
        p.double_conv(
            &format!("dec{i}"),
            cfg.channels(i) + cfg.channels(i + 1),
            cfg.channels(i),
        );
    }
    let hid = cfg.head_hidden();
    for (head, out) in [("depth", 1), ("normal", 3)] {
        p.conv(format!("head.{head}.fc1"), "fc1x1", cfg.base_channels, hid, 1, 2.0);
        p.conv(format!("head.{head}.fc2"), "fc1x1", hid, out, 1, 1.0);
    }
    Ok(p.layers)
}

/// Human-readable layer table.
pub fn describe(cfg: &ModelConfig) -> Result<String> {
    let layers = plan(cfg)?;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{} base={} levels={} bot_blocks={} heads={} input={}x{}",
        cfg.variant.name(),
        cfg.base_channels,
        cfg.levels,
        cfg.bot_blocks_effective(),
        cfg.heads,
        cfg.width,
        cfg.height
    );
    let _ = writeln!(s, "{:<20} {:<10} {:<34} {:>12}", "layer", "kind", "shapes", "params");
    let mut total = 0;
    for l in &layers {
        let shapes: Vec<String> = l.params.iter().map(|p| format!("{:?}", p.shape)).collect();
        let _ = writeln!(
            s,
            "{:<20} {:<10} {:<34} {:>12}",
            l.name,
            l.kind,
            shapes.join(" "),
            l.count()
        );
        total += l.count();
    }
    let _ = writeln!(s, "{:<20} {:<10} {:<34} {:>12}", "total", "", "", total);
    Ok(s)
}

/// Realised network: configuration plus one tensor per planned parameter.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub layers: Vec<LayerSpec>,
    pub params: Vec<Tensor>,
}

/// Output of a forward pass on a tape.
#[derive(Debug, Clone)]
pub struct PredictionVars {
    pub depth01: Var,
    pub normal01: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub depth01: Tensor,
    pub normal01: Tensor,
}

struct Cursor<'a> {
    vars: &'a [Var],
    next: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self) -> Result<&'a Var> {
        let v = self
            .vars
            .get(self.next)
            .ok_or_else(|| Error::invalid("model forward ran out of parameters"))?;
        self.next += 1;
        Ok(v)
    }

    fn conv3(&mut self, x: &Var, separable: bool) -> Result<Var> {
        if separable {
            let dw = self.take()?;
            let pw = self.take()?;
            let b = self.take()?;
            nn::separable_conv2d(x, dw, pw, Some(b))
        } else {
            self.conv(x)
        }
    }

    fn conv(&mut self, x: &Var) -> Result<Var> {
        let w = self.take()?.clone();
        let b = self.take()?.clone();
        nn::conv2d(x, &Conv2dParams::new(w, Some(b)))
    }

    fn norm(&mut self, x: &Var, groups: usize) -> Result<Var> {
        let g = self.take()?;
        let b = self.take()?;
        nn::group_norm(x, g, b, groups)
    }

    fn double_conv(&mut self, x: &Var, separable: bool, groups: usize) -> Result<Var> {
        let y = self.conv3(x, separable)?;
        let y = self.norm(&y, groups)?.relu();
        let y = self.conv3(&y, separable)?;
        Ok(self.norm(&y, groups)?.relu())
    }
}

impl Model {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Model> {
        let layers = plan(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layers
            .iter()
            .flat_map(|l| l.params.iter())
            .map(|p| match p.init {
                Init::Normal { gain, fan_in } => Tensor::normal(&p.shape, (gain / fan_in as f64).sqrt(), &mut rng),
                Init::Constant(v) => Tensor::full(&p.shape, v),
            })
            .collect();
        Ok(Model {
            config: config.clone(),
            layers,
            params,
        })
    }

    /// Replaces the parameters after checking they match the plan.
    pub fn from_parts(config: &ModelConfig, params: Vec<Tensor>) -> Result<Model> {
        let layers = plan(config)?;
        let specs: Vec<&ParamSpec> = layers.iter().flat_map(|l| l.params.iter()).collect();
        if specs.len() != params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for (s, t) in specs.iter().zip(&params) {
            if s.shape != t.shape() {
                return Err(Error::shape("model parameter", &s.shape, t.shape()));
            }
        }
        Ok(Model {
            config: config.clone(),
            layers,
            params,
        })
    }

    pub fn param_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .flat_map(|l| l.params.iter().map(|p| p.name.clone()))
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter on `tape` as a gradient-carrying leaf.
    pub fn bind(&self, tape: &Tape) -> Vec<Var> {
        self.params.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Forward pass with parameters supplied as tape variables in plan order.
    pub fn forward_with(&self, params: &[Var], x: &Var) -> Result<PredictionVars> {
        let cfg = &self.config;
        cfg.check_input(x.shape())?;
        if params.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter variables, got {}",
                self.params.len(),
                params.len()
            )));
        }
        let sep = cfg.variant.separable();
        let groups = cfg.groups;
        let mut cur = Cursor { vars: params, next: 0 };
        let mut skips = Vec::with_capacity(cfg.levels);
        let mut h = x.clone();
        for i in 0..cfg.levels {
            if i > 0 {
                h = aa_maxpool(&h)?;
            }
            h = cur.double_conv(&h, sep, groups)?;
            skips.push(h.clone());
        }
        skips.pop();
        for _ in 0..cfg.bot_blocks_effective() {
            let y = cur.conv(&h)?;
            let y = cur.norm(&y, groups)?.relu();
            let mhsa = MhsaParams {
                query: cur.take()?.clone(),
                key: cur.take()?.clone(),
                value: cur.take()?.clone(),
                output: cur.take()?.clone(),
                heads: cfg.heads,
                position: PositionEncoding::Relative {
                    height: cur.take()?.clone(),
                    width: cur.take()?.clone(),
                },
            };
            let y = mhsa2d(&y, &mhsa)?;
            let y = cur.norm(&y, groups)?.relu();
            let y = cur.conv(&y)?;
            let y = cur.norm(&y, groups)?;
            h = y.add(&h)?.relu();
        }
        while let Some(skip) = skips.pop() {
            let up = nn::bilinear_upsample2x(&h)?;
            h = cur.double_conv(&Var::concat_channels(&[&up, &skip])?, sep, groups)?;
        }
        let mut head = |h: &Var| -> Result<Var> {
            let y = cur.conv(h)?.relu();
            Ok(cur.conv(&y)?.sigmoid())
        };
        let depth01 = head(&h)?;
        let normal01 = head(&h)?;
        if cur.next != params.len() {
            return Err(Error::invalid("model forward left parameters unused"));
        }
        Ok(PredictionVars { depth01, normal01 })
    }

    /// Inference without gradient bookkeeping.
    pub fn predict(&self, x: &Tensor) -> Result<Prediction> {
        let tape = Tape::new();
        let params: Vec<Var> = self.params.iter().map(|t| tape.constant(t.clone())).collect();
        let out = self.forward_with(&params, &tape.constant(x.clone()))?;
        Ok(Prediction {
            depth01: out.depth01.value().clone(),
            normal01: out.normal01.value().clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig::desk(variant).with_input(16, 32)
    }

    #[test]
    fn plan_total_matches_closed_form() {
        for v in [Variant::Ubotnet, Variant::UbotnetLite, Variant::Unet128] {
            for cfg in [tiny(v), ModelConfig::desk(v), ModelConfig::full(v)] {
                let total: usize = plan(&cfg).unwrap().iter().map(LayerSpec::count).sum();
                assert_eq!(total, count_parameters(&cfg), "{cfg:?}");
            }
        }
    }

    #[test]
    fn built_model_matches_plan() {
        let cfg = tiny(Variant::Ubotnet);
        let m = Model::build(&cfg, 0).unwrap();
        assert_eq!(m.num_parameters(), count_parameters(&cfg));
        let names = m.param_names();
        let unique: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
    }

    #[test]
    fn forward_shapes_and_range() {
        for v in [Variant::Ubotnet, Variant::UbotnetLite, Variant::Unet128] {
            let cfg = tiny(v);
            let m = Model::build(&cfg, 1).unwrap();
            for b in [1, 2] {
                let p = m.predict(&Tensor::zeros(&[b, 3, 16, 32])).unwrap();
                assert_eq!(p.depth01.shape(), [b, 1, 16, 32]);
                assert_eq!(p.normal01.shape(), [b, 3, 16, 32]);
                for t in [&p.depth01, &p.normal01] {
                    assert!(t.data().iter().all(|&v| v > 0.0 && v < 1.0));
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny(Variant::Ubotnet);
        let m = Model::build(&cfg, 2).unwrap();
        let x = Tensor::from_fn(&[1, 3, 16, 32], |i| ((i * 37) % 101) as f64 / 101.0);
        let a = m.predict(&x).unwrap();
        let b = m.predict(&x).unwrap();
        assert_eq!(a, b);
        let again = Model::build(&cfg, 2).unwrap().predict(&x).unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn wrong_input_rejected() {
        let m = Model::build(&tiny(Variant::Unet128), 0).unwrap();
        assert!(m.predict(&Tensor::zeros(&[1, 3, 16, 16])).is_err());
        assert!(m.predict(&Tensor::zeros(&[1, 1, 16, 32])).is_err());
    }

    #[test]
    fn describe_rows_and_sum() {
        let cfg = ModelConfig::desk(Variant::Ubotnet);
        let text = describe(&cfg).unwrap();
        let layers = plan(&cfg).unwrap();
        let rows: Vec<&str> = text.lines().skip(2).filter(|l| !l.starts_with("total")).collect();
        assert_eq!(rows.len(), layers.len());
        let sum: usize = rows
            .iter()
            .map(|r| r.split_whitespace().last().unwrap().parse::<usize>().unwrap())
            .sum();
        assert_eq!(sum, count_parameters(&cfg));
    }

    #[test]
    fn lite_differs_only_in_conv_rows() {
        let full = plan(&ModelConfig::desk(Variant::Ubotnet)).unwrap();
        let lite = plan(&ModelConfig::desk(Variant::UbotnetLite)).unwrap();
        assert_eq!(full.len(), lite.len());
        for (a, b) in full.iter().zip(&lite) {
            assert_eq!(a.name, b.name);
            let conv_row = (a.name.starts_with("enc") || a.name.starts_with("dec")) && a.name.contains(".conv");
            if conv_row {
                assert_eq!((a.kind, b.kind), ("conv3x3", "sepconv3x3"));
            } else {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn removing_attention_keeps_boundary_shapes() {
        let a = plan(&tiny(Variant::Ubotnet)).unwrap();
        let b = plan(&tiny(Variant::Unet128)).unwrap();
        let strip: Vec<&LayerSpec> = a.iter().filter(|l| !l.name.starts_with("bot")).collect();
        assert_eq!(strip.len(), b.len());
        for (x, y) in strip.iter().zip(&b) {
            assert_eq!(*x, y);
        }
    }
}
