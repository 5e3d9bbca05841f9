use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, GradCheckConfig, GradCheckReport, Tape, Tensor, Var};
use crate::error::Result;
use crate::model::{Model, ModelConfig, Variant};
use crate::nn::{
    aa_maxpool, bilinear_upsample2x, conv2d, group_norm, mhsa2d, separable_conv2d, Conv2dParams, MhsaParams,
    PositionEncoding,
};
use crate::objective::{berhu, l1_normal, total_loss, Targets};

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub check: GradCheckConfig,
    /// Include the full tiny network (every parameter and the input).
    pub include_model: bool,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            check: GradCheckConfig::default(),
            include_model: true,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

/// Tiny network checked by the suite: base 8, three levels, 16x32 input.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        base_channels: 8,
        levels: 3,
        ..ModelConfig::desk(Variant::Ubotnet)
    }
    .with_input(16, 32)
}

fn weighted_sum(y: &Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = y.tape().constant(Tensor::uniform(y.shape(), -1.0, 1.0, &mut rng));
    Ok(y.mul(&w)?.sum())
}

fn run<F>(name: &str, f: F, inputs: Vec<Tensor>, names: &[&str], cfg: &GradCheckConfig) -> Result<SuiteEntry>
where
    F: Fn(&Tape, &[Var]) -> Result<Var> + Sync,
{
    Ok(SuiteEntry {
        name: name.to_string(),
        report: grad_check(f, &inputs, cfg)?.with_names(names),
    })
}

/// Finite-difference checks of every network block, both losses and
/// optionally the complete tiny network.
pub fn gradient_suite(opts: &SuiteOptions) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut u = |shape: &[usize], s: f64| Tensor::uniform(shape, -s, s, &mut rng);
    let cfg = &opts.check;
    let ws = opts.seed ^ 0x5eed;
    let mut out = vec![
        run(
            "conv2d 3x3 circular",
            |_, v| {
                weighted_sum(
                    &conv2d(&v[0], &Conv2dParams::new(v[1].clone(), Some(v[2].clone())))?,
                    ws,
                )
            },
            vec![u(&[2, 3, 4, 8], 1.0), u(&[4, 3, 3, 3], 0.5), u(&[4], 0.5)],
            &["x", "weight", "bias"],
            cfg,
        )?,
        run(
            "separable conv2d",
            |_, v| weighted_sum(&separable_conv2d(&v[0], &v[1], &v[2], Some(&v[3]))?, ws),
            vec![
                u(&[1, 4, 4, 8], 1.0),
                u(&[4, 1, 3, 3], 0.5),
                u(&[5, 4, 1, 1], 0.5),
                u(&[5], 0.5),
            ],
            &["x", "depthwise", "pointwise", "bias"],
            cfg,
        )?,
        run(
            "group norm",
            |_, v| weighted_sum(&group_norm(&v[0], &v[1], &v[2], 4)?, ws),
            vec![u(&[2, 8, 3, 4], 1.0), u(&[8], 1.0), u(&[8], 1.0)],
            &["x", "gamma", "beta"],
            cfg,
        )?,
        run(
            "anti-aliased max pool",
            |_, v| weighted_sum(&aa_maxpool(&v[0])?, ws),
            vec![u(&[1, 2, 4, 8], 1.0)],
            &["x"],
            cfg,
        )?,
        run(
            "bilinear upsample",
            |_, v| weighted_sum(&bilinear_upsample2x(&v[0])?, ws),
            vec![u(&[1, 2, 3, 4], 1.0)],
            &["x"],
            cfg,
        )?,
        run(
            "mhsa2d relative",
            |_, v| {
                let p = MhsaParams {
                    query: v[1].clone(),
                    key: v[2].clone(),
                    value: v[3].clone(),
                    output: v[4].clone(),
                    heads: 2,
                    position: PositionEncoding::Relative {
                        height: v[5].clone(),
                        width: v[6].clone(),
                    },
                };
                weighted_sum(&mhsa2d(&v[0], &p)?, ws)
            },
            vec![
                u(&[2, 8, 2, 4], 1.0),
                u(&[8, 8, 1, 1], 0.5),
                u(&[8, 8, 1, 1], 0.5),
                u(&[8, 8, 1, 1], 0.5),
                u(&[8, 8, 1, 1], 0.5),
                u(&[3, 4], 0.5),
                u(&[7, 4], 0.5),
            ],
            &["x", "query", "key", "value", "output", "rel_height", "rel_width"],
            cfg,
        )?,
        run(
            "mhsa2d absolute",
            |_, v| {
                let p = MhsaParams {
                    query: v[1].clone(),
                    key: v[2].clone(),
                    value: v[3].clone(),
                    output: v[4].clone(),
                    heads: 2,
                    position: PositionEncoding::Absolute {
                        embedding: v[5].clone(),
                    },
                };
                weighted_sum(&mhsa2d(&v[0], &p)?, ws)
            },
            vec![
                u(&[2, 4, 2, 2], 1.0),
                u(&[4, 4, 1, 1], 0.5),
                u(&[4, 4, 1, 1], 0.5),
                u(&[4, 4, 1, 1], 0.5),
                u(&[4, 4, 1, 1], 0.5),
                u(&[4, 2, 2], 0.5),
            ],
            &["x", "query", "key", "value", "output", "embedding"],
            cfg,
        )?,
    ];
    let gt = Tensor::uniform(&[1, 1, 4, 8], 0.05, 0.95, &mut ChaCha8Rng::seed_from_u64(opts.seed + 1));
    let mask: Vec<bool> = (0..32).map(|i| i % 5 != 0).collect();
    out.push(run(
        "berhu",
        move |_, v| berhu(&v[0], &gt, &mask),
        vec![u(&[1, 1, 4, 8], 1.0).map(|x| 0.5 + 0.4 * x)],
        &["pred"],
        cfg,
    )?);
    let gtn = Tensor::uniform(&[1, 3, 4, 8], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(opts.seed + 2));
    let valid: Vec<bool> = (0..32).map(|i| i % 4 != 1).collect();
    out.push(run(
        "l1 normal",
        move |_, v| l1_normal(&v[0], &gtn, &valid),
        vec![u(&[1, 3, 4, 8], 1.0).map(|x| 0.5 + 0.4 * x)],
        &["pred"],
        cfg,
    )?);
    if opts.include_model {
        out.push(model_check(opts)?);
    }
    Ok(out)
}

/// Check of the tiny network under the training objective.
pub fn model_check(opts: &SuiteOptions) -> Result<SuiteEntry> {
    let mcfg = tiny_config();
    let model = Model::build(&mcfg, opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed + 3);
    let (h, w) = (mcfg.height, mcfg.width);
    let x = Tensor::uniform(&[1, 3, h, w], 0.0, 1.0, &mut rng);
    let targets = Targets {
        depth01: Tensor::uniform(&[1, 1, h, w], 0.05, 1.0, &mut rng),
        normal01: Tensor::uniform(&[1, 3, h, w], 0.0, 1.0, &mut rng),
        depth_mask: vec![true; h * w],
        normal_valid: (0..h * w).map(|i| i % 7 != 0).collect(),
    };
    // Zero-initialised biases put some pre-activations exactly on a ReLU
    // corner, where no finite difference is meaningful; check at a nearby
    // generic point instead.
    let mut inputs = vec![x];
    inputs.extend(model.params.iter().map(|p| {
        let noise = Tensor::uniform(p.shape(), -0.05, 0.05, &mut rng);
        Tensor::from_fn(p.shape(), |i| p.data()[i] + noise.data()[i])
    }));
    let mut names = vec!["input".to_string()];
    names.extend(model.param_names());
    let model = Model::from_parts(&mcfg, inputs[1..].to_vec())?;
    let f = |_: &Tape, v: &[Var]| -> Result<Var> {
        let pred = model.forward_with(&v[1..], &v[0])?;
        Ok(total_loss(&pred.depth01, &pred.normal01, &targets)?.total)
    };
    Ok(SuiteEntry {
        name: "tiny ubotnet".to_string(),
        report: grad_check(f, &inputs, &opts.check)?.with_names(&names),
    })
}
