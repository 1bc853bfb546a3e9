//! The finite-difference suite over every primitive and every layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::autodiff::{check_gradients, join, GradCheck, Graph, Parameters, Tensor, Var};
use crate::error::Result;
use crate::layers::{AttentionParams, ExpertParams, LinearParams, MoeParams, RmsNormParams, SsmParams};
use crate::model::{cross_entropy_loss, UamClassifier};
use crate::multimodal::{decode_mask, project_radiomics, DecoderParams, ProjectionParams};
use crate::uam::{AmambaMoeParams, AmambaParams, ModelConfig, Variant};

pub const SUITE_EPS: f64 = 1e-5;
pub const SUITE_TOLERANCE: f64 = 1e-4;
pub const SUITE_SEEDS: u64 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckKind {
    Primitive,
    Layer,
}

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub kind: CheckKind,
    pub seeds: u64,
    pub report: GradCheck,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.passed(SUITE_TOLERANCE)
    }
}

/// A layer together with the inputs it is probed at; both are
/// differentiated.
#[derive(Clone, Debug)]
pub struct Probe<P> {
    pub layer: P,
    pub inputs: Vec<Tensor>,
}

impl<P: Parameters> Parameters for Probe<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.layer.visit(&join(prefix, "layer"), f);
        self.inputs.visit(&join(prefix, "input"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.layer.visit_mut(&join(prefix, "layer"), f);
        self.inputs.visit_mut(&join(prefix, "input"), f);
    }
}

/// Nothing learnable; for probes that only differentiate inputs.
#[derive(Clone, Debug)]
pub struct NoParams;

impl Parameters for NoParams {
    fn visit<'a>(&'a self, _: &str, _: &mut dyn FnMut(String, &'a Tensor)) {}
    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(String, &mut Tensor)) {}
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn positive_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let u = Uniform::new(0.5, 2.0).expect("valid range");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| u.sample(rng)).collect()).expect("shape matches data")
}

/// `Σ out ⊙ R` with a fixed random `R`, so that no output coordinate
/// cancels against another.
pub fn weighted_sum(g: &Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = g.constant(random_tensor(&g.shape(out), &mut rng));
    Ok(g.sum(g.mul(out, r)?))
}

fn run<P, B, F>(name: &'static str, kind: CheckKind, seeds: u64, build: B, loss: F) -> Result<SuiteEntry>
where
    P: Parameters + Clone,
    B: Fn(&mut ChaCha8Rng) -> Result<Probe<P>>,
    F: Fn(&Graph, &Probe<P>) -> Result<Var>,
{
    let mut report = GradCheck::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probe = build(&mut rng)?;
        let r = check_gradients(&probe, SUITE_EPS, |g, p| {
            let out = loss(g, p)?;
            if g.shape(out).is_empty() {
                Ok(out)
            } else {
                weighted_sum(g, out, seed)
            }
        })?;
        let mut r = r;
        r.worst = format!("seed {seed}: {}", r.worst);
        report.merge(r);
    }
    Ok(SuiteEntry {
        name,
        kind,
        seeds,
        report,
    })
}

fn inputs(rng: &mut ChaCha8Rng, shapes: &[&[usize]]) -> Probe<NoParams> {
    Probe {
        layer: NoParams,
        inputs: shapes.iter().map(|s| random_tensor(s, rng)).collect(),
    }
}

fn bind(g: &Graph, p: &Probe<impl Parameters>) -> Vec<Var> {
    p.inputs.iter().map(|t| g.param(t)).collect()
}

/// Every differentiable primitive of the graph, each on random inputs.
pub fn primitive_checks(seeds: u64) -> Result<Vec<SuiteEntry>> {
    use CheckKind::Primitive as K;
    let mut out = Vec::new();
    macro_rules! prim {
        ($name:expr, $shapes:expr, |$g:ident, $x:ident| $body:expr) => {
            out.push(run(
                $name,
                K,
                seeds,
                |rng| Ok(inputs(rng, $shapes)),
                |$g, p| {
                    let $x = bind($g, p);
                    $body
                },
            )?);
        };
    }
    prim!("matmul", &[&[2, 3, 4], &[4, 5]], |g, x| g.matmul(x[0], x[1]));
    prim!("bmm", &[&[2, 3, 4], &[2, 4, 5]], |g, x| g.bmm(x[0], x[1]));
    prim!("transpose", &[&[2, 3, 4]], |g, x| g.transpose(x[0]));
    prim!("add", &[&[3, 4], &[4]], |g, x| g.add(x[0], x[1]));
    prim!("sub", &[&[2, 3, 4], &[2, 3, 1]], |g, x| g.sub(x[0], x[1]));
    prim!("mul", &[&[3, 4], &[3, 4], &[]], |g, x| {
        let y = g.mul(x[0], x[1])?;
        g.mul(y, x[2])
    });
    prim!("scale", &[&[3, 4]], |g, x| Ok(g.scale(x[0], -1.7)));
    prim!("add_scalar", &[&[3, 4]], |g, x| Ok(g.add_scalar(x[0], 0.3)));
    prim!("sigmoid", &[&[3, 4]], |g, x| Ok(g.sigmoid(x[0])));
    prim!("tanh", &[&[3, 4]], |g, x| Ok(g.tanh(x[0])));
    prim!("exp", &[&[3, 4]], |g, x| Ok(g.exp(x[0])));
    out.push(run(
        "log",
        K,
        seeds,
        |rng| {
            Ok(Probe {
                layer: NoParams,
                inputs: vec![positive_tensor(&[3, 4], rng)],
            })
        },
        |g, p| Ok(g.log(bind(g, p)[0])),
    )?);
    out.push(run(
        "rsqrt",
        K,
        seeds,
        |rng| {
            Ok(Probe {
                layer: NoParams,
                inputs: vec![positive_tensor(&[3, 4], rng)],
            })
        },
        |g, p| Ok(g.rsqrt(bind(g, p)[0])),
    )?);
    prim!("softmax", &[&[3, 5]], |g, x| Ok(g.softmax(x[0])));
    prim!("mean", &[&[2, 3, 4]], |g, x| g.mean_axis(x[0], 1, false));
    prim!("sum", &[&[3, 4]], |g, x| Ok(g.sum(x[0])));
    prim!("concat", &[&[3, 2], &[3, 3]], |g, x| g.concat(&[x[0], x[1]]));
    prim!("split", &[&[3, 5]], |g, x| g.split(x[0], 1, 3));
    prim!("reshape", &[&[2, 6]], |g, x| g.reshape(x[0], &[3, 4]));
    prim!("take", &[&[3, 4]], |g, x| g.take(x[0], vec![0, 5, 5, 11, 2, 7], &[2, 3]));
    prim!("scatter_rows", &[&[3, 4]], |g, x| g.scatter_rows(x[0], vec![2, 0, 4], 5));
    prim!("gated_scan", &[&[2, 5, 3], &[2, 5, 3], &[3]], |g, x| {
        let gate = g.sigmoid(x[0]);
        g.gated_scan(gate, x[1], x[2])
    });
    prim!("cross_entropy", &[&[4, 3]], |g, x| g.cross_entropy(x[0], &[0, 2, 1, 2]));
    out.push(run(
        "bce_with_logits",
        K,
        seeds,
        |rng| Ok(inputs(rng, &[&[3, 4]])),
        |g, p| {
            let targets = Tensor::new(vec![3, 4], (0..12).map(|i| (i % 5) as f64 / 4.0).collect())?;
            g.bce_with_logits(bind(g, p)[0], &targets)
        },
    )?);
    Ok(out)
}

fn probe<P>(layer: P, rng: &mut ChaCha8Rng, shapes: &[&[usize]]) -> Probe<P> {
    Probe {
        layer,
        inputs: shapes.iter().map(|s| random_tensor(s, rng)).collect(),
    }
}

/// Moves every parameter away from its (often symmetric) initial value.
fn jitter<P: Parameters>(mut p: P, rng: &mut ChaCha8Rng) -> P {
    p.visit_mut("", &mut |_, t| {
        for v in t.data_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += 0.3 * z;
        }
    });
    p
}

fn tiny_uam() -> ModelConfig {
    ModelConfig {
        d_model: 4,
        n_blocks: 2,
        heads: 2,
        n_experts: 3,
        top_k: 2,
        d_ff: 6,
        variant: Variant::Uam,
        n_features: 4,
        n_classes: 2,
        load_balance_coeff: 0.1,
        ..ModelConfig::default()
    }
}

/// Every layer and composite, at dims of at most 8.
pub fn layer_checks(seeds: u64) -> Result<Vec<SuiteEntry>> {
    use CheckKind::Layer as K;
    let mut out = Vec::new();
    out.push(run(
        "linear",
        K,
        seeds,
        |rng| Ok(probe(jitter(LinearParams::init(5, 4, true, rng), rng), rng, &[&[3, 5]])),
        |g, p| p.layer.forward(g, bind(g, p)[0]),
    )?);
    out.push(run(
        "rmsnorm",
        K,
        seeds,
        |rng| Ok(probe(jitter(RmsNormParams::new(6), rng), rng, &[&[3, 6]])),
        |g, p| p.layer.forward(g, bind(g, p)[0]),
    )?);
    out.push(run(
        "gated_scan",
        K,
        seeds,
        |rng| Ok(probe(jitter(SsmParams::init(4, rng), rng), rng, &[&[5, 4]])),
        |g, p| p.layer.forward(g, bind(g, p)[0]),
    )?);
    out.push(run(
        "cross_attention",
        K,
        seeds,
        |rng| Ok(probe(jitter(AttentionParams::init(8, 2, rng)?, rng), rng, &[&[4, 8], &[4, 8]])),
        |g, p| {
            let x = bind(g, p);
            p.layer.cross(g, x[0], x[1])
        },
    )?);
    out.push(run(
        "self_attention",
        K,
        seeds,
        |rng| Ok(probe(jitter(AttentionParams::init(8, 2, rng)?, rng), rng, &[&[4, 8]])),
        |g, p| p.layer.self_attend(g, bind(g, p)[0]),
    )?);
    out.push(run(
        "expert",
        K,
        seeds,
        |rng| Ok(probe(jitter(ExpertParams::init(4, 8, rng), rng), rng, &[&[3, 4]])),
        |g, p| p.layer.forward(g, bind(g, p)[0]),
    )?);
    out.push(run(
        "moe",
        K,
        seeds,
        |rng| Ok(probe(jitter(MoeParams::init(4, 8, 3, 2, 0.1, rng)?, rng), rng, &[&[5, 4]])),
        |g, p| {
            let o = p.layer.forward(g, bind(g, p)[0])?;
            let s = weighted_sum(g, o.output, 7)?;
            g.add(s, o.aux_loss)
        },
    )?);
    out.push(run(
        "amamba",
        K,
        seeds,
        |rng| Ok(probe(jitter(AmambaParams::init(4, 2, rng)?, rng), rng, &[&[4, 4]])),
        |g, p| p.layer.forward(g, bind(g, p)[0]),
    )?);
    out.push(run(
        "amamba_moe",
        K,
        seeds,
        |rng| {
            Ok(probe(
                jitter(AmambaMoeParams::init(4, 2, 8, 3, 2, 0.1, rng)?, rng),
                rng,
                &[&[4, 4]],
            ))
        },
        |g, p| {
            let (o, aux) = p.layer.forward(g, bind(g, p)[0])?;
            let s = weighted_sum(g, o, 7)?;
            g.add(s, aux)
        },
    )?);
    out.push(run(
        "uam_2_block",
        K,
        seeds,
        |rng| {
            let model = jitter(UamClassifier::init(&tiny_uam(), rng)?, rng);
            Ok(probe(model, rng, &[]))
        },
        |g, p| {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let tokens = random_tensor(&[2, 4, 1], &mut rng);
            let out = p.layer.forward(g, &tokens)?;
            cross_entropy_loss(g, out.logits, &[0, 1], out.aux_loss)
        },
    )?);
    out.push(run(
        "projection",
        K,
        seeds,
        |rng| Ok(probe(jitter(ProjectionParams::init(4, 6, 5, rng), rng), rng, &[&[3, 4]])),
        |g, p| project_radiomics(g, bind(g, p)[0], &p.layer),
    )?);
    out.push(run(
        "decoder",
        K,
        seeds,
        |rng| Ok(probe(jitter(DecoderParams::init(4, 6, rng), rng), rng, &[&[2 + 4 + 1, 4]])),
        |g, p| decode_mask(g, bind(g, p)[0], &p.layer, 2, (2, 2), (4, 4)),
    )?);
    Ok(out)
}

/// Primitives first, then layers.
pub fn run_suite(seeds: u64) -> Result<Vec<SuiteEntry>> {
    let mut all = primitive_checks(seeds)?;
    all.extend(layer_checks(seeds)?);
    Ok(all)
}
