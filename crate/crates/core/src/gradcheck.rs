//! Central finite-difference checks of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapters::{lora_forward, orth_penalty, svd_forward, AdapterId, FrozenLinear, LoraAdapter, SvdAdapter};
use crate::hypernet::{Activation, HyperBackend};
use crate::tensor::{ElementwiseFn, Result, Tensor};
use crate::trainer::{Batch, Mode, Model, Network, TrainConfig, TrainError};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so entries whose true gradient is
/// (numerically) zero are compared on an absolute scale instead.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOutcome {
    pub max_rel_err: f64,
    pub entries_checked: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `backward()` of `f(inputs)` with central differences on every
/// entry of every input leaf that requires a gradient.
///
/// Inputs are perturbed in place and restored afterwards; their gradients are
/// cleared before the analytic pass and left populated after it.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckOutcome>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    for x in inputs {
        x.zero_grad();
    }
    f(inputs)?.backward()?;
    let mut max_rel_err: f64 = 0.0;
    let mut entries_checked = 0;
    for x in inputs.iter().filter(|x| x.requires_grad()) {
        let analytic = x.grad().unwrap_or_else(|| vec![0.0; x.numel()]);
        let original = x.to_vec();
        for i in 0..original.len() {
            let mut plus = original.clone();
            plus[i] += h;
            x.set_data(plus);
            let fp = f(inputs)?.item();
            let mut minus = original.clone();
            minus[i] -= h;
            x.set_data(minus);
            let fm = f(inputs)?.item();
            x.set_data(original.clone());
            let numeric = (fp - fm) / (2.0 * h);
            max_rel_err = max_rel_err.max(rel_err(analytic[i], numeric));
            entries_checked += 1;
        }
    }
    Ok(GradCheckOutcome {
        max_rel_err,
        entries_checked,
    })
}

/// Worst finite-difference error of one named case over all seeds.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CaseReport {
    pub name: String,
    pub max_rel_err: f64,
    pub entries_checked: usize,
}

impl CaseReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol && self.entries_checked > 0
    }
}

/// Output of a case given its freshly drawn inputs.
pub type CaseFn = Box<dyn Fn(&[Tensor]) -> Result<Tensor>>;

/// One differentiable op (or pipeline) with the shapes of its random inputs.
pub struct Case {
    pub name: String,
    pub inputs: Vec<Vec<usize>>,
    pub f: CaseFn,
}

impl Case {
    pub fn new(name: &str, inputs: &[&[usize]], f: impl Fn(&[Tensor]) -> Result<Tensor> + 'static) -> Self {
        Self {
            name: name.to_string(),
            inputs: inputs.iter().map(|s| s.to_vec()).collect(),
            f: Box::new(f),
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    // keep clear of 0 so kinks (relu) sit far outside the difference stencil
    let data = (0..shape.iter().product())
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::param(shape, data).expect("shape matches data")
}

/// Runs `case` for `seeds` independent draws of its inputs. The scalar checked
/// is `Σ out ⊙ R` for a random `R`, so no output entry cancels another.
pub fn run_case(case: &Case, seeds: u64, h: f64) -> Result<CaseReport> {
    let mut report = CaseReport {
        name: case.name.clone(),
        max_rel_err: 0.0,
        entries_checked: 0,
    };
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = case.inputs.iter().map(|s| draw(&mut rng, s)).collect();
        let shape = (case.f)(&inputs)?.shape().to_vec();
        let weights = draw(&mut rng, &shape).detach();
        let outcome = check_gradients(|x| (case.f)(x)?.mul(&weights).map(|t| t.sum()), &inputs, h)?;
        report.max_rel_err = report.max_rel_err.max(outcome.max_rel_err);
        report.entries_checked += outcome.entries_checked;
    }
    Ok(report)
}

/// Every differentiable tensor op plus the adapter forwards and penalty.
pub fn op_cases() -> Vec<Case> {
    let sin = ElementwiseFn {
        name: "sin",
        f: f64::sin,
        df: f64::cos,
    };
    let mut cases = vec![
        Case::new("add", &[&[3, 4], &[3, 4]], |x| x[0].add(&x[1])),
        Case::new("add_scalar_broadcast", &[&[3, 4], &[]], |x| x[0].add(&x[1])),
        Case::new("sub", &[&[3, 4], &[3, 4]], |x| x[0].sub(&x[1])),
        Case::new("mul", &[&[3, 4], &[3, 4]], |x| x[0].mul(&x[1])),
        Case::new("scale", &[&[3, 4]], |x| Ok(x[0].scale(-1.7))),
        Case::new("add_scalar", &[&[3, 4]], |x| Ok(x[0].add_scalar(0.3))),
        Case::new("relu", &[&[3, 4]], |x| Ok(x[0].relu())),
        Case::new("exp", &[&[3, 4]], |x| Ok(x[0].exp())),
        Case::new("tanh", &[&[3, 4]], |x| Ok(x[0].tanh())),
        Case::new("gelu", &[&[3, 4]], |x| Ok(x[0].gelu())),
        Case::new("map", &[&[3, 4]], move |x| Ok(x[0].map(sin))),
        Case::new("mask", &[&[5]], |x| x[0].mask(&[true, false, true, true, false])),
        Case::new("matmul", &[&[3, 4], &[4, 2]], |x| x[0].matmul(&x[1])),
        Case::new("transpose", &[&[3, 4]], |x| x[0].transpose()),
        Case::new("reshape", &[&[3, 4]], |x| x[0].reshape(&[2, 6])),
        Case::new("sum", &[&[3, 4]], |x| Ok(x[0].sum())),
        Case::new("mean", &[&[3, 4]], |x| Ok(x[0].mean())),
        Case::new("frobenius_sq", &[&[3, 4]], |x| Ok(x[0].frobenius_sq())),
        Case::new("softmax_rows", &[&[3, 4]], |x| x[0].softmax(1)),
        Case::new("softmax_cols", &[&[3, 4]], |x| x[0].softmax(0)),
        Case::new("add_row", &[&[3, 4], &[4]], |x| x[0].add_row(&x[1])),
        Case::new("add_col", &[&[3, 4], &[3]], |x| x[0].add_col(&x[1])),
        Case::new("scale_rows", &[&[3, 4], &[3]], |x| x[0].scale_rows(&x[1])),
        Case::new("scale_cols", &[&[3, 4], &[4]], |x| x[0].scale_cols(&x[1])),
        Case::new("slice_cols", &[&[3, 5]], |x| x[0].slice_cols(1, 3)),
        Case::new("concat_cols", &[&[3, 2], &[3, 1]], Tensor::concat_cols),
        Case::new("shift_rows", &[&[4, 3]], |x| x[0].shift_rows(-1)?.add(&x[0].shift_rows(2)?)),
        Case::new("layer_norm", &[&[3, 5], &[5], &[5]], |x| x[0].layer_norm(&x[1], &x[2], 1e-5)),
        Case::new("cross_entropy", &[&[4, 3]], |x| x[0].cross_entropy(&[2, 0, 1, 2])),
    ];
    cases.extend(adapter_cases());
    cases
}

/// Fixed `[4, 5]` base layer with bias; frozen layers take no gradient.
fn frozen() -> Result<FrozenLinear> {
    let w = (0..20).map(|i| (i as f64 * 0.7 + 1.0).sin()).collect();
    let b = (0..4).map(|i| 0.1 * i as f64).collect();
    FrozenLinear::new(Tensor::from_vec(&[4, 5], w)?, Some(Tensor::from_vec(&[4], b)?))
}

fn adapter_cases() -> Vec<Case> {
    vec![
        Case::new("lora_forward", &[&[2, 5], &[4, 2], &[5, 3]], |x| {
            let ad = LoraAdapter::new(AdapterId(0), x[0].clone(), x[1].clone())?;
            lora_forward(&frozen()?, &ad, &x[2])
        }),
        Case::new("svd_forward", &[&[4, 2], &[2], &[2, 5], &[5, 3]], |x| {
            let ad = SvdAdapter::new(AdapterId(0), x[0].clone(), x[1].clone(), x[2].clone())?;
            svd_forward(&frozen()?, &ad, &x[3])
        }),
        Case::new("orth_penalty", &[&[4, 3], &[3], &[3, 5]], |x| {
            let ad = SvdAdapter::new(AdapterId(0), x[0].clone(), x[1].clone(), x[2].clone())?;
            orth_penalty(&ad)
        }),
    ]
}

/// End-to-end checks of the composite loss: direct modes against the adapter
/// tensors, hyper modes against every hypernetwork weight (one case per
/// backend). Weights that start at zero are redrawn so that no path is
/// trivially flat.
pub fn pipeline_reports(seeds: u64, h: f64) -> std::result::Result<Vec<CaseReport>, TrainError> {
    let tiny = [
        ("direct_lora", Mode::Lora, None),
        ("direct_adalora", Mode::Adalora, None),
        ("hyper_mlp", Mode::HyperAdalora, Some(HyperBackend::Mlp { widths: vec![4, 4], activation: Activation::Gelu })),
        ("hyper_conv", Mode::HyperAdalora, Some(HyperBackend::Conv { kernels: vec![3], channels: 4, activation: Activation::Tanh })),
        ("hyper_attention", Mode::HyperAdalora, Some(HyperBackend::Attention { hidden_dim: 4, heads: 2, ffn_dim: 6 })),
    ];
    let mut out = Vec::new();
    for (name, mode, backend) in tiny {
        let mut report = CaseReport {
            name: name.to_string(),
            max_rel_err: 0.0,
            entries_checked: 0,
        };
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let layers = (0..2)
                .map(|_| FrozenLinear::new(draw(&mut rng, &[4, 5]).detach(), None))
                .collect::<Result<Vec<_>>>()?;
            let mut cfg = TrainConfig::new(mode, 10);
            cfg.rank = 2;
            cfg.seed = seed;
            cfg.hypernet = backend.clone();
            let model = Model::new(cfg, Network::Regression, layers)?;
            let params = model.trainable_params();
            for p in model.state().tensors().iter().chain(&params) {
                let shape = p.shape().to_vec();
                p.set_data(draw(&mut rng, &shape).to_vec().iter().map(|v| 0.5 * v).collect());
            }
            let batch = Batch::Regression {
                x: draw(&mut rng, &[5, 3]).detach(),
                targets: (0..2).map(|_| draw(&mut rng, &[4, 3]).detach()).collect(),
            };
            let outcome = check_gradients(
                |_| model.loss(&batch).map(|l| l.total).map_err(|e| match e {
                    TrainError::Tensor(t) => t,
                    other => crate::tensor::TensorError::Contract(other.to_string()),
                }),
                &params,
                h,
            )?;
            report.max_rel_err = report.max_rel_err.max(outcome.max_rel_err);
            report.entries_checked += outcome.entries_checked;
        }
        out.push(report);
    }
    Ok(out)
}
