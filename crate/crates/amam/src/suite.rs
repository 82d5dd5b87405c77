//! Gradient-fidelity targets and the invariant check list behind the
//! `gradcheck` and `check` subcommands.

use amam_core::gradcheck::{gradcheck_full, probe_weights, GradcheckOptions, GradcheckReport};
use amam_core::{
    math, ops, AaBlock, AaConfig, Activation, Amam, AmamConfig, BnMode, FeaturePyramid, FusionMode,
    MeBlock, MeConfig, ParamStore, Result, Shape, Tape, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Primitive operators must agree with finite differences to this bound.
pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
/// Composite blocks (ME, AA, AMAM) are held to this bound.
pub const COMPOSITE_TOLERANCE: f64 = 1e-4;
/// Composite points are resampled until every ReLU input is this far from 0.
const RELU_MARGIN: f64 = 1e-4;
const MAX_ATTEMPTS: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetClass {
    Primitive,
    Composite,
}

impl TargetClass {
    pub fn tolerance(self) -> f64 {
        match self {
            TargetClass::Primitive => PRIMITIVE_TOLERANCE,
            TargetClass::Composite => COMPOSITE_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradResult {
    pub target: &'static str,
    pub class: TargetClass,
    pub report: GradcheckReport,
}

impl GradResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.class.tolerance()
    }
}

pub const GRAD_TARGETS: [&str; 11] = [
    "conv",
    "bn",
    "activation",
    "resample",
    "softmax",
    "matmul",
    "attention",
    "mix",
    "me",
    "aa",
    "amam",
];

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(salt);
    r
}

fn uniform(shape: Shape, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, r)
}

/// Values with magnitude in `[0.1, 1]` and random sign.
fn away_from_zero(shape: Shape, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| {
        let m = r.gen_range(0.1..1.0);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Weighted scalar readout of `v` with weights derived from `seed`.
fn readout(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let w = probe_weights(tape.shape(v), seed);
    tape.weighted_sum(v, &w)
}

fn sum_vars(tape: &mut Tape, vs: &[Var]) -> Result<Var> {
    let mut acc = vs[0];
    for &v in &vs[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

fn primitive(
    inputs: Vec<Tensor>,
    opts: GradcheckOptions,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<GradcheckReport> {
    gradcheck_full(
        &inputs,
        &ParamStore::new(),
        |tape, _, vars| f(tape, vars),
        opts,
    )
}

/// Draws points from `make` until the forward pass keeps every ReLU input
/// clear of the kink, then checks there.
fn composite<M, F>(seed: u64, opts: GradcheckOptions, make: M, f: F) -> Result<GradcheckReport>
where
    M: Fn(u64) -> Result<(ParamStore, Vec<Tensor>)>,
    F: Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var>,
{
    let mut last = None;
    for attempt in 0..MAX_ATTEMPTS {
        let (store, inputs) = make(seed.wrapping_mul(MAX_ATTEMPTS).wrapping_add(attempt))?;
        let mut tape = Tape::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&mut tape, &store, &vars)?;
        if tape.relu_margin() > RELU_MARGIN || attempt + 1 == MAX_ATTEMPTS {
            last = Some(gradcheck_full(&inputs, &store, &f, opts)?);
            break;
        }
    }
    Ok(last.expect("at least one attempt"))
}

fn check_target(name: &'static str, seed: u64, opts: GradcheckOptions) -> Result<GradResult> {
    let mut r = rng(
        seed,
        GRAD_TARGETS.iter().position(|&t| t == name).unwrap_or(0) as u64 + 1,
    );
    let (class, report) = match name {
        "conv" => {
            let inputs = vec![
                uniform(Shape::new(2, 3, 5, 5), &mut r),
                uniform(Shape::new(4, 3, 3, 3), &mut r),
                uniform(Shape::new(1, 1, 1, 4), &mut r),
                uniform(Shape::new(2, 3, 1, 1), &mut r),
            ];
            let rep = primitive(inputs, opts, |t, v| {
                let a = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                let b = t.conv2d(v[0], v[1], None, 2, 0)?;
                let c = t.conv2d(v[0], v[3], None, 1, 0)?;
                let ra = readout(t, a, seed)?;
                let rb = readout(t, b, seed + 1)?;
                let rc = readout(t, c, seed + 2)?;
                sum_vars(t, &[ra, rb, rc])
            })?;
            (TargetClass::Primitive, rep)
        }
        "bn" => {
            let mean = [r.gen_range(-0.5..0.5), r.gen_range(-0.5..0.5)];
            let var = [r.gen_range(0.5..2.0), r.gen_range(0.5..2.0)];
            let inputs = vec![
                uniform(Shape::new(3, 2, 2, 3), &mut r),
                Tensor::uniform(Shape::new(1, 1, 1, 2), 0.5, 1.5, &mut r),
                uniform(Shape::new(1, 1, 1, 2), &mut r),
            ];
            let rep = primitive(inputs, opts, |t, v| {
                let y = t.batchnorm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)?;
                readout(t, y, seed)
            })?;
            (TargetClass::Primitive, rep)
        }
        "activation" => {
            let inputs = vec![away_from_zero(Shape::new(2, 3, 3, 3), &mut r)];
            let rep = primitive(inputs, opts, |t, v| {
                let a = t.activation(v[0], Activation::Relu);
                let b = t.activation(v[0], Activation::Silu);
                let ra = readout(t, a, seed)?;
                let rb = readout(t, b, seed + 1)?;
                t.add(ra, rb)
            })?;
            (TargetClass::Primitive, rep)
        }
        "resample" => {
            let inputs = vec![uniform(Shape::new(2, 2, 4, 6), &mut r)];
            let rep = primitive(inputs, opts, |t, v| {
                let up = t.upsample_nearest2x(v[0]);
                let down = t.downsample_avg2x(v[0])?;
                let ru = readout(t, up, seed)?;
                let rd = readout(t, down, seed + 1)?;
                t.add(ru, rd)
            })?;
            (TargetClass::Primitive, rep)
        }
        "softmax" => {
            let inputs = vec![Tensor::uniform(Shape::matrix(4, 6), -3.0, 3.0, &mut r)];
            let rep = primitive(inputs, opts, |t, v| {
                let s = t.softmax_lastdim(v[0])?;
                readout(t, s, seed)
            })?;
            (TargetClass::Primitive, rep)
        }
        "matmul" => {
            let inputs = vec![
                uniform(Shape::matrix(3, 4), &mut r),
                uniform(Shape::matrix(4, 5), &mut r),
            ];
            let rep = primitive(inputs, opts, |t, v| {
                let m = t.matmul(v[0], v[1])?;
                let mt = t.transpose(m)?;
                let a = readout(t, m, seed)?;
                let b = readout(t, mt, seed + 1)?;
                t.add(a, b)
            })?;
            (TargetClass::Primitive, rep)
        }
        "attention" => {
            let inputs = vec![
                uniform(Shape::matrix(6, 3), &mut r),
                uniform(Shape::matrix(6, 3), &mut r),
                uniform(Shape::matrix(6, 4), &mut r),
            ];
            let rep = primitive(inputs, opts, |t, v| {
                let o = t.attention(v[0], v[1], v[2], 1.0 / math::sqrt(3.0))?;
                readout(t, o, seed)
            })?;
            (TargetClass::Primitive, rep)
        }
        "mix" => {
            let inputs = vec![
                uniform(Shape::new(2, 2, 3, 3), &mut r),
                uniform(Shape::new(2, 2, 3, 3), &mut r),
                Tensor::scalar(r.gen_range(-2.0..2.0)),
            ];
            let rep = primitive(inputs, opts, |t, v| {
                let m = t.mix(v[0], v[1], v[2])?;
                readout(t, m, seed)
            })?;
            (TargetClass::Primitive, rep)
        }
        "me" => {
            let make = |s: u64| {
                let mut r = rng(s, 100);
                let mut store = ParamStore::new();
                let cfg = MeConfig::new(4, true, true);
                MeBlock::new(&mut store, "me", cfg, &mut r)?;
                let inputs = vec![
                    uniform(Shape::new(2, 2, 8, 8), &mut r),
                    uniform(Shape::new(2, 4, 4, 4), &mut r),
                    uniform(Shape::new(2, 8, 2, 2), &mut r),
                ];
                Ok((store, inputs))
            };
            let block = {
                let mut store = ParamStore::new();
                MeBlock::new(
                    &mut store,
                    "me",
                    MeConfig::new(4, true, true),
                    &mut rng(0, 100),
                )?
            };
            let rep = composite(seed, opts, make, |t, store, v| {
                let out = block.forward(t, store, Some(v[0]), v[1], Some(v[2]), BnMode::Eval)?;
                readout(t, out, seed)
            })?;
            (TargetClass::Composite, rep)
        }
        "aa" => {
            let mut worst: Option<GradcheckReport> = None;
            for mode in FusionMode::ALL {
                let cfg = AaConfig::new(8, 4, mode);
                let make = |s: u64| {
                    let mut r = rng(s, 200);
                    let mut store = ParamStore::new();
                    let block = AaBlock::new(&mut store, "aa", cfg, &mut r)?;
                    for &id in &block.alpha_logits {
                        store.set(id, Tensor::scalar(r.gen_range(-2.0..2.0)));
                    }
                    Ok((store, vec![uniform(Shape::new(2, 8, 3, 3), &mut r)]))
                };
                let block = AaBlock::new(&mut ParamStore::new(), "aa", cfg, &mut rng(0, 200))?;
                let rep = composite(seed, opts, make, |t, store, v| {
                    let out = block.forward(t, store, v[0])?;
                    readout(t, out, seed)
                })?;
                if worst
                    .as_ref()
                    .is_none_or(|w| rep.max_rel_error > w.max_rel_error)
                {
                    let mut rep = rep;
                    rep.worst = format!("{mode}: {}", rep.worst);
                    worst = Some(rep);
                }
            }
            (TargetClass::Composite, worst.expect("four fusion modes"))
        }
        "amam" => {
            let cfg = AmamConfig {
                levels: vec![4, 8, 16],
                heads: 2,
                ..AmamConfig::default()
            };
            let shapes = [
                Shape::new(1, 4, 8, 8),
                Shape::new(1, 8, 4, 4),
                Shape::new(1, 16, 2, 2),
            ];
            let make = |s: u64| {
                let mut store = ParamStore::new();
                let c = AmamConfig {
                    seed: s,
                    ..cfg.clone()
                };
                let amam = Amam::new(&mut store, "amam", &c)?;
                let mut r = rng(s, 300);
                for level in &amam.levels {
                    if let Some(aa) = &level.aa {
                        for &id in &aa.alpha_logits {
                            store.set(id, Tensor::scalar(r.gen_range(-2.0..2.0)));
                        }
                    }
                }
                Ok((
                    store,
                    shapes.iter().map(|&sh| uniform(sh, &mut r)).collect(),
                ))
            };
            let amam = Amam::new(&mut ParamStore::new(), "amam", &cfg)?;
            // block parameters are covered by the me and aa targets
            let inputs_only = GradcheckOptions {
                check_params: false,
                ..opts
            };
            let rep = composite(seed, inputs_only, make, |t, store, v| {
                let outs = amam.forward(t, store, v, BnMode::Eval)?;
                let parts = outs
                    .iter()
                    .enumerate()
                    .map(|(i, &o)| readout(t, o, seed + i as u64))
                    .collect::<Result<Vec<_>>>()?;
                sum_vars(t, &parts)
            })?;
            (TargetClass::Composite, rep)
        }
        other => {
            return Err(amam_core::Error::InvalidConfig(format!(
                "unknown gradcheck target {other}"
            )));
        }
    };
    Ok(GradResult {
        target: name,
        class,
        report,
    })
}

/// Runs every target at `seed` with central step `eps`. `corrupt` adds a
/// constant to every analytic gradient.
pub fn run_gradchecks(seed: u64, eps: f64, corrupt: Option<f64>) -> Result<Vec<GradResult>> {
    let opts = GradcheckOptions {
        eps,
        check_params: true,
        corrupt,
    };
    GRAD_TARGETS
        .iter()
        .map(|&name| check_target(name, seed, opts))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn() -> std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn random_pyramid(
    r: &mut ChaCha8Rng,
    cfg: &AmamConfig,
    n: usize,
    h0: usize,
    w0: usize,
) -> FeaturePyramid {
    let maps = cfg
        .levels
        .iter()
        .enumerate()
        .map(|(i, &c)| uniform(Shape::new(n, c, h0 >> i, w0 >> i), r))
        .collect();
    FeaturePyramid::new(maps).expect("halving geometry")
}

fn check_amtn_round_trip() -> std::result::Result<String, String> {
    let mut r = rng(11, 1);
    for k in 0..20 {
        let shape = Shape::new(
            r.gen_range(1..3),
            r.gen_range(1..4),
            r.gen_range(1..5),
            r.gen_range(1..5),
        );
        let t = Tensor::from_fn(shape, |_, _, _, _| r.gen::<f32>() as f64 * 4.0 - 2.0);
        let p = std::path::Path::new("memory.amtn");
        let back = crate::amtn::decode(&crate::amtn::encode(&t, p).map_err(|e| e.to_string())?, p)
            .map_err(|e| e.to_string())?;
        ensure(
            back.data()
                .iter()
                .zip(t.data())
                .all(|(a, b)| a.to_bits() == b.to_bits()),
            format!("tensor {k} changed"),
        )?;
    }
    Ok("20 tensors bit-identical".into())
}

fn check_conv_identity() -> std::result::Result<String, String> {
    let mut r = rng(12, 1);
    let x = uniform(Shape::new(2, 3, 4, 5), &mut r);
    let k = Tensor::from_fn(Shape::new(3, 3, 3, 3), |o, i, y, xx| {
        f64::from(o == i && y == 1 && xx == 1)
    });
    let y = e2s(ops::conv2d(&x, &k, None, 1, 1))?;
    ensure(y == x, "identity kernel altered its input")?;
    Ok("3x3 identity kernel".into())
}

fn check_softmax_rows() -> std::result::Result<String, String> {
    let mut r = rng(13, 1);
    let x = Tensor::uniform(Shape::matrix(8, 9), -30.0, 30.0, &mut r);
    let s = e2s(ops::softmax_lastdim(&x))?;
    for row in s.data().chunks(9) {
        ensure(
            (row.iter().sum::<f64>() - 1.0).abs() < 1e-12,
            "row sum differs from 1",
        )?;
        ensure(
            row.iter().all(|&p| p > 0.0 && p <= 1.0),
            "entry outside (0, 1]",
        )?;
    }
    Ok("8 rows sum to 1".into())
}

fn check_me_shapes() -> std::result::Result<String, String> {
    let mut r = rng(14, 1);
    for (shallow, deep) in [(true, true), (true, false), (false, true)] {
        let mut store = ParamStore::new();
        let me = e2s(MeBlock::new(
            &mut store,
            "me",
            MeConfig::new(4, shallow, deep),
            &mut r,
        ))?;
        let s = shallow.then(|| uniform(Shape::new(1, 2, 8, 12), &mut r));
        let c = uniform(Shape::new(1, 4, 4, 6), &mut r);
        let d = deep.then(|| uniform(Shape::new(1, 8, 2, 3), &mut r));
        let out = e2s(me.apply(&store, s.as_ref(), &c, d.as_ref()))?;
        ensure(
            out.shape() == c.shape(),
            format!("ME changed shape {} -> {}", c.shape(), out.shape()),
        )?;
    }
    Ok("three neighbour combinations".into())
}

fn check_convex_pair() -> std::result::Result<String, String> {
    let mut r = rng(15, 1);
    for _ in 0..1000 {
        let logit = r.gen_range(-20.0..20.0);
        let (a, b) = math::convex_pair(logit);
        ensure(
            a + b == 1.0 && a > 0.0 && a < 1.0,
            format!("logit {logit}: alpha {a}, beta {b}"),
        )?;
    }
    Ok("1000 logits, alpha + beta == 1 exactly".into())
}

fn aa_outputs(block: &AaBlock, store: &ParamStore, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    let mut tape = Tape::inference();
    let v = tape.constant(x.clone());
    let trace = block.forward_detailed(&mut tape, store, v)?;
    let heads = trace
        .head_outputs
        .iter()
        .map(|&h| tape.value(h).clone())
        .collect();
    Ok((tape.value(trace.output).clone(), heads))
}

fn check_adaptive_average() -> std::result::Result<String, String> {
    let mut worst = 0.0f64;
    for trial in 0..20 {
        let mut r = rng(16, trial);
        let mut store = ParamStore::new();
        let adaptive = e2s(AaBlock::new(
            &mut store,
            "aa",
            AaConfig::new(8, 4, FusionMode::Adaptive),
            &mut r,
        ))?;
        let mut average = adaptive.clone();
        average.config.fusion = FusionMode::Average;
        let x = uniform(Shape::new(1, 8, 3, 4), &mut r);
        let a = e2s(adaptive.apply(&store, &x))?;
        let b = e2s(average.apply(&store, &x))?;
        worst = worst.max(a.max_abs_diff(&b));
    }
    ensure(worst <= 1e-12, format!("max difference {worst:.3e}"))?;
    Ok(format!("20 inputs, max difference {worst:.3e}"))
}

fn check_add_differs() -> std::result::Result<String, String> {
    let mut r = rng(17, 1);
    let mut store = ParamStore::new();
    let add = e2s(AaBlock::new(
        &mut store,
        "aa",
        AaConfig::new(8, 4, FusionMode::Add),
        &mut r,
    ))?;
    let mut average = add.clone();
    average.config.fusion = FusionMode::Average;
    let x = uniform(Shape::new(1, 8, 3, 3), &mut r);
    let d = e2s(add.apply(&store, &x))?.max_abs_diff(&e2s(average.apply(&store, &x))?);
    ensure(d > 1e-6, format!("Add and Average agree to {d:.3e}"))?;
    Ok(format!("max difference {d:.3e}"))
}

fn check_cascade_locality() -> std::result::Result<String, String> {
    let heads = 4;
    for trial in 0..20 {
        let mut r = rng(18, trial);
        let mut store = ParamStore::new();
        let mode = FusionMode::ALL[trial as usize % 4];
        let block = e2s(AaBlock::new(
            &mut store,
            "aa",
            AaConfig::new(8, heads, mode),
            &mut r,
        ))?;
        let x = uniform(Shape::new(1, 8, 3, 3), &mut r);
        let j = r.gen_range(1..heads);
        let d = 8 / heads;
        let mut y = x.clone();
        for c in j * d..(j + 1) * d {
            for v in y.plane_mut(0, c) {
                *v += r.gen_range(0.5..1.0);
            }
        }
        let (_, hx) = e2s(aa_outputs(&block, &store, &x))?;
        let (_, hy) = e2s(aa_outputs(&block, &store, &y))?;
        for i in 0..j {
            let same = hx[i]
                .data()
                .iter()
                .zip(hy[i].data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            ensure(
                same,
                format!("trial {trial}: head {i} moved when split {j} was perturbed"),
            )?;
        }
        ensure(
            hx[j] != hy[j],
            format!("trial {trial}: head {j} ignored its own split"),
        )?;
    }
    Ok("20 trials, h = 4".into())
}

fn check_amam_shapes() -> std::result::Result<String, String> {
    let mut r = rng(19, 1);
    for trial in 0..10 {
        let heads = [1, 2, 4][r.gen_range(0..3)];
        let base = heads * r.gen_range(1..3);
        let cfg = AmamConfig {
            levels: vec![base, 2 * base, 4 * base],
            heads,
            fusion_mode: FusionMode::ALL[r.gen_range(0..4)],
            enabled_me: r.gen_bool(0.7),
            enabled_aa: r.gen_bool(0.7),
            seed: trial,
            qk_dim: None,
        };
        let mut store = ParamStore::new();
        let amam = e2s(Amam::new(&mut store, "amam", &cfg))?;
        let (n, h, w) = (
            r.gen_range(1..3),
            4 * r.gen_range(1..4),
            4 * r.gen_range(1..4),
        );
        let pyr = random_pyramid(&mut r, &cfg, n, h, w);
        let out = e2s(amam.apply(&store, &pyr))?;
        ensure(
            out.shapes() == pyr.shapes(),
            format!("trial {trial}: shapes changed"),
        )?;
    }
    Ok("10 random pyramids".into())
}

fn check_identity_config() -> std::result::Result<String, String> {
    let mut r = rng(20, 1);
    let cfg = AmamConfig {
        levels: vec![4, 8, 16],
        enabled_me: false,
        enabled_aa: false,
        ..AmamConfig::default()
    };
    let mut store = ParamStore::new();
    let amam = e2s(Amam::new(&mut store, "amam", &cfg))?;
    let pyr = random_pyramid(&mut r, &cfg, 2, 8, 8);
    ensure(
        e2s(amam.apply(&store, &pyr))? == pyr,
        "disabled AMAM changed its input",
    )?;
    ensure(store.is_empty(), "disabled AMAM registered parameters")?;
    Ok("ME and AA off is the identity".into())
}

fn check_pyramid_rejection() -> std::result::Result<String, String> {
    let cfg = AmamConfig {
        levels: vec![4, 8],
        heads: 2,
        ..AmamConfig::default()
    };
    let mut store = ParamStore::new();
    let amam = e2s(Amam::new(&mut store, "amam", &cfg))?;
    let bad = FeaturePyramid {
        maps: vec![
            Tensor::zeros(Shape::new(1, 4, 8, 8)),
            Tensor::zeros(Shape::new(1, 8, 3, 4)),
        ],
    };
    ensure(
        amam.apply(&store, &bad).is_err(),
        "non-halving pyramid accepted",
    )?;
    Ok("non-halving level rejected".into())
}

fn check_iou_cases() -> std::result::Result<String, String> {
    use amam_core::eval::iou;
    use amam_core::BBox;
    let b = |a, c, d, e| BBox::new(a, c, d, e).map_err(|e| e.to_string());
    let unit = b(0.0, 0.0, 2.0, 2.0)?;
    ensure(e2s(iou(&unit, &unit))? == 1.0, "identical boxes")?;
    ensure(
        e2s(iou(&unit, &b(3.0, 3.0, 4.0, 4.0)?))? == 0.0,
        "disjoint boxes",
    )?;
    let third = e2s(iou(&unit, &b(1.0, 0.0, 3.0, 2.0)?))?;
    ensure(
        (third - 1.0 / 3.0).abs() < 1e-12,
        format!("half-shifted boxes gave {third}"),
    )?;
    Ok("1, 0 and 1/3".into())
}

fn check_ap_examples() -> std::result::Result<String, String> {
    use amam_core::eval::{average_precision, evaluate};
    use amam_core::{BBox, Detection, ImageRecord};
    let gt = BBox::new(0.0, 0.0, 10.0, 10.0).map_err(|e| e.to_string())?;
    let miss = BBox::new(20.0, 20.0, 30.0, 30.0).map_err(|e| e.to_string())?;
    let image = |dets: Vec<Detection>| ImageRecord {
        id: "a".into(),
        gts: vec![gt],
        dets,
    };
    let hit_first = image(vec![
        Detection {
            bbox: gt,
            score: 0.9,
        },
        Detection {
            bbox: miss,
            score: 0.8,
        },
    ]);
    let hit_second = image(vec![
        Detection {
            bbox: gt,
            score: 0.8,
        },
        Detection {
            bbox: miss,
            score: 0.9,
        },
    ]);
    let a = e2s(average_precision(&[hit_first], 0.5))?;
    let b = e2s(average_precision(&[hit_second], 0.5))?;
    ensure(
        a == 1.0 && (b - 0.5).abs() < 1e-12,
        format!("AP {a} and {b}"),
    )?;
    let empty = e2s(evaluate(&[image(vec![])], 0.5, 0.25))?;
    ensure(
        empty.precision_degenerate && empty.recall == 0.0 && empty.ap_50 == 0.0,
        "empty detections",
    )?;
    Ok("ranked hit gives 1.0, ranked miss 0.5".into())
}

fn check_schedule() -> std::result::Result<String, String> {
    let s = e2s(amam_core::LrSchedule::new(1000, 100))?;
    let at = |i| s.lr_at(i).map_err(|e| e.to_string());
    ensure((at(100)? - 0.01).abs() < 1e-12, "lr at the end of warm-up")?;
    ensure((at(1000)? - 0.002).abs() < 1e-12, "final lr")?;
    ensure((at(550)? - 0.006).abs() < 1e-12, "cosine midpoint")?;
    let mut prev = f64::INFINITY;
    for i in 100..=1000 {
        let lr = at(i)?;
        ensure(lr <= prev, format!("lr rises at iteration {i}"))?;
        prev = lr;
    }
    Ok("0.01 -> 0.002, midpoint 0.006".into())
}

fn check_toy_identity() -> std::result::Result<String, String> {
    use amam_core::train::{toy_train_with, TrainOptions};
    let opts = TrainOptions {
        image_size: 16,
        batch: 2,
        ..TrainOptions::default()
    };
    let cfg = AmamConfig {
        levels: vec![4, 8, 16],
        heads: 2,
        enabled_me: false,
        enabled_aa: false,
        ..AmamConfig::default()
    };
    let off = e2s(toy_train_with(&cfg.levels, Some(&cfg), 3, 5, &opts))?;
    let base = e2s(toy_train_with(&cfg.levels, None, 3, 5, &opts))?;
    ensure(off.iter().all(|r| r.loss.is_finite()), "non-finite loss")?;
    ensure(
        off.iter()
            .zip(&base)
            .all(|(a, b)| a.loss.to_bits() == b.loss.to_bits()),
        "disabled AMAM diverged from the baseline",
    )?;
    Ok("3 steps bit-identical to the baseline".into())
}

fn check_gradients() -> std::result::Result<String, String> {
    let results = e2s(run_gradchecks(0, 1e-5, None))?;
    let failed: Vec<String> = results
        .iter()
        .filter(|g| !g.passed())
        .map(|g| format!("{} ({:e})", g.target, g.report.max_rel_error))
        .collect();
    ensure(failed.is_empty(), failed.join(", "))?;
    Ok(format!("{} targets", results.len()))
}

pub const CHECKS: &[(&str, Check)] = &[
    ("amtn round trip", check_amtn_round_trip),
    ("conv identity kernel", check_conv_identity),
    ("softmax rows", check_softmax_rows),
    ("gradients match finite differences", check_gradients),
    ("me preserves shape", check_me_shapes),
    ("alpha + beta == 1", check_convex_pair),
    (
        "adaptive at zero logits equals average",
        check_adaptive_average,
    ),
    ("add differs from average", check_add_differs),
    ("cascade locality", check_cascade_locality),
    ("amam preserves pyramid shapes", check_amam_shapes),
    ("amam off/off is identity", check_identity_config),
    ("pyramid violations rejected", check_pyramid_rejection),
    ("iou hand cases", check_iou_cases),
    ("ap ranking examples", check_ap_examples),
    ("lr schedule endpoints", check_schedule),
    ("toy training off/off equals baseline", check_toy_identity),
];

pub fn run_checks() -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|&(name, f)| {
            let (passed, detail) = match f() {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckResult {
                name,
                passed,
                detail,
            }
        })
        .collect()
}
