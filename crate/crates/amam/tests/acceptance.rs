//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs without the libtest harness so the lines are never captured.

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use amam::amam_core::eval::{self, BBox, Detection, ImageRecord};
use amam::amam_core::train::{mean_loss, toy_train, TrainOptions};
use amam::amam_core::{
    math, AaBlock, AaConfig, Amam, AmamConfig, FeaturePyramid, FusionMode, LrSchedule, ParamStore,
    Shape, Tape, Tensor,
};
use amam::{ablate, amtn, cli, detections, format};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn run_cli(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = cli::run_args(
        std::iter::once("amam").chain(args.iter().copied()),
        &mut out,
        &mut err,
    );
    (
        code,
        String::from_utf8_lossy(&out).into_owned(),
        String::from_utf8_lossy(&err).into_owned(),
    )
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(
        elapsed < limit,
        format!(
            "took {:.1} s, limit {:.0} s",
            elapsed.as_secs_f64(),
            limit.as_secs_f64()
        ),
    )
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    for seed in ["0", "1", "2"] {
        let (code, out, err) = run_cli(&["gradcheck", "--seed", seed]);
        ensure(
            code == cli::EXIT_OK,
            format!("seed {seed}: exit {code}\n{out}{err}"),
        )?;
        let mut lines = out.lines();
        let header = lines.next().unwrap_or_default();
        ensure(
            header == format!("gradcheck seed={seed} eps=1e-5"),
            format!("header {header:?}"),
        )?;
        let mut targets = 0;
        for line in lines {
            targets += 1;
            ensure(line.starts_with("PASS"), format!("seed {seed}: {line}"))?;
            let tol = if line.contains("primitive") {
                1e-6
            } else {
                1e-4
            };
            ensure(
                line.contains(&format!("tol={tol:e}")),
                format!("seed {seed}: wrong tolerance in {line}"),
            )?;
            let err: f64 = line
                .split("max_rel_error=")
                .nth(1)
                .and_then(|s| s.split_whitespace().next())
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| format!("unparsable line {line}"))?;
            ensure(err < tol, format!("seed {seed}: {line}"))?;
            if err / tol > worst.0 {
                worst = (
                    err / tol,
                    line.split_whitespace().nth(1).unwrap_or("").to_string(),
                );
            }
        }
        ensure(
            targets == amam::suite::GRAD_TARGETS.len(),
            format!("seed {seed}: {targets} targets"),
        )?;
    }
    let elapsed = start.elapsed();
    let (code, _, _) = run_cli(&["gradcheck", "--seed", "0", "--corrupt", "1e-3"]);
    ensure(
        code == cli::EXIT_FAIL,
        format!("corrupted gradients exited {code}"),
    )?;
    within(elapsed, Duration::from_secs(300))?;
    Ok(format!(
        "3 seeds x {} targets, worst {:.1}% of tolerance ({}), corrupted run rejected, {:.1} s",
        amam::suite::GRAD_TARGETS.len(),
        100.0 * worst.0,
        worst.1,
        elapsed.as_secs_f64()
    ))
}

fn shape_contract() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    for trial in 0..50 {
        let heads = [1, 2, 4, 8][r.gen_range(0..4)];
        let levels = r.gen_range(1..=4);
        let base = heads * r.gen_range(1..=2);
        let cfg = AmamConfig {
            levels: (0..levels).map(|i| base << i).collect(),
            heads,
            fusion_mode: FusionMode::ALL[r.gen_range(0..4)],
            enabled_me: r.gen_bool(0.75),
            enabled_aa: r.gen_bool(0.75),
            seed: r.gen(),
            qk_dim: None,
        };
        let (n, h0, w0) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3));
        let scale = 1 << (levels - 1);
        let maps = cfg
            .levels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                Tensor::uniform(
                    Shape::new(n, c, (h0 * scale) >> i, (w0 * scale) >> i),
                    -1.0,
                    1.0,
                    &mut r,
                )
            })
            .collect();
        let pyr = FeaturePyramid::new(maps).map_err(|e| format!("trial {trial}: {e}"))?;
        let mut store = ParamStore::new();
        let amam =
            Amam::new(&mut store, "amam", &cfg).map_err(|e| format!("trial {trial}: {e}"))?;
        let out = amam
            .apply(&store, &pyr)
            .map_err(|e| format!("trial {trial}: {e}"))?;
        ensure(
            out.shapes() == pyr.shapes(),
            format!(
                "trial {trial}: {:?} became {:?}",
                pyr.shapes(),
                out.shapes()
            ),
        )?;
    }
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(60))?;
    Ok(format!(
        "50 pyramids, every level shape preserved, {:.2} s",
        elapsed.as_secs_f64()
    ))
}

fn convex_weights() -> Outcome {
    let mut r = rng(2);
    for _ in 0..1000 {
        let logit: f64 = r.gen_range(-20.0..20.0);
        let (a, b) = math::convex_pair(logit);
        ensure(
            a + b == 1.0,
            format!("logit {logit}: alpha + beta = {}", a + b),
        )?;
        ensure(a > 0.0 && a < 1.0, format!("logit {logit}: alpha = {a}"))?;
    }
    Ok("1000 logits in [-20, 20], alpha + beta == 1 exactly, alpha in (0, 1)".into())
}

fn fusion_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    let mut min_gap = f64::INFINITY;
    for trial in 0..20 {
        let mut r = rng(300 + trial);
        let mut store = ParamStore::new();
        let adaptive = AaBlock::new(
            &mut store,
            "aa",
            AaConfig::new(16, 4, FusionMode::Adaptive),
            &mut r,
        )
        .map_err(|e| e.to_string())?;
        for &id in &adaptive.alpha_logits {
            ensure(
                store.get(id).item() == 0.0,
                "fusion logits do not start at zero",
            )?;
        }
        let with = |mode| {
            let mut b = adaptive.clone();
            b.config.fusion = mode;
            b
        };
        let x = Tensor::uniform(Shape::new(2, 16, 3, 3), -1.0, 1.0, &mut r);
        let run = |b: &AaBlock| b.apply(&store, &x).map_err(|e| e.to_string());
        let a = run(&adaptive)?;
        let avg = run(&with(FusionMode::Average))?;
        let add = run(&with(FusionMode::Add))?;
        worst = worst.max(a.max_abs_diff(&avg));
        min_gap = min_gap.min(add.max_abs_diff(&avg));
    }
    ensure(
        worst <= 1e-12,
        format!("adaptive vs average differ by {worst:.3e}"),
    )?;
    ensure(min_gap > 0.0, "add matched average on some input")?;
    Ok(format!(
        "20 inputs, |adaptive - average| <= {worst:.1e}, |add - average| >= {min_gap:.2e}"
    ))
}

fn cascade_locality() -> Outcome {
    for trial in 0..20u64 {
        let mut r = rng(400 + trial);
        let mut store = ParamStore::new();
        let mode = FusionMode::ALL[trial as usize % 4];
        let block = AaBlock::new(&mut store, "aa", AaConfig::new(8, 4, mode), &mut r)
            .map_err(|e| e.to_string())?;
        let x = Tensor::uniform(Shape::new(1, 8, 3, 3), -1.0, 1.0, &mut r);
        let j = r.gen_range(1..4);
        let mut y = x.clone();
        for c in 2 * j..2 * (j + 1) {
            for v in y.plane_mut(0, c) {
                *v += r.gen_range(0.1..1.0);
            }
        }
        let heads = |t: &Tensor| -> Result<Vec<Tensor>, String> {
            let mut tape = Tape::inference();
            let v = tape.constant(t.clone());
            let trace = block
                .forward_detailed(&mut tape, &store, v)
                .map_err(|e| e.to_string())?;
            Ok(trace
                .head_outputs
                .iter()
                .map(|&h| tape.value(h).clone())
                .collect())
        };
        let (hx, hy) = (heads(&x)?, heads(&y)?);
        for i in 0..j {
            let same = hx[i]
                .data()
                .iter()
                .zip(hy[i].data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            ensure(
                same,
                format!("trial {trial} ({mode}): head {i} changed when split {j} moved"),
            )?;
        }
        ensure(
            hx[j] != hy[j],
            format!("trial {trial}: head {j} ignored its split"),
        )?;
    }
    Ok("h = 4, 20 trials over all fusion modes, earlier heads bit-identical".into())
}

/// Integer-coordinate box; IoU kept as the exact fraction `inter / union`.
#[derive(Clone, Copy)]
struct IBox([i64; 4]);

impl IBox {
    fn area(&self) -> i64 {
        (self.0[2] - self.0[0]) * (self.0[3] - self.0[1])
    }

    fn iou(&self, o: &IBox) -> (i64, i64) {
        let iw = (self.0[2].min(o.0[2]) - self.0[0].max(o.0[0])).max(0);
        let ih = (self.0[3].min(o.0[3]) - self.0[1].max(o.0[1])).max(0);
        let inter = iw * ih;
        (inter, self.area() + o.area() - inter)
    }

    fn to_bbox(self) -> BBox {
        let [a, b, c, d] = self.0.map(|v| v as f64);
        BBox::new(a, b, c, d).expect("positive extent")
    }
}

struct Instance {
    gts: Vec<Vec<IBox>>,
    dets: Vec<Vec<(IBox, f64)>>,
}

impl Instance {
    fn random(r: &mut ChaCha8Rng) -> Self {
        let images = r.gen_range(1..=3);
        let mut gts = vec![Vec::new(); images];
        let mut dets = vec![Vec::new(); images];
        let ibox = |r: &mut ChaCha8Rng| {
            let (x, y) = (r.gen_range(0..10), r.gen_range(0..10));
            IBox([x, y, x + r.gen_range(1..=6), y + r.gen_range(1..=6)])
        };
        for _ in 0..r.gen_range(1..=5) {
            let i = r.gen_range(0..images);
            gts[i].push(ibox(r));
        }
        let coarse = r.gen_bool(0.5);
        for _ in 0..r.gen_range(0..=10) {
            let i = r.gen_range(0..images);
            let b = if r.gen_bool(0.6) && !gts[i].is_empty() {
                // jitter a ground truth so IoUs straddle the thresholds
                let g: IBox = gts[i][r.gen_range(0..gts[i].len())];
                let d = |r: &mut ChaCha8Rng| r.gen_range(-1..=1);
                let [x0, y0, x1, y1] = g.0;
                let (nx0, ny0) = (x0 + d(r), y0 + d(r));
                IBox([nx0, ny0, (x1 + d(r)).max(nx0 + 1), (y1 + d(r)).max(ny0 + 1)])
            } else {
                ibox(r)
            };
            let score = if coarse {
                f64::from(r.gen_range(1..=4u32)) / 4.0
            } else {
                r.gen_range(0.0..1.0)
            };
            dets[i].push((b, score));
        }
        Instance { gts, dets }
    }

    fn records(&self) -> Vec<ImageRecord> {
        self.gts
            .iter()
            .zip(&self.dets)
            .enumerate()
            .map(|(i, (g, d))| ImageRecord {
                id: format!("img{i}"),
                gts: g.iter().map(|b| b.to_bbox()).collect(),
                dets: d
                    .iter()
                    .map(|&(b, score)| Detection {
                        bbox: b.to_bbox(),
                        score,
                    })
                    .collect(),
            })
            .collect()
    }

    /// Hit flags in rank order: descending score, ties by image then
    /// detection index; each detection takes the first unclaimed ground truth
    /// of greatest IoU at or above `pct / 100`.
    fn hits(&self, pct: i64, min_score: f64) -> Vec<bool> {
        let mut pending: Vec<(usize, usize)> = (0..self.dets.len())
            .flat_map(|i| (0..self.dets[i].len()).map(move |d| (i, d)))
            .filter(|&(i, d)| self.dets[i][d].1 >= min_score)
            .collect();
        let mut claimed: Vec<Vec<bool>> = self.gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut hits = Vec::new();
        while !pending.is_empty() {
            let mut k = 0;
            for c in 1..pending.len() {
                let (i, d) = pending[c];
                let (bi, bd) = pending[k];
                if self.dets[i][d].1 > self.dets[bi][bd].1 {
                    k = c;
                }
            }
            let (i, d) = pending.remove(k);
            let det = self.dets[i][d].0;
            let mut best: Option<(usize, (i64, i64))> = None;
            for (g, gt) in self.gts[i].iter().enumerate() {
                let (inter, union) = det.iou(gt);
                if claimed[i][g] || 100 * inter < pct * union {
                    continue;
                }
                if best.is_none_or(|(_, (bi, bu))| inter * bu > bi * union) {
                    best = Some((g, (inter, union)));
                }
            }
            if let Some((g, _)) = best {
                claimed[i][g] = true;
            }
            hits.push(best.is_some());
        }
        hits
    }

    fn total_gt(&self) -> usize {
        self.gts.iter().map(Vec::len).sum()
    }

    /// 101-point interpolated AP by scanning every rank cut-off per recall level.
    fn ap(&self, pct: i64) -> f64 {
        let hits = self.hits(pct, f64::NEG_INFINITY);
        let g = self.total_gt();
        let cum: Vec<usize> = hits
            .iter()
            .scan(0, |tp, &h| {
                *tp += usize::from(h);
                Some(*tp)
            })
            .collect();
        let mut total = 0.0;
        for level in 0..=100usize {
            let mut best: Option<(usize, usize)> = None;
            for (k, &tp) in cum.iter().enumerate() {
                if tp * 100 >= level * g && best.is_none_or(|(bt, bn)| tp * bn > bt * (k + 1)) {
                    best = Some((tp, k + 1));
                }
            }
            total += best.map_or(0.0, |(tp, n)| tp as f64 / n as f64);
        }
        total / 101.0
    }
}

fn metric_oracle() -> Outcome {
    let mut r = rng(5);
    let mut worst = 0.0f64;
    let mut ties = 0;
    for case in 0..500 {
        let inst = Instance::random(&mut r);
        let images = inst.records();
        let mut prev = f64::INFINITY;
        for (t, thr) in eval::coco_thresholds().into_iter().enumerate() {
            let pct = 50 + 5 * t as i64;
            let ap =
                eval::average_precision(&images, thr).map_err(|e| format!("case {case}: {e}"))?;
            let want = inst.ap(pct);
            worst = worst.max((ap - want).abs());
            ensure(
                (ap - want).abs() <= 1e-9,
                format!("case {case} at {thr}: AP {ap}, oracle {want}"),
            )?;
            ensure(
                ap <= prev,
                format!("case {case}: AP rose from {prev} to {ap} at {thr}"),
            )?;
            prev = ap;
        }
        for conf in [0.0, 0.25, 0.5] {
            let hits = inst.hits(50, conf);
            let tp = hits.iter().filter(|&&h| h).count();
            let (fp, fn_) = (hits.len() - tp, inst.total_gt() - tp);
            let report =
                eval::evaluate(&images, 0.5, conf).map_err(|e| format!("case {case}: {e}"))?;
            let p = if tp + fp == 0 {
                0.0
            } else {
                tp as f64 / (tp + fp) as f64
            };
            let rc = tp as f64 / (tp + fn_) as f64;
            ensure(
                report.precision == p
                    && report.recall == rc
                    && report.precision_degenerate == (tp + fp == 0),
                format!(
                    "case {case} conf {conf}: P/R {}/{} vs counted {p}/{rc}",
                    report.precision, report.recall
                ),
            )?;
        }
        let scores: Vec<f64> = inst.dets.iter().flatten().map(|d| d.1).collect();
        if scores
            .iter()
            .enumerate()
            .any(|(i, s)| scores[..i].contains(s))
        {
            ties += 1;
        }
    }
    Ok(format!(
        "500 instances ({ties} with score ties), max |AP - oracle| = {worst:.1e}, P/R exact, AP monotone"
    ))
}

fn iou_cases() -> Outcome {
    let b = |x0, y0, x1, y1| BBox::new(x0, y0, x1, y1).map_err(|e| e.to_string());
    let a = b(0.0, 0.0, 2.0, 2.0)?;
    let same = eval::iou(&a, &a).map_err(|e| e.to_string())?;
    ensure(same == 1.0, format!("identical boxes: {same}"))?;
    let far = eval::iou(&a, &b(3.0, 0.0, 5.0, 2.0)?).map_err(|e| e.to_string())?;
    ensure(far == 0.0, format!("disjoint boxes: {far}"))?;
    let touching = eval::iou(&a, &b(2.0, 0.0, 4.0, 2.0)?).map_err(|e| e.to_string())?;
    ensure(touching == 0.0, format!("edge-sharing boxes: {touching}"))?;

    // half-overlapping equal boxes: intersection 1, union 3
    let (p, q) = ([0.0, 0.0, 2.0, 1.0], [1.0, 0.0, 3.0, 1.0]);
    let got = eval::iou(&b(p[0], p[1], p[2], p[3])?, &b(q[0], q[1], q[2], q[3])?)
        .map_err(|e| e.to_string())?;
    let cells = 600;
    let step = 3.0 / cells as f64;
    let (mut both, mut either) = (0u64, 0u64);
    for i in 0..cells {
        for j in 0..cells {
            let (x, y) = ((i as f64 + 0.5) * step, (j as f64 + 0.5) * step);
            let inside = |r: [f64; 4]| x > r[0] && x < r[2] && y > r[1] && y < r[3];
            both += u64::from(inside(p) && inside(q));
            either += u64::from(inside(p) || inside(q));
        }
    }
    let counted = both as f64 / either as f64;
    ensure(
        (got - counted).abs() <= 1e-12,
        format!("IoU {got} vs grid count {counted}"),
    )?;
    ensure((got - 1.0 / 3.0).abs() <= 1e-12, format!("IoU {got}"))?;
    Ok(format!(
        "identical 1, disjoint 0, overlap {got:.15} = grid {both}/{either}"
    ))
}

fn lr_endpoints() -> Outcome {
    let mut checked = Vec::new();
    for (epochs, per_epoch, warm) in [(500, 100, 3), (500, 2, 3), (10, 7, 1), (300, 11, 0)] {
        let s = LrSchedule::from_epochs(epochs, per_epoch, warm).map_err(|e| e.to_string())?;
        let at = |i| s.lr_at(i).map_err(|e| e.to_string());
        let start = at(s.warmup_iters)?;
        let end = at(s.total_iters)?;
        ensure(
            (start - 0.01).abs() <= 1e-12,
            format!("{epochs}x{per_epoch}: lr at warm-up end {start}"),
        )?;
        ensure(
            (end - 0.002).abs() <= 1e-12,
            format!("{epochs}x{per_epoch}: final lr {end}"),
        )?;
        let span = s.total_iters - s.warmup_iters;
        if span % 2 == 0 {
            let mid = at(s.warmup_iters + span / 2)?;
            ensure(
                (mid - 0.006).abs() <= 1e-12,
                format!("{epochs}x{per_epoch}: midpoint lr {mid}"),
            )?;
            checked.push(format!("{epochs}x{per_epoch}"));
        }
    }
    ensure(!checked.is_empty(), "no schedule had an integral midpoint")?;
    Ok(format!(
        "0.01 at warm-up end, 0.002 at the end, 0.006 at midpoint ({})",
        checked.join(", ")
    ))
}

fn toy_training() -> Outcome {
    let start = Instant::now();
    let cfg = AmamConfig::default();
    let trace = toy_train(&cfg, 200, 0).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(
        trace.len() == 200,
        format!("{} steps recorded", trace.len()),
    )?;
    if let Some(bad) = trace.iter().find(|r| !r.loss.is_finite()) {
        return Err(format!("non-finite loss at step {}", bad.iter));
    }
    let (first, last) = (mean_loss(&trace[..20]), mean_loss(&trace[180..]));
    let ratio = last / first;
    ensure(
        ratio <= 0.5,
        format!("last-20 {last:.4} / first-20 {first:.4} = {ratio:.4}"),
    )?;
    within(elapsed, Duration::from_secs(600))?;
    Ok(format!(
        "first-20 {first:.4}, last-20 {last:.4}, ratio {ratio:.4} (image {}x{}), {:.1} s",
        TrainOptions::default().image_size,
        TrainOptions::default().image_size,
        elapsed.as_secs_f64()
    ))
}

const ABLATION_STEPS: usize = 4;

fn ablation_structure() -> Outcome {
    let start = Instant::now();
    let steps = ABLATION_STEPS.to_string();
    let (code, csv, err) = run_cli(&["ablate", "--steps", &steps]);
    ensure(code == cli::EXIT_OK, format!("exit {code}: {err}"))?;
    let mut lines = csv.lines();
    ensure(
        lines.next() == Some("heads,fusion,me,aa,final_loss"),
        "missing CSV header",
    )?;
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    ensure(rows.len() == 24, format!("{} rows", rows.len()))?;
    for row in &rows {
        ensure(row.len() == 5, format!("malformed row {row:?}"))?;
        let loss: f64 = row[4].parse().map_err(|_| format!("bad loss in {row:?}"))?;
        ensure(loss.is_finite(), format!("non-finite loss in {row:?}"))?;
    }
    for heads in ["1", "2", "4", "8", "16"] {
        for mode in FusionMode::ALL {
            let n = rows
                .iter()
                .filter(|r| r[0] == heads && r[1] == mode.as_str() && r[2] == "on" && r[3] == "on")
                .count();
            ensure(n >= 1, format!("missing cell heads={heads} fusion={mode}"))?;
        }
    }
    for (me, aa) in [("off", "off"), ("on", "off"), ("off", "on"), ("on", "on")] {
        ensure(
            rows.iter().any(|r| r[2] == me && r[3] == aa),
            format!("missing me={me} aa={aa}"),
        )?;
    }
    let off = rows
        .iter()
        .find(|r| r[2] == "off" && r[3] == "off")
        .ok_or("missing off/off row")?;

    let base = AmamConfig::default();
    let opts = TrainOptions::default();
    let baseline = ablate::baseline(&base, ABLATION_STEPS, 0, &opts).map_err(|e| e.to_string())?;
    ensure(
        off[4] == format::csv_num(baseline),
        format!("off/off {} vs baseline {baseline}", off[4]),
    )?;
    let cell = ablate::grid(&[], &[])[0];
    ensure(!cell.me && !cell.aa, "first on-off cell is not off/off")?;
    let direct = ablate::run(&base, &[cell], ABLATION_STEPS, 0, &opts)
        .map_err(|e| e.to_string())?[0]
        .final_loss;
    ensure(
        direct.to_bits() == baseline.to_bits(),
        format!("off/off {direct:e} vs baseline {baseline:e}"),
    )?;
    Ok(format!(
        "24 cells (5 heads x 4 modes + 2x2 ME/AA), {ABLATION_STEPS} steps each, all finite, off/off == baseline bit-exact, {:.1} s",
        start.elapsed().as_secs_f64()
    ))
}

fn format_round_trips() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut r = rng(11);
    for i in 0..100 {
        let shape = Shape::new(
            r.gen_range(1..3),
            r.gen_range(1..5),
            r.gen_range(1..6),
            r.gen_range(1..6),
        );
        let t = Tensor::from_fn(shape, |_, _, _, _| loop {
            let v = f32::from_bits(r.gen());
            if !v.is_nan() {
                break f64::from(v);
            }
        });
        let path = dir.path().join(format!("t{i}.amtn"));
        amtn::write(&t, &path).map_err(|e| e.to_string())?;
        let back = amtn::read(&path).map_err(|e| e.to_string())?;
        ensure(
            back.shape() == t.shape(),
            format!("tensor {i}: shape changed"),
        )?;
        let same = t
            .data()
            .iter()
            .zip(back.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, format!("tensor {i}: values changed"))?;
        let again = amtn::encode(&back, &path).map_err(|e| e.to_string())?;
        let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
        ensure(
            again == bytes,
            format!("tensor {i}: re-encoding changed the bytes"),
        )?;
    }

    for case in 0..50 {
        let mut images = Instance::random(&mut r).records();
        for im in &mut images {
            for d in &mut im.dets {
                d.score = r.gen_range(0.0..1.0);
                d.bbox.x_max += r.gen_range(0.0..1.0);
            }
        }
        let json = detections::DetectionFile::from_records(&images).to_json();
        let parsed =
            detections::parse(&json, Path::new("roundtrip.json")).map_err(|e| e.to_string())?;
        let back = parsed
            .to_records(Path::new("roundtrip.json"))
            .map_err(|e| e.to_string())?;
        ensure(back == images, format!("case {case}: records changed"))?;
        let a = eval::evaluate(&images, 0.5, 0.25).map_err(|e| e.to_string())?;
        let b = eval::evaluate(&back, 0.5, 0.25).map_err(|e| e.to_string())?;
        ensure(a == b, format!("case {case}: report changed"))?;
    }
    Ok(
        "100 AMTN tensors bit-identical, 50 detection files round-trip with identical reports"
            .into(),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("gradient fidelity", gradient_fidelity),
        ("shape contract", shape_contract),
        ("convex fusion weights", convex_weights),
        ("fusion-mode equivalence", fusion_equivalence),
        ("cascade locality", cascade_locality),
        ("metric oracle", metric_oracle),
        ("iou hand cases", iou_cases),
        ("lr schedule endpoints", lr_endpoints),
        ("toy training efficacy", toy_training),
        ("ablation structure", ablation_structure),
        ("format round trips", format_round_trips),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS  {name:<24} {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name:<24} {detail}");
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
