//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use actionllm::backbone::{stub_forward, FrozenStub};
use actionllm::cmib::{cmib_forward, CmibParams};
use actionllm::datapipe::{load_split, write_split, DatasetLayout, ObservationSpec, SampledObservation, VideoRecord};
use actionllm::evalkit::{decode_predictions, evaluate_grid, moc, FrameSequence, Forecaster, GridSpec};
use actionllm::model::{load_checkpoint, save_checkpoint, ActionModel};
use actionllm::objective::{dur_loss, seg_loss, total_loss, LossOptions, Prediction, TargetPack};
use actionllm::par::ExecMode;
use actionllm::runner::{self, make_sample, Adam, GRADCHECK_TOL};
use actionllm::tensorkit::{rms_norm, softmax_rows, Graph, Gradients, Matrix, ParamStore};
use actionllm::{ModelConfig, Result, RunConfig};
use common::*;
use rand::Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict { pass, detail: detail.into() }
    }
}

fn check(cond: bool, what: &str, failures: &mut Vec<String>) {
    if !cond {
        failures.push(what.to_string());
    }
}

fn summarize(failures: Vec<String>, ok: &str) -> Verdict {
    if failures.is_empty() {
        Verdict::new(true, ok)
    } else {
        Verdict::new(false, failures.join("; "))
    }
}

fn tiny_run_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig::tiny(3);
    cfg.model.class_names = actionllm::datapipe::SynthGrammar::class_names(3);
    cfg.samples_per_video = 1;
    cfg.synth_train_videos = 6;
    cfg.synth_test_videos = 3;
    cfg.synth_min_frames = 120;
    cfg.synth_max_frames = 160;
    cfg
}

fn gradient_suite() -> Result<Verdict> {
    let started = Instant::now();
    let cases = runner::run_gradcheck(7, ExecMode::Sequential)?;
    let elapsed = started.elapsed();
    let worst = cases.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max);
    let names: Vec<&str> = cases.iter().map(|c| c.name).collect();
    let pass = worst < GRADCHECK_TOL && elapsed < Duration::from_secs(60) && cases.len() == 4;
    Ok(Verdict::new(
        pass,
        format!("{} cases [{}], max_rel_err {worst:.2e}, {elapsed:.1?}", cases.len(), names.join(", ")),
    ))
}

fn frozen_and_trainable(store: &ParamStore) -> (Vec<Vec<u64>>, Vec<Vec<u64>>) {
    let bits = |m: &Matrix| m.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let mut frozen = Vec::new();
    let mut trainable = Vec::new();
    for (_, p) in store.iter() {
        if p.trainable {
            trainable.push(bits(&p.value));
        } else {
            frozen.push(bits(&p.value));
        }
    }
    (frozen, trainable)
}

fn identity_suite() -> Result<Verdict> {
    let mut failures = Vec::new();
    let mut r = rng(21);

    // zero interaction and FFN weights leave every stream unchanged
    let mut store = ParamStore::new();
    let params = CmibParams::new(&mut store, 8, 2, 12, 2, 1e-6, &mut r)?;
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.name.contains(".cmia.") || p.name.contains(".ffn."))
        .map(|(id, p)| (id, p.value.shape()))
        .collect();
    for (id, (rows, cols)) in ids {
        store.set_value(id, Matrix::zeros(rows, cols))?;
    }
    let inputs: [Matrix; 3] = std::array::from_fn(|i| matrix(&random_rows(&mut r, 2 + i, 8, 3.0)));
    let mut g = Graph::new(&store);
    let vars = inputs.clone().map(|m| g.constant(m));
    let outs = cmib_forward(&mut g, vars, &params)?;
    let identical = outs.iter().zip(&inputs).all(|(&o, x)| g.value(o) == x);
    check(identical, "zero-weight interaction block is not an exact identity", &mut failures);

    // positions after the None query never reach the loss
    let mut masked_ok = true;
    for _ in 0..200 {
        let k = r.random_range(2..6);
        let n = r.random_range(2..8);
        let none_pos = r.random_range(1..=n);
        let past_len = r.random_range(1..6);
        let past_ids: Vec<usize> = (0..past_len).map(|_| r.random_range(0..k)).collect();
        let mut past = Matrix::zeros(past_len, k);
        let mut future = Matrix::zeros(n, k + 1);
        for (row, &c) in past_ids.iter().enumerate() {
            past.set(row, c, 1.0);
        }
        let mut durations = vec![0.0; n];
        for i in 0..n {
            let c = if i + 1 >= none_pos { k } else { r.random_range(0..k) };
            future.set(i, c, 1.0);
            if i + 1 < none_pos {
                durations[i] = r.random_range(0.05..0.5);
            }
        }
        let targets = TargetPack { past, future, durations, none_pos };
        let pred = Prediction {
            past_text: matrix(&random_rows(&mut r, past_len, k, 3.0)),
            past_vis: matrix(&random_rows(&mut r, past_len, k, 3.0)),
            future_class: matrix(&random_rows(&mut r, n, k + 1, 3.0)),
            durations: (0..n).map(|_| r.random_range(0.0..1.0)).collect(),
        };
        let mut perturbed = pred.clone();
        for i in none_pos..n {
            for c in 0..=k {
                perturbed.future_class.set(i, c, r.random_range(-50.0..50.0));
            }
        }
        for d in perturbed.durations.iter_mut().skip(none_pos - 1) {
            *d = r.random_range(-5.0..5.0);
        }
        let opts = LossOptions::summed();
        let a = total_loss(&pred, &targets, opts)?;
        let b = total_loss(&perturbed, &targets, opts)?;
        masked_ok &= a.total.to_bits() == b.total.to_bits() && a.class.to_bits() == b.class.to_bits();
    }
    check(masked_ok, "loss changed under a masked-position perturbation", &mut failures);

    // an empty backbone stack passes its input through
    let mut store = ParamStore::new();
    let stub = FrozenStub::new(&mut store, 0, 8, 2, 16, 1e-6, &mut r)?;
    let x = matrix(&random_rows(&mut r, 5, 8, 2.0));
    let mut g = Graph::new(&store);
    let v = g.constant(x.clone());
    let y = stub_forward(&mut g, v, &stub)?;
    check(g.value(y) == &x, "depth-0 backbone is not the identity", &mut failures);

    // ten optimizer steps leave frozen parameters bit-identical
    let cfg = tiny_run_config();
    let videos = runner::synth_split(&cfg, "train")?;
    let mut model = ActionModel::new(cfg.model.clone())?;
    model.round_params()?;
    let (frozen_before, trainable_before) = frozen_and_trainable(&model.store);
    let mut adam = Adam::from_config(&cfg);
    let opts = model.loss_options(cfg.loss_mean);
    let mut steps = 0;
    let mut draw = 0;
    while steps < 10 {
        let video = &videos[draw % videos.len()];
        if let Some(s) = make_sample(&cfg, video, 0, draw)? {
            let mut dropout = rng(s.dropout_seed);
            let (_, grads): (_, Gradients) = model.loss_and_grads(&s.obs, &s.targets, opts, Some(&mut dropout))?;
            adam.step(&mut model.store, &grads, 1.0);
            model.round_params()?;
            steps += 1;
        }
        draw += 1;
    }
    let (frozen_after, trainable_after) = frozen_and_trainable(&model.store);
    check(frozen_before == frozen_after, "a frozen parameter moved during training", &mut failures);
    check(trainable_before != trainable_after, "no trainable parameter moved in 10 steps", &mut failures);

    Ok(summarize(
        failures,
        "zero-weight block identity, masking bit-exact over 200 cases, depth-0 identity, freeze audit over 10 steps",
    ))
}

fn oracle_suite() -> Result<Verdict> {
    const N: u64 = 1000;
    let mut worst = [0.0f64; 6];
    for seed in 0..N {
        let (lib, reference) = cmia_instance(seed);
        for m in 0..3 {
            worst[0] = worst[0].max(max_dev(&lib[m], &reference[m]));
        }
    }
    let mut r = rng(31);
    for _ in 0..N {
        let k = r.random_range(1..7);
        let rows = r.random_range(1..9);
        let logits = random_rows(&mut r, rows, k, 6.0);
        let labels: Vec<usize> = (0..rows).map(|_| r.random_range(0..k)).collect();
        let mut past = Matrix::zeros(rows, k);
        for (i, &c) in labels.iter().enumerate() {
            past.set(i, c, 1.0);
        }
        worst[1] = worst[1].max((seg_loss(&matrix(&logits), &past)? - common::seg_loss(&logits, &labels)).abs());

        let n = r.random_range(1..9);
        let none_pos = r.random_range(1..=n + 1);
        let q = random_rows(&mut r, n, k + 1, 6.0);
        let ql: Vec<usize> = (0..n).map(|i| if i + 1 >= none_pos { k } else { r.random_range(0..k) }).collect();
        let mut fut = Matrix::zeros(n, k + 1);
        for (i, &c) in ql.iter().enumerate() {
            fut.set(i, c, 1.0);
        }
        let lib = actionllm::objective::class_loss(&matrix(&q), &fut, none_pos)?;
        worst[2] = worst[2].max((lib - common::class_loss(&q, &ql, none_pos)).abs());

        let pred: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.5)).collect();
        let tgt: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        worst[3] = worst[3].max((dur_loss(&pred, &tgt, none_pos)? - common::dur_loss(&pred, &tgt, none_pos)).abs());

        let len = r.random_range(1..60);
        let gt: Vec<usize> = (0..len).map(|_| r.random_range(0..k)).collect();
        let p: Vec<usize> = gt.iter().map(|&g| if r.random_bool(0.6) { g } else { r.random_range(0..k) }).collect();
        worst[4] = worst[4].max((moc(&FrameSequence(p.clone()), &FrameSequence(gt.clone()))? - common::moc(&p, &gt)).abs());

        let (logits, durations, horizon) = decode_instance(&mut r);
        let lib = decode_predictions(&matrix(&logits), &durations, horizon)?;
        if lib.0 != common::decode(&logits, &durations, horizon) {
            worst[5] = f64::INFINITY;
        }
    }
    let max = worst.iter().cloned().fold(0.0, f64::max);
    Ok(Verdict::new(
        max < 1e-9,
        format!(
            "{N} instances each; max |dev| cmia {:.1e}, seg {:.1e}, class {:.1e}, dur {:.1e}, moc {:.1e}, decode {}",
            worst[0],
            worst[1],
            worst[2],
            worst[3],
            worst[4],
            if worst[5] == 0.0 { "exact" } else { "MISMATCH" }
        ),
    ))
}

fn analytic_suite() -> Result<Verdict> {
    let mut failures = Vec::new();
    let close = |a: f64, b: f64| (a - b).abs() < 1e-5;

    let s = softmax_rows(&Matrix::from_rows(&[[0.0, 3f64.ln()]]));
    check(close(s.get(0, 0), 0.25) && close(s.get(0, 1), 0.75), "softmax [0, ln 3]", &mut failures);

    let n = rms_norm(&Matrix::from_rows(&[[3.0, 4.0]]), &Matrix::from_rows(&[[1.0, 1.0]]), 0.0)?;
    check(close(n.get(0, 0), 0.84853) && close(n.get(0, 1), 1.13137), "rms_norm [3, 4]", &mut failures);

    for (theta, k) in [(1usize, 2usize), (5, 8), (12, 48)] {
        let mut past = Matrix::zeros(theta, k);
        for i in 0..theta {
            past.set(i, (i * 7) % k, 1.0);
        }
        let l = seg_loss(&Matrix::zeros(theta, k), &past)?;
        check(close(l, theta as f64 * (k as f64).ln()), "uniform seg_loss", &mut failures);
    }

    check(close(dur_loss(&[0.5, 0.5, 0.0], &[0.6, 0.4, 0.0], 3)?, 0.02), "dur_loss example", &mut failures);

    let m = moc(&FrameSequence(vec![0, 1, 1, 1]), &FrameSequence(vec![0, 0, 1, 1]))?;
    check(close(m, 0.75), "moc example", &mut failures);

    Ok(summarize(
        failures,
        "softmax 0.25/0.75, rms_norm 0.84853/1.13137, seg_loss θ₀·lnK, dur_loss 0.02, moc 0.75",
    ))
}

struct Run {
    grid: f64,
    beta_01: f64,
    elapsed: Duration,
}

fn train_and_eval(cfg: &RunConfig, dir: &Path) -> Result<Run> {
    let started = Instant::now();
    let mut cfg = cfg.clone();
    cfg.out_dir = dir.to_path_buf();
    let out = runner::run_train(&cfg, ExecMode::Parallel)?;
    let ckpt = out.final_path.expect("final checkpoint written");
    let (report, _) = runner::run_eval(&cfg, &ckpt, ExecMode::Parallel)?;
    Ok(Run {
        grid: report.average(),
        beta_01: report.column_average(0),
        elapsed: started.elapsed(),
    })
}

fn with_seed(mut cfg: RunConfig, seed: u64) -> RunConfig {
    cfg.seed = seed;
    cfg.model.seed = seed;
    cfg
}

fn closed_loop(root: &Path, clean: &Run) -> Result<Verdict> {
    let mut cfg = RunConfig::default();
    cfg.noise_p = 0.3;
    cfg.eval_noise_p = 0.3;
    let noisy = train_and_eval(&cfg, &root.join("noisy"))?;
    let drop = clean.grid - noisy.grid;
    let mut failures = Vec::new();
    check(clean.beta_01 >= 0.90, &format!("β=0.1 MoC {:.4} < 0.90", clean.beta_01), &mut failures);
    check(clean.grid >= 0.75, &format!("grid MoC {:.4} < 0.75", clean.grid), &mut failures);
    check(clean.elapsed < Duration::from_secs(600), "clean run over 10 min", &mut failures);
    check(drop < 0.10, &format!("text noise 0.3 costs {drop:.4} ≥ 0.10"), &mut failures);
    let numbers = format!(
        "β=0.1 {:.4}, grid {:.4} in {:.0?}; noise 0.3 grid {:.4} (drop {drop:.4})",
        clean.beta_01, clean.grid, clean.elapsed, noisy.grid
    );
    let v = summarize(failures, &numbers);
    Ok(if v.pass { v } else { Verdict::new(false, format!("{}: {numbers}", v.detail)) })
}

fn ablation(root: &Path, seed0_full: &Run) -> Result<Verdict> {
    let mut full = vec![seed0_full.grid];
    let mut text_off = Vec::new();
    for seed in 0..3u64 {
        if seed > 0 {
            let cfg = with_seed(RunConfig::default(), seed);
            full.push(train_and_eval(&cfg, &root.join(format!("full_{seed}")))?.grid);
        }
        let mut cfg = with_seed(RunConfig::default(), seed);
        cfg.model.text_stream = false;
        text_off.push(train_and_eval(&cfg, &root.join(format!("notext_{seed}")))?.grid);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (f, t) = (mean(&full), mean(&text_off));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/");
    Ok(Verdict::new(
        t < f,
        format!("grid MoC full {f:.4} ({}) vs text off {t:.4} ({})", fmt(&full), fmt(&text_off)),
    ))
}

struct Fixed(Vec<usize>);

impl Forecaster for Fixed {
    fn forecast(&self, _v: &VideoRecord, obs: &SampledObservation) -> Result<FrameSequence> {
        Ok(FrameSequence((0..obs.horizon).map(|t| self.0[t % self.0.len()]).collect()))
    }
}

fn protocol_suite() -> Result<Verdict> {
    let mut failures = Vec::new();

    let spec = |alpha: f64, sample_rate: usize| ObservationSpec { alpha, beta: 0.5, sample_rate, start: 0 };
    for (alpha, t, mu, theta) in [(0.2, 1000, 8, 25), (0.3, 1000, 8, 37), (0.2, 123, 6, 4), (0.3, 80, 6, 4), (0.2, 39, 8, 0)] {
        check(spec(alpha, mu).observed_count(t) == theta, &format!("θ₀ for α={alpha} T={t} μ₀={mu}"), &mut failures);
    }
    check(spec(0.2, 8).observation_end(1000) == 200 && spec(0.2, 8).horizon(1000) == 500, "window bounds", &mut failures);

    let grid = GridSpec::standard(8);
    check(grid.alphas == [0.2, 0.3] && grid.betas == [0.1, 0.2, 0.3, 0.5], "grid is not 2×4", &mut failures);

    let cfg = tiny_run_config();
    let videos = runner::synth_split(&cfg, "test")?;
    let f = Fixed(vec![0, 0, 1, 2, 2, 2, 1]);
    let report = evaluate_grid(&f, &videos, &grid, ExecMode::Sequential)?;
    let mut prefix_ok = report.cells.len() == 2 && report.cells.iter().all(|row| row.len() == 4);
    for (a, &alpha) in grid.alphas.iter().enumerate() {
        for (b, &beta) in grid.betas.iter().enumerate() {
            let mut scores = Vec::new();
            for v in &videos {
                let t = v.num_frames();
                let obs_spec = ObservationSpec { alpha, beta: grid.decode_beta, sample_rate: 8, start: 0 };
                if obs_spec.observed_count(t) == 0 {
                    continue;
                }
                let end = obs_spec.observation_end(t);
                let len = ((beta * t as f64) + 1e-9).floor() as usize;
                let pred: Vec<usize> = (0..len).map(|i| f.0[i % f.0.len()]).collect();
                scores.push(common::moc(&pred, &v.gt_labels[end..end + len]));
            }
            let expect = scores.iter().sum::<f64>() / scores.len() as f64;
            prefix_ok &= (report.cells[a][b] - expect).abs() < 1e-12;
        }
    }
    check(prefix_ok, "β cells are not prefixes of one forecast", &mut failures);

    let mut r = rng(71);
    let mut fuzz_ok = true;
    const FUZZ: usize = 100_000;
    for _ in 0..FUZZ {
        let (logits, durations, horizon) = decode_instance(&mut r);
        fuzz_ok &= decode_predictions(&matrix(&logits), &durations, horizon)?.len() == horizon;
    }
    check(fuzz_ok, "decode length differs from the horizon", &mut failures);

    Ok(summarize(failures, format!("θ₀ table, 2×4 grid, β-prefix cells, decode length over {FUZZ} fuzz cases").as_str()))
}

fn interface_suite(root: &Path) -> Result<Verdict> {
    let mut failures = Vec::new();
    let mut cfg = tiny_run_config();
    let videos = runner::synth_split(&cfg, "test")?;
    let data = root.join("roundtrip");
    write_split(&data, "test", &cfg.model.class_names, &videos)?;
    let (names, loaded) = load_split(&DatasetLayout::standard(&data, "test"), ExecMode::Parallel)?;
    check(names == cfg.model.class_names && loaded == videos, "dataset write→load differs", &mut failures);

    cfg.epochs = 2;
    let out = runner::train_model(&cfg, &runner::synth_split(&cfg, "train")?, None, ExecMode::Parallel)?;
    let path = root.join("model.ckpt");
    save_checkpoint(&out.model, &path)?;
    let back = load_checkpoint(&path, Some(&cfg.model))?;
    let a = runner::evaluate_model(&out.model, &cfg, &loaded, "test", ExecMode::Parallel)?;
    let b = runner::evaluate_model(&back, &cfg, &loaded, "test", ExecMode::Parallel)?;
    let bits = |r: &actionllm::evalkit::EvalReport| r.cells.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
    check(bits(&a) == bits(&b) && a.render("m") == b.render("m"), "checkpoint reload changes eval output", &mut failures);

    Ok(summarize(failures, format!("{} videos round-trip; checkpoint reload gives bit-identical eval", videos.len()).as_str()))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path();
    let mut all_pass = true;
    let mut report = |n: usize, title: &str, v: Result<Verdict>| {
        let v = v.unwrap_or_else(|e| Verdict::new(false, format!("error: {e}")));
        all_pass &= v.pass;
        println!("criterion {n} {title}: {} ({})", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    };
    report(1, "gradient suite", gradient_suite());
    report(2, "identity/masking suite", identity_suite());
    report(3, "oracle equivalence", oracle_suite());
    report(4, "analytic values", analytic_suite());
    let clean = train_and_eval(&RunConfig::default(), &root.join("clean"));
    match clean {
        Ok(clean) => {
            report(5, "closed-loop learning", closed_loop(root, &clean));
            report(6, "text-stream ablation", ablation(root, &clean));
        }
        Err(e) => {
            report(5, "closed-loop learning", Err(e));
            report(6, "text-stream ablation", Ok(Verdict::new(false, "clean run failed")));
        }
    }
    report(7, "protocol fidelity", protocol_suite());
    report(8, "interface fidelity", interface_suite(root));
    if !all_pass {
        std::process::exit(1);
    }
}
