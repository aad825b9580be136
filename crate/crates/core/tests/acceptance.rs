//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process fails if any criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nic_core::analysis::{cosine, nn_study, EmbeddedCaption, STUDY_BEAM_SIZE};
use nic_core::cli;
use nic_core::data::{synth_dataset, FeatureRecord, FeatureSet, VocabSpec, END, PAD, START, UNK};
use nic_core::decode::{beam_decode, greedy_decode, sequence_logprob};
use nic_core::layers::{
    check_param_gradients, cross_entropy, Attention, Classifier, Embedding, GruCell, Linear, LstmCell, LstmState,
    ParamSet,
};
use nic_core::metrics::{bleu, caption_records, cider};
use nic_core::models::{Arch, CaptionModel, FeatureBatch, ModelConfig, TeacherBatch};
use nic_core::numerics::Tensor;
use nic_core::train::{sgd_step, train, Checkpoint, OptimizerConfig, TrainOptions, TrainingSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn within(elapsed: Duration, limit_secs: u64) -> Result<(), String> {
    ensure!(
        elapsed <= Duration::from_secs(limit_secs),
        "took {:.1}s, limit {limit_secs}s",
        elapsed.as_secs_f64()
    );
    Ok(())
}

fn nic(args: &[&str]) -> Result<(), String> {
    let code = cli::run(std::iter::once("nic").chain(args.iter().copied()));
    ensure!(code == 0, "`nic {}` exited with {code}", args.join(" "));
    Ok(())
}

fn path(p: &Path) -> &str {
    p.to_str().expect("temporary paths are UTF-8")
}

// Gradient suite

const STEP: f64 = 1e-3;
const TOL: f64 = 1e-4;

fn filled(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
    t
}

fn worst(errors: Vec<(String, f64)>, context: &str, max: &mut f64) -> Result<(), String> {
    for (name, err) in errors {
        ensure!(err < TOL, "{context}: {name} relative error {err:e}");
        *max = max.max(err);
    }
    Ok(())
}

fn layer_gradients(seed: u64, max: &mut f64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let lstm = LstmCell::new("lstm", 3, 4);
    let mut p = ParamSet::<f64>::new();
    lstm.init(&mut p, &mut rng);
    p.insert("lstm.bias", filled(&[16], &mut rng));
    p.insert("x", filled(&[2, 3], &mut rng));
    p.insert("h", filled(&[2, 4], &mut rng));
    p.insert("c", filled(&[2, 4], &mut rng));
    let errors = ok(check_param_gradients(&p, STEP, |t, b| {
        let state = LstmState {
            h: b.get("h")?,
            c: b.get("c")?,
        };
        let next = lstm.forward(t, b, b.get("x")?, &state)?;
        let hh = t.mul(next.h, next.h)?;
        let a = t.sum(hh);
        let c = t.sum(next.c);
        t.add(a, c)
    }))?;
    worst(errors, &format!("lstm seed {seed}"), max)?;

    let gru = GruCell::new("gru", 3, 4);
    let mut p = ParamSet::<f64>::new();
    gru.init(&mut p, &mut rng);
    p.insert("gru.gates.bias", filled(&[8], &mut rng));
    p.insert("gru.candidate.bias", filled(&[4], &mut rng));
    p.insert("x", filled(&[2, 3], &mut rng));
    p.insert("h", filled(&[2, 4], &mut rng));
    let errors = ok(check_param_gradients(&p, STEP, |t, b| {
        let h = gru.forward(t, b, b.get("x")?, b.get("h")?)?;
        let hh = t.mul(h, h)?;
        Ok(t.sum(hh))
    }))?;
    worst(errors, &format!("gru seed {seed}"), max)?;

    let att = Attention::new("att", 3, 4, 5);
    let mut p = ParamSet::<f64>::new();
    att.init(&mut p, &mut rng);
    p.insert("regions", filled(&[2, 3, 3], &mut rng));
    p.insert("h", filled(&[2, 4], &mut rng));
    let mix = filled(&[2, 3], &mut rng);
    let errors = ok(check_param_gradients(&p, STEP, |t, b| {
        let regions = b.get("regions")?;
        let projected = att.project(t, b, regions)?;
        let (w, c) = att.attend(t, b, regions, projected, b.get("h")?)?;
        let m = t.constant(mix.clone());
        let wm = t.mul(w, m)?;
        let cc = t.mul(c, c)?;
        let a = t.sum(wm);
        let s = t.sum(cc);
        t.add(a, s)
    }))?;
    worst(errors, &format!("attention seed {seed}"), max)?;

    let emb = Embedding::new("emb", 6, 3);
    let fc = Linear::new("fc", 3, 4);
    let cls = Classifier::new("cls", 4, 5).map_err(|e| e.to_string())?;
    let mut p = ParamSet::<f64>::new();
    emb.init(&mut p, &mut rng);
    fc.init(&mut p, &mut rng);
    cls.init(&mut p, &mut rng);
    p.insert("fc.bias", filled(&[4], &mut rng));
    p.insert("cls.bias", filled(&[5], &mut rng));
    let errors = ok(check_param_gradients(&p, STEP, |t, b| {
        let x = emb.lookup(t, b, &[5, 2, 5])?;
        let y = fc.forward(t, b, x)?;
        let lp = cls.classify(t, b, y)?;
        cross_entropy(t, lp, &[Some(1), None, Some(4)])
    }))?;
    worst(errors, &format!("embedding/linear/classifier seed {seed}"), max)
}

fn tiny_config(arch: Arch, layers: usize) -> ModelConfig {
    ModelConfig {
        embed_size: 3,
        hidden_size: 3,
        attention_size: 3,
        lstm_layers: layers,
        max_caption_len: 6,
        ..ModelConfig::new(arch, 7, 4, 2, 3)
    }
}

fn random_records(config: &ModelConfig, n: usize, rng: &mut ChaCha8Rng) -> Vec<FeatureRecord> {
    (0..n)
        .map(|i| FeatureRecord {
            image_id: i as u64,
            global: (0..config.feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            regions: (0..config.region_count * config.region_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        })
        .collect()
}

fn model_gradients(arch: Arch, layers: usize, seed: u64, max: &mut f64) -> Result<(), String> {
    let config = tiny_config(arch, layers);
    let model = ok(CaptionModel::new(config.clone()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: ParamSet<f64> = model.init_params(&mut rng);
    for (_, t) in params.iter_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-0.8..0.8));
    }
    let recs = random_records(&config, 2, &mut rng);
    let refs: Vec<&FeatureRecord> = recs.iter().collect();
    let batch = ok(TeacherBatch::new(&refs, &[&[4, 5, 6][..], &[6]], &config))?;
    let errors = ok(check_param_gradients(&params, STEP, |t, p| model.loss_vars(t, p, &batch)))?;
    worst(errors, &format!("{arch} x{layers} seed {seed}"), max)
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut max = 0.0f64;
    for seed in 0..10 {
        layer_gradients(seed, &mut max)?;
        for (arch, layers) in [(Arch::Specimen, 1), (Arch::Specimen, 2), (Arch::TopDownLstmGru, 1)] {
            model_gradients(arch, layers, seed, &mut max)?;
        }
    }
    within(start.elapsed(), 60)?;
    Ok(format!("10 seeds, max relative error {max:.2e}"))
}

// Beam-search oracle

fn beam_instance(seed: u64) -> Result<(CaptionModel, ParamSet<f32>, FeatureRecord), String> {
    let arch = if seed % 2 == 0 { Arch::Specimen } else { Arch::TopDownLstmGru };
    let vocab = 5 + (seed % 2) as usize;
    let max_len = 3 + (seed / 2 % 2) as usize;
    let config = ModelConfig {
        embed_size: 4,
        hidden_size: 5,
        attention_size: 3,
        max_caption_len: max_len,
        ..ModelConfig::new(arch, vocab, 3, 2, 3)
    };
    let model = ok(CaptionModel::new(config.clone()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let mut params: ParamSet<f32> = model.init_params(&mut rng);
    for (_, t) in params.iter_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-2.0..2.0));
    }
    let record = random_records(&config, 1, &mut rng).remove(0);
    Ok((model, params, record))
}

/// Best terminated sequence found by scoring every one of them.
fn exhaustive_best(model: &CaptionModel, params: &ParamSet<f32>, record: &FeatureRecord) -> Result<(Vec<usize>, f64), String> {
    let vocab = model.config().vocab_size;
    let max_len = model.config().max_caption_len;
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut frontier = vec![Vec::new()];
    while let Some(prefix) = frontier.pop() {
        for id in (0..vocab).filter(|&id| id != PAD && id != START && id != UNK) {
            let mut seq = prefix.clone();
            seq.push(id);
            if id == END || seq.len() == max_len {
                let score = ok(sequence_logprob(model, params, record, &seq))?;
                if best.as_ref().map_or(true, |b| score > b.1) {
                    best = Some((seq, score));
                }
            } else {
                frontier.push(seq);
            }
        }
    }
    best.ok_or_else(|| "no sequences".into())
}

fn beam_oracle() -> Outcome {
    let start = Instant::now();
    let instances = 60u64;
    for seed in 0..instances {
        let (model, params, record) = beam_instance(seed)?;
        let c = model.config();
        let width = c.vocab_size.pow(c.max_caption_len as u32);
        let (best_tokens, best_score) = exhaustive_best(&model, &params, &record)?;
        let saturated = ok(beam_decode(&model, &params, &record, width))?;
        ensure!(
            saturated[0].tokens == best_tokens && (saturated[0].logprob_sum - best_score).abs() < 1e-9,
            "instance {seed}: saturated beam {:?} ({}) vs exhaustive {:?} ({best_score})",
            saturated[0].tokens,
            saturated[0].logprob_sum,
            best_tokens
        );
        let greedy = ok(greedy_decode(&model, &params, &record))?;
        let one = ok(beam_decode(&model, &params, &record, 1))?;
        ensure!(one[0].tokens == greedy.tokens, "instance {seed}: beam 1 differs from greedy");
        let three = ok(beam_decode(&model, &params, &record, 3))?;
        let four = ok(beam_decode(&model, &params, &record, 4))?;
        ensure!(
            four[0].logprob_sum >= three[0].logprob_sum,
            "instance {seed}: beam 4 top score {} below beam 3 {}",
            four[0].logprob_sum,
            three[0].logprob_sum
        );
    }
    within(start.elapsed(), 30)?;
    Ok(format!("{instances} models, V in 5..=6, max_len in 3..=4"))
}

// Metric oracles

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let same = ok(bleu(&[words("a man riding a horse")], &[vec![words("a man riding a horse")]]))?;
    ensure!(same.iter().all(|&b| (b - 1.0).abs() < 1e-12), "identical BLEU {same:?}");

    let the = ok(bleu(&[words("the the the")], &[vec![words("the cat")]]))?;
    ensure!((the[0] - 1.0 / 3.0).abs() < 1e-9, "BLEU-1 {}", the[0]);

    let docs = [words("a dog runs on grass"), words("two cats sleep on a sofa")];
    let refs: Vec<Vec<Vec<&str>>> = docs.iter().map(|d| vec![d.clone()]).collect();
    let self_match = ok(cider(&docs, &refs))?;
    ensure!((self_match - 10.0).abs() < 1e-9, "self-match CIDEr {self_match}");

    let disjoint = ok(cider(
        &[words("red bus"), words("green boat")],
        &[vec![words("a dog runs")], vec![words("two cats sleep")]],
    ))?;
    ensure!(disjoint == 0.0, "disjoint CIDEr {disjoint}");
    within(start.elapsed(), 5)?;
    Ok(format!("BLEU-1 of \"the the the\" = {:.9}, self CIDEr = {self_match}", the[0]))
}

// Optimizer oracle

fn optimizer_oracle() -> Outcome {
    let opt = OptimizerConfig {
        lr: 0.1,
        momentum: 0.9,
        weight_decay: 0.0,
        batch_size: 1,
        epochs: 1,
        seed: 0,
    };
    let mut params = ParamSet::<f64>::new();
    params.insert("w", ok(Tensor::new(vec![1], vec![1.0]))?);
    let mut velocities = params.zeros_like();
    // Loss w²/2, so the gradient is w.
    let (mut w, mut v) = (1.0f64, 0.0f64);
    let mut trace = Vec::new();
    for step in 1..=20 {
        let g = ok(params.get("w"))?.data()[0];
        params.zero_grad();
        ok(params.accumulate_grads(vec![("w".into(), vec![g])]))?;
        ok(sgd_step(&mut params, &mut velocities, &opt))?;
        v = 0.9 * v + w;
        w -= 0.1 * v;
        let got = ok(params.get("w"))?.data()[0];
        ensure!((got - w).abs() < 1e-12, "step {step}: {got} vs {w}");
        trace.push(got);
    }
    ensure!((trace[0] - 0.9).abs() < 1e-12 && (trace[1] - 0.72).abs() < 1e-12, "trace {:?}", &trace[..2]);
    Ok(format!("w: 1 -> {:.2} -> {:.2}, 20 steps within 1e-12", trace[0], trace[1]))
}

// Training harnesses

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        Fixture {
            dir: tempfile::tempdir().expect("temporary directory"),
        }
    }

    fn join(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    /// `nic synth` into `name/`.
    fn synth(&self, name: &str, n: usize, seed: u64, noise: f64) -> Result<PathBuf, String> {
        let out = self.join(name);
        nic(&[
            "synth",
            "--n",
            &n.to_string(),
            "--seed",
            &seed.to_string(),
            "--noise",
            &noise.to_string(),
            "--out-dir",
            path(&out),
        ])?;
        Ok(out)
    }
}

fn read_json(p: &Path) -> Result<Value, String> {
    ok(serde_json::from_str(&ok(fs::read_to_string(p))?))
}

fn eval_report(ckpt: &Path, data: &Path, beam: usize, report: &Path) -> Result<Value, String> {
    nic(&[
        "eval",
        "--ckpt",
        path(ckpt),
        "--features",
        path(&data.join("features.nicf")),
        "--captions",
        path(&data.join("captions.jsonl")),
        "--beam",
        &beam.to_string(),
        "--report",
        path(report),
    ])?;
    read_json(report)
}

fn scores(report: &Value) -> Result<(Vec<f64>, f64), String> {
    let b: Vec<f64> = report["bleu"]
        .as_array()
        .ok_or("report has no bleu array")?
        .iter()
        .filter_map(Value::as_f64)
        .collect();
    ensure!(b.len() == 4, "bleu has {} entries", b.len());
    let c = report["cider"].as_f64().ok_or("report has no cider")?;
    Ok((b, c))
}

/// Trains on the 32-image set and checks loss, greedy reproduction and
/// the evaluation report. Returns the checkpoint path.
fn overfit(fx: &Fixture, arch: Arch, epochs: usize) -> Result<(PathBuf, String), String> {
    let start = Instant::now();
    let data_dir = fx.join("overfit-data");
    if !data_dir.exists() {
        fx.synth("overfit-data", 32, 7, 0.05)?;
    }
    let features = ok(FeatureSet::read(data_dir.join("features.nicf")))?;
    let synth = ok(synth_dataset(32, &VocabSpec::default(), 7))?;
    ensure!(synth.features == features, "synth subcommand and library disagree");

    let config = ModelConfig::new(arch, synth.vocab.len(), features.feature_dim, features.region_count, features.region_dim);
    let opt = OptimizerConfig {
        epochs,
        ..OptimizerConfig::for_arch(arch, 7)
    };
    let out = fx.join(&format!("overfit-{arch}"));
    let options = TrainOptions {
        checkpoint_dir: Some(out.clone()),
        checkpoint_every: 0,
    };
    let set = ok(TrainingSet::new(&features, &synth.samples))?;
    let report = ok(train(&set, &synth.vocab, &config, &opt, &options, None))?;
    let loss = *report.epoch_losses.last().ok_or("no epochs ran")?;
    ensure!(loss < 0.05, "final loss {loss}");

    let ckpt = &report.checkpoint;
    let model = ok(ckpt.model())?;
    for (rec, sample) in features.records.iter().zip(&synth.samples) {
        let got = ok(greedy_decode(&model, &ckpt.params, rec))?;
        let mut want = sample.references[0].clone();
        want.push(END);
        ensure!(
            got.tokens == want,
            "image {}: greedy \"{}\" vs \"{}\"",
            rec.image_id,
            synth.vocab.decode(&got.tokens),
            synth.vocab.decode(&want)
        );
    }

    let ckpt_path = out.join("model.ckpt");
    let eval = eval_report(&ckpt_path, &data_dir, 3, &fx.join(&format!("overfit-{arch}.json")))?;
    let (b, c) = scores(&eval)?;
    ensure!(b.iter().all(|&x| (x - 1.0).abs() < 1e-9), "BLEU {b:?}");
    ensure!((c - 10.0).abs() < 1e-9, "CIDEr {c}");
    let elapsed = start.elapsed();
    Ok((
        ckpt_path,
        format!(
            "{epochs} epochs, final loss {loss:.4}, 32/32 greedy exact, BLEU-4 {:.3}, CIDEr {c:.3}, {:.1}s",
            b[3],
            elapsed.as_secs_f64()
        ),
    ))
}

fn overfit_specimen(fx: &Fixture) -> Outcome {
    let start = Instant::now();
    let (_, msg) = overfit(fx, Arch::Specimen, 500)?;
    within(start.elapsed(), 120)?;
    Ok(msg)
}

fn overfit_topdown(fx: &Fixture) -> Outcome {
    let start = Instant::now();
    let (_, msg) = overfit(fx, Arch::TopDownLstmGru, 400)?;
    within(start.elapsed(), 300)?;
    Ok(msg)
}

fn train_cli(data: &Path, out: &Path, arch: &str, layers: usize, epochs: usize, seed: u64) -> Result<PathBuf, String> {
    nic(&[
        "train",
        "--arch",
        arch,
        "--lstm-layers",
        &layers.to_string(),
        "--features",
        path(&data.join("features.nicf")),
        "--captions",
        path(&data.join("captions.jsonl")),
        "--vocab",
        path(&data.join("vocab.json")),
        "--epochs",
        &epochs.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        path(out),
    ])?;
    Ok(out.join("model.ckpt"))
}

fn grid_smoke(fx: &Fixture) -> Outcome {
    let start = Instant::now();
    let data = fx.synth("grid-data", 64, 11, 0.05)?;
    let mut summary = Vec::new();
    for layers in [1, 2] {
        let ckpt = train_cli(&data, &fx.join(&format!("grid-l{layers}")), "specimen", layers, 60, 3)?;
        for beam in [3, 4] {
            let report = eval_report(&ckpt, &data, beam, &fx.join(&format!("grid/l{layers}-b{beam}.json")))?;
            let (b, c) = scores(&report)?;
            ensure!(b.iter().all(|x| (0.0..=1.0).contains(x)), "layers {layers} beam {beam}: BLEU {b:?}");
            ensure!(c >= 0.0 && c.is_finite(), "layers {layers} beam {beam}: CIDEr {c}");
            ensure!(
                report["arch"] == "specimen"
                    && report["lstm_layers"] == layers
                    && report["beam_size"] == beam
                    && report["n_images"] == 64
                    && report["feature_file"].is_string(),
                "layers {layers} beam {beam}: report fields {report}"
            );
            summary.push(format!("L{layers}/B{beam} BLEU-4 {:.3} CIDEr {c:.3}", b[3]));
        }
    }
    within(start.elapsed(), 600)?;
    Ok(format!("4 reports: {}", summary.join(", ")))
}

fn determinism(fx: &Fixture) -> Outcome {
    let data = fx.synth("det-data", 32, 5, 0.05)?;
    let run = |tag: &str| -> Result<Vec<(String, Vec<u8>)>, String> {
        let out = fx.join(&format!("det-{tag}"));
        let ckpt = train_cli(&data, &out.join("train"), "topdown-lstmgru", 1, 3, 21)?;
        eval_report(&ckpt, &data, 3, &out.join("eval.json"))?;
        let nn_report = out.join("nn.jsonl");
        nic(&[
            "nn",
            "--ckpt",
            path(&ckpt),
            "--features",
            path(&data.join("features.nicf")),
            "--samples",
            "20",
            "--seed",
            "4",
            "--report",
            path(&nn_report),
        ])?;
        let files = [
            ckpt.clone(),
            out.join("train/loss.csv"),
            out.join("eval.json"),
            nn_report.clone(),
            cli::nn_summary_path(&nn_report),
        ];
        files
            .iter()
            .map(|f| Ok((f.file_name().unwrap().to_string_lossy().into_owned(), ok(fs::read(f))?)))
            .collect()
    };
    let first = run("a")?;
    let second = run("b")?;
    for ((name, a), (_, b)) in first.iter().zip(&second) {
        ensure!(a == b, "{name} differs between runs");
    }
    Ok(format!(
        "{} artifacts byte-identical across two runs",
        first.len()
    ))
}

/// All-pairs ranking straight from the definition: similarity descending,
/// then lower image id.
fn brute_force(vectors: &[Vec<f64>], ids: &[u64], k: usize) -> Result<Vec<Vec<u64>>, String> {
    let mut out = Vec::with_capacity(vectors.len());
    for i in 0..vectors.len() {
        let mut scored = Vec::new();
        for j in (0..vectors.len()).filter(|&j| j != i) {
            scored.push((ok(cosine(&vectors[i], &vectors[j]))?, ids[j]));
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        out.push(scored.iter().take(k).map(|s| s.1).collect());
    }
    Ok(out)
}

fn to_f64(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).iter().map(|&x| x as f64).collect()).collect()
}

fn nn_oracle(fx: &Fixture) -> Outcome {
    let start = Instant::now();
    let ckpt_path = fx.join("overfit-specimen/model.ckpt");
    let ckpt = ok(Checkpoint::load(&ckpt_path))?;
    let model = ok(ckpt.model())?;
    let k = 3;

    // 200 unseen synthetic images against the brute-force ranking.
    let wide = ok(synth_dataset(200, &VocabSpec::default().with_noise(0.3), 99))?.features;
    let study = ok(nn_study(&ckpt, &wide, 200, k, 1))?;
    ensure!(study.reports.len() == 200, "{} reports", study.reports.len());
    let records: Vec<&FeatureRecord> = wide.records.iter().collect();
    let ids: Vec<u64> = records.iter().map(|r| r.image_id).collect();
    let batch = ok(FeatureBatch::<f32>::from_records(&records, &ckpt.config))?;
    let image_vecs = to_f64(&ok(model.image_embedding(&ckpt.params, &batch))?);
    let table = ok(ckpt.params.get(&model.embedding().weight_name()))?;
    let caption_vecs: Vec<Vec<f64>> = ok(caption_records(&ckpt, &records, STUDY_BEAM_SIZE))?
        .into_iter()
        .zip(&ids)
        .map(|(tokens, &id)| ok(EmbeddedCaption::new(id, tokens, table)).map(|e| e.embedding))
        .collect::<Result<_, _>>()?;
    let si = brute_force(&image_vecs, &ids, k)?;
    let sc = brute_force(&caption_vecs, &ids, k)?;
    for (i, r) in study.reports.iter().enumerate() {
        ensure!(r.anchor_id == ids[i], "anchor order");
        ensure!(r.s_i == si[i], "anchor {}: S_i {:?} vs brute force {:?}", r.anchor_id, r.s_i, si[i]);
        ensure!(r.s_c == sc[i], "anchor {}: S_c {:?} vs brute force {:?}", r.anchor_id, r.s_c, sc[i]);
        ensure!(!r.s_i.contains(&r.anchor_id) && !r.s_c.contains(&r.anchor_id), "anchor in its own set");
    }

    // Noise-free data: images sharing a triple have identical features.
    let dup = ok(synth_dataset(32, &VocabSpec::default().with_noise(0.0), 7))?;
    let study = ok(nn_study(&ckpt, &dup.features, 32, k, 2))?;
    let dup_records: Vec<&FeatureRecord> = dup.features.records.iter().collect();
    let batch = ok(FeatureBatch::<f32>::from_records(&dup_records, &ckpt.config))?;
    let dup_vecs = to_f64(&ok(model.image_embedding(&ckpt.params, &batch))?);
    for r in &study.reports {
        let a = r.anchor_id as usize;
        let mut twins: Vec<u64> = (0..32u64).filter(|&j| j as usize != a && dup.triples[j as usize] == dup.triples[a]).collect();
        twins.sort_unstable();
        ensure!(r.s_i == twins, "anchor {a}: S_i {:?}, duplicates {twins:?}", r.s_i);
        for &t in &twins {
            let s = ok(cosine(&dup_vecs[a], &dup_vecs[t as usize]))?;
            ensure!((s - 1.0).abs() < 1e-12, "duplicates {a},{t} similarity {s}");
        }
    }

    // The training images themselves.
    let train_features = ok(FeatureSet::read(fx.join("overfit-data/features.nicf")))?;
    let study = ok(nn_study(&ckpt, &train_features, 1000, k, 3))?;
    let overlap = study.summary.mean_overlap;
    ensure!(overlap >= 0.9, "mean overlap {overlap}");
    within(start.elapsed(), 30)?;
    Ok(format!(
        "200-sample sets match brute force, duplicates mutual at similarity 1, overfit overlap {overlap:.3}"
    ))
}

fn main() {
    let fx = Fixture::new();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("gradient suite", Box::new(gradient_suite)),
        ("beam-search oracle", Box::new(beam_oracle)),
        ("metric oracles", Box::new(metric_oracles)),
        ("optimizer oracle", Box::new(optimizer_oracle)),
        ("end-to-end overfit (specimen)", Box::new(|| overfit_specimen(&fx))),
        ("end-to-end overfit (topdown-lstmgru)", Box::new(|| overfit_topdown(&fx))),
        ("experiment-grid smoke", Box::new(|| grid_smoke(&fx))),
        ("determinism", Box::new(|| determinism(&fx))),
        ("nn-study oracle", Box::new(|| nn_oracle(&fx))),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name} ({secs:.1}s): {why}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
