//! The subcommands. Each one takes a validated [`RunConfig`], writes its files
//! under `out_dir` and returns what it wrote.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use shield_core::diagnostics::{attack_curve, bin_ratios, noise_probe, ratio_records, RatioBin, RatioRecord};
use shield_core::evalkit::{
    chair_records, mme_eval, pope_eval, pope_questions, render_table, write_jsonl, CaptionRecord,
    JudgeClient, JudgeScore, PopeSplit, Prediction, Summary, TimingSummary, ASSISTANTS,
};
use shield_core::seed;
use shield_core::shield::{optimize_caption_attack, BiasEstimate, ContrastMode};
use shield_core::toymodel::{
    answer_of, detokenize, read_scenes, render, sample_scenes, write_scenes, Answer, QuestionType,
    Sampler,
};
use shield_core::{ObjectClass, Prompt, Scene, Shield, ShieldConfig, ToyModel};

use crate::config::{Mode, RunConfig, SamplerKind};

const SCENES_FILE: &str = "scenes.jsonl";

fn split_file(split: PopeSplit) -> String {
    format!("pope_{}.jsonl", split.name())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Scenes plus the existence questions of every split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
    pub splits: BTreeMap<PopeSplit, Vec<Scene>>,
}

fn split_seed(seed: u64, split: PopeSplit) -> u64 {
    seed::derive(&[seed, 0x706f7065, split as u64])
}

/// Generates the dataset described by `cfg` in memory.
pub fn generate_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let scenes = sample_scenes(&cfg.model, cfg.n_scenes, cfg.max_objects, cfg.seed)?;
    let splits = PopeSplit::ALL
        .into_iter()
        .map(|s| (s, pope_questions(&scenes, s, split_seed(cfg.seed, s))))
        .collect();
    Ok(Dataset { scenes, splits })
}

fn read_scene_file(path: &Path, cfg: &RunConfig) -> Result<Vec<Scene>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_scenes(BufReader::new(f), &cfg.model).with_context(|| format!("reading {}", path.display()))
}

/// The dataset in `cfg.dataset`, or a generated one when none is set. Split
/// files that are absent from the directory are skipped.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let Some(dir) = &cfg.dataset else {
        return generate_dataset(cfg);
    };
    let scenes = read_scene_file(&dir.join(SCENES_FILE), cfg)?;
    let mut splits = BTreeMap::new();
    for s in PopeSplit::ALL {
        let p = dir.join(split_file(s));
        if p.exists() {
            splits.insert(s, read_scene_file(&p, cfg)?);
        }
    }
    Ok(Dataset { scenes, splits })
}

/// Writes `scenes.jsonl` and one question file per split.
pub fn cmd_gen_dataset(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let d = generate_dataset(cfg)?;
    let mut written = Vec::new();
    let p = cfg.out_dir.join(SCENES_FILE);
    let mut w = create(&p)?;
    write_scenes(&d.scenes, &mut w)?;
    w.flush()?;
    written.push(p);
    for (split, scenes) in &d.splits {
        let p = cfg.out_dir.join(split_file(*split));
        let mut w = create(&p)?;
        write_scenes(scenes, &mut w)?;
        w.flush()?;
        written.push(p);
    }
    Ok(written)
}

fn bias_path(cfg: &RunConfig) -> PathBuf {
    cfg.bias_cache.clone().unwrap_or_else(|| cfg.out_dir.join("bias.tensor"))
}

/// Computes the inherent-bias estimate, or reuses a matching cache.
pub fn cmd_precompute_bias(cfg: &RunConfig) -> Result<PathBuf> {
    let model = cfg.build_model()?;
    let path = bias_path(cfg);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let sc = cfg.shield_config();
    BiasEstimate::load_or_compute(&path, &model, sc.noise_samples, sc.noise_dist, sc.seed)?;
    Ok(path)
}

fn load_bias(cfg: &RunConfig, model: &ToyModel) -> Result<Option<BiasEstimate>> {
    let sc = cfg.shield_config();
    match &cfg.bias_cache {
        Some(p) => Ok(Some(BiasEstimate::load_or_compute(
            p,
            model,
            sc.noise_samples,
            sc.noise_dist,
            sc.seed,
        )?)),
        None => Ok(None),
    }
}

/// Named shield configurations run by `mode`.
pub fn variants(cfg: &RunConfig, mode: Mode) -> Vec<(String, ShieldConfig)> {
    let base = cfg.shield_config();
    let vanilla = ShieldConfig {
        seed: cfg.seed,
        ..ShieldConfig::vanilla()
    };
    let with = |reweight, subtract, contrast| ShieldConfig {
        reweight,
        subtract,
        contrast,
        ..base.clone()
    };
    match mode {
        Mode::Vanilla => vec![("vanilla".into(), vanilla)],
        Mode::Shield => vec![("shield".into(), base.clone())],
        Mode::VcdNoise => vec![("vcd_noise".into(), with(false, false, ContrastMode::VcdNoise))],
        Mode::Ablation => vec![
            ("vanilla".into(), vanilla),
            ("reweight".into(), with(true, false, ContrastMode::Off)),
            ("subtract".into(), with(false, true, ContrastMode::Off)),
            ("contrast".into(), with(false, false, ContrastMode::Adversarial)),
            ("reweight+subtract".into(), with(true, true, ContrastMode::Off)),
            ("full".into(), with(true, true, ContrastMode::Adversarial)),
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerLine {
    pub split: String,
    pub object: ObjectClass,
    pub pred: Prediction,
    pub label: Answer,
}

/// One image under one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleLine {
    pub variant: String,
    pub id: String,
    pub caption: String,
    pub gt_objects: Vec<ObjectClass>,
    pub answers: Vec<AnswerLine>,
}

struct SampleRun {
    lines: Vec<SampleLine>,
    ms: Vec<f64>,
    vanilla_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seed: u64,
    pub model_fingerprint: String,
    pub variants: Vec<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub samples: usize,
    pub variants: BTreeMap<String, TimingSummary>,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: Report,
    pub timing: Timing,
    pub samples: Vec<SampleLine>,
    pub table: String,
}

fn sampler_for(kind: SamplerKind, sample_seed: u64, tag: u64) -> Sampler {
    match kind {
        SamplerKind::Greedy => Sampler::Greedy,
        SamplerKind::Seeded => Sampler::Seeded(seed::derive(&[sample_seed, tag])),
    }
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?)
}

type Questions = BTreeMap<String, Vec<(String, ObjectClass, Answer)>>;

fn split_questions(d: &Dataset) -> Questions {
    let mut q: Questions = BTreeMap::new();
    for (split, scenes) in &d.splits {
        for s in scenes {
            let e = q.entry(s.id.clone()).or_default();
            for qu in s.questions.iter().filter(|x| x.kind == QuestionType::Exist) {
                if let (Some(o), Some(l)) = (qu.object, qu.label) {
                    e.push((split.name().to_string(), o, l));
                }
            }
        }
    }
    q
}

fn run_sample(
    cfg: &RunConfig,
    model: &ToyModel,
    shields: &[(String, Shield<'_>)],
    scene: &Scene,
    questions: &[(String, ObjectClass, Answer)],
) -> Result<SampleRun> {
    let ss = seed::for_sample(cfg.seed, &scene.id);
    let mut img = render(model, scene, ss)?;
    if cfg.input_attack_steps > 0 {
        let tok = model.encode(&img)?;
        let cap = model.generate(&tok, &Prompt::Describe, Sampler::Greedy, cfg.shield.max_caption_len)?;
        let a = optimize_caption_attack(model, &img, &cap, cfg.shield.lr, cfg.input_attack_steps)?;
        img = img.perturbed(&a.delta)?;
    }
    let max_len = cfg.shield.max_caption_len;

    let t = Instant::now();
    let tok = model.encode(&img)?;
    model.generate(&tok, &Prompt::Describe, sampler_for(cfg.sampler, ss, 1), max_len)?;
    let vanilla_ms = t.elapsed().as_secs_f64() * 1e3;

    let mut lines = Vec::with_capacity(shields.len());
    let mut ms = Vec::with_capacity(shields.len());
    for (name, sh) in shields {
        let t = Instant::now();
        let prep = sh.prepare(&img, ss)?;
        let caption = sh.generate(&prep, &Prompt::Describe, sampler_for(cfg.sampler, ss, 1), max_len)?;
        ms.push(t.elapsed().as_secs_f64() * 1e3);
        let mut answers = Vec::with_capacity(questions.len());
        for (split, o, label) in questions {
            let tag = seed::derive(&[2, o.index() as u64]);
            let seq = sh.generate(&prep, &Prompt::Exists(*o), sampler_for(cfg.sampler, ss, tag), 2)?;
            answers.push(AnswerLine {
                split: split.clone(),
                object: *o,
                pred: Prediction::from_answer(answer_of(&seq)),
                label: *label,
            });
        }
        lines.push(SampleLine {
            variant: name.clone(),
            id: scene.id.clone(),
            caption: detokenize(&caption),
            gt_objects: scene.objects.clone(),
            answers,
        });
    }
    Ok(SampleRun { lines, ms, vanilla_ms })
}

fn summarize(name: &str, lines: &[&SampleLine]) -> Result<Summary> {
    let caps: Vec<CaptionRecord> = lines
        .iter()
        .map(|l| CaptionRecord {
            id: l.id.clone(),
            caption: l.caption.clone(),
            gt_objects: l.gt_objects.clone(),
        })
        .collect();
    let mut by_split: BTreeMap<String, Vec<(Prediction, Answer)>> = BTreeMap::new();
    for l in lines {
        for a in &l.answers {
            by_split.entry(a.split.clone()).or_default().push((a.pred, a.label));
        }
    }
    let mut pope = BTreeMap::new();
    for (split, rows) in &by_split {
        pope.insert(split.clone(), pope_eval(rows)?);
    }
    // Paired questions: the first present and first absent object of each
    // image's random-split set.
    let mut pairs = Vec::new();
    for l in lines {
        let pick = |want: Answer| {
            l.answers
                .iter()
                .find(|a| a.split == PopeSplit::Random.name() && a.label == want)
                .map(|a| (a.pred, a.label))
        };
        if let (Some(y), Some(n)) = (pick(Answer::Yes), pick(Answer::No)) {
            pairs.push((l.id.clone(), vec![y, n]));
        }
    }
    let mme = if pairs.is_empty() { None } else { Some(mme_eval(&pairs)?) };
    Ok(Summary {
        mode: name.to_string(),
        samples: lines.len(),
        chair: Some(chair_records(&caps)?),
        pope,
        mme,
    })
}

/// Runs the configured mode over every scene of the dataset.
pub fn evaluate_with(cfg: &RunConfig, mode: Mode, dataset: &Dataset) -> Result<EvalOutcome> {
    let model = cfg.build_model()?;
    let bias = load_bias(cfg, &model)?;
    let shields = variants(cfg, mode)
        .into_iter()
        .map(|(n, c)| Ok((n, Shield::new(&model, c, bias.clone())?)))
        .collect::<Result<Vec<_>>>()?;
    let questions = split_questions(dataset);
    let empty = Vec::new();
    let pool = thread_pool(cfg.jobs)?;
    let mut runs: Vec<SampleRun> = pool.install(|| {
        dataset
            .scenes
            .par_iter()
            .map(|s| run_sample(cfg, &model, &shields, s, questions.get(&s.id).unwrap_or(&empty)))
            .collect::<Result<Vec<_>>>()
    })?;
    runs.sort_by(|a, b| a.lines[0].id.cmp(&b.lines[0].id));
    if runs.is_empty() {
        bail!("dataset has no scenes");
    }

    let n = runs.len() as f64;
    let vanilla_mean = runs.iter().map(|r| r.vanilla_ms).sum::<f64>() / n;
    let mut summaries = Vec::new();
    let mut timing = BTreeMap::new();
    for (k, (name, _)) in shields.iter().enumerate() {
        let lines: Vec<&SampleLine> = runs.iter().map(|r| &r.lines[k]).collect();
        summaries.push(summarize(name, &lines)?);
        let mean = runs.iter().map(|r| r.ms[k]).sum::<f64>() / n;
        timing.insert(name.clone(), TimingSummary::new(mean, vanilla_mean));
    }
    let mut samples = Vec::new();
    for k in 0..shields.len() {
        samples.extend(runs.iter().map(|r| r.lines[k].clone()));
    }
    let table = summaries
        .iter()
        .map(|s| render_table(s, timing.get(&s.mode)))
        .collect::<Vec<_>>()
        .join("\n");
    Ok(EvalOutcome {
        report: Report {
            seed: cfg.seed,
            model_fingerprint: model.fingerprint(),
            variants: summaries,
        },
        timing: Timing {
            samples: runs.len(),
            variants: timing,
        },
        samples,
        table,
    })
}

/// Evaluates and writes `report.json`, `samples.jsonl` and `timing.json`.
/// Wall-clock numbers only go to `timing.json`, so the other two files are
/// reproducible byte for byte.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<EvalOutcome> {
    cfg.validate()?;
    let dataset = load_dataset(cfg)?;
    let out = evaluate_with(cfg, cfg.mode, &dataset)?;
    write_json(&cfg.out_dir.join("report.json"), &out.report)?;
    let mut w = create(&cfg.out_dir.join("samples.jsonl"))?;
    write_jsonl(&out.samples, &mut w)?;
    w.flush()?;
    write_json(&cfg.out_dir.join("timing.json"), &out.timing)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub bin_width: f64,
    pub ratio_bins: Vec<RatioBin>,
    pub noise_trials: usize,
    pub noise_probe: BTreeMap<ObjectClass, usize>,
    pub attack_curve: Vec<CurvePoint>,
}

pub const NOISE_TRIALS: usize = 100;
pub const BIN_WIDTH: f64 = 0.1;

/// Token-norm ratios against hallucination, the noise yes-probe and the
/// attack-strength curve. Writes `diagnostics.json`, `ratios.jsonl` and
/// `ratios.csv`.
pub fn cmd_diagnose(cfg: &RunConfig) -> Result<DiagnosticsReport> {
    let model = cfg.build_model()?;
    let d = load_dataset(cfg)?;
    let scenes = d
        .splits
        .get(&PopeSplit::Random)
        .cloned()
        .unwrap_or_else(|| d.scenes.clone());
    let records: Vec<RatioRecord> = ratio_records(&model, &scenes, cfg.seed)?;
    let classes: Vec<ObjectClass> = ObjectClass::all().collect();
    let probe = noise_probe(&model, &classes, NOISE_TRIALS, cfg.seed, cfg.shield.noise_dist)?;
    let steps: Vec<usize> = (0..=cfg.shield.attack_steps).collect();
    let curve = attack_curve(&model, &scenes, &steps, cfg.shield.lr, cfg.seed)?;
    let report = DiagnosticsReport {
        bin_width: BIN_WIDTH,
        ratio_bins: bin_ratios(&records, BIN_WIDTH)?,
        noise_trials: NOISE_TRIALS,
        noise_probe: probe,
        attack_curve: curve.into_iter().map(|(step, f1)| CurvePoint { step, f1 }).collect(),
    };
    write_json(&cfg.out_dir.join("diagnostics.json"), &report)?;
    let mut w = create(&cfg.out_dir.join("ratios.jsonl"))?;
    write_jsonl(&records, &mut w)?;
    w.flush()?;
    let mut w = create(&cfg.out_dir.join("ratios.csv"))?;
    writeln!(w, "id,ratio,hallucinated")?;
    for r in &records {
        writeln!(w, "{},{},{}", r.id, r.ratio, r.hallucinated)?;
    }
    w.flush()?;
    Ok(report)
}

/// Default value grid of a sweepable parameter.
pub fn default_grid(param: &str) -> Result<Vec<f64>> {
    Ok(match param {
        "alpha" => vec![1.0, 1.5, 2.0, 2.5],
        "beta" => vec![0.2, 0.25, 0.3, 0.35],
        "K" => vec![8.0, 16.0, 32.0, 64.0],
        "lr" => vec![0.01, 0.02, 0.03, 0.04],
        _ => bail!("cannot sweep {param:?}; expected alpha, beta, K or lr"),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub summary: Summary,
}

/// One evaluation per value of `param`, rows sorted by value. Each run writes
/// its own files under `out/<param>=<value>`; the rows go to `sweep.json`.
pub fn cmd_sweep(cfg: &RunConfig, param: &str, values: &[f64]) -> Result<(Vec<SweepRow>, String)> {
    default_grid(param)?;
    if values.is_empty() {
        bail!("no values to sweep");
    }
    let mut values = values.to_vec();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let mut rows = Vec::new();
    let mut table = format!(
        "{param:>8} {:>8} {:>8} {:>10} {:>10} {:>10} {:>8} {:>10}\n",
        "C_S", "C_I", "F1 rand", "F1 pop", "F1 adv", "MME", "ms/sample"
    );
    for v in values {
        let mut c = cfg.clone();
        c.set(param, &v.to_string())?;
        c.out_dir = cfg.out_dir.join(format!("{param}={v}"));
        let out = cmd_evaluate(&c)?;
        let s = out.report.variants[0].clone();
        let f1 = |split: PopeSplit| s.pope.get(split.name()).map_or(f64::NAN, |p| 100.0 * p.f1);
        let chair = s.chair.as_ref();
        table.push_str(&format!(
            "{v:>8} {:>8.2} {:>8.2} {:>10.2} {:>10.2} {:>10.2} {:>8.2} {:>10.2}\n",
            chair.map_or(f64::NAN, |c| 100.0 * c.c_s),
            chair.map_or(f64::NAN, |c| 100.0 * c.c_i),
            f1(PopeSplit::Random),
            f1(PopeSplit::Popular),
            f1(PopeSplit::Adversarial),
            s.mme.as_ref().map_or(f64::NAN, |m| m.combined),
            out.timing.variants.get(&s.mode).map_or(f64::NAN, |t| t.mean_ms),
        ));
        rows.push(SweepRow { value: v, summary: s });
    }
    write_json(&cfg.out_dir.join("sweep.json"), &rows)?;
    Ok((rows, table))
}

/// Systems whose descriptions are judged side by side, in slot order.
pub const JUDGED_SYSTEMS: [&str; ASSISTANTS] = ["vanilla", "vcd_noise", "reweight+subtract", "shield"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeLine {
    pub id: String,
    pub descriptions: Vec<String>,
    pub score: JudgeScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeSummary {
    pub systems: Vec<String>,
    pub images: usize,
    pub correctness: Vec<f64>,
    pub detailedness: Vec<f64>,
}

/// Describes each image with four systems and has the judge score them.
/// Requests are sent one at a time. Writes `judge.jsonl` and `judge.json`.
pub fn cmd_judge(cfg: &RunConfig, client: &JudgeClient) -> Result<JudgeSummary> {
    cfg.validate()?;
    let mut d = load_dataset(cfg)?;
    d.splits.clear();
    let mut variants_cfg = Vec::new();
    for (mode, pick) in [
        (Mode::Vanilla, "vanilla"),
        (Mode::VcdNoise, "vcd_noise"),
        (Mode::Ablation, "reweight+subtract"),
        (Mode::Shield, "shield"),
    ] {
        let v = variants(cfg, mode);
        let (_, c) = v.into_iter().find(|(n, _)| n == pick).expect("variant exists");
        variants_cfg.push(c);
    }
    let mut outs = Vec::new();
    for c in variants_cfg {
        let mut rc = cfg.clone();
        rc.shield = c;
        rc.mode = Mode::Shield;
        outs.push(evaluate_with(&rc, Mode::Shield, &d)?.samples);
    }
    let mut client = client.clone();
    if cfg.judge_model.is_some() {
        client.model = cfg.judge_model.clone();
    }
    let mut lines = Vec::new();
    for i in 0..outs[0].len() {
        let descs: Vec<String> = outs.iter().map(|o| o[i].caption.clone()).collect();
        let refs: Vec<&str> = descs.iter().map(String::as_str).collect();
        let score = client.judge(&refs).with_context(|| format!("judging {}", outs[0][i].id))?;
        lines.push(JudgeLine {
            id: outs[0][i].id.clone(),
            descriptions: descs,
            score,
        });
    }
    let n = lines.len() as f64;
    let mean = |f: &dyn Fn(&JudgeScore) -> [f64; ASSISTANTS]| -> Vec<f64> {
        (0..ASSISTANTS)
            .map(|k| lines.iter().map(|l| f(&l.score)[k]).sum::<f64>() / n)
            .collect()
    };
    let summary = JudgeSummary {
        systems: JUDGED_SYSTEMS.iter().map(|s| s.to_string()).collect(),
        images: lines.len(),
        correctness: mean(&|s| s.correctness),
        detailedness: mean(&|s| s.detailedness),
    };
    let mut w = create(&cfg.out_dir.join("judge.jsonl"))?;
    write_jsonl(&lines, &mut w)?;
    w.flush()?;
    write_json(&cfg.out_dir.join("judge.json"), &summary)?;
    Ok(summary)
}
