use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use shield_cli::{
    cmd_diagnose, cmd_evaluate, cmd_gen_dataset, cmd_precompute_bias, cmd_sweep, load_dataset, Mode,
    Report, RunConfig, SampleLine,
};
use shield_core::evalkit::{read_jsonl, PopeSplit};
use shield_core::shield::{BiasEstimate, ShieldError};
use shield_core::toymodel::{read_scenes, Answer, QuestionType};
use shield_core::{ObjectClass, Scene, ToyModel};

fn small(out: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.seed = 5;
    c.n_scenes = 10;
    c.out_dir = out.to_path_buf();
    c
}

fn scenes_in(path: &Path) -> Vec<Scene> {
    read_scenes(std::io::BufReader::new(std::fs::File::open(path).unwrap()), &Default::default()).unwrap()
}

#[test]
fn gen_dataset_writes_one_line_per_scene_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = small(&dir.path().join("a"));
    let b = small(&dir.path().join("b"));
    let files = cmd_gen_dataset(&a).unwrap();
    cmd_gen_dataset(&b).unwrap();
    assert_eq!(files.len(), 4);
    let text = std::fs::read_to_string(dir.path().join("a/scenes.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 10);
    for f in ["scenes.jsonl", "pope_random.jsonl", "pope_popular.jsonl", "pope_adversarial.jsonl"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn split_files_follow_split_rules() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(dir.path());
    c.n_scenes = 40;
    cmd_gen_dataset(&c).unwrap();
    let scenes = scenes_in(&dir.path().join("scenes.jsonl"));

    let mut freq: BTreeMap<ObjectClass, usize> = ObjectClass::all().map(|o| (o, 0)).collect();
    for s in &scenes {
        for o in &s.objects {
            *freq.get_mut(o).unwrap() += 1;
        }
    }
    for split in PopeSplit::ALL {
        let q = scenes_in(&dir.path().join(format!("pope_{}.jsonl", split.name())));
        assert_eq!(q.len(), scenes.len());
        for (s, qs) in scenes.iter().zip(&q) {
            let yes: Vec<ObjectClass> = qs
                .questions
                .iter()
                .filter(|x| x.kind == QuestionType::Exist && x.label == Some(Answer::Yes))
                .map(|x| x.object.unwrap())
                .collect();
            let no: Vec<ObjectClass> = qs
                .questions
                .iter()
                .filter(|x| x.label == Some(Answer::No))
                .map(|x| x.object.unwrap())
                .collect();
            assert_eq!(yes, s.objects);
            assert_eq!(no.len(), s.objects.len());
            assert!(no.iter().all(|o| !s.objects.contains(o)));
            if split == PopeSplit::Popular {
                // No absent class outside the pick is strictly more frequent
                // than one inside it.
                let worst = no.iter().map(|o| freq[o]).min().unwrap();
                for o in ObjectClass::all().filter(|o| !s.objects.contains(o) && !no.contains(o)) {
                    assert!(freq[&o] <= worst, "{o} skipped in {}", s.id);
                }
            }
            if split == PopeSplit::Adversarial {
                let co = |o: ObjectClass| -> usize {
                    s.objects
                        .iter()
                        .map(|p| scenes.iter().filter(|x| x.contains(*p) && x.contains(o)).count())
                        .sum()
                };
                let worst = no.iter().map(|o| co(*o)).min().unwrap();
                for o in ObjectClass::all().filter(|o| !s.objects.contains(o) && !no.contains(o)) {
                    assert!(co(o) <= worst, "{o} skipped in {}", s.id);
                }
            }
        }
    }
}

#[test]
fn dataset_dir_round_trips_through_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(&dir.path().join("data"));
    cmd_gen_dataset(&c).unwrap();
    let generated = load_dataset(&c).unwrap();
    c.dataset = Some(dir.path().join("data"));
    let loaded = load_dataset(&c).unwrap();
    assert_eq!(generated.scenes, loaded.scenes);
    assert_eq!(generated.splits, loaded.splits);
}

#[test]
fn bias_cache_reloads_bit_identically_and_rejects_other_models() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(dir.path());
    c.shield.noise_samples = 8;
    let path = cmd_precompute_bias(&c).unwrap();
    let model = c.build_model().unwrap();
    let a = BiasEstimate::load(&path, &model).unwrap();
    let fresh = shield_core::shield::estimate_inherent_bias(&model, 8, c.shield.noise_dist, c.seed).unwrap();
    assert_eq!(a.mean.data(), fresh.mean.data());
    assert_eq!(a.samples, 8);

    let mut other = c.clone();
    other.vulnerability_gain = 500.0;
    let m2: ToyModel = other.build_model().unwrap();
    assert!(matches!(BiasEstimate::load(&path, &m2), Err(ShieldError::CacheMismatch { .. })));
}

#[test]
fn vanilla_mode_equals_all_stages_off() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = small(&dir.path().join("v"));
    v.mode = Mode::Vanilla;
    let mut off = small(&dir.path().join("off"));
    off.mode = Mode::Shield;
    off.shield.reweight = false;
    off.shield.subtract = false;
    off.shield.contrast = shield_core::shield::ContrastMode::Off;
    off.shield.beta = 0.0;
    let a = cmd_evaluate(&v).unwrap();
    let b = cmd_evaluate(&off).unwrap();
    for (x, y) in a.samples.iter().zip(&b.samples) {
        assert_eq!((&x.caption, &x.answers), (&y.caption, &y.answers));
    }
    let (mut sa, mut sb) = (a.report.variants[0].clone(), b.report.variants[0].clone());
    sa.mode.clear();
    sb.mode.clear();
    assert_eq!(sa, sb);
}

#[test]
fn report_files_parse_and_are_sorted() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(dir.path());
    c.mode = Mode::Ablation;
    c.jobs = 3;
    let out = cmd_evaluate(&c).unwrap();
    let report: Report =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report, out.report);
    let names: Vec<&str> = report.variants.iter().map(|s| s.mode.as_str()).collect();
    assert_eq!(names, ["vanilla", "reweight", "subtract", "contrast", "reweight+subtract", "full"]);
    for s in &report.variants {
        assert_eq!(s.samples, 10);
        assert!(s.chair.is_some() && s.mme.is_some());
        assert_eq!(s.pope.keys().collect::<Vec<_>>(), ["adversarial", "popular", "random"]);
    }
    let lines: Vec<SampleLine> =
        read_jsonl(std::io::BufReader::new(std::fs::File::open(dir.path().join("samples.jsonl")).unwrap()))
            .unwrap();
    assert_eq!(lines.len(), 60);
    for chunk in lines.chunks(10) {
        assert!(chunk.windows(2).all(|w| w[0].id < w[1].id));
    }
    let timing: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("timing.json")).unwrap()).unwrap();
    let full = &timing["variants"]["full"];
    assert!(full["mean_ms"].as_f64().unwrap() > 0.0);
    // The attack makes the full pipeline slower than plain decoding.
    assert!(full["relative_vs_vanilla"].as_f64().unwrap() > 1.0);
}

#[test]
fn job_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = small(&dir.path().join("a"));
    a.jobs = 1;
    let mut b = small(&dir.path().join("b"));
    b.jobs = 4;
    cmd_evaluate(&a).unwrap();
    cmd_evaluate(&b).unwrap();
    for f in ["report.json", "samples.jsonl"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap()
        );
    }
}

#[test]
fn sweep_emits_one_sorted_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(dir.path());
    c.n_scenes = 4;
    let (rows, table) = cmd_sweep(&c, "alpha", &[2.5, 1.0, 2.0, 1.5]).unwrap();
    let values: Vec<f64> = rows.iter().map(|r| r.value).collect();
    assert_eq!(values, [1.0, 1.5, 2.0, 2.5]);
    assert_eq!(table.lines().count(), 5);
    assert!(dir.path().join("sweep.json").exists());
    assert!(cmd_sweep(&c, "gamma", &[1.0]).is_err());

    // A single value is the same as evaluating with it.
    let (one, _) = cmd_sweep(&c, "K", &[16.0]).unwrap();
    let mut e = small(&dir.path().join("single"));
    e.n_scenes = 4;
    e.shield.noise_samples = 16;
    assert_eq!(one[0].summary, cmd_evaluate(&e).unwrap().report.variants[0]);
}

#[test]
fn diagnose_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(dir.path());
    c.vulnerability_gain = 500.0;
    c.shield.attack_steps = 2;
    let r = cmd_diagnose(&c).unwrap();
    assert_eq!(r.attack_curve.len(), 3);
    assert_eq!(r.attack_curve[0].step, 0);
    assert_eq!(r.noise_probe.len(), 16);
    assert_eq!(r.ratio_bins.iter().map(|b| b.count).sum::<usize>(), 10);
    let csv = std::fs::read_to_string(dir.path().join("ratios.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
    assert!(dir.path().join("diagnostics.json").exists());
    assert!(dir.path().join("ratios.jsonl").exists());
}

#[test]
fn binary_reports_errors_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "seed = 1\nbogus = 2\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_shield"))
        .args(["--config", cfg.to_str().unwrap(), "evaluate"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"].as_str().unwrap().contains("bogus"));
}

#[test]
fn binary_flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "seed = 1\nn_scenes = 3\nout = /nonexistent/should-not-be-used\n").unwrap();
    let out_dir = dir.path().join("data");
    let out = Command::new(env!("CARGO_BIN_EXE_shield"))
        .args(["--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--seed", "9"])
        .arg("gen-dataset")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let scenes = scenes_in(&out_dir.join("scenes.jsonl"));
    assert_eq!(scenes.len(), 3);
    let mut direct = RunConfig::default();
    direct.seed = 9;
    direct.n_scenes = 3;
    assert_eq!(scenes, load_dataset(&direct).unwrap().scenes);
}

/// Answers `n` chat-completion requests with the same reply.
fn stub_server(n: usize, reply: &'static str) -> (String, std::thread::JoinHandle<usize>) {
    use std::io::{BufRead, BufReader, Read, Write};
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/chat", listener.local_addr().unwrap());
    let h = std::thread::spawn(move || {
        for _ in 0..n {
            let (stream, _) = listener.accept().unwrap();
            let mut r = BufReader::new(stream);
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                r.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        len = v.trim().parse().unwrap();
                    }
                }
            }
            let mut body = vec![0u8; len];
            r.read_exact(&mut body).unwrap();
            let payload =
                serde_json::json!({"choices": [{"message": {"content": reply}}]}).to_string();
            let mut s = r.into_inner();
            write!(
                s,
                "HTTP/1.1 200 OK\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                payload.len(),
                payload
            )
            .unwrap();
        }
        n
    });
    (url, h)
}

#[test]
fn judge_scores_every_image_against_stub() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(dir.path());
    c.n_scenes = 3;
    let (url, server) = stub_server(3, "Correctness: 5 6 7 8\nReason: x\nDetailedness: 4 4 4 4\nReason: y");
    let client = shield_core::evalkit::JudgeClient {
        endpoint: url,
        token: None,
        model: None,
        timeout: std::time::Duration::from_secs(10),
    };
    let s = shield_cli::cmd_judge(&c, &client).unwrap();
    assert_eq!(server.join().unwrap(), 3);
    assert_eq!(s.images, 3);
    assert_eq!(s.systems, ["vanilla", "vcd_noise", "reweight+subtract", "shield"]);
    assert_eq!(s.correctness, [5.0, 6.0, 7.0, 8.0]);
    assert_eq!(s.detailedness, [4.0; 4]);
    let lines = std::fs::read_to_string(dir.path().join("judge.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 3);
}

#[test]
fn judge_transport_failure_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(dir.path());
    c.n_scenes = 1;
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let client = shield_core::evalkit::JudgeClient {
        endpoint: format!("http://127.0.0.1:{port}/chat"),
        token: None,
        model: None,
        timeout: std::time::Duration::from_secs(2),
    };
    assert!(shield_cli::cmd_judge(&c, &client).is_err());
}
