use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aldr_core::dataset::{load_manifest, load_trials};
use aldr_core::evaluator::parse_det_csv;

fn aldr(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aldr"))
        .args(args)
        .current_dir(cwd)
        .env_remove("ALDR_SEED")
        .output()
        .expect("spawn aldr")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn generate(cwd: &Path, out: &str, speakers: usize, utts: usize, seed: u64) {
    let o = aldr(
        &[
            "generate", "--out", out, "--speakers", &speakers.to_string(), "--nuisance", "2", "--utts",
            &utts.to_string(), "--seed", &seed.to_string(), "--sample-rate", "8000",
        ],
        cwd,
    );
    assert!(o.status.success(), "{}", stderr(&o));
}

/// Small fast config: MLP encoder, a few epochs of both phases.
fn write_config(cwd: &Path, name: &str, data: &str, out: &str, epochs: (usize, usize), extra: &str) -> PathBuf {
    let (p1, p2) = epochs;
    let text = format!(
        "seed=11\ndata.manifest={data}/manifest.txt\nrun.out_dir={out}\nmodel.encoder=mlp\n\
         train.batch_size=8\ntrain.phase1_epochs={p1}\ntrain.phase2_epochs={p2}\n{extra}"
    );
    let p = cwd.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn dir_listing(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_counts_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let o = aldr(
        &["generate", "--out", "a", "--speakers", "8", "--nuisance", "2", "--utts", "10", "--seed", "4", "--sample-rate", "8000"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let m = load_manifest(&tmp.path().join("a/manifest.txt")).unwrap();
    assert_eq!(m.len(), 80);
    assert_eq!(m.num_speakers(), 8);

    let o = aldr(
        &["generate", "--out", "b", "--speakers", "8", "--nuisance", "2", "--utts", "10", "--seed", "4", "--sample-rate", "8000"],
        tmp.path(),
    );
    assert!(o.status.success());
    assert_eq!(dir_listing(&tmp.path().join("a")), dir_listing(&tmp.path().join("b")));

    let trials = load_trials(&tmp.path().join("a/trials.txt"), &m).unwrap();
    let same = trials.iter().filter(|t| t.same_speaker).count();
    assert_eq!(same, trials.len() - same);
}

#[test]
fn generate_rejects_bad_arguments_and_non_empty_dirs() {
    let tmp = tempfile::tempdir().unwrap();
    let o = aldr(&["generate", "--out", "x", "--speakers", "1", "--nuisance", "2", "--utts", "3", "--seed", "1"], tmp.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    fs::create_dir(tmp.path().join("full")).unwrap();
    fs::write(tmp.path().join("full/keep.txt"), "x").unwrap();
    let args = ["generate", "--out", "full", "--speakers", "2", "--nuisance", "2", "--utts", "2", "--seed", "1", "--sample-rate", "8000"];
    let o = aldr(&args, tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--force"));
    let mut forced = args.to_vec();
    forced.push("--force");
    assert!(aldr(&forced, tmp.path()).status.success());
    assert!(tmp.path().join("full/keep.txt").exists());

    // no --seed and no ALDR_SEED
    let o = aldr(&["generate", "--out", "y", "--speakers", "2", "--nuisance", "2", "--utts", "2"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_aldr"))
        .args(["generate", "--out", "y", "--speakers", "2", "--nuisance", "2", "--utts", "2", "--sample-rate", "8000"])
        .current_dir(tmp.path())
        .env("ALDR_SEED", "9")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn config_errors_name_the_problem() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("c.txt");
    fs::write(&p, "seed=1\nrun.out_dir=o\n").unwrap();
    let o = aldr(&["train", "--config", "c.txt"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("data.manifest"), "{}", stderr(&o));

    fs::write(&p, "seed=1\nrun.out_dir=o\ndata.manifest=m\ntrain.lr_inti=0.1\n").unwrap();
    let o = aldr(&["train", "--config", "c.txt"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.lr_inti"));

    fs::write(&p, "seed=1\nrun.out_dir=o\ndata.manifest=m\n").unwrap();
    let o = aldr(&["train", "--config", "c.txt", "--ablation", "nope"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    for name in ["full", "ep_only", "ep_dr", "ee_only", "ee_no_adv_s", "ee_no_adv_e", "ep_randvec_dr"] {
        assert!(e.contains(name), "{e}");
    }

    // data missing is a data-class failure
    let o = aldr(&["train", "--config", "c.txt"], tmp.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn train_eval_round_trip_and_seeded_scores_are_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cwd = tmp.path();
    generate(cwd, "data", 4, 8, 2);
    let mut scores = Vec::new();
    for run in ["r1", "r2"] {
        write_config(cwd, &format!("{run}.txt"), "data", run, (2, 2), "");
        let o = aldr(&["train", "--config", &format!("{run}.txt")], cwd);
        assert!(o.status.success(), "{}", stderr(&o));
        let log = fs::read_to_string(cwd.join(run).join("train.log")).unwrap();
        assert!(!log.is_empty());
        assert!(log.lines().all(|l| l.split_whitespace().count() == 8));

        let ck = format!("{run}/final.ckpt");
        let out = format!("{run}/eval");
        let o = aldr(&["eval", "--checkpoint", &ck, "--trials", "data/trials.txt", "--out", &out, "--probe"], cwd);
        assert!(o.status.success(), "{}", stderr(&o));
        let ev = cwd.join(&out);
        let report = fs::read_to_string(ev.join("report.txt")).unwrap();
        assert!(report.contains("EER (%)") && report.contains("probes"));
        assert_eq!(report.matches(" f_p ").count() + report.matches(" f_e ").count(), 4, "{report}");
        let det = fs::read_to_string(ev.join("det.csv")).unwrap();
        assert!(!parse_det_csv(&det, "det.csv").unwrap().is_empty());
        let s = fs::read_to_string(ev.join("scores.txt")).unwrap();
        let n_trials = fs::read_to_string(cwd.join("data/trials.txt")).unwrap().lines().count();
        assert_eq!(s.lines().count(), n_trials);
        scores.push(s);
    }
    assert_eq!(scores[0], scores[1]);
}

#[test]
fn resume_rejects_a_different_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cwd = tmp.path();
    generate(cwd, "data", 4, 8, 3);
    write_config(cwd, "a.txt", "data", "ra", (2, 2), "");
    assert!(aldr(&["train", "--config", "a.txt"], cwd).status.success());
    write_config(cwd, "b.txt", "data", "rb", (2, 2), "train.lr_init=0.5\n");
    let o = aldr(&["train", "--config", "b.txt", "--resume", "ra/latest.ckpt"], cwd);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    // resuming a finished run replays nothing and keeps the log intact
    let before = fs::read_to_string(cwd.join("ra/train.log")).unwrap();
    let o = aldr(&["train", "--config", "a.txt", "--resume", "ra/latest.ckpt"], cwd);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(cwd.join("ra/train.log")).unwrap(), before);
}

#[test]
fn eval_reports_unknown_trial_ids() {
    let tmp = tempfile::tempdir().unwrap();
    let cwd = tmp.path();
    generate(cwd, "data", 4, 8, 5);
    write_config(cwd, "a.txt", "data", "ra", (1, 0), "");
    assert!(aldr(&["train", "--config", "a.txt"], cwd).status.success());
    fs::write(cwd.join("data/bad.txt"), "1 spk000_utt000 ghost\n").unwrap();
    let o = aldr(&["eval", "--checkpoint", "ra/final.ckpt", "--trials", "data/bad.txt", "--out", "e"], cwd);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("ghost"), "{}", stderr(&o));
}

#[test]
fn untrained_model_scores_near_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let cwd = tmp.path();
    let o = aldr(
        &["generate", "--out", "data", "--speakers", "8", "--nuisance", "4", "--utts", "8", "--seed", "21"],
        cwd,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    fs::write(
        cwd.join("c.txt"),
        "seed=21\ndata.manifest=data/manifest.txt\nrun.out_dir=run\ntrain.batch_size=16\ntrain.phase1_epochs=0\ntrain.phase2_epochs=0\n",
    )
    .unwrap();
    let o = aldr(&["train", "--config", "c.txt"], cwd);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = aldr(&["eval", "--checkpoint", "run/final.ckpt", "--trials", "data/trials.txt", "--out", "ev"], cwd);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = fs::read_to_string(cwd.join("ev/report.txt")).unwrap();
    let eer: f64 = report
        .lines()
        .find(|l| l.trim_start().starts_with("EER (%)"))
        .and_then(|l| l.split_whitespace().last())
        .and_then(|v| v.parse().ok())
        .unwrap();
    assert!((35.0..=65.0).contains(&eer), "untrained EER {eer}%");
}
