use std::path::Path;
use std::process::{Command, Output};

use piza::evaluation::{mean_accuracy_from_ious, EvalReport};
use piza::experiment::ResultRecord;
use piza::geometry::iou;
use piza::io::read_jsonl;
use piza::search::ExtendedSample;
use piza::synth::read_dataset;

const TINY: &str = r#"
seed = 11
image_size = 256
ratio_min = 0.002
ratio_max = 0.008
n_train = 6
n_test = 4
proxy_count = 30
proxy_image_size = 128
min_edge = 40.0
crop = 32
patch = 8
width = 8
depth = 1
ffn = 8
adapter_bottleneck = 4
d = 4
piza_width = 8
piza_ffn = 8
piza_layers = 1
fourier_freqs = 4
pretrain_steps = 4
pretrain_batch = 2
batch = 4
epochs = 1
window_size = 128
window_stride = 64
tile_grid = 2
"#;

fn piza(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_piza"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = piza(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn staged_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("c.toml"), TINY).unwrap();
    ok(&["synth", "--config", "c.toml", "--out", "proxy", "--split", "proxy", "--no-images"], d);
    ok(&["synth", "--config", "c.toml", "--out", "data"], d);
    ok(&["synth", "--config", "c.toml", "--out", "test", "--split", "test"], d);
    let train = read_dataset(&d.join("data")).unwrap();
    assert_eq!(train.len(), 6);
    assert!(d.join("data").join(&train[0].image).exists());
    assert!(!d.join("proxy/images").exists());

    ok(&["fit-prior", "--config", "c.toml", "--dataset", "proxy", "--out", "prior.json"], d);
    ok(&["extend", "--config", "c.toml", "--dataset", "data", "--prior", "prior.json", "--out", "ext.jsonl"], d);
    let ext: Vec<ExtendedSample> = read_jsonl(&d.join("ext.jsonl")).unwrap();
    assert_eq!(ext.len(), train.len());
    let first = std::fs::read(d.join("ext.jsonl")).unwrap();
    ok(&["extend", "--config", "c.toml", "--dataset", "data", "--prior", "prior.json", "--out", "ext2.jsonl"], d);
    assert_eq!(first, std::fs::read(d.join("ext2.jsonl")).unwrap());

    ok(&["train", "--config", "c.toml", "--stage", "pretrain", "--dataset", "proxy", "--out", "bb.bin"], d);
    assert!(d.join("bb.log.csv").exists());
    for (stage, out) in [("single-shot", "ss.bin"), ("piza", "pz.bin")] {
        ok(
            &[
                "train", "--config", "c.toml", "--stage", stage, "--dataset", "data", "--extended", "ext.jsonl",
                "--backbone", "bb.bin", "--out", out,
            ],
            d,
        );
    }
    ok(&["infer", "--config", "c.toml", "--model", "pz.bin", "--dataset", "test", "--out", "r_piza.jsonl"], d);
    ok(
        &[
            "infer", "--model", "pz.bin", "--dataset", "test", "--out", "r_fixed.jsonl", "--method", "fixed", "--steps",
            "2",
        ],
        d,
    );
    ok(
        &[
            "baseline", "--config", "c.toml", "--model", "ss.bin", "--dataset", "test", "--out", "r_sw.jsonl", "--kind",
            "sliding-window",
        ],
        d,
    );
    let sw: Vec<ResultRecord> = read_jsonl(&d.join("r_sw.jsonl")).unwrap();
    assert!(sw.iter().all(|r| r.calls == 9 && r.method == "sliding-window-128-64"));
    let fixed: Vec<ResultRecord> = read_jsonl(&d.join("r_fixed.jsonl")).unwrap();
    assert!(fixed.iter().all(|r| r.steps == 2 && r.calls == 2));

    let csv = ok(&["eval", "--results", "r_piza.jsonl", "--gts", "test/index.jsonl", "--out", "eval"], d);
    assert!(csv.starts_with("method,mAcc,acc50,acc75,mean_steps,mean_calls,n\npiza,"));
    let results: Vec<ResultRecord> = read_jsonl(&d.join("r_piza.jsonl")).unwrap();
    let gts = read_dataset(&d.join("test")).unwrap();
    let ious: Vec<f64> = gts
        .iter()
        .map(|g| iou(&results.iter().find(|r| r.id == g.id).unwrap().pred, &g.gt).unwrap())
        .collect();
    let reports: Vec<EvalReport> =
        serde_json::from_str(&std::fs::read_to_string(d.join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(reports[0].m_acc, mean_accuracy_from_ious(&ious).unwrap());

    let table = ok(
        &["report", "--results", "r_piza.jsonl", "r_fixed.jsonl", "r_sw.jsonl", "--gts", "test", "--out", "rep"],
        d,
    );
    assert_eq!(table.lines().count(), 4);
    assert!(d.join("rep/report.csv").exists());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(piza(&["frobnicate"], d).status.code(), Some(1));
    assert_eq!(piza(&["synth"], d).status.code(), Some(1));
    assert_eq!(piza(&["--help"], d).status.code(), Some(0));

    let missing = piza(&["fit-prior", "--dataset", "nowhere", "--out", "p.json"], d);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nowhere"));

    std::fs::write(d.join("bad.toml"), "learning_rate = 1\n").unwrap();
    assert_eq!(piza(&["synth", "--config", "bad.toml", "--out", "x"], d).status.code(), Some(1));
    assert_eq!(piza(&["synth", "--config", "absent.toml", "--out", "x"], d).status.code(), Some(2));

    std::fs::create_dir(d.join("broken")).unwrap();
    std::fs::write(d.join("broken/index.jsonl"), "{\"id\": 1}\n").unwrap();
    assert_eq!(piza(&["fit-prior", "--dataset", "broken", "--out", "p.json"], d).status.code(), Some(2));
}

#[test]
fn experiment_subcommand_writes_report() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("c.toml"), TINY).unwrap();
    let csv = ok(&["experiment", "--config", "c.toml", "--out", "run"], d);
    assert_eq!(csv.lines().count(), 1 + 7);
    assert_eq!(std::fs::read_to_string(d.join("run/report.csv")).unwrap(), csv);
}
