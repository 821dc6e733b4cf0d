use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use lognet::calib::{quantizer_inputs, scan_fsr};
use lognet::format::{load_dataset, read_model};
use lognet::nn::LayerKind;
use tempfile::TempDir;

fn lognet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lognet"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = lognet(dir, args);
    assert!(
        out.status.success(),
        "lognet {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str], code: i32) -> String {
    let out = lognet(dir, args);
    assert_eq!(out.status.code(), Some(code), "lognet {args:?}");
    String::from_utf8(out.stderr).unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect()
}

fn header(path: &Path) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.headers().unwrap().iter().map(String::from).collect()
}

/// Shapes data and a briefly trained log-quantized model, shared by tests.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn get() -> &'static Fixture {
        static F: OnceLock<Fixture> = OnceLock::new();
        F.get_or_init(|| {
            let dir = tempfile::tempdir().unwrap();
            let d = dir.path();
            ok(d, &["gen-data", "shapes", "--n", "400", "--seed", "1", "--images", "x.idx", "--labels", "y.idx"]);
            std::fs::write(
                d.join("run.cfg"),
                "arch = conv:4:3:1:1,bn,relu,logquant:4,maxpool:2:2,fc:16,bn,relu,logquant:4,fc:4\n\
                 preset = log\nepochs = 4\nbatch_size = 16\ndata = idx\n\
                 train_images = x.idx\ntrain_labels = y.idx\nout_dir = trained\n",
            )
            .unwrap();
            ok(d, &["train", "run.cfg"]);
            Fixture { dir }
        })
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn scratch(&self) -> TempDir {
        let t = tempfile::tempdir().unwrap();
        for f in ["x.idx", "y.idx"] {
            std::fs::copy(self.path().join(f), t.path().join(f)).unwrap();
        }
        std::fs::copy(self.path().join("trained/model.lnm"), t.path().join("model.lnm")).unwrap();
        t
    }
}

#[test]
fn missing_file_is_a_usage_error() {
    let t = tempfile::tempdir().unwrap();
    let err = fails(
        t.path(),
        &["calibrate", "--model", "absent.lnm", "--images", "x.idx", "--out", "o.lnm", "--report", "r.csv"],
        2,
    );
    assert!(err.contains("cannot open"), "{err}");
    assert!(err.contains("absent.lnm"), "{err}");
}

#[test]
fn malformed_model_names_the_byte_offset() {
    let t = Fixture::get().scratch();
    let bytes = std::fs::read(t.path().join("model.lnm")).unwrap();
    std::fs::write(t.path().join("cut.lnm"), &bytes[..40]).unwrap();
    let err = fails(t.path(), &["infer", "--model", "cut.lnm", "--images", "x.idx", "--out", "p.csv"], 2);
    assert!(err.contains("byte 40"), "{err}");
}

#[test]
fn calibration_report_matches_direct_scan() {
    let t = Fixture::get().scratch();
    let d = t.path();
    ok(d, &[
        "calibrate", "--model", "model.lnm", "--images", "x.idx", "--samples", "100", "--bitwidth", "3",
        "--fsr-grid", "-6:8", "--out", "cal.lnm", "--report", "cal.csv",
    ]);
    assert_eq!(
        header(&d.join("cal.csv")),
        ["layer", "kind", "quantizer", "bitwidth", "fsr", "l1_error", "chosen"]
    );
    let rows = csv_rows(&d.join("cal.csv"));
    let g = read_model(&std::fs::read(d.join("model.lnm")).unwrap()).unwrap();
    let cal = read_model(&std::fs::read(d.join("cal.lnm")).unwrap()).unwrap();
    let quant_layers: Vec<usize> = (0..g.layers.len()).filter(|&i| g.layers[i].kind.is_quantizer()).collect();
    assert_eq!(rows.len(), quant_layers.len() * 15);

    let data = load_dataset(&d.join("x.idx"), &d.join("y.idx")).unwrap();
    let taps = quantizer_inputs(&g, &data.take(100).unwrap().inputs).unwrap();
    for (layer, values) in taps {
        let template = g.layers[layer].quant.unwrap().with_bitwidth(3);
        let scan = scan_fsr(&values, &template, -6..=8).unwrap();
        let mine: Vec<&Vec<String>> = rows.iter().filter(|r| r[0] == layer.to_string()).collect();
        for (r, &(fsr, err)) in mine.iter().zip(&scan.errors) {
            assert_eq!(r[4], fsr.to_string());
            assert_eq!(r[5].parse::<f64>().unwrap(), err);
            assert_eq!(r[6], (fsr == scan.fsr).to_string());
        }
        let q = cal.effective_quant(layer).unwrap();
        assert_eq!((q.fsr, q.bitwidth), (scan.fsr, 3));
    }
}

#[test]
fn single_candidate_grid_is_chosen_everywhere() {
    let t = Fixture::get().scratch();
    let d = t.path();
    ok(d, &[
        "calibrate", "--model", "model.lnm", "--images", "x.idx", "--fsr-grid", "5:5", "--out", "cal.lnm",
        "--report", "cal.csv",
    ]);
    let cal = read_model(&std::fs::read(d.join("cal.lnm")).unwrap()).unwrap();
    for i in 0..cal.layers.len() {
        if cal.layers[i].kind.is_quantizer() {
            assert_eq!(cal.effective_quant(i).unwrap().fsr, 5);
        }
    }
    assert!(csv_rows(&d.join("cal.csv")).iter().all(|r| r[4] == "5" && r[6] == "true"));
}

fn sweep(d: &Path, mode: &str, out: &str) -> Vec<(u8, i32, f64, f64)> {
    ok(d, &[
        "sweep", "--model", "model.lnm", "--images", "x.idx", "--labels", "y.idx", "--mode", mode,
        "--bitwidths", "3", "--fsr-range", "-4:10", "--out", out,
    ]);
    assert_eq!(header(&d.join(out)), ["bitwidth", "fsr", "top1", "top5"]);
    csv_rows(&d.join(out))
        .iter()
        .map(|r| (r[0].parse().unwrap(), r[1].parse().unwrap(), r[2].parse().unwrap(), r[3].parse().unwrap()))
        .collect()
}

#[test]
fn float_sweep_ignores_fsr() {
    let t = Fixture::get().scratch();
    let rows = sweep(t.path(), "float32", "f.csv");
    assert_eq!(rows.len(), 15);
    assert!(rows.iter().all(|r| r.2 == rows[0].2 && r.3 == rows[0].3));
}

#[test]
fn log_sweep_peaks_inside_the_grid() {
    let t = Fixture::get().scratch();
    let rows = sweep(t.path(), "method2_base2", "s.csv");
    let best = rows.iter().map(|r| r.2).fold(0.0, f64::max);
    assert!(best >= rows[0].2 && best >= rows[rows.len() - 1].2);
    assert!(rows[0].2 < best, "full-scale far below the activations should hurt");
}

#[test]
fn empty_fsr_range_is_a_usage_error() {
    let t = Fixture::get().scratch();
    let err = fails(
        t.path(),
        &[
            "sweep", "--model", "model.lnm", "--images", "x.idx", "--labels", "y.idx", "--mode", "float32",
            "--bitwidths", "3", "--fsr-range", "4:3", "--out", "s.csv",
        ],
        2,
    );
    assert!(err.contains("empty FSR range"), "{err}");
}

#[test]
fn unknown_mode_lists_the_valid_ones() {
    let t = Fixture::get().scratch();
    let err = fails(t.path(), &["infer", "--model", "model.lnm", "--images", "x.idx", "--mode", "fast", "--out", "p.csv"], 2);
    for m in ["float32", "method1", "method2_base2", "method2_sqrt2"] {
        assert!(err.contains(m), "{err}");
    }
}

#[test]
fn empty_dataset_gives_header_only_predictions() {
    let t = Fixture::get().scratch();
    let d = t.path();
    ok(d, &["gen-data", "shapes", "--n", "0", "--images", "e.idx", "--labels", "el.idx"]);
    ok(d, &["infer", "--model", "model.lnm", "--images", "e.idx", "--labels", "el.idx", "--out", "p.csv"]);
    assert_eq!(std::fs::read_to_string(d.join("p.csv")).unwrap(), "mode,index,prediction,label\n");
}

#[test]
fn packed_method2_agrees_with_float_on_dequantized_weights() {
    let (t, _) = train_dir(
        "arch = fc:16,relu,logquant:4,fc:16,relu,logquant:4,fc:2\ndata = separable\ndata_seed = 3\n\
         train_samples = 400\ntest_samples = 100\nepochs = 20\noptimizer = adam\nlr = 0.01\n\
         batch_size = 20\nout_dir = out\n",
    );
    let d = t.path();
    ok(d, &["train", "run.cfg"]);
    ok(d, &["gen-data", "separable", "--n", "500", "--seed", "3", "--images", "s.idx", "--labels", "sl.idx"]);
    ok(d, &["calibrate", "--model", "out/model.lnm", "--images", "s.idx", "--out", "cal.lnm", "--report", "c.csv"]);
    let summary = ok(d, &["pack", "--model", "cal.lnm", "--out", "packed.lnm", "--bitwidth", "5"]);
    assert!(summary.contains("smaller"));
    let packed = read_model(&std::fs::read(d.join("packed.lnm")).unwrap()).unwrap();
    for (i, l) in packed.layers.iter().enumerate() {
        if matches!(l.kind, LayerKind::Conv { .. } | LayerKind::Fc { .. }) {
            assert!(matches!(packed.weights(i).unwrap(), lognet::nn::Weights::Quantized(_)));
        }
    }
    ok(d, &[
        "infer", "--model", "packed.lnm", "--images", "s.idx", "--labels", "sl.idx", "--mode",
        "float32,method2_base2,method2_sqrt2", "--out", "p.csv", "--timing", "t.csv",
    ]);
    let rows = csv_rows(&d.join("p.csv"));
    let n = rows.len() / 3;
    assert_eq!(n, 500);
    for k in 1..3 {
        let agree = (0..n).filter(|&i| rows[i][2] == rows[k * n + i][2]).count();
        assert!(agree as f64 >= 0.95 * n as f64, "{}: {agree} of {n} agree", rows[k * n][0]);
    }
    let timing = csv_rows(&d.join("t.csv"));
    assert_eq!(timing.len(), 3);
    assert_eq!(timing[1][0], "method2_base2");
}

#[test]
fn analysis_histograms_hold_every_value() {
    let t = Fixture::get().scratch();
    let d = t.path();
    ok(d, &[
        "quant-analyze", "--model", "model.lnm", "--images", "x.idx", "--samples", "20", "--bitwidth", "4",
        "--bins", "32", "--out", "h.csv", "--summary", "s.csv",
    ]);
    let hist = csv_rows(&d.join("h.csv"));
    let summary = csv_rows(&d.join("s.csv"));
    assert_eq!(summary.len(), 2 * 3);
    assert_eq!(hist.len(), 2 * 3 * 32);
    let mut totals = std::collections::BTreeMap::<(String, String), u64>::new();
    for r in &hist {
        *totals.entry((r[0].clone(), r[1].clone())).or_default() += r[5].parse::<u64>().unwrap();
    }
    let first_layer = totals[&(summary[0][0].clone(), "log".to_string())];
    assert_eq!(first_layer, 20 * 4 * 12 * 12);
    for s in &summary[..3] {
        assert_eq!(totals[&(s[0].clone(), s[1].clone())], first_layer);
    }
}

fn train_dir(cfg: &str) -> (TempDir, PathBuf) {
    let t = tempfile::tempdir().unwrap();
    std::fs::write(t.path().join("run.cfg"), cfg).unwrap();
    let out = t.path().join("out");
    (t, out)
}

#[test]
fn zero_epochs_write_the_initial_checkpoint() {
    let (t, out) = train_dir("arch = fc:8,relu,fc:2\ndata = separable\nepochs = 0\nout_dir = out\n");
    ok(t.path(), &["train", "run.cfg"]);
    assert!(read_model(&std::fs::read(out.join("model.lnm")).unwrap()).is_ok());
    assert_eq!(
        std::fs::read_to_string(out.join("metrics.csv")).unwrap(),
        "step,epoch,loss,train_acc,test_acc\n"
    );
}

#[test]
fn divergence_keeps_the_last_good_checkpoint() {
    let (t, out) = train_dir(
        "arch = fc:16,relu,fc:2\ndata = separable\nepochs = 4\noptimizer = sgd\nlr = 1e300\nout_dir = out\n",
    );
    let err = fails(t.path(), &["train", "run.cfg"], 1);
    assert!(err.contains("diverged"), "{err}");
    assert!(read_model(&std::fs::read(out.join("model.lnm")).unwrap()).is_ok());
}

#[test]
fn config_errors_name_the_key() {
    let (t, _) = train_dir("arch = fc:2\nbatch_size = many\n");
    let err = fails(t.path(), &["train", "run.cfg"], 2);
    assert!(err.contains("`batch_size`"), "{err}");
}

#[test]
fn log_and_linear_runs_both_complete() {
    for q in [
        "preset = log\n",
        "weight_q = linear:5:signed\nactivation_q = linear:5:fsr=2\n",
    ] {
        let (t, out) = train_dir(&format!(
            "arch = fc:16,relu,logquant:4,fc:2\ndata = separable\nepochs = 3\nbatch_size = 20\n\
             optimizer = adam\nlr = 0.01\nout_dir = out\n{q}"
        ));
        ok(t.path(), &["train", "run.cfg"]);
        let rows = csv_rows(&out.join("metrics.csv"));
        assert_eq!(rows.len(), 3);
        let acc: f64 = rows[2][3].parse().unwrap();
        assert!(acc > 0.8, "{q}: train accuracy {acc}");
    }
}

#[test]
fn thread_count_must_be_positive() {
    let t = Fixture::get().scratch();
    let out = Command::new(env!("CARGO_BIN_EXE_lognet"))
        .args(["infer", "--model", "model.lnm", "--images", "x.idx", "--out", "p.csv"])
        .current_dir(t.path())
        .env("LOGNET_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
