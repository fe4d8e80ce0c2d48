//! End-to-end acceptance run on the 28x28 digit dataset.
//!
//! Prints one PASS/FAIL line per criterion and exits non-zero if any criterion
//! fails, except those listed in `UNATTAINABLE`, which are still evaluated and
//! printed. Data are read from `$VIZGEN_DATA` or `data/mnist` at the workspace
//! root (see `scripts/fetch-mnist.sh`).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use vizgen::adversarial::{self, spearman, SweepResult, VisualizationBank};
use vizgen::discriminator::{ClassifierTrainConfig, LayerSpec};
use vizgen::generator::rescale;
use vizgen::io::{self, idx, LabeledDataset, Split};
use vizgen::tensor::{derive_seed, AdamConfig};
use vizgen::trainer::{self, TrainConfig};
use vizgen::verify;
use vizgen::{Classifier, ClassifierConfig, Error, Generator, GeneratorConfig, Tensor};

/// Criteria whose threshold cannot be met by any classifier; reported, not
/// gating.
const UNATTAINABLE: &[(&str, &str)] = &[(
    "A6",
    "threshold is 10 x (1/N) = 1.0 for N = 10, and a rate cannot exceed 1.0",
)];

const SWEEP: [f32; 7] = [0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0];
const SWEEP_IMAGES: usize = 1000;
const CHANNEL_LAYER: usize = 4;

struct Report {
    results: Vec<(String, bool)>,
}

impl Report {
    fn line(&mut self, id: &str, pass: bool, detail: String) {
        let status = if pass { "PASS" } else { "FAIL" };
        let mut out = std::io::stdout().lock();
        writeln!(out, "{id:<4} {status}  {detail}").unwrap();
        out.flush().unwrap();
        self.results.push((id.to_string(), pass));
    }

    fn note(&self, text: &str) {
        let mut out = std::io::stdout().lock();
        writeln!(out, "       {text}").unwrap();
        out.flush().unwrap();
    }
}

fn data_dir() -> PathBuf {
    std::env::var_os("VIZGEN_DATA")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn a1(report: &mut Report) {
    let start = Instant::now();
    let checks = verify::verification_suite(20, 0);
    let secs = start.elapsed().as_secs_f64();
    match checks {
        Ok(checks) => {
            let worst = checks
                .iter()
                .max_by(|a, b| a.max_error.total_cmp(&b.max_error))
                .expect("ops");
            let covered = checks.iter().all(|c| c.coordinates > 0 && c.instances >= 20);
            let pass = worst.max_error < 1e-3 && covered && secs < 120.0;
            let skipped: usize = checks.iter().map(|c| c.skipped).sum();
            report.line(
                "A1",
                pass,
                format!(
                    "{} ops x 20 instances, worst {} at {:.2e} (< 1e-3), {} probes skipped at kinks, {secs:.1}s (< 120s)",
                    checks.len(),
                    worst.op,
                    worst.max_error,
                    skipped
                ),
            );
        }
        Err(e) => report.line("A1", false, format!("suite error: {e}")),
    }
}

fn a2(report: &mut Report, train: &LabeledDataset, test: &LabeledDataset) -> Classifier {
    let start = Instant::now();
    let mut d = Classifier::build(ClassifierConfig::desk([1, 28, 28], 10), 1).unwrap();
    let cfg = ClassifierTrainConfig {
        epochs: 5,
        seed: 1,
        batch_size: 32,
        adam: AdamConfig::default(),
        target_accuracy: Some(0.97),
    };
    let result = d.train(train, test, &cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let last = result.epochs.last().expect("one epoch");
    report.line(
        "A2",
        last.held_out_accuracy >= 0.97 && result.epochs.len() <= 5 && secs < 600.0,
        format!(
            "held-out accuracy {:.4} (>= 0.97) after {} epoch(s) (<= 5) on {} test images, {secs:.0}s (< 600s)",
            last.held_out_accuracy,
            result.epochs.len(),
            test.len()
        ),
    );
    d.frozen()
}

fn a3_a4(report: &mut Report, d: &Classifier) -> Generator {
    let before = d.checksum();
    let before_bytes = io::encode_checkpoint(d.params());
    let mut g = Generator::build(GeneratorConfig::for_classifier(d), 1).unwrap();
    let cfg = TrainConfig {
        steps: 10_000,
        seed: 1,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let trace = trainer::train_generator(&mut g, d, &cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let after = d.checksum();
    report.line(
        "A3",
        before == after && before_bytes == io::encode_checkpoint(d.params()),
        format!(
            "classifier sha256 {}.. before and {}.. after {} generator steps",
            &before[..16],
            &after[..16],
            trace.len()
        ),
    );

    let hits: Vec<usize> = (0..10)
        .filter(|&x| d.predict_label(&rescale(&g.generate(x).unwrap())).unwrap() == x)
        .collect();
    let (head, tail) = (trace.head_mean(), trace.tail_mean());
    report.line(
        "A4",
        hits.len() >= 9 && tail < head && trace.len() >= 10_000 && secs < 900.0,
        format!(
            "{}/10 classes recovered {:?} (>= 9); loss first 10% {head:.4} > last 10% {tail:.4}; {} steps in {secs:.0}s (< 900s)",
            hits.len(),
            hits,
            trace.len()
        ),
    );
    g
}

fn rate(s: &SweepResult, e: f32, targeted: bool) -> f64 {
    let row = s.row(e).expect("coefficient in sweep");
    if targeted {
        row.targeted_rate
    } else {
        row.fooling_rate
    }
}

fn a5_a6(report: &mut Report, d: &Classifier, g: &Generator, test: &LabeledDataset) {
    let images = test.take(SWEEP_IMAGES);
    let bank = VisualizationBank::from_generator(g).unwrap();
    let start = Instant::now();
    let s = adversarial::sweep(d, &images, &bank, &SWEEP).unwrap();
    let noise = VisualizationBank::random_noise(10, &[1, 28, 28], 7).unwrap();
    let control = adversarial::sweep(d, &images, &noise, &SWEEP).unwrap();
    let secs = start.elapsed().as_secs_f64();

    let es: Vec<f64> = SWEEP[1..].iter().map(|&e| e as f64).collect();
    let rates: Vec<f64> = SWEEP[1..].iter().map(|&e| rate(&s, e, false)).collect();
    let rho = spearman(&es, &rates);
    let (r0, r1, r32) = (rate(&s, 0.0, false), rate(&s, 1.0, false), rate(&s, 32.0, false));
    report.line(
        "A5",
        rho >= 0.9 && r0 == 0.0 && r32 >= 5.0 * r1,
        format!(
            "spearman {rho:.3} (>= 0.9); rate(0) = {r0}; rate(32) {r32:.6} >= 5 x rate(1) {r1:.6}; curve {:?}",
            rates.iter().map(|r| format!("{r:.4}")).collect::<Vec<_>>()
        ),
    );

    let t32 = rate(&s, 32.0, true);
    let threshold = 10.0 / d.classes() as f64;
    report.line(
        "A6",
        t32 > threshold,
        format!("targeted rate at e=32 {t32:.6}, needs > 10 x (1/N) = {threshold:.1}"),
    );
    let n32 = rate(&control, 32.0, true);
    report.line(
        "A6s",
        t32 > n32,
        format!(
            "supplementary: targeted rate at e=32 {t32:.6} vs uniform-noise control {n32:.6} ({:.1}x); non-targeted {r32:.6} vs {:.6}; sweeps {secs:.0}s",
            t32 / n32,
            rate(&control, 32.0, false)
        ),
    );
}

fn a7(report: &mut Report, d: &Classifier, test: &LabeledDataset) {
    let noise: Vec<Tensor> = (0..100)
        .map(|i| Tensor::random_uniform(&[1, 28, 28], derive_seed(77, i), 0.0, 1.0).unwrap())
        .collect();
    let mut worst = 0.0f64;
    for layer in 0..d.config().features.len() {
        let head = d.channel_head(layer).unwrap();
        for img in noise.iter().take(20).chain(test.images().iter().take(20)) {
            let p = head.distribution(img).unwrap();
            let sum: f64 = p.data().iter().map(|&v| v as f64).sum();
            worst = worst.max((sum - 1.0).abs());
        }
    }
    let sums_ok = worst <= 1e-6;

    let head = d.channel_head(CHANNEL_LAYER).unwrap();
    let m = head.channels();
    let mut g = Generator::build(GeneratorConfig::desk(m, d.input_shape()), 3).unwrap();
    let cfg = TrainConfig {
        steps: 10_000,
        seed: 3,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    trainer::train_channel_generator(&mut g, d, CHANNEL_LAYER, &cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();

    let mut baseline = vec![0.0f64; m];
    for img in &noise {
        for (b, v) in baseline.iter_mut().zip(head.channel_means(img).unwrap().data()) {
            *b += *v as f64 / noise.len() as f64;
        }
    }
    let mut wins = 0;
    for (c, &base) in baseline.iter().enumerate() {
        let own = head.channel_means(&rescale(&g.generate(c).unwrap())).unwrap().data()[c] as f64;
        if own > 0.0 && own >= 2.0 * base {
            wins += 1;
        }
    }
    let frac = wins as f64 / m as f64;
    let layer_kind = match d.config().features[CHANNEL_LAYER] {
        LayerSpec::Relu => "relu",
        _ => "feature",
    };
    report.line(
        "A7",
        sums_ok && frac >= 0.6,
        format!(
            "distribution sums off by at most {worst:.1e} (<= 1e-6) over every layer; layer {CHANNEL_LAYER} ({layer_kind}, {m} channels): {wins}/{m} = {frac:.2} channels >= 2x noise mean (>= 0.60); training {secs:.0}s"
        ),
    );
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        out.insert(
            path.file_name().unwrap().to_string_lossy().into_owned(),
            fs::read(&path).unwrap(),
        );
    }
    out
}

fn cli_pipeline(root: &Path, data: &Path) -> BTreeMap<String, Vec<u8>> {
    let s = |p: &Path| p.to_string_lossy().into_owned();
    let (c, g, w) = (root.join("classifier"), root.join("generator"), root.join("sweep"));
    let runs: Vec<Vec<String>> = vec![
        vec![
            "train-classifier".into(),
            "--data".into(),
            s(data),
            "--epochs".into(),
            "1".into(),
            "--seed".into(),
            "5".into(),
            "--train-limit".into(),
            "2000".into(),
            "--test-limit".into(),
            "300".into(),
            "--out".into(),
            s(&c),
        ],
        vec![
            "train-generator".into(),
            "--classifier".into(),
            s(&c.join("classifier.ckpt")),
            "--steps".into(),
            "400".into(),
            "--seed".into(),
            "5".into(),
            "--out".into(),
            s(&g),
        ],
        vec![
            "sweep".into(),
            "--classifier".into(),
            s(&c.join("classifier.ckpt")),
            "--generator".into(),
            s(&g.join("generator.ckpt")),
            "--data".into(),
            s(data),
            "--coeffs".into(),
            "0,4,32".into(),
            "--limit".into(),
            "200".into(),
            "--log".into(),
            "--out".into(),
            s(&w),
        ],
    ];
    for args in runs {
        let out = std::process::Command::new(env!("CARGO_BIN_EXE_vizgen"))
            .args(&args)
            .output()
            .expect("spawn vizgen");
        assert!(
            out.status.success(),
            "vizgen {args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let mut all = BTreeMap::new();
    for dir in [&c, &g, &w] {
        let name = dir.file_name().unwrap().to_string_lossy().into_owned();
        for (file, bytes) in snapshot(dir) {
            all.insert(format!("{name}/{file}"), bytes);
        }
    }
    all
}

fn malformed_idx_cases() -> Vec<(&'static str, Vec<u8>, bool)> {
    let pixels = vec![vec![0u8, 64, 128, 255]; 3];
    let valid = idx::encode_idx_images(2, 2, &pixels);
    let labels = idx::encode_idx_labels(&[1, 2, 3]);
    let with = |f: &dyn Fn(&mut Vec<u8>)| {
        let mut b = valid.clone();
        f(&mut b);
        b
    };
    vec![
        ("empty file", vec![], true),
        ("wrong magic", with(&|b| b[3] = 0x04), true),
        ("wrong element type", with(&|b| b[2] = 0x0d), true),
        ("label file as images", labels.clone(), true),
        ("header cut inside dimensions", valid[..10].to_vec(), true),
        ("payload one byte short", with(&|b| { b.pop(); }), true),
        ("payload one byte long", with(&|b| b.push(0)), true),
        ("zero rows", with(&|b| b[8..12].copy_from_slice(&0u32.to_be_bytes())), true),
        ("count larger than payload", with(&|b| b[4..8].copy_from_slice(&4u32.to_be_bytes())), true),
        ("label payload truncated", labels[..labels.len() - 1].to_vec(), false),
    ]
}

fn a8(report: &mut Report, d: &Classifier, g: &Generator, data: &Path) {
    let root = tempfile::tempdir().unwrap();
    let first = cli_pipeline(root.path(), data);
    fs::remove_dir_all(root.path()).unwrap();
    fs::create_dir_all(root.path()).unwrap();
    let second = cli_pipeline(root.path(), data);
    let files_equal = first == second;
    let mismatched: Vec<&String> = first
        .keys()
        .filter(|k| first.get(*k) != second.get(*k))
        .collect();

    let ckpt = root.path().join("d.ckpt");
    d.save(&ckpt).unwrap();
    let d2 = Classifier::load(d.config().clone(), &ckpt).unwrap();
    let gckpt = root.path().join("g.ckpt");
    g.save(&gckpt).unwrap();
    let g2 = Generator::load(g.config().clone(), &gckpt).unwrap();
    let bits = |p: &vizgen::tensor::ParamSet| -> Vec<u32> {
        p.iter()
            .flat_map(|q| q.value().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect()
    };
    let roundtrip = bits(d.params()) == bits(d2.params())
        && bits(g.params()) == bits(g2.params())
        && fs::read(&ckpt).unwrap() == io::encode_checkpoint(d2.params());

    let cases = malformed_idx_cases();
    let mut rejected = 0;
    let mut escaped = Vec::new();
    for (name, bytes, images) in &cases {
        let result = if *images {
            idx::parse_idx_images(bytes).map(|_| ())
        } else {
            idx::parse_idx_labels(bytes).map(|_| ())
        };
        match result {
            Err(Error::Format(_) | Error::CorruptFile(_)) => rejected += 1,
            _ => escaped.push(*name),
        }
    }
    report.line(
        "A8",
        files_equal && !first.is_empty() && roundtrip && rejected == cases.len(),
        format!(
            "{} CLI output files bit-identical across two runs{}; checkpoint round-trip bit-exact: {roundtrip}; IDX malformed cases rejected {rejected}/{}{}",
            first.len(),
            if mismatched.is_empty() { String::new() } else { format!(" (differ: {mismatched:?})") },
            cases.len(),
            if escaped.is_empty() { String::new() } else { format!(" (accepted: {escaped:?})") },
        ),
    );
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut report = Report { results: Vec::new() };
    let dir = data_dir();
    a1(&mut report);
    match (
        LabeledDataset::load_idx(&dir, Split::Train, 10),
        LabeledDataset::load_idx(&dir, Split::Test, 10),
    ) {
        (Ok(train), Ok(test)) => {
            let d = a2(&mut report, &train, &test);
            let g = a3_a4(&mut report, &d);
            a5_a6(&mut report, &d, &g, &test);
            a7(&mut report, &d, &test);
            a8(&mut report, &d, &g, &dir);
        }
        (a, b) => {
            let err = a.err().or(b.err()).expect("one failed");
            for id in ["A2", "A3", "A4", "A5", "A6", "A7", "A8"] {
                report.line(id, false, format!("dataset unavailable at {}: {err}", dir.display()));
            }
        }
    }

    let mut gating = Vec::new();
    for (id, pass) in &report.results {
        if *pass {
            continue;
        }
        match UNATTAINABLE.iter().find(|(u, _)| u == id) {
            Some((_, why)) => report.note(&format!("{id} fails as expected: {why}")),
            None => gating.push(id.clone()),
        }
    }
    if !gating.is_empty() {
        eprintln!("failing criteria: {gating:?}");
        std::process::exit(1);
    }
}
