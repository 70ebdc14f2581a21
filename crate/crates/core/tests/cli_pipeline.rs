use std::fs;
use std::path::Path;

use mastervein::cli::{run_cli, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};
use mastervein::generators::{build_corpus, load_corpus, save_corpus, CorpusParams};
use mastervein::neural::{save_weights, ConvLayer, DecoderNet, DenseLayer, NetworkWeights, ParityFixture};
use serde_json::Value;

fn run(args: &[&str]) -> i32 {
    run_cli(std::iter::once("mastervein").chain(args.iter().copied()))
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("run.json")).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn corpus_survives_disk_round_trip() {
    let params = CorpusParams {
        identities: 3,
        samples_per_id: 4,
        ..CorpusParams::default()
    };
    let corpus = build_corpus(&params).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_corpus(&corpus, dir.path()).unwrap();
    let back = load_corpus(dir.path()).unwrap();
    assert_eq!(back.identities.len(), 3);
    for (a, b) in corpus.identities.iter().zip(&back.identities) {
        assert_eq!(a.id, b.id);
        for (x, y) in a.enroll.iter().chain(&a.probe).zip(b.enroll.iter().chain(&b.probe)) {
            assert_eq!(x.mask, y.mask);
            // 8-bit storage
            for (p, q) in x.image.pixels().iter().zip(y.image.pixels()) {
                assert!((p - q).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }
}

#[test]
fn gen_corpus_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(run(&["gen-corpus", "--out", s(out), "--ids", "3", "--samples", "2", "--seed", "4"]), EXIT_OK);
    }
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
    assert_eq!(manifest(&a)["results"], manifest(&b)["results"]);
    assert_eq!(
        fs::read(a.join("001/enroll/0.pgm")).unwrap(),
        fs::read(b.join("001/enroll/0.pgm")).unwrap()
    );
    assert_eq!(manifest(&a)["config"]["ids"], 3);
}

#[test]
fn config_file_and_flags_merge() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"ids": 3, "samples": 2, "seed": 9}"#).unwrap();
    assert_eq!(run(&["--config", s(&cfg), "gen-corpus", "--out", s(&out), "--seed", "10"]), EXIT_OK);
    let m = manifest(&out);
    assert_eq!(m["command"], "gen-corpus");
    assert_eq!(m["config"]["seed"], 10);
    assert_eq!(m["config"]["ids"], 3);

    fs::write(&cfg, r#"{"ids": 3, "colour": "red"}"#).unwrap();
    assert_eq!(run(&["--config", s(&cfg), "gen-corpus", "--out", s(&out)]), EXIT_USAGE);
}

#[test]
fn usage_and_runtime_failures() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["no-such-command"]), EXIT_USAGE);
    assert_eq!(run(&["enroll", "--system", "miura-full"]), EXIT_USAGE);
    assert_eq!(
        run(&["eval", "--corpus", s(dir.path()), "--system", "miura-full", "--master", "/nonexistent.pgm", "--out", s(dir.path())]),
        EXIT_USAGE
    );
    // a directory without a manifest is not a corpus
    assert_eq!(
        run(&["calibrate", "--corpus", s(dir.path()), "--system", "miura-full", "--out", s(&dir.path().join("o"))]),
        EXIT_RUNTIME
    );
}

#[test]
fn miura_enroll_calibrate_and_lve() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    assert_eq!(run(&["gen-corpus", "--out", s(&corpus), "--ids", "4", "--samples", "2", "--seed", "2"]), EXIT_OK);

    let enrolled = dir.path().join("enroll");
    assert_eq!(run(&["enroll", "--corpus", s(&corpus), "--system", "miura-full", "--out", s(&enrolled)]), EXIT_OK);
    assert!(enrolled.join("001/0.pgm").exists());

    let cal = dir.path().join("cal");
    assert_eq!(run(&["calibrate", "--corpus", s(&corpus), "--system", "miura-full", "--out", s(&cal)]), EXIT_OK);
    let c: Value = serde_json::from_str(&fs::read_to_string(cal.join("calibration.json")).unwrap()).unwrap();
    assert!(c["threshold"].as_f64().unwrap() > 0.0);
    assert!(fs::read_to_string(cal.join("scores.csv")).unwrap().lines().count() > 1);

    let lve = dir.path().join("lve");
    let args = [
        "attack-lve", "--corpus", s(&corpus), "--system", "miura-full", "--population", "4", "--iterations", "2", "--out", s(&lve),
    ];
    assert_eq!(run(&args), EXIT_OK);
    for f in ["master.pgm", "master.mask.pgm", "history.csv", "cma.csv", "run.json"] {
        assert!(lve.join(f).exists(), "{f}");
    }
    let first = fs::read(lve.join("master.pgm")).unwrap();
    assert_eq!(run(&args), EXIT_OK);
    assert_eq!(fs::read(lve.join("master.pgm")).unwrap(), first);
}

fn small_decoder() -> DecoderNet {
    let conv = |out_c: usize, in_c: usize, s: f32| ConvLayer {
        out_c,
        in_c,
        k: 3,
        weight: (0..out_c * in_c * 9).map(|i| ((i as f32) * s).sin() * 0.1).collect(),
        bias: vec![0.01; out_c],
    };
    DecoderNet {
        latent_dim: 4,
        seed_height: 2,
        seed_width: 3,
        dense: DenseLayer {
            out: 32 * 6,
            inp: 4,
            weight: (0..32 * 6 * 4).map(|i| ((i as f32) * 0.37).cos() * 0.3).collect(),
            bias: vec![0.0; 32 * 6],
        },
        convs: vec![conv(16, 32, 0.11), conv(8, 16, 0.23), conv(1, 8, 0.31)],
    }
}

#[test]
fn lve_searches_a_trained_decoder() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    assert_eq!(run(&["gen-corpus", "--out", s(&corpus), "--ids", "3", "--samples", "2"]), EXIT_OK);
    let net = small_decoder();
    let weights = dir.path().join("dec.vfw");
    save_weights(&NetworkWeights::Decoder(net.clone()), &weights).unwrap();
    let latents = vec![vec![0.1f32, -0.4, 0.9, 0.0], vec![1.0, 1.0, -1.0, 0.5]];
    let fixture = ParityFixture {
        width: 24,
        height: 16,
        images: latents.iter().map(|z| net.decode(z).unwrap().pixels().to_vec()).collect(),
        latents,
    };
    let good = dir.path().join("parity.json");
    fs::write(&good, serde_json::to_string(&fixture).unwrap()).unwrap();

    let out = dir.path().join("lve");
    let base = [
        "attack-lve", "--corpus", s(&corpus), "--system", "miura-full", "--population", "4", "--iterations", "1",
        "--generator", s(&weights), "--out", s(&out),
    ];
    let with_fixture = |f: &Path| {
        let mut v = base.to_vec();
        v.extend(["--parity", s(f)]);
        run(&v)
    };
    assert_eq!(with_fixture(&good), EXIT_OK);
    assert_eq!(manifest(&out)["results"]["best_latent"].as_array().unwrap().len(), 4);

    let mut off = fixture.clone();
    off.images[1][5] += 1e-3;
    let bad = dir.path().join("bad.json");
    fs::write(&bad, serde_json::to_string(&off).unwrap()).unwrap();
    assert_eq!(with_fixture(&bad), EXIT_RUNTIME);
    assert_eq!(run(&["attack-lve", "--corpus", s(&corpus), "--parity", s(&good)]), EXIT_USAGE);
}
