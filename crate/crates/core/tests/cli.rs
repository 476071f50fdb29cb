use std::path::Path;
use std::process::Command;

use canfvc::checkpoint::{save_checkpoint, Manifest};
use canfvc::frames::{save_frame, Frame};
use canfvc::model::CanfVcpp;
use canfvc::nn::ParamStore;
use canfvc::ModelConfig;

fn canfvc(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_canfvc")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn encode_decode_eval_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("tiny_lambda512.ckpt");
    let store = ParamStore::new(1);
    let cfg = ModelConfig::tiny();
    CanfVcpp::new(&store, &cfg).unwrap();
    store.perturb(2, 0.02, |_| true).unwrap();
    save_checkpoint(&ckpt, &store, &Manifest::new(512, 4, cfg)).unwrap();

    let input = dir.path().join("in");
    std::fs::create_dir(&input).unwrap();
    for t in 0..3 {
        let data = (0..3 * 24 * 40).map(|i| ((i % 40 + t * 2) as f32 / 50.0).min(1.0)).collect();
        save_frame(&Frame::new(data, 24, 40).unwrap(), &input.join(format!("f{t}.png"))).unwrap();
    }
    let bits = dir.path().join("seq.bin");
    let recon = dir.path().join("recon");
    let out = canfvc(&["encode", "--checkpoint", s(&ckpt), "--input", s(&input), "--output", s(&bits), "--gop", "2", "--recon", s(&recon)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(bits.with_extension("json")).unwrap()).unwrap();
    assert_eq!(report["frames"].as_array().unwrap().len(), 3);
    assert_eq!(report["frames"][2]["kind"], "I");

    let decoded = dir.path().join("decoded");
    let out = canfvc(&["decode", "--checkpoint", s(&ckpt), "--input", s(&bits), "--output", s(&decoded)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for i in 1..=3 {
        let name = format!("frame_{i:04}.png");
        assert_eq!(std::fs::read(recon.join(&name)).unwrap(), std::fs::read(decoded.join(&name)).unwrap());
    }

    let out = canfvc(&["eval", "--recon", s(&decoded), "--orig", s(&input)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let eval: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(eval["psnr"].as_f64().unwrap() > 0.0);
}

#[test]
fn bdrate_reads_csv_curves() {
    let dir = tempfile::tempdir().unwrap();
    let anchor = dir.path().join("a.csv");
    let test = dir.path().join("b.csv");
    std::fs::write(&anchor, "lambda,bpp,psnr\n256,0.05,30.1\n512,0.09,32.4\n1024,0.16,34.6\n2048,0.3,36.9\n").unwrap();
    std::fs::write(&test, "lambda,bpp,psnr\n256,0.025,30.1\n512,0.045,32.4\n1024,0.08,34.6\n2048,0.15,36.9\n").unwrap();
    let out = canfvc(&["bdrate", "--anchor", s(&anchor), "--test", s(&test)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("-50.0"), "{text}");
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let out = canfvc(&["decode", "--checkpoint", "/nonexistent.ckpt", "--input", "x", "--output", "y"]);
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
}
