//! Temporary project directory with a tiny corpus, task files, vocabulary
//! and config, plus helpers for invoking the `vega` binary.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
pub fn vega(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_vega"));
    cmd.args(args).env_remove("VEGA_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("run vega")
}

pub fn ok(args: &[&str]) -> String {
    let out = vega(args, &[]);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub const WORDS: [&str; 12] = [
    "the", "a", "cat", "dog", "sat", "ran", "on", "under", "mat", "tree", "quickly", "slowly",
];

pub struct Workspace {
    dir: TempDir,
}

impl Workspace {
    pub fn new() -> Self {
        let ws = Workspace {
            dir: TempDir::new().unwrap(),
        };
        let mut corpus = String::new();
        for i in 0..60 {
            let line: Vec<&str> = (0..20).map(|j| WORDS[(i * 7 + j * (i % 5 + 1)) % WORDS.len()]).collect();
            corpus.push_str(&line.join(" "));
            corpus.push('\n');
        }
        fs::write(ws.path("corpus.txt"), corpus).unwrap();

        let mut train = String::from("{\"label_kind\": \"classification\", \"num_classes\": 2}\n");
        let mut test = train.clone();
        let mut ext = train.clone();
        for i in 0..24 {
            let (cue, label) = if i % 2 == 0 { ("cat", 0) } else { ("dog", 1) };
            let filler = WORDS[4 + i % 6];
            train.push_str(&format!("{{\"text_a\": \"the {cue} {filler}\", \"label\": {label}}}\n"));
            test.push_str(&format!("{{\"text_a\": \"a {filler} {cue}\"}}\n"));
            ext.push_str(&format!("{{\"text_a\": \"{cue} on the {filler}\", \"label\": {label}}}\n"));
        }
        fs::write(ws.path("train.jsonl"), train).unwrap();
        fs::write(ws.path("test.jsonl"), test).unwrap();
        fs::write(ws.path("external.jsonl"), ext).unwrap();

        ok(&["build-vocab", "--input", s(&ws.path("corpus.txt")), "--output", s(&ws.path("vocab.txt"))]);
        let vocab_size = WORDS.len() + 5;
        let config = format!(
            r#"{{
  "seed": 3,
  "encoder": {{"num_layers": 1, "hidden_size": 16, "num_heads": 2, "head_dim": 8, "ffn_size": 32,
              "vocab_size": {vocab_size}, "max_relative_distance": 4, "max_seq_len": 32}},
  "pretrain": {{"phase1_steps": 4, "phase2_steps": 3, "batch_size": 4, "seq_len": 16}},
  "finetune": {{"steps": 4, "batch_size": 8, "max_rounds": 2}}
}}"#
        );
        fs::write(ws.path("config.json"), config).unwrap();
        ws
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn read(&self, name: &str) -> Vec<u8> {
        fs::read(self.path(name)).unwrap()
    }

    pub fn phase1(&self, out: &str, log: &str) {
        ok(&[
            "pretrain-phase1",
            "--config",
            s(&self.path("config.json")),
            "--corpus",
            s(&self.path("corpus.txt")),
            "--vocab",
            s(&self.path("vocab.txt")),
            "--output",
            s(&self.path(out)),
            "--log",
            s(&self.path(log)),
        ]);
    }

    pub fn phase2(&self, input: &str, out: &str) {
        ok(&[
            "pretrain-phase2",
            "--config",
            s(&self.path("config.json")),
            "--corpus",
            s(&self.path("corpus.txt")),
            "--vocab",
            s(&self.path("vocab.txt")),
            "--checkpoint",
            s(&self.path(input)),
            "--output",
            s(&self.path(out)),
        ]);
    }

    pub fn finetune(&self, strategy: &str, from: &str, out: &str, extra: &[&str]) -> Output {
        let config = self.path("config.json");
        let ck = self.path(from);
        let vocab = self.path("vocab.txt");
        let train = self.path("train.jsonl");
        let output = self.path(out);
        let mut args = vec![
            "finetune",
            "--strategy",
            strategy,
            "--config",
            s(&config),
            "--checkpoint",
            s(&ck),
            "--vocab",
            s(&vocab),
            "--train",
            s(&train),
            "--output",
            s(&output),
        ];
        args.extend_from_slice(extra);
        vega(&args, &[])
    }

    /// Runs every command twice with identical inputs and reports, per
    /// command, whether all outputs matched byte for byte.
    pub fn rerun_report(&self) -> Vec<(String, bool)> {
        let mut report = Vec::new();
        let mut record = |name: &str, a: Vec<Vec<u8>>, b: Vec<Vec<u8>>| report.push((name.to_string(), a == b));

        let vocab = |out: &str| {
            ok(&["build-vocab", "--input", s(&self.path("corpus.txt")), "--output", s(&self.path(out))]);
            vec![self.read(out)]
        };
        record("build-vocab", vocab("vocab-a.txt"), vocab("vocab-b.txt"));

        let corrupt = |out: &str| {
            ok(&[
                "corrupt",
                "--config",
                s(&self.path("config.json")),
                "--vocab",
                s(&self.path("vocab.txt")),
                "--input",
                s(&self.path("corpus.txt")),
                "--output",
                s(&self.path(out)),
            ]);
            vec![self.read(out)]
        };
        record("corrupt", corrupt("corrupt-a.jsonl"), corrupt("corrupt-b.jsonl"));

        let phase1 = |run: &str| {
            self.phase1(&format!("p1{run}.bin"), &format!("p1{run}.jsonl"));
            vec![self.read(&format!("p1{run}.bin")), self.read(&format!("p1{run}.jsonl"))]
        };
        record("pretrain-phase1", phase1("a"), phase1("b"));

        let phase2 = |run: &str| {
            self.phase2(&format!("p1{run}.bin"), &format!("p2{run}.bin"));
            vec![self.read(&format!("p2{run}.bin"))]
        };
        record("pretrain-phase2", phase2("a"), phase2("b"));

        for (strategy, extra) in [
            ("vanilla", vec![]),
            ("adversarial", vec![]),
            ("transductive", vec!["--test", "test.jsonl"]),
            ("self-calibrated", vec!["--test", "test.jsonl", "--external", "external.jsonl"]),
            ("continued", vec!["--intermediate", "external.jsonl"]),
        ] {
            let extra: Vec<String> = extra
                .iter()
                .map(|a| if a.ends_with(".jsonl") { s(&self.path(a)).to_string() } else { a.to_string() })
                .collect();
            let mut outputs = Vec::new();
            for run in ["a", "b"] {
                let ck = format!("{strategy}-{run}.bin");
                let audit = self.path(&format!("{strategy}-{run}.audit"));
                let mut args: Vec<&str> = extra.iter().map(String::as_str).collect();
                args.extend(["--audit", s(&audit)]);
                let out = self.finetune(strategy, "p2a.bin", &ck, &args);
                assert!(out.status.success(), "{strategy}: {}", String::from_utf8_lossy(&out.stderr));
                let preds = self.path(&format!("{strategy}-{run}.preds"));
                ok(&[
                    "predict",
                    "--checkpoint",
                    s(&self.path(&ck)),
                    "--vocab",
                    s(&self.path("vocab.txt")),
                    "--input",
                    s(&self.path("test.jsonl")),
                    "--output",
                    s(&preds),
                ]);
                let eval = ok(&[
                    "eval",
                    "--checkpoint",
                    s(&self.path(&ck)),
                    "--vocab",
                    s(&self.path("vocab.txt")),
                    "--input",
                    s(&self.path("train.jsonl")),
                ]);
                outputs.push(vec![self.read(&ck), fs::read(&audit).unwrap(), fs::read(&preds).unwrap(), eval.into_bytes()]);
            }
            let b = outputs.pop().unwrap();
            record(&format!("finetune {strategy} + predict + eval"), outputs.pop().unwrap(), b);
        }
        report
    }
}
