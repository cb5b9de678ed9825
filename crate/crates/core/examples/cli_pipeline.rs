//! Drive the `stepcast` command line in-process: synth, run, report.
//!
//! ```text
//! cargo run --release --example cli_pipeline
//! ```

use stepcast::cli::main_with_args;

fn main() {
    let dir = tempfile::tempdir().expect("temporary directory");
    let root = dir.path();
    let config = root.join("run.toml");
    std::fs::write(
        &config,
        "seed = 5\njobs = 1\n\n[data]\npreset = \"sleep\"\n\n[experiment]\n\
         stages = [\"preprocess\", \"baseline\"]\n\n[experiment.model]\nhidden = 8\nmax_epochs = 10\n",
    )
    .expect("write config");
    let p = |x: &std::path::Path| x.display().to_string();

    let steps: [Vec<String>; 3] = [
        vec![
            "synth".into(),
            "--preset".into(),
            "sleep".into(),
            "--seed".into(),
            "5".into(),
            "--out".into(),
            p(&root.join("data")),
        ],
        vec![
            "run".into(),
            "--config".into(),
            p(&config),
            "--out".into(),
            p(&root.join("run")),
        ],
        vec!["report".into(), "--out".into(), p(&root.join("run"))],
    ];
    for args in steps {
        let code = main_with_args(std::iter::once("stepcast".to_string()).chain(args.clone()));
        println!("stepcast {} -> exit {code}", args.join(" "));
        assert_eq!(code, 0);
    }
    let manifest = std::fs::read_to_string(root.join("run/manifest.json")).expect("manifest");
    println!("{}", &manifest[..manifest.len().min(400)]);
}
