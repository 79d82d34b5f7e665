use std::fs;
use std::process::{Command, Output};

fn sparseconv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparseconv"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &[&str] = &["--shape", "16,32,8,8,3,3,1,1", "--minibatch", "2", "--vector-width", "8"];

#[test]
fn verify_passes_on_a_registry_layer_and_a_custom_shape() {
    let o = sparseconv(&["verify", "--layer", "resnet5_2/r", "--sparsity", "0.7", "--scale", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 3, "{text}");

    let mut args = vec!["verify", "--component", "bww", "--check-on", "output_grad", "--mode", "dense"];
    args.extend_from_slice(SMALL);
    let o = sparseconv(&args);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("check_on=output_grad"));
}

#[test]
fn corrupted_layout_fails_verification() {
    let mut args = vec!["verify", "--component", "fwd", "--corrupt-layout"];
    args.extend_from_slice(SMALL);
    let o = sparseconv(&args);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("layout mismatch"));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(sparseconv(&["verify", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(sparseconv(&["verify", "--component", "xyz"]).status.code(), Some(2));
    assert_eq!(sparseconv(&["verify", "--layer", "nope"]).status.code(), Some(2));
    assert_eq!(sparseconv(&["plan-dump", "--shape", "12,32,8,8,3,3,1,1"]).status.code(), Some(2));
    assert_eq!(sparseconv(&["verify", "--sparsity", "1.5", "--shape", "16,16,4,4,3,3,1,1"]).status.code(), Some(2));
    assert_eq!(sparseconv(&[]).status.code(), Some(2));
    assert_eq!(sparseconv(&["--help"]).status.code(), Some(0));
}

#[test]
fn plan_dump_reproduces_the_register_budget_table() {
    for (r, q, t, pipelined) in [(1, 128, 8, true), (3, 128, 24, false), (5, 64, 20, true)] {
        let shape = format!("256,256,14,14,{r},{r},1,1");
        let o = sparseconv(&["plan-dump", "--shape", &shape, "--component", "fwd"]);
        assert_eq!(o.status.code(), Some(0));
        let text = stdout(&o);
        assert!(text.contains(&format!("q={q}\n")), "{text}");
        assert!(text.contains(&format!("t={t}\n")), "{text}");
        assert!(text.contains(&format!("pipelined={pipelined}\n")), "{text}");
    }
}

#[test]
fn counters_match_the_analytic_model() {
    let mut args = vec!["counters", "--sparsity", "0.6"];
    args.extend_from_slice(SMALL);
    let o = sparseconv(&args);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(!text.contains("mismatch"));
    assert!(text.contains("executed_vector_fmas"));
}

#[test]
fn sweep_csv_is_stable_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let curves = dir.path().join(format!("curves_{name}"));
        let mut args = vec!["sweep", "--grid", "0,0.5,1", "--repeats", "1", "--mode", "sparse,dense"];
        args.extend_from_slice(SMALL);
        args.extend_from_slice(&["--out", out.to_str().unwrap(), "--curves", curves.to_str().unwrap()]);
        assert_eq!(sparseconv(&args).status.code(), Some(0));
        (fs::read_to_string(out).unwrap(), fs::read_to_string(curves).unwrap())
    };
    let (a, curves) = run("a.csv");
    let (b, _) = run("b.csv");
    let strip = |text: &str| -> Vec<String> {
        text.lines()
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                // drop the timing columns
                format!("{},{},{},{},{},{}", f[0], f[1], f[2], f[3], f[4], f[6])
            })
            .collect()
    };
    assert_eq!(strip(&a), strip(&b));
    assert_eq!(a.lines().next().unwrap(), "layer,component,sparsity,mode,workers,median_ns,exec_fmas,speedup_vs_dense");
    // 3 components x 3 sparsities x 2 modes, then the same count of summary rows
    assert_eq!(a.lines().count(), 1 + 18 + 18);
    for line in a.lines().filter(|l| l.contains(",dense,")) {
        assert!(line.ends_with(",1.0000"), "{line}");
    }
    assert_eq!(curves.lines().next().unwrap(), "layer,component,sparsity,median_ns,dense_ns");
    assert_eq!(curves.lines().count(), 1 + 9);
}

#[test]
fn project_reads_curves_and_profile() {
    let dir = tempfile::tempdir().unwrap();
    let curves = dir.path().join("curves.csv");
    let profile = dir.path().join("profile.csv");
    let out = dir.path().join("breakdown.csv");
    fs::write(
        &curves,
        "layer,component,sparsity,median_ns,dense_ns\n\
         l1,fwd,0,8,8\nl1,fwd,1,2,8\n\
         l1,bwi,0,6,6\nl1,bwi,1,3,6\n\
         l1,bww,0,4,4\nl1,bww,1,2,4\n",
    )
    .unwrap();
    fs::write(
        &profile,
        "network,layer,epoch,source,sparsity\ntoy,l1,0,activation,0.5\ntoy,l1,0,output_grad,0.25\n",
    )
    .unwrap();
    let args = |bn: &str| {
        vec![
            "project".to_string(),
            "--curves".into(),
            curves.to_str().unwrap().into(),
            "--profile".into(),
            profile.to_str().unwrap().into(),
            "--batchnorm".into(),
            bn.into(),
            "--first-layer-ns".into(),
            "2".into(),
            "--iters-per-epoch".into(),
            "10".into(),
            "--out".into(),
            out.to_str().unwrap().into(),
        ]
    };
    let argv: Vec<String> = args("off");
    let o = sparseconv(&argv.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    // sparse 13.25 + 2 per iteration, dense 18 + 2
    assert!(stdout(&o).contains(&format!("speedup incl. first layer: {:.4}", 200.0 / 152.5)));
    assert!(stdout(&o).contains(&format!("speedup excl. first layer: {:.4}", 180.0 / 132.5)));
    let off = fs::read_to_string(&out).unwrap();
    assert!(off.starts_with("component,sparse_ns,dense_ns,normalized_to_dense\nfwd,50,80,"));

    let argv = args("on");
    assert_eq!(sparseconv(&argv.iter().map(String::as_str).collect::<Vec<_>>()).status.code(), Some(0));
    let on = fs::read_to_string(&out).unwrap();
    let rows = |t: &str| t.lines().map(str::to_string).collect::<Vec<_>>();
    let (off, on) = (rows(&off), rows(&on));
    assert_eq!(off[1], on[1], "fwd column must not move");
    assert_ne!(off[2], on[2]);

    fs::write(&profile, "network,layer,epoch,source,sparsity\n").unwrap();
    let argv = args("off");
    let o = sparseconv(&argv.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("profile l1"));
}

#[test]
fn dump_writes_tensor_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["verify", "--component", "bwi", "--dump", dir.path().to_str().unwrap()];
    args.extend_from_slice(SMALL);
    assert_eq!(sparseconv(&args).status.code(), Some(0));
    let mut names: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, ["custom_bwi_a.sct", "custom_bwi_b.sct", "custom_bwi_out.sct", "custom_bwi_ref.sct"]);
}
