use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mindep::oracle::{ar1_covariance, sample_marginal, sample_normal};
use mindep::stats::{chi_square_gof, correlation, ks_test};
use mindep::{seed, ColumnKind, MarginalSpec, ParametricFamily, Value};
use serde_json::Value as Json;
use statrs::distribution::{Beta, ContinuousCDF};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/v1")
}

fn mindep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mindep"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_config(config: &Path, args: &[&str]) -> Output {
    let mut all = vec!["--config", config.to_str().unwrap(), "--no-timestamp"];
    all.extend_from_slice(args);
    mindep(&all)
}

fn json(out: &Output) -> Json {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "{e}: stdout {:?} stderr {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const TWO_CONTINUOUS: &str = r#"
seed = 5
data = "data.csv"
h = ["x1*x2"]
[[columns]]
name = "x1"
kind = "continuous"
[[columns]]
name = "x2"
kind = "continuous"
"#;

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, rest: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if rest.is_empty() {
            out.push(prefix.clone());
        }
        for i in 0..rest.len() {
            let v = rest.remove(i);
            prefix.push(v);
            rec(prefix, rest, out);
            prefix.pop();
            rest.insert(i, v);
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut (0..n).collect(), &mut out);
    out
}

#[test]
fn four_row_exact_fit_matches_hand_enumeration() {
    let out = run_config(&fixtures().join("fit_four_rows_exact.toml"), &["fit"]);
    assert_eq!(out.status.code(), Some(0));
    let r = json(&out);
    // x1 quantified as a=0, b=1, c=2; x2 as observed.
    let x1 = [2.0, 2.0, 1.0, 0.0];
    let x2 = [2.0, 1.0, 2.0, 1.0];
    let h_obs: f64 = x1.iter().zip(&x2).map(|(a, b)| a * b).sum();
    let hs: Vec<f64> = permutations(4)
        .iter()
        .map(|p| (0..4).map(|t| x1[t] * x2[p[t]]).sum())
        .collect();
    let moments = |th: f64| {
        let w: Vec<f64> = hs.iter().map(|h| (th * h).exp()).collect();
        let z: f64 = w.iter().sum();
        let m = hs.iter().zip(&w).map(|(h, w)| h * w).sum::<f64>() / z;
        let v = hs.iter().zip(&w).map(|(h, w)| (h - m).powi(2) * w).sum::<f64>() / z;
        (z, m, v)
    };
    let mut th = 0.0;
    for _ in 0..100 {
        let (_, m, v) = moments(th);
        th += (h_obs - m) / v;
    }
    let (z, _, v) = moments(th);
    let loglik = th * h_obs - z.ln();
    let got = r["theta_hat"][0].as_f64().unwrap();
    assert!((got - th).abs() < 1e-8, "{got} vs {th}");
    let ll = r["loglik"]["value"].as_f64().unwrap();
    assert!((ll - loglik).abs() < 1e-9, "{ll} vs {loglik}");
    assert_eq!(r["loglik"]["exact"], Json::Bool(true));
    let se = r["std_errors"][0].as_f64().unwrap();
    assert!((se - 1.0 / v.sqrt()).abs() < 1e-8);
    let aic = r["aic"].as_f64().unwrap();
    assert!((aic - (2.0 - 2.0 * loglik)).abs() < 1e-9);
    assert!(r["tests"][0]["p_value"].as_f64().unwrap() > 0.0);
    assert!(r["provenance"]["version"].as_str().unwrap().starts_with(env!("CARGO_PKG_VERSION")));
}

#[test]
fn ragged_row_exits_2_with_row_number() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "data.csv", "x1,x2\n1,2\n3,4\n5\n7,8\n");
    let cfg = write(dir.path(), "c.toml", TWO_CONTINUOUS);
    let out = run_config(&cfg, &["fit"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("row 4"), "{err}");
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "data.csv", "x1,x3\n1,2\n3,4\n");
    let cfg = write(dir.path(), "c.toml", TWO_CONTINUOUS);
    // missing column
    assert_eq!(run_config(&cfg, &["fit"]).status.code(), Some(2));
    // missing seed
    write(dir.path(), "data.csv", "x1,x2\n1,2\n3,4\n2,1\n");
    let noseed = write(dir.path(), "n.toml", &TWO_CONTINUOUS.replace("seed = 5", ""));
    let out = run_config(&noseed, &["fit"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
    // ... which --seed supplies
    assert_eq!(run_config(&noseed, &["--seed", "5", "fit"]).status.code(), Some(0));
    // bad statistic
    let badh = write(dir.path(), "h.toml", &TWO_CONTINUOUS.replace("x1*x2", "x1*x9"));
    assert_eq!(run_config(&badh, &["fit"]).status.code(), Some(2));
    // unknown key
    let typo = write(dir.path(), "t.toml", &format!("sede = 1\n{TWO_CONTINUOUS}"));
    assert_eq!(run_config(&typo, &["fit"]).status.code(), Some(2));
    let typo = write(dir.path(), "t.toml", &format!("{TWO_CONTINUOUS}\nlevls = [\"a\"]\n"));
    assert_eq!(run_config(&typo, &["fit"]).status.code(), Some(2));
    // unsamplable marginal
    let sample = write(
        dir.path(),
        "s.toml",
        &format!(
            "{TWO_CONTINUOUS}\n[sample]\ntheta = [0.0]\nn = 10\nmarginals = [{{ type = \"parametric\", family = \"normal\", mean = 0.0, variance = -1.0 }}, {{ type = \"empirical\" }}]\n"
        ),
    );
    assert_eq!(run_config(&sample, &["sample"]).status.code(), Some(2));
}

#[test]
fn boundary_data_exit_3_with_certificate() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "data.csv", "x1,x2\n1,1\n2,2\n3,3\n4,5\n");
    let cfg = write(dir.path(), "c.toml", TWO_CONTINUOUS);
    let out = run_config(&cfg, &["fit"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("separating direction"), "{err}");
    let ple = write(dir.path(), "p.toml", &format!("method = \"ple\"\n{TWO_CONTINUOUS}"));
    let out = run_config(&ple, &["fit"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[1.0]"));
}

#[test]
fn non_convergence_exit_4_still_reports() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "data.csv",
        "x1,x2\n1,2\n2,1\n3,3\n4,5\n5,4\n6,6\n7,9\n8,7\n9,8\n10,10\n",
    );
    let cfg = write(dir.path(), "c.toml", &format!("{TWO_CONTINUOUS}\n[fit]\nmax_iter = 0\n"));
    let out = run_config(&cfg, &["fit"]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(json(&out)["converged"], Json::Bool(false));

    let bounds = write(
        dir.path(),
        "b.toml",
        "[bounds]\ntol = 1e-300\n[[bounds.settings]]\nmarginals = [{ type = \"parametric\", family = \"poisson\", rate = 1.0 }, { type = \"parametric\", family = \"poisson\", rate = 2.0 }]\n",
    );
    assert_eq!(run_config(&bounds, &["bounds"]).status.code(), Some(4));
}

#[test]
fn penguins_style_fit_reports_every_pair() {
    // Four AR(1) continuous columns and an independent binary one: the
    // precision matrix is tridiagonal, so θ for (x3, x4) is positive.
    let dir = tempfile::tempdir().unwrap();
    let n = 120;
    let mut rng = seed::rng(99);
    let rows = sample_normal(&ar1_covariance(4, 0.6), n, &mut rng).unwrap();
    let sex = sample_marginal(
        &MarginalSpec::Parametric(ParametricFamily::Bernoulli { p: 0.5 }),
        &ColumnKind::categorical(["female", "male"]),
        4,
        n,
        &mut rng,
    )
    .unwrap();
    let mut csv = String::from("bill_length,bill_depth,flipper_length,body_mass,sex\n");
    for (r, s) in rows.iter().zip(&sex) {
        let level = if *s == Value::Level(1) { "male" } else { "female" };
        csv += &format!("{},{},{},{},{level}\n", r[0], r[1], r[2], r[3]);
    }
    write(dir.path(), "penguins.csv", &csv);
    let mut h = Vec::new();
    for a in 1..=5 {
        for b in a + 1..=5 {
            h.push(format!("\"x{a}*x{b}\""));
        }
    }
    let mut cfg = format!("seed = 3\ndata = \"penguins.csv\"\nh = [{}]\n", h.join(", "));
    for name in ["bill_length", "bill_depth", "flipper_length", "body_mass"] {
        cfg += &format!("[[columns]]\nname = \"{name}\"\nkind = \"continuous\"\n");
    }
    cfg += "[[columns]]\nname = \"sex\"\nkind = \"categorical\"\nlevels = [\"female\", \"male\"]\nquantified = true\n";
    let path = write(dir.path(), "c.toml", &cfg);
    let out = run_config(&path, &["fit"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&out);
    let labels: Vec<&str> = r["labels"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(labels.len(), 10);
    assert_eq!(r["std_errors"].as_array().unwrap().len(), 10);
    assert_eq!(r["tests"].as_array().unwrap().len(), 10);
    let j = labels.iter().position(|l| *l == "x3 * x4").unwrap();
    let theta = r["theta_hat"][j].as_f64().unwrap();
    let se = r["std_errors"][j].as_f64().unwrap();
    assert!(theta > 2.0 * se, "θ₃₄ = {theta} (s.e. {se})");
    let ll = &r["loglik"];
    assert_eq!(ll["exact"], Json::Bool(false));
    assert!(ll["se"].as_f64().unwrap() > 0.0);
    assert!(r["aic"].as_f64().unwrap().is_finite());
}

fn read_csv(bytes: &[u8]) -> Vec<Vec<f64>> {
    let mut rdr = csv::Reader::from_reader(bytes);
    rdr.records()
        .map(|r| r.unwrap().iter().map(|c| c.parse::<f64>().unwrap()).collect())
        .collect()
}

#[test]
fn sample_at_zero_keeps_the_marginals() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(fixtures().join("fig1_theta0.toml")).unwrap();
    let cfg = write(dir.path(), "c.toml", &text.replace("n = 1000", "n = 400"));
    let out = run_config(&cfg, &["sample"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(out.stdout.starts_with(b"x1,x2\n"));
    let rows = read_csv(&out.stdout);
    assert_eq!(rows.len(), 400);
    let beta = Beta::new(10.0, 10.0).unwrap();
    let (_, p) = ks_test(&rows.iter().map(|r| r[0]).collect::<Vec<_>>(), |x| beta.cdf(x));
    assert!(p > 0.01, "KS p = {p}");
    // Poisson(3) with the tail from 8 pooled.
    let mut counts = [0u64; 9];
    for r in &rows {
        counts[(r[1] as usize).min(8)] += 1;
    }
    let mut pmf: Vec<f64> = (0..8)
        .scan(1.0, |f, k| {
            if k > 0 {
                *f *= k as f64;
            }
            Some((-3.0f64).exp() * 3.0f64.powi(k) / *f)
        })
        .collect();
    pmf.push(1.0 - pmf.iter().sum::<f64>());
    let expected: Vec<f64> = pmf.iter().map(|p| p * 400.0).collect();
    let (_, p) = chi_square_gof(&counts, &expected);
    assert!(p > 0.01, "χ² p = {p}");
}

#[test]
fn large_theta_flips_the_association() {
    let corr = |name: &str| {
        let out = run_config(&fixtures().join(name), &["sample"]);
        assert_eq!(out.status.code(), Some(0));
        let rows = read_csv(&out.stdout);
        let x: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        let y: Vec<f64> = rows.iter().map(|r| r[1]).collect();
        correlation(&x, &y)
    };
    let c0 = corr("fig1_theta0.toml");
    let c100 = corr("fig1_theta100.toml");
    assert!(c0.abs() < 0.1, "θ=0: {c0}");
    assert!(c100 < -0.3, "θ=100: {c100}");
}

#[test]
fn bounds_reproduce_the_poisson_table() {
    let start = std::time::Instant::now();
    let out = run_config(&fixtures().join("table1_bounds.toml"), &["bounds"]);
    assert!(start.elapsed().as_secs_f64() < 10.0);
    assert_eq!(out.status.code(), Some(0));
    let r = json(&out);
    let upper = [0.82, 0.87, 0.99, 0.94, 0.93];
    let lower = [-0.50, -0.67, -0.74, -0.81, -0.87];
    let rows = r["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 5);
    for (k, row) in rows.iter().enumerate() {
        assert!((row["upper"].as_f64().unwrap() - upper[k]).abs() <= 0.02);
        assert!((row["lower"].as_f64().unwrap() - lower[k]).abs() <= 0.02);
        assert_eq!(row["support_sizes"], serde_json::json!([21, 21]));
    }
    assert_eq!(r["truncation"], 20);
    assert_eq!(r["probe"], 10.0);
}

#[test]
fn two_point_symmetric_bounds_approach_unity() {
    // For symmetric two-point marginals the odds ratio is e^θ and the
    // correlation is tanh(θ/4).
    let dir = tempfile::tempdir().unwrap();
    for probe in [10.0f64, 20.0] {
        let cfg = write(
            dir.path(),
            "c.toml",
            &format!("[bounds]\nprobe = {probe:?}\n[[bounds.settings]]\nmarginals = [{{ type = \"finite_table\", support = [0.0, 1.0], probabilities = [0.5, 0.5] }}, {{ type = \"parametric\", family = \"bernoulli\", p = 0.5 }}]\n"),
        );
        let out = run_config(&cfg, &["bounds"]);
        assert_eq!(out.status.code(), Some(0));
        let row = &json(&out)["rows"][0];
        let (lo, hi) = (row["lower"].as_f64().unwrap(), row["upper"].as_f64().unwrap());
        let exact = (probe / 4.0).tanh();
        assert!((hi - exact).abs() < 1e-7 && (lo + exact).abs() < 1e-7, "{lo} {hi} vs ±{exact}");
    }
}

#[test]
fn simulate_unknown_scenario_and_single_rep() {
    let out = mindep(&["--seed", "1", "simulate", "--scenario", "table99"]);
    assert_eq!(out.status.code(), Some(2));
    let out = mindep(&[
        "--seed",
        "1",
        "--no-timestamp",
        "simulate",
        "--scenario",
        "mixed_table7",
        "--reps",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let r = json(&out);
    for est in r["results"][0]["estimators"].as_array().unwrap() {
        assert_eq!(est["components"][0]["sd"]["value"], Json::Null);
        assert!(est.get("median_seconds").unwrap().is_null());
    }
    assert!(String::from_utf8_lossy(&out.stderr).contains("NA"));
    assert!(r.get("timestamp").is_none());
}

#[test]
fn timestamp_is_optional() {
    let with = mindep(&[
        "--config",
        fixtures().join("table1_bounds.toml").to_str().unwrap(),
        "bounds",
    ]);
    assert!(json(&with)["timestamp"].as_u64().unwrap() > 1_600_000_000);
}

#[test]
fn output_flag_writes_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("r.json");
    let out = run_config(
        &fixtures().join("table1_bounds.toml"),
        &["--output", target.to_str().unwrap(), "bounds"],
    );
    assert_eq!(out.status.code(), Some(0));
    assert!(out.stdout.is_empty());
    let r: Json = serde_json::from_slice(&std::fs::read(target).unwrap()).unwrap();
    assert_eq!(r["command"], "bounds");
}

#[test]
fn every_fixture_parses() {
    let mut seen = 0;
    for entry in std::fs::read_dir(fixtures()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            mindep_cli::config::RunConfig::load(&path)
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 9);
}
