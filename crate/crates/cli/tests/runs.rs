use std::path::Path;
use std::process::Command as Process;

use teugel_cli::{run_str, CliError, Command, RunOptions};
use teugel_core::table::{Cell, Table};

const SIMULATE: &str = "
[basis]
level = 2

[grid]
n_steps = 8

[monte_carlo]
n_paths = 2000
seed = 11

[output]
path_dump = 3
";

const BSDE: &str = "
[basis]
level = 1

[grid]
n_steps = 16

[monte_carlo]
n_paths = 4000
seed = 5

[[problem.bsde.cases]]
name = \"flat\"
terminal = { constant = [3.0] }

[[problem.bsde.cases]]
name = \"exponential\"
driver = { kind = \"linear\", beta = 0.5 }
terminal = { constant = [1.0] }
tolerance = 0.05
";

fn options(out: &Path) -> RunOptions {
    RunOptions {
        out: Some(out.to_owned()),
        ..RunOptions::default()
    }
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            (name, std::fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn same_seed_gives_identical_csv_files() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_str(Command::Simulate, SIMULATE, &options(&a)).unwrap();
    run_str(Command::Simulate, SIMULATE, &options(&b)).unwrap();
    let (fa, fb) = (csv_files(&a), csv_files(&b));
    assert!(fa.iter().any(|(n, _)| n == "paths.csv"), "{:?}", fa.iter().map(|f| &f.0).collect::<Vec<_>>());
    assert_eq!(fa, fb);
}

#[test]
fn different_seed_changes_the_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_str(Command::Simulate, SIMULATE, &options(&a)).unwrap();
    let opts = RunOptions {
        seed: Some(12),
        ..options(&b)
    };
    run_str(Command::Simulate, SIMULATE, &opts).unwrap();
    assert_ne!(
        std::fs::read(a.join("paths.csv")).unwrap(),
        std::fs::read(b.join("paths.csv")).unwrap()
    );
}

/// Parses every cell back and compares it with the in-memory table.
fn assert_round_trip(table: &Table, path: &Path) {
    let mut reader = csv::Reader::from_path(path).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(str::to_owned).collect();
    assert_eq!(header, table.columns());
    let records: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(records.len(), table.rows().len());
    for (record, row) in records.iter().zip(table.rows()) {
        for (field, cell) in record.iter().zip(row) {
            match cell {
                Cell::Real(x) => {
                    let back: f64 = field.parse().unwrap();
                    assert!(
                        back.to_bits() == x.to_bits() || (x.is_nan() && back.is_nan()),
                        "{field} != {x:e}"
                    );
                }
                Cell::Int(i) => assert_eq!(field.parse::<i64>().unwrap(), *i),
                Cell::Text(s) => assert_eq!(field, s),
            }
        }
    }
}

#[test]
fn csv_tables_round_trip_bit_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    for (command, text) in [(Command::Simulate, SIMULATE), (Command::Bsde, BSDE)] {
        let dir = tmp.path().join(command.name());
        let outcome = run_str(command, text, &options(&dir)).unwrap();
        assert!(!outcome.report.tables().is_empty());
        for (name, table) in outcome.report.tables() {
            assert_round_trip(table, &dir.join(format!("{name}.csv")));
        }
    }
}

#[test]
fn bsde_oracles_pass_and_results_index_is_written() {
    let tmp = tempfile::tempdir().unwrap();
    let outcome = run_str(Command::Bsde, BSDE, &options(tmp.path())).unwrap();
    assert!(outcome.report.passed(), "{}", outcome.report.summary());
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("results.json")).unwrap())
            .unwrap();
    assert_eq!(json["command"], "bsde");
    assert_eq!(json["passed"], true);
    let summary = std::fs::read_to_string(tmp.path().join("summary.txt")).unwrap();
    assert!(summary.contains("verdict: PASS"));
}

#[test]
fn command_without_its_problem_section_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let err = run_str(Command::Blq, SIMULATE, &options(tmp.path())).unwrap_err();
    assert!(matches!(err, CliError::Config(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn basis_scenario_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/reference_basis.toml");
    let outcome = teugel_cli::run(Command::Basis, &scenario, &options(tmp.path())).unwrap();
    assert!(outcome.report.passed(), "{}", outcome.report.summary());
    assert!(outcome.report.metric("orthonormality_residual").unwrap().value < 1e-10);
}

fn teugel(args: &[&str], config: &str, dir: &Path) -> std::process::Output {
    let path = dir.join("config.toml");
    std::fs::write(&path, config).unwrap();
    Process::new(env!("CARGO_BIN_EXE_teugel"))
        .args(args)
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap()
}

#[test]
fn binary_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();

    let ok = teugel(&["bsde"], BSDE, tmp.path());
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("verdict: PASS"));

    let bad = teugel(&["bsde", "--set", "monte_carlo.n_paths=0"], BSDE, tmp.path());
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("n_paths must be positive"));

    let unknown = teugel(&["bsde", "--set", "grid.stepz=3"], BSDE, tmp.path());
    assert_eq!(unknown.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&unknown.stderr);
    assert!(stderr.contains("stepz") && stderr.contains("grid"), "{stderr}");

    // An impossible tolerance turns the exponential oracle into a failed check.
    let strict = BSDE.replace("tolerance = 0.05", "tolerance = 1e-12");
    let failed = teugel(&["bsde"], &strict, tmp.path());
    assert_eq!(failed.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&failed.stderr);
    assert!(stderr.contains("failed check") && stderr.contains("relative_error"), "{stderr}");
}
