//! CLI-level behavior: exit codes, diagnostics routing, and the replayable
//! `once --dry-run` golden output.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use abms::simulator::{generate_log, seed_config, Scenario};

fn abms_bin() -> &'static str {
    env!("CARGO_BIN_EXE_abms")
}

fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn run(args: &[&str]) -> Output {
    Command::new(abms_bin()).args(args).output().unwrap()
}

/// Fifteen frozen event lines for the bundled scenario, replayed from its
/// seeded starting bandwidths under a pinned clock.
const GOLDEN: &str = "\
[02/20/2017 11:25:05] 172.16.5.20 increased from 512Kbps to 922Kbps.
[02/20/2017 11:25:05] 172.16.5.21 increased from 512Kbps to 725Kbps.
[02/20/2017 11:25:05] 172.16.5.22 increased from 512Kbps to 768Kbps.
[02/20/2017 11:25:05] 172.16.5.23 increased from 512Kbps to 951Kbps.
[02/20/2017 11:25:05] 172.16.5.24 increased from 512Kbps to 751Kbps.
[02/20/2017 11:25:05] 172.16.5.25 decreased from 768Kbps to 512Kbps.
[02/20/2017 11:25:05] 172.16.5.26 decreased from 811Kbps to 585Kbps.
[02/20/2017 11:25:05] 172.16.5.27 increased from 512Kbps to 768Kbps.
[02/20/2017 11:25:05] 172.16.5.28 decreased from 768Kbps to 512Kbps.
[02/20/2017 11:25:05] 172.16.5.29 increased from 645Kbps to 896Kbps.
[02/20/2017 11:25:05] 172.16.5.30 decreased from 768Kbps to 723Kbps.
[02/20/2017 11:25:05] 172.16.5.31 increased from 512Kbps to 768Kbps.
[02/20/2017 11:25:05] 172.16.5.32 increased from 640Kbps to 973Kbps.
[02/20/2017 11:25:05] 172.16.5.33 decreased from 1024Kbps to 622Kbps.
[02/20/2017 11:25:05] 172.16.5.34 increased from 512Kbps to 683Kbps.
";

#[test]
fn once_dry_run_replays_the_golden_output() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = Scenario::load(&fixtures_dir().join("table2.scenario")).unwrap();
    let log = dir.path().join("access.log");
    let config = dir.path().join("config.xml");
    std::fs::write(&log, generate_log(&scenario).unwrap()).unwrap();
    std::fs::write(&config, seed_config(&scenario, 512)).unwrap();
    let config_before = std::fs::read(&config).unwrap();

    let categories = fixtures_dir().join("shallalist-educational.txt");
    let args = [
        "--log",
        log.to_str().unwrap(),
        "--categories",
        categories.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--bw-min",
        "512",
        "--fixed-clock",
        "2017-02-20T11:25:05",
        "--dry-run",
        "once",
    ];
    let output = run(&args);
    assert!(output.status.success());
    assert_eq!(String::from_utf8_lossy(&output.stdout), GOLDEN);

    // Dry run: neither the config nor the log was touched.
    assert_eq!(std::fs::read(&config).unwrap(), config_before);
    assert!(std::fs::metadata(&log).unwrap().len() > 0);

    // Determinism: identical inputs and clock give byte-identical output.
    std::fs::write(&log, generate_log(&scenario).unwrap()).unwrap();
    let again = run(&args);
    assert_eq!(output.stdout, again.stdout);
}

#[test]
fn once_without_dry_run_rewrites_the_config_and_truncates() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = Scenario::load(&fixtures_dir().join("table2.scenario")).unwrap();
    let log = dir.path().join("access.log");
    let config = dir.path().join("config.xml");
    std::fs::write(&log, generate_log(&scenario).unwrap()).unwrap();
    std::fs::write(&config, seed_config(&scenario, 512)).unwrap();

    let output = run(&[
        "--log",
        log.to_str().unwrap(),
        "--categories",
        fixtures_dir()
            .join("shallalist-educational.txt")
            .to_str()
            .unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--bw-min",
        "512",
        "--fixed-clock",
        "2017-02-20T11:25:05",
        "once",
    ]);
    assert!(output.status.success());
    assert_eq!(String::from_utf8_lossy(&output.stdout), GOLDEN);

    let written = std::fs::read_to_string(&config).unwrap();
    assert!(written.contains("<bw_down>922</bw_down>"));
    assert!(written.contains("<bw_down>973</bw_down>"));
    // Fully consumed log is emptied, and a backup of the config exists.
    assert_eq!(std::fs::metadata(&log).unwrap().len(), 0);
    let backups = std::fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .contains(".bak.")
        })
        .count();
    assert_eq!(backups, 1);
}

#[test]
fn missing_category_file_fails_startup() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.xml");
    std::fs::write(&config, "<x></x>").unwrap();
    let log = dir.path().join("access.log");
    std::fs::write(&log, "").unwrap();

    let output = run(&[
        "--log",
        log.to_str().unwrap(),
        "--categories",
        dir.path().join("no-such-file.txt").to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--bw-min",
        "512",
        "once",
    ]);
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("category file"));
}

#[test]
fn missing_policy_fails_startup() {
    let output = run(&["once"]);
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("--bw-min"));
}

#[test]
fn usage_errors_exit_one() {
    let unknown_flag = run(&["--frobnicate", "once"]);
    assert_eq!(unknown_flag.status.code(), Some(1));

    // --bw-min conflicts with --tbi/--enu.
    let conflict = run(&["--bw-min", "512", "--tbi", "51200", "--enu", "100", "once"]);
    assert_eq!(conflict.status.code(), Some(1));

    let help = run(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
}

#[test]
fn tbi_enu_derives_the_floor() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("access.log");
    let config = dir.path().join("config.xml");
    let categories = dir.path().join("categories.txt");
    std::fs::write(&log, "").unwrap();
    std::fs::write(&categories, "cornell.edu\n").unwrap();
    // 700 Kbps is above the 2 x 256 ceiling from 25600/100; sanitization
    // pulls the entry back to the derived floor at startup.
    std::fs::write(
        &config,
        "<allowedip><ip>172.16.5.20</ip><sn>32</sn><descr><![CDATA[U]]></descr><bw_up>700</bw_up><bw_down>700</bw_down></allowedip>",
    )
    .unwrap();

    let output = run(&[
        "--log",
        log.to_str().unwrap(),
        "--categories",
        categories.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--tbi",
        "25600",
        "--enu",
        "100",
        "--fixed-clock",
        "2017-02-20T11:25:05",
        "once",
    ]);
    assert!(output.status.success());
    assert_eq!(
        String::from_utf8_lossy(&output.stdout),
        "[02/20/2017 11:25:05] 172.16.5.20 decreased from 700Kbps to 256Kbps.\n"
    );
}

#[test]
fn check_config_validates_the_fragment() {
    let ok = run(&[
        "--config",
        fixtures_dir().join("config-fragment.xml").to_str().unwrap(),
        "check-config",
    ]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("2 allowedip entries"));

    let dir = tempfile::tempdir().unwrap();
    let broken = dir.path().join("broken.xml");
    std::fs::write(&broken, "<allowedip><ip>1.2.3.4</ip>").unwrap();
    let bad = run(&["--config", broken.to_str().unwrap(), "check-config"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn simulate_prints_report_to_stdout_by_default() {
    let output = run(&[
        "--categories",
        fixtures_dir()
            .join("shallalist-educational.txt")
            .to_str()
            .unwrap(),
        "simulate",
        "--scenario",
        fixtures_dir().join("table2.scenario").to_str().unwrap(),
    ]);
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("matched 15/15"));
    // Event lines precede the report table.
    assert!(stdout.contains("increased from 512Kbps to 922Kbps."));
}
