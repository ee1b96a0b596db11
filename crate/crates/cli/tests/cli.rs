use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn droplock(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_droplock")).args(args).output().unwrap()
}

fn droplock_stdin(args: &[&str], input: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_droplock"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn simulate_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = droplock(&["simulate", "cots_capture", "--seed", "7", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    let log = std::fs::read_to_string(dir.path().join("cots_capture.log")).unwrap();
    assert!(log.starts_with("t=0 user BUTTON\n"));
    let pgm = std::fs::read(dir.path().join("cots_capture.pgm")).unwrap();
    assert_eq!(pgm.len(), "P5\n160 160\n255\n".len() + 25_600);
}

#[test]
fn same_arguments_same_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let out = droplock(&["simulate", "poc_sequence", "--seed", "3", "--out", p(dir.path())]);
        assert_eq!(out.status.code(), Some(0));
    }
    for name in ["poc_sequence.log", "poc_sequence.pgm"] {
        assert_eq!(
            std::fs::read(a.path().join(name)).unwrap(),
            std::fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn failing_scenario_exits_one() {
    let out = droplock(&["simulate", "dfu_infection", "--require-signature"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(droplock(&["simulate", "bogus"]).status.code(), Some(2));
    assert_eq!(droplock(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(droplock(&["simulate", "cots_capture", "--uart-baud", "12345"]).status.code(), Some(2));
}

#[test]
fn legacy_package_needs_a_signature_when_required() {
    let dir = tempfile::tempdir().unwrap();
    let fw = dir.path().join("fw.bin");
    let pkg = dir.path().join("fw.dlfw");
    std::fs::write(&fw, b"stock lock firmware").unwrap();
    assert!(droplock(&["dfu", "pack", "--fw", p(&fw), "-o", p(&pkg)]).status.success());

    let out = droplock(&["dfu", "verify", "--pkg", p(&pkg)]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("accepted: true"));

    let out = droplock(&["dfu", "verify", "--pkg", p(&pkg), "--require-signature"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("reason: signature absent"), "{}", stdout(&out));
}

#[test]
fn tamper_with_and_without_crc_fixup() {
    let dir = tempfile::tempdir().unwrap();
    let fw = dir.path().join("fw.bin");
    let pkg = dir.path().join("fw.dlfw");
    let bad = dir.path().join("bad.dlfw");
    std::fs::write(&fw, vec![0x11; 256]).unwrap();
    assert!(droplock(&["dfu", "pack", "--fw", p(&fw), "-o", p(&pkg)]).status.success());

    let out = droplock(&["dfu", "tamper", "--pkg", p(&pkg), "--offset", "16", "--bytes", "deadbeef", "-o", p(&bad)]);
    assert!(out.status.success());
    let out = droplock(&["dfu", "verify", "--pkg", p(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("crc mismatch"));

    // In place, with the checksum patched up.
    let out = droplock(&["dfu", "tamper", "--pkg", p(&pkg), "--offset", "16", "--bytes", "deadbeef", "--fixup-crc"]);
    assert!(out.status.success());
    assert_eq!(droplock(&["dfu", "verify", "--pkg", p(&pkg)]).status.code(), Some(0));
}

#[test]
fn signed_package_with_trusted_key() {
    let dir = tempfile::tempdir().unwrap();
    let key = dir.path().join("vendor.key");
    let other = dir.path().join("other.key");
    let fw = dir.path().join("fw.bin");
    let pkg = dir.path().join("fw.dlfw");
    assert!(droplock(&["dfu", "keygen", "-o", p(&key)]).status.success());
    assert!(droplock(&["dfu", "keygen", "-o", p(&other)]).status.success());
    std::fs::write(&fw, b"signed firmware").unwrap();
    assert!(droplock(&["dfu", "pack", "--fw", p(&fw), "--sign", p(&key), "-o", p(&pkg)]).status.success());

    let public = dir.path().join("vendor.pub");
    let trusted = droplock(&["dfu", "verify", "--pkg", p(&pkg), "--require-signature", "--trust", p(&public)]);
    assert_eq!(trusted.status.code(), Some(0), "{}", stdout(&trusted));
    assert!(stdout(&trusted).contains("signature_valid: true"));

    let wrong = dir.path().join("other.pub");
    let untrusted = droplock(&["dfu", "verify", "--pkg", p(&pkg), "--require-signature", "--trust", p(&wrong)]);
    assert_eq!(untrusted.status.code(), Some(1));

    // Even with the CRC fixed, a patched signed package fails.
    let out = droplock(&["dfu", "tamper", "--pkg", p(&pkg), "--offset", "0", "--bytes", "00", "--fixup-crc"]);
    assert!(out.status.success());
    let out = droplock(&["dfu", "verify", "--pkg", p(&pkg), "--require-signature", "--trust", p(&public)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("reason: signature invalid"), "{}", stdout(&out));
}

#[test]
fn malformed_package_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let pkg = dir.path().join("junk.dlfw");
    std::fs::write(&pkg, b"not a package").unwrap();
    assert_eq!(droplock(&["dfu", "verify", "--pkg", p(&pkg)]).status.code(), Some(2));
}

#[test]
fn proto_round_trip() {
    let lines = "Command sid=0x00 did=0x00 cmd=0x0021 len=0 payload=\n\
                 DataResponse sid=0x01 did=0x02 cmd=0x0031 len=3 payload=0a0b0c\n";
    let encoded = droplock_stdin(&["proto", "encode"], lines);
    assert!(encoded.status.success());
    let hex = stdout(&encoded);
    assert!(hex.starts_with("aa 55 00 00 21 00 00 00"));

    let decoded = droplock_stdin(&["proto", "decode"], &hex);
    assert!(decoded.status.success());
    let text = stdout(&decoded);
    let frames: Vec<&str> = text.lines().collect();
    assert_eq!(frames.len(), 2);
    assert!(frames[0].starts_with("Command sid=0x00 did=0x00 cmd=0x0021 len=0"));
    assert!(frames[1].starts_with("DataResponse sid=0x01 did=0x02 cmd=0x0031 len=3 payload=0a0b0c"));

    // Re-encoding the decoded text gives the same bytes.
    assert_eq!(stdout(&droplock_stdin(&["proto", "encode"], &text)), hex);
}

#[test]
fn image_gen_sizes() {
    let dir = tempfile::tempdir().unwrap();
    for (res, side) in [("full", 160), ("quarter", 80)] {
        let path = dir.path().join(format!("{res}.pgm"));
        let out = droplock(&["image", "gen", "--seed", "5", "--resolution", res, "-o", p(&path)]);
        assert!(out.status.success());
        let header = format!("P5\n{side} {side}\n255\n");
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(header.as_bytes()));
        assert_eq!(bytes.len(), header.len() + side * side);
    }
}
