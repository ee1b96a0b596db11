//! Acceptance suite. Runs every criterion, prints one line each and exits
//! non-zero if any fails.

use std::cell::Cell;
use std::time::{Duration, Instant};

use droplock_core::dfu::{
    build_package, crc16, tamper_package, verify_package, DfuError, DfuRoute, FirmwareId,
    LockProvisioningState, ProtectionKind, SigningKey, TrustPolicy,
};
use droplock_core::harvest::{
    capture_image, run_scenario, Scenario, ScenarioConfig,
};
use droplock_core::protocol::{CommandWord, Frame, FrameKind, StreamParser, COMMAND_PAYLOAD_LEN, MAX_DATA_PAYLOAD};
use droplock_core::sensor::Resolution;
use droplock_core::sim::VirtualTime;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Criterion = (&'static str, fn() -> Outcome);

const WALL_LIMIT: Duration = Duration::from_secs(10);

struct Outcome {
    passed: bool,
    detail: String,
}

fn pass_if(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

fn bitwise_crc16(data: &[u8]) -> u16 {
    let mut crc: u16 = 0xFFFF;
    for &byte in data {
        crc ^= u16::from(byte) << 8;
        for _ in 0..8 {
            crc = if crc & 0x8000 != 0 { (crc << 1) ^ 0x1021 } else { crc << 1 };
        }
    }
    crc
}

fn image_sizes() -> Outcome {
    let (full, _) = capture_image(&ScenarioConfig::default());
    let (quarter, _) = capture_image(&ScenarioConfig {
        resolution: Resolution::Quarter,
        ..ScenarioConfig::default()
    });
    let full = full.map(|i| i.pixels().len());
    let quarter = quarter.map(|i| i.pixels().len());
    pass_if(
        full == Ok(25_600) && quarter == Ok(6_400),
        format!("full {full:?} bytes, quarter {quarter:?} bytes"),
    )
}

fn cots_report() -> droplock_core::harvest::ScenarioReport {
    run_scenario(Scenario::CotsCapture, &ScenarioConfig::default(), None).expect("known scenario")
}

fn upload_duration() -> Outcome {
    let stats = cots_report().stats.expect("capture stats");
    let secs = stats.duration.as_secs_f64();
    pass_if(
        (27.0 * 0.85..=27.0 * 1.15).contains(&secs),
        format!("{secs:.3} s (27 s +/- 15%)"),
    )
}

fn throughput() -> Outcome {
    let stats = cots_report().stats.expect("capture stats");
    let kbps = stats.effective_kbps();
    // Independent recomputation from the raw counters.
    let check = stats.bytes_received as f64 * 8.0 / stats.duration.as_secs_f64() / 1000.0;
    pass_if(
        (7.5 * 0.9..=7.5 * 1.1).contains(&kbps) && (kbps - check).abs() < 1e-9,
        format!("{kbps:.3} kbps (7.5 kbps +/- 10%)"),
    )
}

fn uart_timing() -> Outcome {
    let report = run_scenario(Scenario::Overflow115200, &ScenarioConfig::default(), None)
        .expect("known scenario");
    let m = report.metrics;
    let (Some(start), Some(end)) = (m.image_tx_start, m.image_tx_end) else {
        return pass_if(false, "no image transfer observed");
    };
    let secs = end.saturating_sub(start).as_secs_f64();
    let oracle = m.image_tx_bytes as f64 * 10.0 / 115_200.0;
    pass_if(
        (2.0..=2.5).contains(&secs) && (secs - oracle).abs() < 1e-5,
        format!("{} bytes in {secs:.4} s (oracle {oracle:.4} s)", m.image_tx_bytes),
    )
}

fn downshift_necessity() -> Outcome {
    let bad = run_scenario(Scenario::Overflow115200, &ScenarioConfig::default(), None)
        .expect("known scenario");
    let m = &bad.metrics;
    let lag = match (m.image_tx_start, m.first_overflow_at) {
        (Some(s), Some(o)) => Some(o.saturating_sub(s)),
        _ => None,
    };
    let failures = bad.stats.map_or(0, |s| s.checksum_failures);
    let overflow_ok = m.overflow_events >= 1
        && lag.is_some_and(|l| l <= VirtualTime::from_millis(250))
        && failures >= 1;

    let good = cots_report();
    let g = &good.metrics;
    let clean_ok = g.overflow_events == 0 && g.ring_high_watermark < 1_024;
    pass_if(
        overflow_ok && clean_ok,
        format!(
            "115200: first overflow {:.3} s after data start, {failures} checksum failure(s); \
             9600: {} overflows, watermark {} B",
            lag.map_or(f64::NAN, VirtualTime::as_secs_f64),
            g.overflow_events,
            g.ring_high_watermark
        ),
    )
}

fn poc_timings() -> Outcome {
    let idle = run_scenario(
        Scenario::PocSequence,
        &ScenarioConfig {
            finger_at: None,
            ..ScenarioConfig::default()
        },
        None,
    )
    .expect("known scenario");
    let actuate = idle.log.first_of_kind("ACTUATE").map(|e| e.at.as_micros());
    let finger = run_scenario(Scenario::PocSequence, &ScenarioConfig::default(), None)
        .expect("known scenario");
    let captured = finger.log.first_of_kind("CAPTURED").map(|e| e.at.as_micros());
    let closed = finger.log.first_of_kind("WINDOW_CLOSE").map(|e| e.at.as_micros());
    let fetched = finger.log.first_of_kind("FETCH").map(|e| e.at.as_micros());
    let window = captured.zip(closed).map(|(c, w)| w - c);
    let fetch_inside = match (captured, fetched, closed) {
        (Some(c), Some(f), Some(w)) => c <= f && f < w,
        _ => false,
    };
    pass_if(
        actuate == Some(60_000_000) && window == Some(30_000_000) && fetch_inside,
        format!("idle ACTUATE at {actuate:?} us, window {window:?} us, fetch inside: {fetch_inside}"),
    )
}

fn dfu_chain() -> Outcome {
    let mut fresh = LockProvisioningState::factory();
    let route = DfuRoute::BeforeRegistration {
        serial: b"SN-000042".to_vec(),
        key: b"chosen-by-attacker".to_vec(),
    };
    let activated = fresh.activate_dfu(&route).is_ok() && fresh.dfu_mode();
    let pkg = build_package(b"droplock bridge image", ProtectionKind::LegacyCrc, None, "x", "1")
        .expect("legacy build");
    let flashed = match fresh.flash(&pkg, &TrustPolicy::accept_legacy()) {
        Ok(pending) => {
            let minute = pending.duration == VirtualTime::from_secs(60);
            fresh.finish_flash(pending);
            minute && fresh.firmware_id() == FirmwareId::Droplock
        }
        Err(_) => false,
    };
    let mut owned = LockProvisioningState::registered(b"SN-1", b"owner");
    let refused = owned.activate_dfu(&route) == Err(DfuError::AlreadyRegistered);

    let report = run_scenario(Scenario::DfuInfection, &ScenarioConfig::default(), None)
        .expect("known scenario");
    let simulated = report.passed
        && report.metrics.flash_completed_at == Some(VirtualTime::from_secs(60))
        && report.metrics.firmware == Some(FirmwareId::Droplock);
    pass_if(
        activated && flashed && refused && simulated,
        format!(
            "activate {activated}, flash+60s {flashed}, registered refused {refused}, \
             scenario chain {simulated}"
        ),
    )
}

fn crc_and_signatures() -> Outcome {
    let check_value = crc16(b"123456789") == 0x29B1 && bitwise_crc16(b"123456789") == 0x29B1;
    let key = SigningKey::from_bytes(&[7u8; 32]);
    let policy = TrustPolicy::require_signature(vec![key.verifying_key()]);
    let strategy = prop::collection::vec(any::<u8>(), 1..2_048).prop_flat_map(|fw| {
        let len = fw.len();
        (Just(fw), 0..len, prop::collection::vec(any::<u8>(), 1..32))
    });
    let cases = Cell::new(0u32);
    let result = runner(1_000).run(&strategy, |(fw, offset, mut patch)| {
        patch.truncate(fw.len() - offset);
        // Ensure the patch actually changes something.
        if fw[offset..offset + patch.len()] == patch[..] {
            patch[0] = !patch[0];
        }
        cases.set(cases.get() + 1);
        let legacy = build_package(&fw, ProtectionKind::LegacyCrc, None, "x", "1").unwrap();
        let evil = tamper_package(&legacy, offset, &patch, true).unwrap();
        prop_assert!(verify_package(&evil, &TrustPolicy::accept_legacy()).accepted);
        let signed = build_package(&fw, ProtectionKind::Signed, Some(&key), "x", "1").unwrap();
        let evil = tamper_package(&signed, offset, &patch, true).unwrap();
        prop_assert!(!verify_package(&evil, &policy).accepted);
        Ok(())
    });
    pass_if(
        check_value && result.is_ok() && cases.get() >= 1_000,
        format!(
            "crc16(\"123456789\") = 0x{:04X}; {} (firmware, patch) pairs: {}",
            crc16(b"123456789"),
            cases.get(),
            result.map_or_else(|e| e.to_string(), |()| "all legacy accepted, all signed rejected".into())
        ),
    )
}

fn random_frame(rng: &mut ChaCha8Rng) -> Frame {
    let kind = FrameKind::ALL[rng.gen_range(0..4)];
    let len = if kind.is_data() {
        rng.gen_range(1..=MAX_DATA_PAYLOAD)
    } else {
        rng.gen_range(0..=COMMAND_PAYLOAD_LEN)
    };
    let payload: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
    Frame::new(kind, rng.gen(), rng.gen(), CommandWord(rng.gen()), &payload).unwrap()
}

fn codec() -> Outcome {
    let frame = (0usize..4, any::<u8>(), any::<u8>(), any::<u16>())
        .prop_flat_map(|(k, sid, did, cmd)| {
            let kind = FrameKind::ALL[k];
            let len = if kind.is_data() { 1..=MAX_DATA_PAYLOAD } else { 0..=COMMAND_PAYLOAD_LEN };
            prop::collection::vec(any::<u8>(), len)
                .prop_map(move |p| Frame::new(kind, sid, did, CommandWord(cmd), &p).unwrap())
        });
    let strategy = (prop::collection::vec(frame, 1..4), prop::collection::vec(any::<usize>(), 0..30));
    let cases = Cell::new(0u32);
    let frames_seen = Cell::new(0usize);
    let round_trip = runner(10_000).run(&strategy, |(frames, cuts)| {
        cases.set(cases.get() + 1);
        frames_seen.set(frames_seen.get() + frames.len());
        let stream: Vec<u8> = frames.iter().flat_map(Frame::encode).collect();
        let mut points: Vec<usize> = cuts.iter().map(|c| c % (stream.len() + 1)).collect();
        points.sort_unstable();
        let mut parser = StreamParser::new();
        let mut got = Vec::new();
        let mut last = 0;
        for p in points.into_iter().chain([stream.len()]) {
            got.extend(parser.push(&stream[last..p]));
            last = p;
        }
        prop_assert_eq!(got, frames);
        Ok(())
    });

    // Every single-byte corruption after the prefix, inside a stream with
    // intact neighbours: only the neighbours may come out.
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    let mut corruptions = 0usize;
    let mut leaks = 0usize;
    for _ in 0..300 {
        let (before, target, after) = (random_frame(&mut rng), random_frame(&mut rng), random_frame(&mut rng));
        let encoded = target.encode();
        for pos in 2..encoded.len() {
            let mut bad = encoded.clone();
            bad[pos] ^= rng.gen_range(1..=255u8);
            let mut stream = before.encode();
            stream.extend(&bad);
            stream.extend(after.encode());
            stream.extend([0u8; MAX_DATA_PAYLOAD + 10]);
            let got = StreamParser::new().push(&stream);
            corruptions += 1;
            if got.iter().any(|f| *f != before && *f != after) || got.first() != Some(&before) {
                leaks += 1;
            }
        }
    }
    let rt_ok = round_trip.is_ok() && cases.get() >= 10_000;
    pass_if(
        rt_ok && leaks == 0,
        format!(
            "{} cases / {} frames round-tripped: {}; {corruptions} corruptions, {leaks} leaked",
            cases.get(),
            frames_seen.get(),
            round_trip.map_or_else(|e| e.to_string(), |()| "exact".into())
        ),
    )
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().expect("tempdir");
    let b = tempfile::tempdir().expect("tempdir");
    let config = ScenarioConfig {
        seed: 7,
        ..ScenarioConfig::default()
    };
    let mut compared = 0;
    let mut logs = 0;
    let mut mismatched = Vec::new();
    for sc in Scenario::ALL {
        let ra = run_scenario(sc, &config, Some(a.path())).expect("run");
        let rb = run_scenario(sc, &config, Some(b.path())).expect("run");
        for (pa, pb) in ra.artifacts.iter().zip(&rb.artifacts) {
            compared += 1;
            logs += usize::from(pa.extension().is_some_and(|e| e == "log"));
            if std::fs::read(pa).ok() != std::fs::read(pb).ok() {
                mismatched.push(pa.file_name().unwrap().to_string_lossy().into_owned());
            }
        }
        if ra.artifacts.len() != rb.artifacts.len() || ra.log.to_text() != rb.log.to_text() {
            mismatched.push(sc.to_string());
        }
    }
    pass_if(
        mismatched.is_empty() && logs == Scenario::ALL.len(),
        format!("{compared} files compared, mismatched: {mismatched:?}"),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("image-size fidelity", image_sizes),
        ("upload duration", upload_duration),
        ("throughput", throughput),
        ("sensor-to-bridge timing", uart_timing),
        ("downshift necessity", downshift_necessity),
        ("PoC sequence timings", poc_timings),
        ("DFU chain", dfu_chain),
        ("CRC insufficiency / signature sufficiency", crc_and_signatures),
        ("codec round-trip", codec),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let passed = outcome.passed && elapsed < WALL_LIMIT;
        if !passed {
            failed += 1;
        }
        println!(
            "criterion {:>2} {}: {} {} [{:.2} s wall]",
            i + 1,
            name,
            if passed { "PASS" } else { "FAIL" },
            outcome.detail,
            elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
