use std::collections::HashMap;
use std::sync::Barrier;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use elogcov_core::elog::{decode_all, Block, PREAMBLE_SIZE};
use elogcov_harness::oracle::{counts_from_blocks, Segment};
use elogcov_harness::{mock_host_run, HarnessError, MockCall, MockHost};

fn args(dir: &tempfile::TempDir, extra: &str) -> (String, std::path::PathBuf) {
    let out = dir.path().join("run.elog");
    (format!("out={},{extra}", out.display()), out)
}

fn translate(tb: u32, vaddr: u64, sizes: &[u64]) -> MockCall {
    MockCall::Translate { tb, vaddr, insn_sizes: sizes.to_vec() }
}

fn exec(tb: u32, vcpu: u32) -> MockCall {
    MockCall::Exec { tb, vcpu }
}

#[test]
fn three_executions_of_one_block() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _) = args(&dir, "capacity=8");
    let run =
        mock_host_run(&[translate(1, 0x1000, &[4, 4, 4, 4]), exec(1, 0), exec(1, 0), exec(1, 0), MockCall::Exit], &a)
            .unwrap();
    assert_eq!(run.observed, vec![Segment { start: 0x1000, end: 0x1010, count: 3 }]);
    assert!(run.matches_oracle());
    assert_eq!(run.result.stats.events_recorded, 3);
    assert_eq!(run.summary.dropped, 0);
}

#[test]
fn exec_before_translate_is_rejected_before_loading() {
    let dir = tempfile::tempdir().unwrap();
    let (a, out) = args(&dir, "");
    let err = mock_host_run(&[exec(1, 0), MockCall::Exit], &a).unwrap_err();
    assert!(matches!(err, HarnessError::Script(_)));
    assert!(!out.exists());
}

#[test]
fn no_events_gives_preamble_only_file() {
    let dir = tempfile::tempdir().unwrap();
    let (a, out) = args(&dir, "");
    let run = mock_host_run(&[translate(1, 0x1000, &[4]), MockCall::Exit], &a).unwrap();
    assert_eq!(run.result.file_bytes, PREAMBLE_SIZE);
    assert_eq!(std::fs::metadata(out).unwrap().len(), 124);
}

#[test]
fn two_units_write_frames_with_their_ids() {
    let dir = tempfile::tempdir().unwrap();
    let (a, out) = args(&dir, "capacity=4,merge=off");
    let mut script = vec![translate(1, 0x1000, &[4, 4]), translate(2, 0x2000, &[2, 2, 4])];
    for i in 0..21 {
        script.push(exec(1 + (i % 2), 0));
        script.push(exec(2 - (i % 2), 1));
    }
    script.push(exec(1, 1));
    script.push(MockCall::Exit);
    let run = mock_host_run(&script, &a).unwrap();
    assert!(run.matches_oracle());

    let blocks = decode_all(&std::fs::read(out).unwrap()).unwrap();
    let mut per_unit: HashMap<u16, Vec<(u64, u64)>> = HashMap::new();
    for b in &blocks {
        if let Block::Exec(f) = b {
            per_unit.entry(f.unit_id).or_default().extend(f.entries.iter().map(|e| (e.start, e.end)));
        }
    }
    let expected = |vcpu: u32| -> Vec<(u64, u64)> {
        let range = |tb| if tb == 1 { (0x1000, 0x1008) } else { (0x2000, 0x2008) };
        script
            .iter()
            .filter_map(|c| match c {
                MockCall::Exec { tb, vcpu: v } if *v == vcpu => Some(range(*tb)),
                _ => None,
            })
            .collect()
    };
    assert_eq!(per_unit[&0], expected(0));
    assert_eq!(per_unit[&1], expected(1));
    assert_eq!(run.result.units.iter().map(|(u, _)| *u).collect::<Vec<_>>(), vec![0, 1]);
}

#[test]
fn execs_after_exit_are_dropped() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _) = args(&dir, "");
    let run =
        mock_host_run(&[translate(1, 0x1000, &[4]), exec(1, 0), MockCall::Exit, exec(1, 0), exec(1, 3)], &a).unwrap();
    assert!(run.matches_oracle());
    assert_eq!(run.summary.dropped, 2);
    assert_eq!(run.result.stats.events_recorded, 1);
}

#[test]
fn retranslation_uses_the_new_range() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _) = args(&dir, "");
    let run = mock_host_run(
        &[translate(1, 0x1000, &[4]), exec(1, 0), translate(1, 0x3000, &[2, 6]), exec(1, 0), MockCall::Exit],
        &a,
    )
    .unwrap();
    assert_eq!(
        run.observed,
        vec![Segment { start: 0x1000, end: 0x1004, count: 1 }, Segment { start: 0x3000, end: 0x3008, count: 1 }]
    );
}

#[test]
fn bad_plugin_arguments_fail_install() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _) = args(&dir, "buffers=0");
    assert!(matches!(MockHost::install(&a, "aarch64", 1), Err(HarnessError::Install(_))));
}

#[test]
fn random_scripts_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..40 {
        let dir = tempfile::tempdir().unwrap();
        let cap = [1usize, 2, 7, 64][case % 4];
        let (a, _) = args(&dir, &format!("capacity={cap},buffers={},merge={}", 1 + case % 3, ["on", "off"][case % 2]));
        let n_tbs = rng.gen_range(1..10u32);
        let mut script: Vec<MockCall> = (0..n_tbs)
            .map(|tb| {
                let sizes: Vec<u64> = (0..rng.gen_range(1..6)).map(|_| [2, 4][rng.gen_range(0..2)]).collect();
                translate(tb, 0x8000 + u64::from(tb) * 0x10 + rng.gen_range(0..4) * 2, &sizes)
            })
            .collect();
        for _ in 0..rng.gen_range(0..300) {
            script.push(exec(rng.gen_range(0..n_tbs), rng.gen_range(0..3)));
        }
        script.push(MockCall::Exit);
        let run = mock_host_run(&script, &a).unwrap();
        assert!(run.matches_oracle(), "case {case}");
        assert_eq!(run.result.file_bytes, 124 + run.result.stats.bytes_written);
    }
}

#[test]
fn million_event_run() {
    let dir = tempfile::tempdir().unwrap();
    let (a, out) = args(&dir, "capacity=8192,buffers=4,merge=on");
    let mut host = MockHost::install(&a, "aarch64", 1).unwrap();
    for tb in 0..64u32 {
        host.translate(tb, 0x4000_0000 + u64::from(tb) * 16, &[4, 4, 4, 4]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut prev: Option<u32> = None;
    let mut expected_merges = 0u64;
    for _ in 0..1_000_000 {
        // contiguous successor with probability ~1/2
        let tb = match prev {
            Some(p) if rng.gen_bool(0.5) => (p + 1) % 64,
            _ => rng.gen_range(0..64),
        };
        expected_merges += u64::from(prev.is_some_and(|p| tb == p + 1));
        host.exec(tb, 0);
        prev = Some(tb);
    }
    host.exit();
    let summary = elogcov_plugin::last_summary().unwrap();
    drop(host);

    let blocks = decode_all(&std::fs::read(out).unwrap()).unwrap();
    let entries: usize = blocks.iter().map(|b| if let Block::Exec(f) = b { f.entries.len() } else { 0 }).sum();
    assert_eq!(summary.total.events_recorded, 1_000_000);
    assert_eq!(entries as u64, summary.total.events_recorded - summary.total.entries_merged);
    // only buffer boundaries can prevent a merge
    let frames = summary.total.frames_written;
    assert!(
        summary.total.entries_merged <= expected_merges && summary.total.entries_merged + frames >= expected_merges
    );
    let total: u64 = counts_from_blocks(&blocks).iter().map(|s| (s.end - s.start) * s.count).sum();
    assert_eq!(total, 16 * 1_000_000);
}

#[test]
fn concurrent_vcpus() {
    let dir = tempfile::tempdir().unwrap();
    let (a, out) = args(&dir, "capacity=64,buffers=2");
    let mut host = MockHost::install(&a, "aarch64", 4).unwrap();
    for tb in 0..8u32 {
        host.translate(tb, 0x1000 + u64::from(tb) * 0x100, &[4, 4]);
    }
    let barrier = Barrier::new(4);
    std::thread::scope(|s| {
        for vcpu in 0..4u32 {
            let (host, barrier) = (&host, &barrier);
            s.spawn(move || {
                barrier.wait();
                for i in 0..20_000u32 {
                    host.exec((i + vcpu) % 8, vcpu);
                }
            });
        }
    });
    host.exit();
    let summary = elogcov_plugin::last_summary().unwrap();
    drop(host);
    assert_eq!(summary.total.events_recorded, 80_000);
    assert_eq!(summary.units.len(), 4);
    let blocks = decode_all(&std::fs::read(out).unwrap()).unwrap();
    let counts = counts_from_blocks(&blocks);
    assert_eq!(counts.len(), 8);
    assert!(counts.iter().all(|s| s.count == 10_000 && s.end - s.start == 8));
}

#[test]
fn exit_racing_with_executing_vcpus() {
    for round in 0..20 {
        let dir = tempfile::tempdir().unwrap();
        let (a, out) = args(&dir, "capacity=16,buffers=2,merge=off");
        let mut host = MockHost::install(&a, "aarch64", 3).unwrap();
        host.translate(0, 0x1000, &[4]);
        let host = std::sync::RwLock::new(host);
        std::thread::scope(|s| {
            for vcpu in 0..3u32 {
                let host = &host;
                s.spawn(move || {
                    for _ in 0..5_000 {
                        host.read().unwrap().exec(0, vcpu);
                    }
                });
            }
            s.spawn(|| {
                std::thread::sleep(std::time::Duration::from_micros(200 * round));
                host.write().unwrap().exit();
            });
        });
        let summary = elogcov_plugin::last_summary().unwrap();
        drop(host);
        let blocks = decode_all(&std::fs::read(out).unwrap()).unwrap();
        let entries: u64 = blocks.iter().map(|b| if let Block::Exec(f) = b { f.entries.len() as u64 } else { 0 }).sum();
        assert_eq!(entries, summary.total.events_recorded);
        assert_eq!(summary.total.events_recorded + summary.dropped, 15_000);
    }
}
