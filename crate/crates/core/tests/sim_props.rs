use droplock_core::sim::{ComponentId, Event, RunLimit, Scheduler, SimError, VirtualTime};
use proptest::prelude::*;

const NODE: ComponentId = ComponentId("node");

proptest! {
    #[test]
    fn delivery_is_ordered_by_time_then_insertion(times in prop::collection::vec(0u64..50, 1..200)) {
        let mut sched = Scheduler::new(0);
        for (i, &t) in times.iter().enumerate() {
            sched.schedule(VirtualTime::from_micros(t), NODE, i).unwrap();
        }
        let mut seen = Vec::new();
        sched.run_until(RunLimit::Quiescent, &mut |ev: Event<usize>, _: &mut Scheduler<usize>| {
            seen.push((ev.at.as_micros(), ev.payload));
        });
        let mut expected: Vec<(u64, usize)> = times.iter().copied().zip(0..).collect();
        expected.sort();
        prop_assert_eq!(seen, expected);
    }

    #[test]
    fn clock_never_runs_backwards(
        seeds in prop::collection::vec((0u64..1_000, 0u64..1_000), 1..50),
        deadline in 0u64..3_000,
    ) {
        let mut sched = Scheduler::new(1);
        for (i, &(t, _)) in seeds.iter().enumerate() {
            sched.schedule(VirtualTime::from_micros(t), NODE, i).unwrap();
        }
        let mut last = VirtualTime::ZERO;
        let mut monotone = true;
        let mut rejected_past = true;
        sched.run_until(
            RunLimit::Deadline(VirtualTime::from_micros(deadline)),
            &mut |ev: Event<usize>, s: &mut Scheduler<usize>| {
                monotone &= s.now() >= last;
                last = s.now();
                let delay = seeds[ev.payload % seeds.len()].1;
                if ev.payload < 10_000 {
                    s.schedule_in(VirtualTime::from_micros(delay), NODE, ev.payload + 10_000);
                }
                if s.now() > VirtualTime::ZERO {
                    let past = VirtualTime::from_micros(s.now().as_micros() - 1);
                    rejected_past &= matches!(s.schedule(past, NODE, 0), Err(SimError::Causality { .. }));
                }
            },
        );
        prop_assert!(monotone);
        prop_assert!(rejected_past);
        // Conservation: nothing scheduled goes missing.
        prop_assert_eq!(sched.scheduled(), sched.delivered() + sched.pending() as u64);
        prop_assert!(sched.now() <= VirtualTime::from_micros(deadline.max(last.as_micros())));
    }

    #[test]
    fn same_seed_same_log(seed in any::<u64>()) {
        let run = |seed| {
            let mut sched: Scheduler<u32> = Scheduler::new(seed);
            sched.schedule(VirtualTime::ZERO, NODE, 0).unwrap();
            sched.run_until(RunLimit::Quiescent, &mut |ev: Event<u32>, s: &mut Scheduler<u32>| {
                use rand::Rng;
                let gap = s.rng().gen_range(1..1_000u64);
                s.log(NODE, "TICK", format!("n={} gap={gap}", ev.payload));
                if ev.payload < 20 {
                    s.schedule_in(VirtualTime::from_micros(gap), NODE, ev.payload + 1);
                }
            });
            sched.into_log().to_text()
        };
        prop_assert_eq!(run(seed), run(seed));
    }
}

#[test]
fn deadline_with_pending_events_stops_clock_at_deadline() {
    let mut sched = Scheduler::new(0);
    sched.schedule(VirtualTime::from_secs(1), NODE, ()).unwrap();
    sched.schedule(VirtualTime::from_secs(10), NODE, ()).unwrap();
    sched.run_until(RunLimit::Deadline(VirtualTime::from_secs(5)), &mut |_: Event<()>, _: &mut Scheduler<()>| {});
    assert_eq!(sched.now(), VirtualTime::from_micros(5_000_000));
    assert_eq!(sched.pending(), 1);
}

#[test]
fn log_line_format() {
    let mut sched: Scheduler<()> = Scheduler::new(0);
    sched.schedule(VirtualTime::from_micros(1_500), NODE, ()).unwrap();
    sched.run_until(RunLimit::Quiescent, &mut |_: Event<()>, s: &mut Scheduler<()>| {
        s.log(NODE, "PING", "seq=1");
        s.log(NODE, "PONG", "");
    });
    assert_eq!(sched.sim_log().to_text(), "t=1500 node PING seq=1\nt=1500 node PONG\n");
}
