use ehdr_core::events::{chunk_stream, voxelize, Direction, Event, EventChunk, EventStream};
use ehdr_core::hdr::{merge_hdr, mu_law_f64, TriangleWeights};
use ehdr_core::sim::{simulate_events, SimulatorConfig, TimedFrame};
use ehdr_core::{HdrImage, LdrImage};
use proptest::prelude::*;

const W: u16 = 6;
const H: u16 = 5;

fn stream() -> impl Strategy<Value = EventStream> {
    prop::collection::vec((0u64..10_000, 0..W, 0..H, prop::bool::ANY), 0..300).prop_map(|raw| {
        let mut events: Vec<Event> = raw
            .into_iter()
            .map(|(t, x, y, on)| Event::new(t, x, y, if on { 1 } else { -1 }))
            .collect();
        events.sort_by_key(Event::sort_key);
        EventStream::new(W, H, events).unwrap()
    })
}

fn signed(events: &[Event]) -> i64 {
    events.iter().map(|e| e.p as i64).sum()
}

fn image(w: usize, h: usize) -> impl Strategy<Value = HdrImage> {
    prop::collection::vec(0.0f32..4.0, w * h * 3).prop_map(move |px| HdrImage::new(w, h, px).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chunks_partition_the_window(s in stream(), t0 in 0u64..5000, len in 1u64..5000, tau in 1u64..2000, back in prop::bool::ANY) {
        let (a, b) = if back { (t0 + len, t0) } else { (t0, t0 + len) };
        let dir = if back { Direction::Backward } else { Direction::Forward };
        let chunks = chunk_stream(&s, a, b, tau, dir).unwrap();
        let total: usize = chunks.iter().map(|c| c.events.len()).sum();
        prop_assert_eq!(total, s.window(t0, t0 + len).len());
        prop_assert_eq!(chunks.iter().map(|c| c.duration).sum::<u64>(), len);
        for c in &chunks {
            for e in &c.events {
                prop_assert!(e.t >= c.t_start && e.t < c.t_start + c.duration);
            }
        }
    }

    #[test]
    fn voxel_mass_matches_signed_count(s in stream(), tau in 1u64..3000) {
        let fwd = chunk_stream(&s, 0, 10_000, tau, Direction::Forward).unwrap();
        let bwd = chunk_stream(&s, 10_000, 0, tau, Direction::Backward).unwrap();
        let mass = |cs: &[EventChunk]| cs.iter().map(|c| voxelize(c).total_mass()).sum::<f64>();
        let n = signed(s.events()) as f64;
        prop_assert!((mass(&fwd) - n).abs() < 1e-3);
        prop_assert!((mass(&bwd) + n).abs() < 1e-3);
    }

    #[test]
    fn voxelize_ignores_event_order(s in stream(), seed in any::<u64>()) {
        let chunk = chunk_stream(&s, 0, 10_000, 10_000, Direction::Forward).unwrap().remove(0);
        let mut shuffled = chunk.clone();
        let n = shuffled.events.len();
        let mut state = seed | 1;
        for i in (1..n).rev() {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            shuffled.events.swap(i, (state % (i as u64 + 1)) as usize);
        }
        let (a, b) = (voxelize(&chunk), voxelize(&shuffled));
        for (x, y) in a.data.iter().zip(&b.data) {
            prop_assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn fewer_events_at_higher_threshold(a in image(4, 3), b in image(4, 3), c in 0.05f64..1.0) {
        let frames = [
            TimedFrame { t_us: 0, image: a },
            TimedFrame { t_us: 1000, image: b },
        ];
        let cfg = SimulatorConfig::default();
        let low = simulate_events(&frames, &cfg.with_threshold(c)).unwrap().len();
        let high = simulate_events(&frames, &cfg.with_threshold(c * 1.5)).unwrap().len();
        prop_assert!(high <= low, "{high} > {low}");
    }

    #[test]
    fn static_frames_emit_nothing(a in image(4, 3)) {
        let frames = [
            TimedFrame { t_us: 0, image: a.clone() },
            TimedFrame { t_us: 500, image: a },
        ];
        prop_assert!(simulate_events(&frames, &SimulatorConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn merge_scales_inversely_with_exposure(px in prop::collection::vec(0.0f32..=1.0, 3 * 4 * 3), k in 0i32..6) {
        let stack = |scale: f32| -> Vec<LdrImage> {
            (0..3)
                .map(|i| {
                    let p = px.iter().map(|v| (v * (1 + i) as f32 / 3.0).min(1.0)).collect();
                    LdrImage::new(4, 3, p, scale * (1 << (2 * i)) as f32, 2 * i as i32).unwrap()
                })
                .collect()
        };
        let base = stack(1.0);
        let scaled = stack((1 << k) as f32);
        let m1 = merge_hdr(&base, &TriangleWeights::for_brackets(&base)).unwrap();
        let m2 = merge_hdr(&scaled, &TriangleWeights::for_brackets(&scaled)).unwrap();
        for (a, b) in m1.pixels.iter().zip(&m2.pixels) {
            prop_assert!((a - b * (1 << k) as f32).abs() <= 1e-6 * a.abs().max(1.0));
        }
    }

    #[test]
    fn mu_law_is_monotone_and_bounded(a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (ml, mh) = (mu_law_f64(lo, 5000.0), mu_law_f64(hi, 5000.0));
        prop_assert!(ml <= mh);
        prop_assert!((0.0..=1.0).contains(&ml) && (0.0..=1.0).contains(&mh));
    }
}
