use proptest::prelude::*;
use vnoip::cascade::{format_dataset, parse_dataset_str, Cascade, Repost};
use vnoip::embed::{EmbeddingTable, GraphWaveConfig};
use vnoip::sample::{build_sample, filter_and_split, SampleConfig, MIN_PARTICIPANTS, SPLIT_RATIOS};
use vnoip::synth::{generate_synthetic, GenConfig};

/// A random valid cascade: each repost picks an earlier participant as parent.
fn cascade_strategy(max_events: usize) -> impl Strategy<Value = Cascade> {
    (
        0u64..1000,
        prop::collection::vec((0.01f64..3.0, any::<prop::sample::Index>()), 0..max_events),
        0.0f64..1e4,
    )
        .prop_map(|(id, steps, publish)| {
            let root = 7;
            let mut t = 0.0;
            let mut events = Vec::with_capacity(steps.len());
            for (k, (dt, pick)) in steps.into_iter().enumerate() {
                t += dt;
                let parent = match pick.index(k + 1) {
                    0 => root,
                    i => 100 + i as u64 - 1,
                };
                events.push(Repost {
                    parent,
                    user: 100 + k as u64,
                    time: t,
                });
            }
            Cascade::new(id, root, publish, events).unwrap()
        })
}

fn sample_config(t_o: f64, t_p: f64) -> SampleConfig {
    SampleConfig {
        t_o,
        t_p,
        grid_points: 4,
        max_events: 100,
        graphwave: GraphWaveConfig {
            dim: 4,
            scales: vec![0.5, 1.0],
            t_max: 10.0,
        },
    }
}

#[test]
fn offspring_mean_matches_branching_factor() {
    let cfg = GenConfig {
        users: 5000,
        branching: 0.5,
        decay: 1.0,
        horizon: 1e9,
        cascades: 12_000,
        seed: 3,
        ..GenConfig::default()
    };
    let (_, cascades) = generate_synthetic(&cfg).unwrap();
    // every participant draws its children once; each repost is one child
    let participants: usize = cascades.iter().map(|c| c.size()).sum();
    let reposts = participants - cascades.len();
    assert!(reposts >= 10_000, "{reposts}");
    let mean = reposts as f64 / participants as f64;
    assert!((mean - 0.5).abs() < 0.025, "{mean}");
}

#[test]
fn generation_is_deterministic() {
    let cfg = GenConfig {
        users: 300,
        cascades: 200,
        ..GenConfig::default()
    };
    let (ga, a) = generate_synthetic(&cfg).unwrap();
    let (gb, b) = generate_synthetic(&cfg).unwrap();
    assert_eq!(ga.edges(), gb.edges());
    assert_eq!(a, b);
    let other = generate_synthetic(&GenConfig { seed: cfg.seed + 1, ..cfg }).unwrap().1;
    assert_ne!(a, other);
}

#[test]
fn generated_reposts_stay_within_horizon() {
    let cfg = GenConfig {
        users: 300,
        cascades: 300,
        horizon: 5.0,
        ..GenConfig::default()
    };
    let (g, cascades) = generate_synthetic(&cfg).unwrap();
    for c in &cascades {
        assert!(c.events().iter().all(|e| e.time <= 5.0));
        assert!((c.root as usize) < g.node_count());
    }
}

#[test]
fn grid_spans_observation_to_horizon() {
    let cfg = sample_config(6.0, 10.0);
    assert_eq!(cfg.raw_grid(), vec![7.0, 8.0, 9.0, 10.0]);
}

#[test]
fn split_follows_ratios() {
    let cascades: Vec<Cascade> = (0..1000)
        .map(|id| {
            let events = (0..12)
                .map(|k| Repost {
                    parent: 0,
                    user: k + 1,
                    time: 0.1 * (k + 1) as f64,
                })
                .collect();
            Cascade::new(id, 0, 0.0, events).unwrap()
        })
        .collect();
    let [train, val, test] = filter_and_split(&cascades, 5.0, MIN_PARTICIPANTS, SPLIT_RATIOS, 9).unwrap();
    assert!((train.len() as i64 - 700).abs() <= 1);
    assert!((val.len() as i64 - 150).abs() <= 1);
    assert!((test.len() as i64 - 150).abs() <= 1);
    let mut ids: Vec<u64> = train.iter().chain(&val).chain(&test).map(|c| c.id).collect();
    ids.sort_unstable();
    assert_eq!(ids, (0..1000).collect::<Vec<_>>());
}

proptest! {
    #[test]
    fn dataset_round_trips(cs in prop::collection::vec(cascade_strategy(30), 0..6)) {
        let text = format_dataset(&cs);
        prop_assert_eq!(parse_dataset_str(&text).unwrap(), cs);
    }

    #[test]
    fn filter_keeps_every_eligible_cascade(
        cs in prop::collection::vec(cascade_strategy(25), 1..30),
        t_o in 1.0f64..20.0,
        seed in any::<u64>(),
    ) {
        let parts = filter_and_split(&cs, t_o, MIN_PARTICIPANTS, SPLIT_RATIOS, seed).unwrap();
        let mut kept: Vec<usize> = parts.iter().flatten().map(|c| c.observed_participants(t_o)).collect();
        let eligible = cs.iter().filter(|c| c.observed_participants(t_o) >= MIN_PARTICIPANTS).count();
        prop_assert_eq!(kept.len(), eligible);
        kept.retain(|&n| n < MIN_PARTICIPANTS);
        prop_assert!(kept.is_empty());
    }

    #[test]
    fn sample_trajectories_are_consistent(
        c in cascade_strategy(40),
        t_o in 0.5f64..30.0,
        extra in 0.5f64..30.0,
    ) {
        let cfg = sample_config(t_o, t_o + extra);
        let s = build_sample(&c, &EmbeddingTable::zeros(1, 4), &cfg).unwrap();
        let target = s.target().unwrap();
        let before: Vec<_> = target.iter().copied().filter(|&(t, _)| t <= s.t_obs).collect();
        prop_assert_eq!(&before, &s.context);
        prop_assert!(target.windows(2).all(|w| w[1].0 > w[0].0 && w[1].1 >= w[0].1));
        prop_assert_eq!(s.context.last().copied(), Some((s.t_obs, s.p_obs)));
        prop_assert_eq!(s.p_obs, c.popularity_at(t_o) as f64);
        let last = *s.grid_values().unwrap().last().unwrap();
        prop_assert_eq!(s.delta_p().unwrap(), last - s.p_obs);
        prop_assert!(s.times.iter().all(|&t| t <= s.t_obs));
        prop_assert_eq!(s.len(), c.popularity_at(t_o));
    }
}
