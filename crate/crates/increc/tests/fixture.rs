//! Full-scale generator fixture checks: the standard 2000-user / 5000-item
//! configuration must plant enough incremental structure before any model
//! training makes sense on it.

use std::io::Cursor;

use increc::event_log::{build_requests, EventLog};
use increc::sample_builder::{build_i2i_index, simulate_partitions};
use increc::synth::{generate, SynthConfig};

const HORIZON: i64 = 24 * 3_600_000;

fn fixture(seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        ..SynthConfig::default()
    }
}

#[test]
fn standard_fixture_has_incremental_mass() {
    let out = generate(&fixture(1)).unwrap();
    let mut log = EventLog::parse(Cursor::new(out.events.as_str())).unwrap();
    log.attach_user_attrs(Cursor::new(out.user_attrs.as_str()))
        .unwrap();
    log.attach_item_feats(Cursor::new(out.item_feats.as_str()))
        .unwrap();
    assert_eq!(log.n_users(), 2000);

    let ctxs = build_requests(&log, HORIZON, 50);
    let index = build_i2i_index(&log, 12 * 3_600_000, 20);
    let parts = simulate_partitions(&ctxs, &index, log.popularity(), 500);

    let (mut itg, mut total) = (0usize, 0usize);
    for p in &parts {
        itg += p.itg.len();
        total += p.itg.len() + p.rtg.len();
    }
    let share = itg as f64 / total as f64;
    eprintln!("fixture itg share: {share:.4} ({itg}/{total})");
    assert!(
        share >= 0.4,
        "incremental share {share:.4} below the 0.4 fixture floor"
    );

    // Exposures must exist for the alignment tower.
    let with_exposures = ctxs.iter().filter(|c| !c.exposed.is_empty()).count();
    assert!(with_exposures * 10 >= ctxs.len() * 9);
}
