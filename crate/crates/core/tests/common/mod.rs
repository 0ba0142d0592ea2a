//! Shared helpers for the integration suites: a generator for synthetic
//! task-1-style QA corpora in bAbI line format.

#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::Path;

use tfc_rnn::matrix::Rng;

pub const ENTITIES: [&str; 5] = ["Mary", "John", "Sandra", "Daniel", "Bill"];
pub const LOCATIONS: [&str; 6] = ["bathroom", "kitchen", "garden", "office", "hallway", "bedroom"];
pub const VERBS: [&str; 3] = ["moved to", "went to", "journeyed to"];

/// Stories of 2-4 movement statements followed by one "Where is X?" question.
/// The answer is X's latest location and the supporting id names that
/// statement. Most questions ask about the most recently moved entity.
pub fn synth_stories(n_stories: usize, seed: u64) -> String {
    let mut rng = Rng::new(seed);
    let mut out = String::new();
    for _ in 0..n_stories {
        let n_statements = 2 + rng.below(3);
        // (entity, location, statement line), most recent move per entity
        let mut latest: Vec<(usize, usize, usize)> = Vec::new();
        for line in 1..=n_statements {
            let e = rng.below(ENTITIES.len());
            let l = rng.below(LOCATIONS.len());
            let v = rng.below(VERBS.len());
            writeln!(out, "{line} {} {} the {}.", ENTITIES[e], VERBS[v], LOCATIONS[l]).unwrap();
            latest.retain(|&(ent, _, _)| ent != e);
            latest.push((e, l, line));
        }
        let pick = if rng.below(5) < 4 { latest.len() - 1 } else { rng.below(latest.len()) };
        let (e, l, support) = latest[pick];
        writeln!(
            out,
            "{} Where is {}?\t{}\t{support}",
            n_statements + 1,
            ENTITIES[e],
            LOCATIONS[l]
        )
        .unwrap();
    }
    out
}

/// Writes qa<N>_synth_{train,test}.txt pairs for each requested task id.
pub fn write_synth_dir(dir: &Path, task_ids: &[usize], n_train: usize, n_test: usize, seed: u64) {
    for &id in task_ids {
        let train = synth_stories(n_train, seed.wrapping_add(id as u64));
        let test = synth_stories(n_test, seed.wrapping_add(id as u64) ^ 0x5555);
        std::fs::write(dir.join(format!("qa{id}_synth_train.txt")), train).unwrap();
        std::fs::write(dir.join(format!("qa{id}_synth_test.txt")), test).unwrap();
    }
}
