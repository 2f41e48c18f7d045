#![allow(dead_code)]

use std::collections::HashMap;
use std::path::PathBuf;

use stagewise::experiment::{load_config, ExperimentConfig};

pub const BUNDLED: [&str; 4] = ["fig1_example", "resnet_grid", "resnet_sha", "wideresnet_asha"];

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(format!("{name}.json"))
}

pub fn bundled(name: &str) -> ExperimentConfig {
    load_config(&config_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Reduced fraction.
fn frac(n: u128, d: u128) -> (u128, u128) {
    let g = gcd(n, d);
    (n / g, d / g)
}

/// Brute-force epoch counts for the ResNet grid: every per-epoch learning
/// rate is an exact fraction, and the number of distinct (prefix, epoch)
/// pairs is counted with a trie over the per-epoch values.
///
/// Returns `(trial_epochs, distinct_prefix_epochs, trials, distinct_sequences)`.
pub fn resnet_grid_oracle() -> (u64, u64, usize, usize) {
    let initial = [(1u128, 2u128), (1, 5)];
    let factor = [(1u128, 5u128), (1, 10)];
    let periods = [40u32, 60, 80];
    let horizon = 200u32;
    let mut trie: HashMap<(usize, (u128, u128)), usize> = HashMap::new();
    let mut trials = 0;
    let mut leaves = std::collections::HashSet::new();
    let mut trial_epochs = 0u64;
    for init in initial {
        for f in factor {
            for p1 in periods {
                for p2 in periods {
                    for p3 in periods {
                        trials += 1;
                        let changes = [p1, p1 + p2, p1 + p2 + p3];
                        let mut node = 0usize;
                        for epoch in 0..horizon {
                            let k = changes.iter().filter(|c| **c <= epoch).count() as u32;
                            let v = frac(init.0 * f.0.pow(k), init.1 * f.1.pow(k));
                            let next = trie.len() + 1;
                            node = *trie.entry((node, v)).or_insert(next);
                            trial_epochs += 1;
                        }
                        leaves.insert(node);
                    }
                }
            }
        }
    }
    (trial_epochs, trie.len() as u64, trials, leaves.len())
}
