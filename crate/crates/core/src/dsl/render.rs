use crate::algebra::ModuleKind;

use super::NetworkConfig;

/// Longest repeated run starting at `seq[0]`: `(period, count)` with `count ≥ 2`,
/// preferring the shortest period among equal coverage.
fn best_run(seq: &[ModuleKind]) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize)> = None;
    for period in 1..=seq.len() / 2 {
        let pattern = &seq[..period];
        let mut count = 1;
        while (count + 1) * period <= seq.len()
            && &seq[count * period..(count + 1) * period] == pattern
        {
            count += 1;
        }
        if count >= 2 && best.map_or(true, |(p, n)| count * period > p * n) {
            best = Some((period, count));
        }
    }
    best
}

fn join(modules: &[ModuleKind]) -> String {
    modules.iter().map(ModuleKind::to_string).collect::<Vec<_>>().join(" -> ")
}

fn render_chain(seq: &[ModuleKind]) -> String {
    let mut groups = Vec::new();
    let mut i = 0;
    while i < seq.len() {
        match best_run(&seq[i..]) {
            Some((period, count)) => {
                groups.push(format!("({}) x {count}", join(&seq[i..i + period])));
                i += period * count;
            }
            None => {
                groups.push(seq[i].to_string());
                i += 1;
            }
        }
    }
    groups.join(" -> ")
}

/// Canonical text of a configuration, re-compressing repetitions greedily.
pub fn render_network(config: &NetworkConfig) -> String {
    config
        .stages
        .iter()
        .map(|s| format!("{}: {}", s.name, render_chain(&s.modules)))
        .collect::<Vec<_>>()
        .join("; ")
}
