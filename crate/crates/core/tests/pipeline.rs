// SPDX-License-Identifier: Apache-2.0

use piecewise::depgraph::Strategy;
use piecewise::gadgets::{self, DEFAULT_DEPTH};
use piecewise::loader::{load, LoadOptions};
use piecewise::study;
use piecewise::synth::{generate, SynthConfig};
use piecewise::vm;

fn end_to_end(seed: u64) -> String {
    let sys = generate(seed, &SynthConfig::default());
    let (exe, src) = sys.compile(Some(Strategy::Localized)).unwrap();
    let l = load(&exe, &src, &LoadOptions::default()).unwrap();
    let traces: Vec<_> = vm::workloads(&l.image, &l.bindings)
        .iter()
        .map(|w| vm::execute_debloated(&l.image, &l.bindings, w, vm::DEFAULT_STEP_LIMIT).unwrap())
        .collect();
    let g = gadgets::scan_image(&l.image, DEFAULT_DEPTH).unwrap();
    serde_json::to_string(&(&l.report, &traces, &g)).unwrap()
}

#[test]
fn identical_inputs_give_identical_reports() {
    for seed in [1, 2, 3, 99] {
        assert_eq!(end_to_end(seed), end_to_end(seed));
    }
}

#[test]
fn study_over_synthetic_corpus() {
    let mut exes = Vec::new();
    let mut src = piecewise::loader::MemorySource::default();
    for seed in 0..20 {
        let mut sys = generate(seed, &SynthConfig::default());
        // Keep names distinct across systems.
        for m in &mut sys.modules {
            m.name = format!("{}_{seed}", m.name);
            for n in &mut m.needed {
                *n = format!("{n}_{seed}");
            }
        }
        for t in &mut sys.training {
            t.module = format!("{}_{seed}", t.module);
        }
        let (exe, s) = sys.compile(Some(Strategy::Localized)).unwrap();
        src.0.extend(s.0);
        exes.push(exe);
    }
    let table = study::footprint(&exes, &src);
    assert!(table.failures.is_empty(), "{:?}", table.failures);
    for r in &table.rows {
        assert!((0.0..=100.0).contains(&r.fn_pct) && (0.0..=100.0).contains(&r.insn_pct));
        assert!(r.functions_used + r.other_functions <= r.total_functions);
    }
    for m in &table.means {
        assert!((0.0..=100.0).contains(&m.fn_pct));
    }
}
