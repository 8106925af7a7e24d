//! One pass/fail line per acceptance criterion. The two toy-scale
//! experiments train models from scratch and dominate the runtime; the
//! long-input check reuses the style model.

mod common;

use std::io::Write;
use std::time::Instant;

use common::Check;

fn report(name: &str, check: Check, failed: &mut Vec<String>) {
    let tag = if check.pass { "PASS" } else { "FAIL" };
    println!("{tag} {name}: {}", check.detail);
    let _ = std::io::stdout().flush();
    if !check.pass {
        failed.push(name.to_string());
    }
}

fn main() {
    let t = Instant::now();
    let mut failed = Vec::new();
    report("tokenizer round trip", common::tokenizer_round_trip(), &mut failed);
    report("attribute oracle", common::attribute_oracle(), &mut failed);
    report("gradient checks", common::gradient_checks(), &mut failed);
    report("vae math", common::vae_math(), &mut failed);
    report("conditioning identities", common::conditioning_identities(), &mut failed);
    report("nucleus sampling", common::nucleus_sampling(), &mut failed);
    report("metric identities", common::metric_identities(), &mut failed);
    report("toy segment-conditioning experiment", common::segment_experiment(), &mut failed);
    let (style, experiment) = common::style_experiment();
    report("toy style-transfer experiment", style, &mut failed);
    let long = match &experiment {
        Some(x) => common::long_input(&x.bundle),
        None => Check::fail("no trained style model"),
    };
    report("long-input stability", long, &mut failed);
    println!(
        "{} of 10 criteria passed in {:.0}s",
        10 - failed.len(),
        t.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
