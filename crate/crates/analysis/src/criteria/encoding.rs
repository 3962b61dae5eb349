use std::collections::BTreeSet;

use feedback_core::encoding::{check_invariants, parse_feedback, serialize_feedback};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::records::{all_productions, productions, random_feedback};
use super::Check;

const RECORDS: usize = 1000;

pub fn round_trip() -> Result<Check, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut seen = BTreeSet::new();
    let mut failures = Vec::new();
    for i in 0..RECORDS {
        let fb = random_feedback(&mut rng);
        seen.extend(productions(&fb));
        if let Some(v) = check_invariants(&fb).first() {
            failures.push(format!("record {i} invalid: {}", v.rule));
            continue;
        }
        let a = serialize_feedback(&fb).map_err(|e| e.to_string())?;
        let back = parse_feedback(&a).map_err(|e| format!("record {i}: {e}"))?;
        let b = serialize_feedback(&back).map_err(|e| e.to_string())?;
        if back != fb || a != b {
            failures.push(format!("record {i} changed on round trip"));
        }
    }
    let missing: Vec<String> = all_productions().difference(&seen).cloned().collect();
    let passed = failures.is_empty() && missing.is_empty();
    let mut check = Check::new(
        passed,
        format!(
            "{}/{RECORDS} byte-identical, {} productions covered, {} missing",
            RECORDS - failures.len(),
            seen.len(),
            missing.len()
        ),
    );
    if !missing.is_empty() {
        check = check.note(format!("missing: {}", missing.join(", ")));
    }
    for f in failures.into_iter().take(5) {
        check = check.note(f);
    }
    Ok(check)
}
