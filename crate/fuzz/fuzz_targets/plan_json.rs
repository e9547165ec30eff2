#![no_main]

use kfusion::FusionPlan;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(plan) = FusionPlan::from_json(text) {
        assert_eq!(FusionPlan::from_json(&plan.to_json()).expect("plan round trips"), plan);
    }
});
