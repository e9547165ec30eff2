#![no_main]

use kfusion::lab::LabConfig;
use kfusion::trainer::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    for json in [false, true] {
        if let Ok(cfg) = ExperimentConfig::parse(text, json) {
            let _ = cfg.architecture();
            ExperimentConfig::parse(&cfg.to_json(), true).expect("config round trips");
        }
        let _ = LabConfig::parse(text, json);
    }
});
