#![no_main]

use kfusion::PredictionLog;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(log) = PredictionLog::from_bytes(data) {
        assert_eq!(log.to_bytes(), data);
    }
});
