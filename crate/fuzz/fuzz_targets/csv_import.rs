//! Input is the probabilities CSV and the labels CSV separated by a NUL byte.

#![no_main]

use kfusion::log::import_csv;
use kfusion::{PredictionLog, SplitTag};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == 0).unwrap_or(data.len());
    let (probs, labels) = (&data[..split], data.get(split + 1..).unwrap_or(&[]));
    if let Ok(log) = import_csv(probs, labels, SplitTag::Test) {
        let back = PredictionLog::from_bytes(&log.to_bytes()).expect("imported log encodes");
        assert_eq!(back, log);
    }
});
