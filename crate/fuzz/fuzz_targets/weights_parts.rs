//! Input is the JSON header and the raw parameter bytes separated by a NUL byte.

#![no_main]

use kfusion::ModelWeights;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == 0).unwrap_or(data.len());
    let Ok(header) = std::str::from_utf8(&data[..split]) else { return };
    let raw = data.get(split + 1..).unwrap_or(&[]);
    if let Ok(w) = ModelWeights::from_parts(header, raw) {
        assert_eq!(w.params_bytes(), raw);
    }
});
