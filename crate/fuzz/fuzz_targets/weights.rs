#![no_main]

use libfuzzer_sys::fuzz_target;
use std::path::Path;

fuzz_target!(|data: &[u8]| {
    // The container decoder must reject malformed weights without panicking.
    let _ = streamtrace::model::parse_weights(data, Path::new("fuzz.weights"));
});
