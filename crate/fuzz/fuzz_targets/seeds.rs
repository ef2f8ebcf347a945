#![no_main]

use libfuzzer_sys::fuzz_target;
use std::path::Path;

fuzz_target!(|data: &[u8]| {
    // The sidecar parser must reject malformed seed lists without panicking.
    let _ = streamtrace::tracts::parse_seeds(data, Path::new("fuzz.seeds"));
});
