#![no_main]

use libfuzzer_sys::fuzz_target;
use std::path::Path;

fuzz_target!(|data: &[u8]| {
    // The parser must reject malformed tracks without panicking.
    let _ = streamtrace::tracts::parse_tck(data, Path::new("fuzz.tck"));
});
