#![no_main]

use libfuzzer_sys::fuzz_target;
use std::path::Path;

fuzz_target!(|data: &[u8]| {
    // The header/data decoder must reject malformed volumes without panicking.
    let _ = streamtrace::volumes::parse_nifti(data, Path::new("fuzz.nii"));
});
