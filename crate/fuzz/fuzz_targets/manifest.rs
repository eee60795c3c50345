#![no_main]
use libfuzzer_sys::fuzz_target;
use mmvit::train::dataset::{parse_classes, parse_manifest};

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    let _ = parse_manifest(&text);
    let _ = parse_classes(&text);
});
