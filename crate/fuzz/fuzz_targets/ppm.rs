#![no_main]
use libfuzzer_sys::fuzz_target;
use mmvit::frontend::ppm::parse_ppm;

fuzz_target!(|data: &[u8]| {
    let _ = parse_ppm(data);
});
