#![no_main]
// Arbitrary config text may be rejected but must never panic, and an
// accepted document must survive the canonical() → apply_text round
// trip.
use libfuzzer_sys::fuzz_target;
use mmvit::config::Config;

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    let mut cfg = Config::audio();
    if cfg.apply_text(&text).is_ok() {
        let canon = cfg.canonical();
        let mut again = Config::audio();
        again.apply_text(&canon).expect("canonical text must re-apply");
        assert_eq!(again.canonical(), canon);
    }
});
