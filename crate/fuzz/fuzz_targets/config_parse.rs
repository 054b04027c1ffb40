// Fuzz the run-configuration parser.
//
// Run with:
//   cargo +nightly fuzz run config_parse
//
// The parser must never panic and never allocate proportionally to
// anything but the input length; it may return `Err`.
#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let _ = mildsde::config::RunConfig::parse(data);
});
