// Fuzz the interval-mark density table: construction (normalisation,
// CDF inversion tables) plus a few inverse-CDF draws and the
// quadrature weights. Construction may reject the input; accepted
// tables must behave.
//
// Run with:
//   cargo +nightly fuzz run marks_table
#![no_main]

use libfuzzer_sys::fuzz_target;
use mildsde::noise::{sample_noise, MarkSpace};

fuzz_target!(|data: &[u8]| {
    if data.len() < 8 {
        return;
    }
    // decode alternating (node, density) f32 pairs from the raw bytes
    let mut nodes = Vec::new();
    let mut density = Vec::new();
    for (i, chunk) in data.chunks_exact(8).take(64).enumerate() {
        let a = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
        let b = f32::from_le_bytes([chunk[4], chunk[5], chunk[6], chunk[7]]) as f64;
        // keep raw values; construction must reject bad tables itself
        nodes.push(a);
        density.push(b);
        let _ = i;
    }
    let intensity = (data[0] % 8) as f64;
    if let Ok(ms) = MarkSpace::interval_table(nodes, density, intensity) {
        // accepted tables must sample within [0, 1] without panicking
        for path in 0..4u64 {
            if let Ok(n) = sample_noise(&ms, 1, 0.5, 0.25, 1, path) {
                for (tau, z) in n.jump_events {
                    assert!(tau > 0.0 && tau <= 0.5);
                    assert!((0.0..=1.0).contains(&z));
                }
            }
        }
        let total: f64 = ms.quadrature().iter().map(|(_, w)| w).sum();
        assert!(total.is_finite());
    }
});
