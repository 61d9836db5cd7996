//! Fixed-format output helpers shared by every subcommand.

use num_complex::Complex64;
use sdpse_core::network::NetworkCase;

/// Six significant digits, scientific — the same convention the experiment
/// CSVs use, so everything the tool prints diffs cleanly across runs.
pub fn sig(x: f64) -> String {
    format!("{x:.5e}")
}

/// Per-bus polar voltage table in CSV form, labeled by external bus id.
pub fn state_table(case: &NetworkCase, v: &[Complex64]) -> String {
    let mut out = String::from("bus,v_mag,v_angle_deg\n");
    for (k, bus) in case.buses.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{}\n",
            bus.id,
            sig(v[k].norm()),
            sig(v[k].arg().to_degrees())
        ));
    }
    out
}
