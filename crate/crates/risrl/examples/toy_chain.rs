//! Discounted safety values on a tiny two-state chain where the fixed
//! point is known in closed form, showing the approach to the
//! undiscounted min-over-time value as the discount goes to one.
//!
//!     cargo run --example toy_chain

use risrl::grid::two_state_chain;

fn main() {
    // h(safe) = 2, h(unsafe) = -1; every step moves to the unsafe state.
    // The undiscounted min-over-time value is (-1, -1).
    for gamma_h in [0.9, 0.99, 0.999] {
        let solver = two_state_chain(gamma_h);
        let v = solver.value_iteration(1e-12).expect("convergence");
        println!(
            "gamma_h = {gamma_h:<6} V = ({:+.6}, {:+.6})   sup-error vs limit = {:.6}",
            v.values[0],
            v.values[1],
            (v.values[0] + 1.0).abs().max((v.values[1] + 1.0).abs())
        );
    }
}
