//! The selective scan evaluated three ways: frame by frame, in chunks of
//! several sizes, and in single precision.
//!
//! ```text
//! cargo run --release --example scan_modes
//! ```

use dualpath_ssm::ssm::{chunked_scan, discretize, recurrent_scan, SelectiveParams, SsmState};
use dualpath_ssm::verify::scan_instance;

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn main() -> dualpath_ssm::Result<()> {
    let d = discretize(-0.5, 0.2)?;
    println!("ZOH: A=-0.5, Δ=0.2 -> ā = {:.6}", d.a_bar);

    // T = 256, H = 8 heads of width 4, N = 64
    let (x, sel, a, h0) = scan_instance(7, 256, 8, 4, 64)?;
    let (y_ref, h_ref) = recurrent_scan(&x, &sel, &a, &h0)?;
    for chunk in [1, 8, 64, 100, 256] {
        let out = chunked_scan(&x, &sel, &a, &h0, chunk)?;
        println!(
            "chunk {chunk:>3}: max |y - y_rec| = {:.2e}, final state gap = {:.2e}, {} chunk states",
            max_gap(&out.y, &y_ref),
            max_gap(out.final_state.data(), h_ref.data()),
            out.chunk_states.len()
        );
    }

    let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
    let sel32 = SelectiveParams::new(sel.len, sel.heads, sel.state_dim, f(&sel.delta), f(&sel.b), f(&sel.c))?;
    let h32 = SsmState::from_vec(8, 4, 64, f(h0.data()))?;
    let out32 = chunked_scan(&f(&x), &sel32, &f(&a), &h32, 64)?;
    let y32: Vec<f64> = out32.y.iter().map(|&v| v as f64).collect();
    println!("single precision, chunk 64: max gap to double = {:.2e}", max_gap(&y32, &y_ref));
    Ok(())
}
