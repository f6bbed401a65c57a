//! Finite-difference check of every parameter gradient of the tiny model,
//! grouped by module.
//!
//! ```text
//! cargo run --release --example grad_check
//! ```

use dualpath_ssm::verify::gradient_check;

fn main() -> dualpath_ssm::Result<()> {
    for c in gradient_check(0)? {
        println!("{c}");
    }
    Ok(())
}
