//! Finite-difference validation of every differentiable operation.
//!
//! `cargo run --release --example gradient_check -- [configs] [seed]`

fn main() -> novelaug::Result<()> {
    let mut args = std::env::args().skip(1);
    let configs = args.next().and_then(|s| s.parse().ok()).unwrap_or(20);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let rows = novelaug::gradsuite::run_suite(seed, configs)?;
    print!("{}", novelaug::gradsuite::format_table(&rows));
    if rows.iter().any(|r| !r.passed()) {
        std::process::exit(1);
    }
    Ok(())
}
