//! Finite-difference check of every primitive and training objective, then
//! the same suite with a deliberately broken softmax backward rule.

use iat::gradcheck::run_suite;
use iat::OpKind;

fn main() -> anyhow::Result<()> {
    let report = run_suite(&[0, 1, 2], None)?;
    print!("{report}");
    println!("all passed: {}\n", report.passed());

    let broken = run_suite(
        &[0],
        Some(OpKind::parse("softmax").expect("known primitive")),
    )?;
    println!(
        "with a faulty softmax rule, failing: {:?}",
        broken.failing()
    );
    Ok(())
}
