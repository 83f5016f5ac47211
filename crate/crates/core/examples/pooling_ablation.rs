//! Trains the airlight estimator with global max and global average
//! pooling and compares airlight error on the gray bands.

use dehaze::pipeline::{run_ablation, AblationAxis, AblationPlan};

fn main() -> dehaze::Result<()> {
    let report = run_ablation(AblationAxis::PoolKind, &AblationPlan::desk(0), None)?;
    print!("{}", report.to_tsv());
    Ok(())
}
