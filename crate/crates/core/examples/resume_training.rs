//! Interrupts a stage-1 run, saves the trainer to disk, resumes it and
//! confirms the result matches an uninterrupted run bit for bit.

use dehaze::pipeline::{load_checkpoint, save_checkpoint, Models, TrainConfig, Trainer};

fn main() -> dehaze::Result<()> {
    let cfg = TrainConfig {
        iterations: 2,
        batch_updates_per_iteration: 6,
        val_scenes: 2,
        ..TrainConfig::desk(1)
    };
    let models = Models::new((&cfg).into(), cfg.seed)?;

    let mut whole = Trainer::new(cfg.clone(), models.clone())?;
    whole.run()?;

    let mut part = Trainer::new(cfg, models)?;
    part.run_updates(5)?;
    let path = std::env::temp_dir().join("dehaze-resume-example.ckpt");
    save_checkpoint(&path, &part.checkpoint())?;
    let mut resumed = Trainer::resume(&load_checkpoint(&path)?)?;
    resumed.run()?;
    std::fs::remove_file(&path).ok();

    let same = whole.checkpoint().to_bytes() == resumed.checkpoint().to_bytes();
    println!("updates {}  identical state after resume: {same}", resumed.updates_done());
    print!("{}", resumed.log().to_tsv());
    Ok(())
}
