//! End-to-end smoke run: generate a small synthetic dataset, train for a few
//! epochs with both comparison losses on, then evaluate the test split.
//!
//! ```bash
//! cargo run --release -p instcomp --example train_tiny
//! ```

use instcomp::data::{generate_dataset, load_split, DatasetSpec};
use instcomp::harness::{evaluate_checkpoint, train, TrainConfig};

fn main() -> instcomp::Result<()> {
    env_logger::init();
    let dir = std::env::temp_dir().join("instcomp_train_tiny");
    let _ = std::fs::remove_dir_all(&dir);

    let spec = DatasetSpec {
        scenes_per_split: (48, 8, 16),
        ..DatasetSpec::default()
    };
    let t0 = std::time::Instant::now();
    let manifest = generate_dataset(&spec, &dir)?;
    println!("dataset generated in {:.1}s at {}", t0.elapsed().as_secs_f64(), dir.display());

    let train_data = load_split(&manifest, "train")?;
    let val_data = load_split(&manifest, "val")?;
    let test_data = load_split(&manifest, "test")?;

    let cfg = TrainConfig {
        epochs: 3,
        warmup_epochs: 1,
        eval_every: 1,
        ..TrainConfig::default()
    };
    let t0 = std::time::Instant::now();
    let out = train(&cfg, &train_data, Some(&val_data), &dir.join("run"), None)?;
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "trained {} steps in {:.1}s ({:.0} ms/step), bank insertions: {}",
        out.steps.len(),
        dt,
        1000.0 * dt / out.steps.len() as f64,
        out.bank_insertions
    );
    let first = &out.steps[0];
    let last = out.steps.last().unwrap();
    println!(
        "first step: total {:.3} (rpn {:.3} cls {:.3} reg {:.3})",
        first.total, first.rpn, first.cls, first.reg
    );
    println!(
        "last step:  total {:.3} (rpn {:.3} cls {:.3} reg {:.3} ric {:.3} cic {:.3})",
        last.total, last.rpn, last.cls, last.reg, last.roi_com, last.cls_com
    );

    let report = evaluate_checkpoint(&out.last_checkpoint, &test_data, None)?;
    println!(
        "test: ap50 {:.4} ap75 {:.4} ap {:.4} ar {:.4}",
        report.ap50, report.ap75, report.ap, report.ar
    );
    Ok(())
}
