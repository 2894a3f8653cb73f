//! Plain student against online distillation on synthetic patches.
//!
//! cargo run --release --example study -p orbitkd -- [epochs_student] [epochs_online] [n_seeds] [n_train] [n_val]

use orbitkd::harness::{run_study, StudyConfig};

fn arg(i: usize) -> Option<usize> {
    std::env::args().nth(i).and_then(|s| s.parse().ok())
}

fn main() -> orbitkd::error::Result<()> {
    let mut cfg = StudyConfig::desk_scale();
    cfg.epochs_student = arg(1).unwrap_or(cfg.epochs_student);
    cfg.epochs_online = arg(2).unwrap_or(cfg.epochs_online);
    if let Some(n) = arg(3) {
        cfg.seeds = (0..n as u64).collect();
    }
    cfg.n_train = arg(4).unwrap_or(cfg.n_train);
    cfg.n_val = arg(5).unwrap_or(cfg.n_val);
    let out = run_study(&cfg, |s| {
        println!(
            "seed {} plain {:.2} distilled {:.2} teacher {:.2} ({:.0}s)",
            s.seed, s.plain_student_pq, s.distilled_student_pq, s.teacher_pq, s.seconds
        )
    })?;
    println!(
        "mean PQ plain {:.2} distilled {:.2} teacher {:.2} in {:.0}s",
        out.plain_student_pq(),
        out.distilled_student_pq(),
        out.teacher_pq(),
        out.seconds
    );
    Ok(())
}

