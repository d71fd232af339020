//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::process::ExitCode;
use std::time::Duration;

use siamtpn_core::selftest::suite::{self, Check};

struct Criterion {
    id: u32,
    title: &'static str,
    budget: Option<Duration>,
    run: fn() -> Check,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion {
            id: 1,
            title: "finite-difference gradients, every op and the tiny model, >= 10 seeds",
            budget: Some(Duration::from_secs(120)),
            run: || suite::check_gradient_suite(suite::GRAD_SEEDS),
        },
        Criterion {
            id: 2,
            title: "kernels and blocks match naive references to 1e-12",
            budget: None,
            run: || suite::check_oracles(20),
        },
        Criterion {
            id: 3,
            title: "pooling attention at R=1 equals multi-head attention, 20 configs",
            budget: None,
            run: || suite::check_pa_identity(20),
        },
        Criterion {
            id: 4,
            title: "analytic attention cost equals counted multiply-adds over the sweep",
            budget: None,
            run: suite::check_cost_model,
        },
        Criterion {
            id: 5,
            title: "P3/P5 pass-through and template/search weight sharing",
            budget: None,
            run: suite::check_passthrough_and_sharing,
        },
        Criterion {
            id: 6,
            title: "toy model overfits one pair: loss < 0.1, IoU >= 0.7",
            budget: Some(Duration::from_secs(600)),
            run: suite::check_overfit,
        },
        Criterion {
            id: 7,
            title: "held-out one-pass tracking: mean IoU >= 0.5, AUC >= 0.45, oracle AUC = 1",
            budget: None,
            run: suite::check_tracking,
        },
        Criterion {
            id: 8,
            title: "pooled fusion cheaper in attention MACs and median latency",
            budget: None,
            run: suite::check_efficiency,
        },
        Criterion {
            id: 9,
            title: "weights round trip within 1e-6, corruptions give distinct codes",
            budget: None,
            run: suite::check_serialization,
        },
        Criterion {
            id: 10,
            title: "metrics match the hand-computed 5-frame fixture",
            budget: None,
            run: suite::check_metrics_fixture,
        },
    ];

    let mut failed = 0;
    for c in &criteria {
        let mut check = (c.run)();
        if let Some(budget) = c.budget {
            if check.secs > budget.as_secs_f64() {
                check.passed = false;
                check
                    .detail
                    .push_str(&format!("; over the {}s budget", budget.as_secs()));
            }
        }
        println!(
            "[{}] criterion {:>2}: {} ({:.1}s)\n      {}",
            if check.passed { "PASS" } else { "FAIL" },
            c.id,
            c.title,
            check.secs,
            check.detail
        );
        if !check.passed {
            failed += 1;
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
