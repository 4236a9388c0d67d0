//! Sensitivity sweeps over the loss blend, the pruning threshold and the
//! lazy-update interval.

use crate::report::SweepReport;
use crate::train::{InitOffset, scenario_boxes};
use tinydet_core::prune::{
    DriftSpec, PruneSchedule, cosine_similarity_matrix, derive_mask, random_bank,
    simulate_convergence, sparsity,
};
use tinydet_core::salnwd::{SalNwdConfig, sal_nwd_batch};
use tinydet_core::tensor::FilterBank;

/// Hybrid-loss totals on the nearby and distant scenario per blend value.
pub fn lambda_sweep(lambdas: &[f64], seed: u64) -> SweepReport {
    let (nearby_preds, nearby_tgts) = scenario_boxes(InitOffset::Nearby, seed);
    let (distant_preds, distant_tgts) = scenario_boxes(InitOffset::Distant, seed);
    let mut report = SweepReport::new("lambda sweep", &["lambda", "nearby_total", "distant_total"]);
    for &lambda in lambdas {
        let cfg = SalNwdConfig {
            lambda,
            ..Default::default()
        };
        let nearby = sal_nwd_batch(&nearby_preds, &nearby_tgts, &cfg)
            .expect("scenario batches are non-empty")
            .total;
        let distant = sal_nwd_batch(&distant_preds, &distant_tgts, &cfg)
            .expect("scenario batches are non-empty")
            .total;
        report.push_row(vec![lambda.into(), nearby.into(), distant.into()]);
    }
    report
}

/// Sparsity and active-filter count of one bank per threshold.
pub fn theta_sweep(bank: &FilterBank, thetas: &[f64]) -> SweepReport {
    let sim = cosine_similarity_matrix(bank);
    let total = bank.c_out();
    let mut report = SweepReport::new("theta sweep", &["theta", "sparsity_pct", "active", "total"]);
    for &theta in thetas {
        let mask = derive_mask(&sim, theta);
        report.push_row(vec![
            theta.into(),
            sparsity(&mask).into(),
            mask.active().into(),
            total.into(),
        ]);
    }
    report
}

/// Sparsity statistics over freshly drawn random banks per threshold.
pub fn theta_sweep_stats(
    shape: (usize, usize, usize),
    n_seeds: u64,
    base_seed: u64,
    thetas: &[f64],
) -> SweepReport {
    let (c_out, c_in, k) = shape;
    let mut report = SweepReport::new(
        "theta sweep (random banks)",
        &[
            "theta",
            "mean_sparsity_pct",
            "min_pct",
            "max_pct",
            "zero_seeds",
            "seeds",
        ],
    );
    let sims: Vec<_> = (0..n_seeds)
        .map(|i| cosine_similarity_matrix(&random_bank(c_out, c_in, k, base_seed + i)))
        .collect();
    for &theta in thetas {
        let sps: Vec<f64> = sims
            .iter()
            .map(|s| sparsity(&derive_mask(s, theta)))
            .collect();
        let mean = sps.iter().sum::<f64>() / sps.len() as f64;
        let min = sps.iter().copied().fold(f64::INFINITY, f64::min);
        let max = sps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let zeros = sps.iter().filter(|s| **s == 0.0).count();
        report.push_row(vec![
            theta.into(),
            mean.into(),
            min.into(),
            max.into(),
            zeros.into(),
            (n_seeds as usize).into(),
        ]);
    }
    report
}

/// Sparsity at each checkpoint and recomputation counts per lazy
/// interval, on the shared drift simulation.
pub fn lazy_sweep(
    drift: &DriftSpec,
    theta: f64,
    warmup: u32,
    intervals: &[u32],
    checkpoints: &[u32],
    seed: u64,
) -> SweepReport {
    let mut columns: Vec<String> = vec!["interval".to_string()];
    for cp in checkpoints {
        columns.push(format!("sparsity_at_ep{cp}"));
    }
    columns.push("recomputes".to_string());
    let column_refs: Vec<&str> = columns.iter().map(String::as_str).collect();
    let mut report = SweepReport::new("lazy interval sweep", &column_refs);

    for &interval in intervals {
        let schedule = PruneSchedule {
            theta,
            warmup_epochs: warmup,
            interval,
        };
        let trace = simulate_convergence(drift, schedule, seed)
            .expect("drift simulation uses a validated schedule");
        let mut row = vec![interval.into()];
        for &cp in checkpoints {
            row.push(trace.at_epoch(cp).into());
        }
        row.push(trace.recompute_count().into());
        report.push_row(row);
    }
    report
}
