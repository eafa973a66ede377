use std::time::Instant;

use mmoe_core::config::RunConfig;
use mmoe_core::harness::Trainer;
use mmoe_core::model::Variant;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = RunConfig::default();
    for kv in &args {
        let (k, v) = kv.split_once('=').unwrap();
        cfg.set(k, v).unwrap();
    }
    for v in Variant::ALL {
        let mut c = cfg.clone();
        c.variant = v;
        let t = Instant::now();
        let mut tr = Trainer::new(&c).unwrap();
        let mut last = 0.0;
        tr.run_until(c.train.iterations, |_, s| {
            last = 0.98 * last + 0.02 * s.total;
            Ok(())
        })
        .unwrap();
        let e = tr.evaluate_val().unwrap();
        let rows: Vec<String> = e.table.rows.iter().map(|r| format!("{}={:.4}", r.metric, r.value)).collect();
        println!(
            "{v:>11}: val {:.4} losses {:?} train~{last:.4} {} [{:.0}s]",
            e.total_loss,
            e.task_losses.iter().map(|l| format!("{l:.4}")).collect::<Vec<_>>(),
            rows.join(" "),
            t.elapsed().as_secs_f64()
        );
    }
}
