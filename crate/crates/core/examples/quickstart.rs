//! Train one batch-norm and one IABN source model, then compare test-batch
//! normalization with NOTE on a temporally correlated stream of the shifted task.
//!
//! cargo run --release --example quickstart -- [delta] [seed]

use tta_core::adapt::{default_config, run_tta, Method};
use tta_core::harness::{gen_synthetic_dataset, Split, SyntheticTaskSpec};
use tta_core::model::{Backbone, BackboneConfig, TrainConfig};
use tta_core::normalization::{Alpha, NormKind};
use tta_core::streams::{make_dirichlet_stream, make_iid_stream, StreamSpec};

fn main() -> tta_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let delta: f64 = args.next().map_or(Ok(0.1), |a| a.parse()).expect("delta must be a number");
    let seed: u64 = args.next().map_or(Ok(0), |a| a.parse()).expect("seed must be an integer");

    let task = SyntheticTaskSpec::default();
    let source = gen_synthetic_dataset(&task, Split::Source, seed)?;
    let target = gen_synthetic_dataset(&task, Split::Target, seed)?;
    let train = TrainConfig::default();

    let mut bn = Backbone::build(BackboneConfig::default(), seed)?;
    let acc = bn.train_source(&source, &train, seed)?;
    println!("batch-norm source model: train accuracy {acc:.3}");
    let iabn_config = BackboneConfig::default().with_norm(NormKind::InstanceAware { alpha: Alpha::Finite(4.0) });
    let mut iabn = Backbone::build(iabn_config, seed)?;
    let acc = iabn.train_source(&source, &train, seed)?;
    println!("IABN source model:       train accuracy {acc:.3}");

    let streams = [
        ("i.i.d.".to_string(), make_iid_stream(target.len(), seed)),
        (format!("dirichlet delta={delta}"), make_dirichlet_stream(&target.labels, &StreamSpec::uniform(delta, task.classes, seed))?),
    ];
    for (name, order) in &streams {
        for method in [Method::Source, Method::BnStats, Method::Tent, Method::Note] {
            let backbone = if method.needs_iabn_backbone() { &iabn } else { &bn };
            let run = run_tta(method, backbone, &target, order, &default_config(method), seed)?;
            println!("{name:>22}  {method:<9} error {:.3}", run.trace.error_rate());
        }
    }
    Ok(())
}
