//! Trains the desk model on the default synthetic dataset and prints
//! Recall@1/5/10 before training and after every epoch.
//!
//! `cargo run --release --example desk_run -- [epochs] [no-crica]`

use std::time::Instant;

use crica::config::ModelConfig;
use crica::dataset::Dataset;
use crica::model::CricaModel;
use crica::retrieval::GtRule;
use crica::synth::{SynthConfig, SynthDataset};
use crica::train::{evaluate_model, TrainConfig, Trainer};

fn main() -> crica::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs = args.first().and_then(|s| s.parse().ok()).unwrap_or(10);
    let use_crica = args.get(1).is_none_or(|s| s != "no-crica");

    let data = Dataset::from_synth(&SynthDataset::generate(&SynthConfig::default())?);
    let (train, eval) = (data.train_set(), data.retrieval_set());

    let model = CricaModel::new(ModelConfig { use_crica, ..ModelConfig::desk() }, 0)?;
    let rule = GtRule::Euclidean(25.0);
    let ns = [1, 5, 10];
    println!("untrained R@1/5/10 = {:?}", evaluate_model(&model, &eval, rule, &ns, 16)?);

    let mut trainer = Trainer::new(model, TrainConfig { epochs, ..TrainConfig::desk() })?;
    let t0 = Instant::now();
    trainer.fit(&train, None, |t, rec| {
        let r = evaluate_model(&t.model, &eval, rule, &ns, 16)?;
        println!("{rec}  R@1/5/10={r:?}  {:.1?}", t0.elapsed());
        Ok(())
    })
}
