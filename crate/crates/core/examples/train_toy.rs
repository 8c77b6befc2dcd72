//! Trains a linear probe and HPT(8) on the synthetic mixture dataset, whose
//! classes share a zero mean and differ only in their value distributions.

use hpt::model::{EncoderModel, ModelConfig};
use hpt::petl::{Method, PetlConfig, Placement};
use hpt::train::{gen_synthetic, train_with, GeneratorSpec, TrainConfig};

fn main() -> hpt::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let spec = GeneratorSpec {
        seq_len: 16,
        train_per_class: 50,
        val_per_class: 25,
        test_per_class: 25,
        ..GeneratorSpec::default()
    };
    let data = gen_synthetic(&spec)?;
    let methods = [
        Method::LinearProbe,
        Method::Hpt {
            bins: 8,
            placement: Placement::ParallelMhsa,
        },
    ];
    for method in methods {
        let petl = PetlConfig::new(method, true);
        let mut model = EncoderModel::build(ModelConfig::toy(), petl.clone(), 42, 0)?;
        let cfg = TrainConfig {
            batch_size: 16,
            max_epochs: epochs,
            ..TrainConfig::for_method(&petl.method)
        };
        println!("{} ({} trainable)", petl.method, model.store.count(true));
        let report = train_with(&mut model, &data, &cfg, |e| {
            println!("  epoch {}  train {:.4}  val {:.4}  acc {:.3}", e.epoch, e.train_loss, e.val_loss, e.val_acc)
        })?;
        println!("  test accuracy {:.3} (best epoch {})", report.test_accuracy, report.best_epoch);
    }
    Ok(())
}
