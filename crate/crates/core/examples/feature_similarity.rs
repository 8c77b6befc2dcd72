//! Layer-wise linear CKA between a frozen backbone and the same backbone
//! carrying an HPT module, on a shared probe set.

use hpt::analysis::similarity_report;
use hpt::model::{EncoderModel, ModelConfig};
use hpt::petl::{Method, PetlConfig, Placement};
use hpt::train::{gen_synthetic, GeneratorSpec};

fn main() -> hpt::Result<()> {
    let spec = GeneratorSpec {
        train_per_class: 1,
        val_per_class: 1,
        test_per_class: 16,
        ..GeneratorSpec::default()
    };
    let probe = gen_synthetic(&spec)?.test;
    let config = ModelConfig::toy();
    let base = EncoderModel::build(config.clone(), PetlConfig::new(Method::LinearProbe, true), 42, 0)?;
    let hpt = EncoderModel::build(
        config,
        PetlConfig::new(
            Method::Hpt {
                bins: 8,
                placement: Placement::ParallelMhsa,
            },
            true,
        ),
        42,
        0,
    )?;
    println!("probe vs itself");
    print!("{}", similarity_report(&base, &base, &probe.frames)?.table());
    println!("HPT at initialization vs frozen backbone");
    print!("{}", similarity_report(&hpt, &base, &probe.frames)?.table());
    Ok(())
}
