//! Folding trained LoRA and SSF parameters back into the backbone weights
//! leaves the logits unchanged.

use hpt::model::{EncoderModel, ModelConfig};
use hpt::nn::fill_uniform;
use hpt::petl::{Method, PetlConfig, SsfSite};
use hpt::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> hpt::Result<()> {
    let config = ModelConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut frames = Tensor::zeros(&[config.max_len, config.features]);
    fill_uniform(&mut frames, 1.0, &mut rng);

    let methods = [
        Method::Lora { rank: 4 },
        Method::Ssf {
            insertions: SsfSite::ALL.to_vec(),
        },
    ];
    for method in methods {
        for shared in [true, false] {
            let petl = PetlConfig::new(method.clone(), shared);
            let mut model = EncoderModel::build(config.clone(), petl, 0, 1)?;
            // stand-in for training: move every trainable tensor off its init
            for id in model.trainable_ids() {
                fill_uniform(model.store.value_mut(id), 0.2, &mut rng);
            }
            let merged = model.merged()?;
            let diff = model.logits(&frames)?.max_abs_diff(&merged.logits(&frames)?);
            println!(
                "{method} shared={shared}: {} -> {} parameters, max |logit difference| {diff:.2e}",
                model.store.count(false),
                merged.store.count(false)
            );
        }
    }
    Ok(())
}
