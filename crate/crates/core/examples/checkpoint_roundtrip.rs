//! Saves a model, reloads it and compares logits bit for bit.

use xling::model::forward;
use xling::{Checkpoint, ModelConfig, ModelParams};

fn main() -> xling::Result<()> {
    let params = ModelParams::<f32>::init(ModelConfig::desk(200), 3)?;
    let path = std::env::temp_dir().join("xling_roundtrip.bin");
    let ck = Checkpoint::new(params);
    ck.save(&path)?;
    let bytes = std::fs::metadata(&path).map_err(|e| xling::Error::io(&path, e))?.len();
    println!("{} tensors, {} params, {bytes} bytes", ck.params.named().len(), ck.params.param_count());

    let back = Checkpoint::load(&path)?;
    let ids: Vec<u32> = (0..24).map(|i| (i * 37 % 200) as u32).collect();
    let a = forward(&ck.params, &ids)?;
    let b = forward(&back.params, &ids)?;
    let same = a.logits.data().iter().zip(b.logits.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    println!("logits identical: {same}");
    println!("re-encoded bytes identical: {}", back.to_bytes() == ck.to_bytes());
    std::fs::remove_file(&path).ok();
    Ok(())
}
