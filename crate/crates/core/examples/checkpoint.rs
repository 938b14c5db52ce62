//! Saves a model, inspects the header and shows corruption being detected.

use vqlab::model::{build_model, ModelConfig};
use vqlab::train::checkpoint::{decode_checkpoint, encode_checkpoint, inspect_checkpoint, save_checkpoint};

fn main() -> vqlab::Result<()> {
    let model = build_model::<f32>(&ModelConfig::qe(), 42)?;
    let path = std::env::temp_dir().join("vqlab_example.ckpt");
    save_checkpoint(&model, &path)?;

    let info = inspect_checkpoint(&path)?;
    println!("version {} crc32 {:08x} size {} bytes", info.version, info.crc32, info.size_bytes);
    for t in info.meta.tensors.iter().take(6) {
        println!("  {:<32} {:?}", t.name, t.shape);
    }
    println!("  ... {} tensors", info.meta.tensors.len());

    let bytes = encode_checkpoint(&model)?;
    let again = encode_checkpoint(&decode_checkpoint(&bytes)?)?;
    println!("round trip bit-exact: {}", bytes == again);

    let mut bad = bytes.clone();
    bad[bytes.len() / 2] ^= 0x10;
    println!("flipped byte: {:?}", decode_checkpoint(&bad).err());
    Ok(())
}
