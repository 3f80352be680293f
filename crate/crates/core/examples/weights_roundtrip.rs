//! Writes a randomly initialised model directory, reads it back and checks
//! that both copies produce identical output.

use unet_edge::storage::{self, WeightStore};
use unet_edge::{build, Tensor, UNetConfig};

fn main() -> unet_edge::Result<()> {
    let net = build(UNetConfig::new(2, 8).with_input_size(64, 64))?.with_random_weights(42);
    let dir = std::env::temp_dir().join("unet_edge_roundtrip");
    storage::save_model(&dir, &net)?;

    let store = storage::read_store(dir.join(storage::WEIGHTS_FILE))?;
    println!("{} tensors in {}", store.len(), dir.display());
    for (name, t) in store.iter().take(4) {
        println!("  {name:<20} {:?}", t.dims);
    }
    let bytes = store.to_bytes();
    assert_eq!(WeightStore::from_bytes(&bytes)?, store);
    println!("container is {} bytes", bytes.len());

    let back = storage::load_model(&dir)?;
    let x = Tensor::full(vec![1, 3, 64, 64], 0.5);
    let same = net.forward(&x)?.as_f32()? == back.forward(&x)?.as_f32()?;
    println!("outputs identical: {same}");
    Ok(())
}
