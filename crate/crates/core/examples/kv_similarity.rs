//! Key/value magnitudes and cosine similarity across unrolled layers of a
//! recursive model, grouped by shared block.

use mor::model::{Model, ModelConfig};
use mor::train::data::{synthetic_corpus, Corpus};
use mor::train::eval::kv_similarity_report;

fn main() -> mor::Result<()> {
    let model = Model::new(ModelConfig::toy(), None, 0)?;
    let batch = Corpus::from_text(&synthetic_corpus(1 << 14, 0)).fixed_batches(1, 4, 64)?.remove(0);
    let r = kv_similarity_report(&model, &batch)?;
    println!("layer block  |k|     |v|");
    for i in 0..r.layers.len() {
        println!("{:>5} {:>5} {:>7.4} {:>7.4}", r.layers[i], r.blocks[i], r.key_norms[i], r.value_norms[i]);
    }
    println!("mean key cosine within shared blocks {:?}", r.within_block_cosine);
    println!("mean key cosine across blocks        {:?}", r.across_block_cosine);
    Ok(())
}
