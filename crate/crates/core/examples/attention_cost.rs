//! Multiplication counts of dense and sliding-window attention, plus the
//! visible window of each row of a sparse attention map.

use dtwireless::transformer::{attention_cost, attention_weights, init_params, AttentionVariant, TransformerConfig};
use dtwireless::numerics::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let (d, heads, w) = (64, 8, 8);
    println!("{:>6} {:>12} {:>12}", "T", "dense", "sparse(w=8)");
    for t in [32, 64, 128, 256, 512] {
        let dense = attention_cost(t, d, heads, AttentionVariant::Dense);
        let sparse = attention_cost(t, d, heads, AttentionVariant::Sparse { window: w });
        println!("{t:>6} {dense:>12} {sparse:>12}");
    }

    let cfg = TransformerConfig {
        num_blocks: 1,
        model_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        attention: AttentionVariant::Sparse { window: 2 },
        max_sequence_len: 6,
        ..TransformerConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = init_params(&cfg, "t.", &mut rng);
    let x = Tensor::uniform(&[6, 8], -1.0, 1.0, &mut rng);
    let maps = attention_weights(&params, &cfg, "t.", 0, &x).unwrap();
    println!("head 0 weights with window 2:");
    for r in 0..6 {
        let row: Vec<String> = (0..6).map(|c| format!("{:.2}", maps[0].data()[r * 6 + c])).collect();
        println!("  {}", row.join(" "));
    }
}
