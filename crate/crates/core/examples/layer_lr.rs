//! Layer-wise learning-rate multipliers from a layer importance profile:
//! the most important layer gets 1 − λ, the least important keeps 1.

use parashift::importance::LayerImportanceProfile;
use parashift::training::layer_lr_coefficients;

fn main() -> parashift::Result<()> {
    let profile = LayerImportanceProfile::from_layers(vec![10.0, 30.0, 20.0, 12.5]);
    for lambda in [0.0, 0.4, 0.8] {
        let s = layer_lr_coefficients(&profile, lambda)?;
        println!("lambda {lambda}: {:?}", s.layers);
    }
    let s = layer_lr_coefficients(&profile, 0.4)?;
    for name in ["layer.1.wq", "layer.3.attn_norm", "embedding", "adaptor.0"] {
        println!("  {name:<18} x{}", s.multiplier(name));
    }
    Ok(())
}
