//! Two-level convolutional U-Net over HWC feature maps.

use raliflow_tensor::{Graph, ParamId, ParamStore, Var};

use crate::error::Result;
use crate::rng::SplitMix64;

#[derive(Clone, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
}

impl Conv {
    fn new(
        store: &mut ParamStore,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        let fan_in = k * k * cin;
        let weight = store.add(
            format!("{name}.weight"),
            rng.uniform_tensor(&[k, k, cin, cout], fan_in),
        );
        let bias = store.add(format!("{name}.bias"), rng.uniform_tensor(&[cout], fan_in));
        Self {
            weight,
            bias,
            stride,
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, relu: bool) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.conv2d(x, w, self.stride)?;
        let y = g.add(y, b)?;
        Ok(if relu { g.relu(y) } else { y })
    }
}

/// Encoder: conv + ReLU then a strided conv per level; bottleneck conv;
/// decoder: upsample, skip concat, conv + ReLU per level; final 1x1 conv.
#[derive(Clone, Debug)]
pub struct UNet {
    enc1: Conv,
    down1: Conv,
    enc2: Conv,
    down2: Conv,
    bottleneck: Conv,
    dec2: Conv,
    dec1: Conv,
    head: Conv,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl UNet {
    pub const DEPTH: usize = 2;

    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        base: usize,
        out_channels: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        let (w1, w2) = (base, 2 * base);
        let mut conv = |name: &str, k, cin, cout, stride| {
            Conv::new(
                store,
                &format!("{prefix}.{name}"),
                k,
                cin,
                cout,
                stride,
                rng,
            )
        };
        Self {
            enc1: conv("enc1", 3, in_channels, w1, 1),
            down1: conv("down1", 3, w1, w1, 2),
            enc2: conv("enc2", 3, w1, w2, 1),
            down2: conv("down2", 3, w2, w2, 2),
            bottleneck: conv("bottleneck", 3, w2, w2, 1),
            dec2: conv("dec2", 3, 2 * w2, w2, 1),
            dec1: conv("dec1", 3, w2 + w1, w1, 1),
            head: conv("head", 1, w1, out_channels, 1),
            in_channels,
            out_channels,
        }
    }

    /// `[H, W, in]` to `[H, W, out]`; H and W must be divisible by 4.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let e1 = self.enc1.forward(g, store, x, true)?;
        let d1 = self.down1.forward(g, store, e1, true)?;
        let e2 = self.enc2.forward(g, store, d1, true)?;
        let d2 = self.down2.forward(g, store, e2, true)?;
        let b = self.bottleneck.forward(g, store, d2, true)?;
        let u2 = g.upsample2x(b)?;
        let u2 = g.concat(&[u2, e2], 2)?;
        let u2 = self.dec2.forward(g, store, u2, true)?;
        let u1 = g.upsample2x(u2)?;
        let u1 = g.concat(&[u1, e1], 2)?;
        let u1 = self.dec1.forward(g, store, u1, true)?;
        self.head.forward(g, store, u1, false)
    }

    pub fn bias_ids(&self) -> Vec<ParamId> {
        [
            &self.enc1,
            &self.down1,
            &self.enc2,
            &self.down2,
            &self.bottleneck,
            &self.dec2,
            &self.dec1,
            &self.head,
        ]
        .iter()
        .map(|c| c.bias)
        .collect()
    }
}
