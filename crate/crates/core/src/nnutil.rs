//! Small shared building blocks for the codec networks.

use dvco_autograd::nn::{Conv2d, GroupNorm, ParamStore};
use dvco_autograd::tensor::Tensor;
use rand_chacha::ChaCha12Rng;

/// Largest of {8, 4, 2, 1} that divides `channels`.
pub fn norm_groups(channels: usize) -> usize {
    for g in [8, 4, 2] {
        if channels % g == 0 {
            return g;
        }
    }
    1
}

/// Pre-activation residual block: `x + conv(act(gn(conv(act(gn(x))))))`.
/// An optional projection handles channel changes on the skip path.
pub struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
    ) -> Self {
        let gn1 = GroupNorm::new(store, &format!("{name}.gn1"), in_ch, norm_groups(in_ch));
        let conv1 = Conv2d::k3(store, rng, &format!("{name}.conv1"), in_ch, out_ch, 1);
        let gn2 = GroupNorm::new(store, &format!("{name}.gn2"), out_ch, norm_groups(out_ch));
        let conv2 = Conv2d::k3(store, rng, &format!("{name}.conv2"), out_ch, out_ch, 1);
        let skip = if in_ch != out_ch {
            Some(Conv2d::k1(store, rng, &format!("{name}.skip"), in_ch, out_ch))
        } else {
            None
        };
        ResBlock { gn1, conv1, gn2, conv2, skip }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.forward_with_time(x, None)
    }

    /// `time` is a `[1, out_ch, 1, 1]` bias added between the convolutions.
    pub fn forward_with_time(&self, x: &Tensor, time: Option<&Tensor>) -> Tensor {
        let mut h = self.conv1.forward(&self.gn1.forward(x).silu());
        if let Some(t) = time {
            let s = h.shape().to_vec();
            h = h.add(&t.broadcast_to(&s));
        }
        let h = self.conv2.forward(&self.gn2.forward(&h).silu());
        let base = match &self.skip {
            Some(p) => p.forward(x),
            None => x.clone(),
        };
        base.add(&h)
    }

    pub fn convs(&self) -> Vec<&Conv2d> {
        let mut v = vec![&self.conv1, &self.conv2];
        if let Some(s) = &self.skip {
            v.push(s);
        }
        v
    }
}
