//! Any type implementing `Classifier` can be attacked, inverted and
//! evaluated. Here: a fixed linear model on 2-D inputs.

use iat::attack::{pgd_attack, AttackConfig};
use iat::inverse::{instance_inverse, InverseConfig};
use iat::model::ForwardNodes;
use iat::{Classifier, NodeId, Tensor, Trace};

struct Linear {
    shape: [usize; 1],
    w: Tensor,
    b: Tensor,
}

impl Classifier for Linear {
    fn input_shape(&self) -> &[usize] {
        &self.shape
    }

    fn num_classes(&self) -> usize {
        self.b.len()
    }

    fn bind(&self, trace: &mut Trace, trainable: bool) -> iat::Result<Vec<NodeId>> {
        let mut put = |t: &Tensor| {
            if trainable {
                trace.leaf(t.clone())
            } else {
                trace.constant(t.clone())
            }
        };
        Ok(vec![put(&self.w)?, put(&self.b)?])
    }

    fn forward_bound(
        &self,
        trace: &mut Trace,
        params: &[NodeId],
        x: NodeId,
    ) -> iat::Result<ForwardNodes> {
        let z = trace.matmul(x, params[0])?;
        let logits = trace.add_bias(z, params[1])?;
        Ok(ForwardNodes {
            features: x,
            logits,
        })
    }
}

fn main() -> anyhow::Result<()> {
    let model = Linear {
        shape: [2],
        w: Tensor::new(vec![2, 2], vec![1.0, -1.0, 2.0, 0.5])?,
        b: Tensor::new(vec![2], vec![0.0, 0.1])?,
    };
    let x = Tensor::from_rows(&[vec![0.3, 0.2], vec![-0.4, 0.6]])?;
    let y = [0, 1];
    let adv = pgd_attack(
        &model,
        &x,
        &y,
        &AttackConfig::pgd_scaled(0.1, 20).with_clamp(None),
        0,
    )?;
    let inv = instance_inverse(
        &model,
        &x,
        &y,
        None,
        &InverseConfig::scaled(0.1).with_clamp(None).with_beta(0.0),
        0,
    )?;
    for (name, t) in [("x", &x), ("x̂", &adv), ("x̌", &inv)] {
        let p = model.forward(t, false)?.probabilities();
        println!(
            "{name}: {:?}  p(y) = [{:.4}, {:.4}]",
            t.data(),
            p.row(0)[0],
            p.row(1)[1]
        );
    }
    Ok(())
}
