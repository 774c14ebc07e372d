use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::policy::half_log_two_pi;
use super::{normalize_advantages, PPOConfig, PolicyBundle, RlError, RolloutBuffer};
use crate::numerics::{clip_grad_norm, DenseArray, Module, Tape};

/// Means over all minibatches of one update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

struct Minibatch {
    obs: DenseArray,
    actions: DenseArray,
    old_logp: DenseArray,
    advantages: DenseArray,
    returns: DenseArray,
}

fn gather(buffer: &RolloutBuffer, adv: &[f64], idx: &[usize]) -> Result<Minibatch, RlError> {
    let rows = |src: &[Vec<f64>]| DenseArray::from_rows(&idx.iter().map(|&i| src[i].clone()).collect::<Vec<_>>());
    let column = |src: &[f64]| DenseArray::new(vec![idx.len(), 1], idx.iter().map(|&i| src[i]).collect());
    Ok(Minibatch {
        obs: rows(&buffer.observations)?,
        actions: rows(&buffer.actions)?,
        old_logp: column(&buffer.log_probs)?,
        advantages: column(adv)?,
        returns: column(&buffer.returns)?,
    })
}

/// Clipped-surrogate PPO over the buffer. Advantages are normalized once per
/// call; minibatch order comes from `rng`.
pub fn ppo_update<R: Rng + ?Sized>(
    bundle: &mut PolicyBundle,
    buffer: &RolloutBuffer,
    config: &PPOConfig,
    rng: &mut R,
) -> Result<UpdateStats, RlError> {
    config.validate()?;
    let n = buffer.len();
    if buffer.advantages.len() != n || buffer.returns.len() != n {
        return Err(RlError::Buffer("advantages not computed".into()));
    }
    if n == 0 {
        return Err(RlError::Buffer("empty rollout".into()));
    }
    let mut adv = buffer.advantages.clone();
    normalize_advantages(&mut adv);

    let act_dim = bundle.act_dim();
    let entropy_const = act_dim as f64 * (0.5 + half_log_two_pi());
    let logp_const = act_dim as f64 * half_log_two_pi();
    let chunks = config.minibatches.min(n);
    let size = n.div_ceil(chunks);
    let mut order: Vec<usize> = (0..n).collect();
    let mut totals = UpdateStats::default();
    let mut count = 0usize;

    for epoch in 0..config.epochs {
        order.shuffle(rng);
        for (mb_index, idx) in order.chunks(size).enumerate() {
            let mb = gather(buffer, &adv, idx)?;
            let b = idx.len();
            let net = &bundle.net;
            let mut tape = Tape::new();
            let obs = tape.constant(mb.obs);
            let actions = tape.constant(mb.actions);
            let old = tape.constant(mb.old_logp);
            let a = tape.constant(mb.advantages);
            let ret = tape.constant(mb.returns);

            let mu = net.policy.forward(&mut tape, obs)?;
            let ls = net.log_std_var(&mut tape);
            let diff = tape.sub(actions, mu)?;
            let neg_ls = tape.neg(ls);
            let inv_std = tape.exp(neg_ls);
            let z = tape.mul_row(diff, inv_std)?;
            let sq = tape.square(z);
            let quad = tape.sum_last(sq);
            let quad = tape.reshape(quad, vec![b, 1])?;
            let logp = tape.affine(quad, -0.5, -logp_const);
            let ls_sum = tape.sum(ls);
            let ls_row = tape.reshape(ls_sum, vec![1])?;
            let neg_ls_row = tape.neg(ls_row);
            let logp = tape.add_row(logp, neg_ls_row)?;

            let log_ratio = tape.sub(logp, old)?;
            let ratio = tape.exp(log_ratio);
            let surr1 = tape.mul(ratio, a)?;
            let clipped = tape.clamp(ratio, 1.0 - config.clip, 1.0 + config.clip);
            let surr2 = tape.mul(clipped, a)?;
            let surr = tape.minimum(surr1, surr2)?;
            let surr_mean = tape.mean(surr);
            let policy_loss = tape.neg(surr_mean);

            let v = net.value.forward(&mut tape, obs)?;
            let verr = tape.sub(v, ret)?;
            let vsq = tape.square(verr);
            let value_loss = tape.mean(vsq);

            let entropy = tape.affine(ls_sum, 1.0, entropy_const);

            let scaled_v = tape.scale(value_loss, config.value_coef);
            let scaled_e = tape.scale(entropy, -config.entropy_coef);
            let loss = tape.add(policy_loss, scaled_v)?;
            let loss = tape.add(loss, scaled_e)?;

            let pl = tape.value(policy_loss).data()[0];
            let vl = tape.value(value_loss).data()[0];
            let total = tape.value(loss).data()[0];
            for (what, x) in [("policy loss", pl), ("value loss", vl), ("loss", total)] {
                if !x.is_finite() {
                    return Err(RlError::NonFiniteLoss {
                        what,
                        epoch,
                        minibatch: mb_index,
                    });
                }
            }

            let lr = tape.value(log_ratio).data();
            let r = tape.value(ratio).data();
            let kl = lr.iter().zip(r).map(|(l, r)| (r - 1.0) - l).sum::<f64>() / b as f64;
            let clip_frac = r.iter().filter(|r| (*r - 1.0).abs() > config.clip).count() as f64 / b as f64;
            totals.policy_loss += pl;
            totals.value_loss += vl;
            totals.entropy += tape.value(entropy).data()[0];
            totals.approx_kl += kl;
            totals.clip_fraction += clip_frac;
            count += 1;

            let grads = tape.backward(loss)?;
            let net = &mut bundle.net;
            net.zero_grad();
            net.accumulate_grads(&grads);
            if config.max_grad_norm > 0.0 {
                clip_grad_norm(net, config.max_grad_norm);
            }
            bundle.optimizer.step(net)?;
        }
    }
    let c = count as f64;
    Ok(UpdateStats {
        policy_loss: totals.policy_loss / c,
        value_loss: totals.value_loss / c,
        entropy: totals.entropy / c,
        approx_kl: totals.approx_kl / c,
        clip_fraction: totals.clip_fraction / c,
    })
}
