"""SI-SDR objective, AdamW optimizer and the deterministic toy-scale
training loop over generated datasets."""

import json
import logging
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import cruse, dsp

log = logging.getLogger("roisep.train")


@dataclass
class TrainConfig:
    lr: float = 0.001
    weight_decay: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 4
    seed: int = 0
    clamp_db: float = 60.0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")


def si_sdr(est, ref, clamp_db=60.0):
    """Scale-invariant SDR in dB: both signals mean-subtracted, the estimate
    projected onto the reference, clamped to +-clamp_db."""
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError("estimate and reference lengths differ")
    ref = ref - ref.mean()
    est = est - est.mean()
    ref_pow = float(ref @ ref)
    if ref_pow == 0.0:
        raise ValueError("reference signal is identically zero")
    alpha = float(est @ ref) / ref_pow
    proj = alpha * ref
    num = float(proj @ proj)
    err = proj - est
    den = float(err @ err)
    if den == 0.0:
        return clamp_db
    if num == 0.0:
        return -clamp_db
    return float(np.clip(10.0 * np.log10(num / den), -clamp_db, clamp_db))


def si_sdr_loss(est, ref, clamp_db=60.0):
    """Differentiable negative SI-SDR of an estimate Tensor against a
    constant reference array."""
    ref0 = np.asarray(ref, dtype=est.data.dtype)
    ref0 = ref0 - ref0.mean()
    ref_pow = float(ref0 @ ref0)
    if ref_pow == 0.0:
        raise ValueError("reference signal is identically zero")
    est0 = ad.sub_scalar(est, ad.mean_all(est))
    alpha = ad.mulc(ad.sum_all(ad.mulc(est0, ref0)), 1.0 / ref_pow)
    proj = ad.scale(alpha, ref0)
    err = ad.sub(proj, est0)
    num = ad.clamp(ad.sum_all(ad.mul(proj, proj)), lo=1e-30)
    den = ad.clamp(ad.sum_all(ad.mul(err, err)), lo=1e-30)
    value = ad.mulc(ad.sub(ad.log10(num), ad.log10(den)), 10.0)
    return ad.neg(ad.clamp(value, -clamp_db, clamp_db))


def clip_loss_graph(model_cfg, params_t, mix, target_phi, clamp_db=60.0):
    """Loss graph for one clip: separate the mixture through the mask network
    and score -SI-SDR against the channel-averaged reverberant target."""
    spec_l = dsp.stft(mix[0])
    spec_r = dsp.stft(mix[1])
    spec_avg = dsp.stft(dsp.channel_average(mix))
    x = ad.Tensor(cruse.spectrogram_stack(spec_l, spec_r))
    re, im = cruse.mask_graph(model_cfg, params_t, x)
    y_re = np.ascontiguousarray(spec_avg.real, dtype=np.float32)
    y_im = np.ascontiguousarray(spec_avg.imag, dtype=np.float32)
    masked_re = ad.sub(ad.mulc(re, y_re), ad.mulc(im, y_im))
    masked_im = ad.add(ad.mulc(re, y_im), ad.mulc(im, y_re))
    est = ad.istft_pair(masked_re, masked_im, mix.shape[1])
    return si_sdr_loss(est, target_phi, clamp_db)


@dataclass
class OptimState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adamw_step(params, grads, state, cfg):
    """One decoupled-weight-decay Adam update:
    w' = w - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * w."""
    step = state.step + 1
    bc1 = 1.0 - cfg.beta1**step
    bc2 = 1.0 - cfg.beta2**step
    new_params, new_m, new_v = {}, {}, {}
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[name] = (w - cfg.lr * (m_hat / (np.sqrt(v_hat) + cfg.eps))
                            - cfg.lr * cfg.weight_decay * w).astype(w.dtype)
        new_m[name] = m.astype(w.dtype)
        new_v[name] = v.astype(w.dtype)
    return new_params, OptimState(m=new_m, v=new_v, step=step)


def _clip_grads(model_cfg, params, mix, target_phi, clamp_db):
    tape = ad.Tape()
    params_t = cruse.wrap_params(params, tape)
    loss = clip_loss_graph(model_cfg, params_t, mix, target_phi, clamp_db)
    tape.backward(loss)
    return float(loss.data), {k: ad.grad_of(t) for k, t in params_t.items()}


def validate_delta_si_sdr(model_cfg, params, clips, clamp_db=60.0):
    """Mean SI-SDR improvement of the separator output over the raw
    channel-averaged mixture."""
    deltas = []
    for mix, target_phi in clips:
        est = cruse.separate(model_cfg, params, mix)
        mix_phi = dsp.channel_average(mix)
        deltas.append(si_sdr(est, target_phi, clamp_db)
                      - si_sdr(mix_phi, target_phi, clamp_db))
    return float(np.mean(deltas))


def train_loop(train_clips, model_cfg, cfg, val_clips=None,
               checkpoint_path=None, log_path=None, params=None):
    """Deterministic training over in-memory (mix, target_phi) clip pairs.

    Per epoch: seeded shuffle, forward/backward per clip, gradients averaged
    over each batch, AdamW step. Returns (params, history); when a
    validation set is given the returned/checkpointed parameters are the
    best-validation ones.
    """
    if not train_clips:
        raise ValueError("empty training dataset")
    if params is None:
        params = cruse.init_params(model_cfg, np.random.default_rng(cfg.seed))
    state = OptimState.zeros_like(params)
    history = []
    best_val = -np.inf
    best_params = params
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            t0 = time.monotonic()
            order = np.random.default_rng((cfg.seed, epoch)).permutation(len(train_clips))
            losses = []
            for start in range(0, len(order), cfg.batch_size):
                batch = order[start : start + cfg.batch_size]
                acc = None
                for idx in batch:
                    mix, target_phi = train_clips[idx]
                    loss_val, grads = _clip_grads(model_cfg, params, mix,
                                                  target_phi, cfg.clamp_db)
                    if not np.isfinite(loss_val):
                        raise RuntimeError(
                            f"non-finite loss at epoch {epoch}, clip {idx}: {loss_val}")
                    losses.append(loss_val)
                    if acc is None:
                        acc = grads
                    else:
                        for k in acc:
                            acc[k] = acc[k] + grads[k]
                scale = 1.0 / len(batch)
                grads = {k: (g * scale).astype(np.float32) for k, g in acc.items()}
                params, state = adamw_step(params, grads, state, cfg)
            mean_loss = float(np.mean(losses))
            val_delta = None
            if val_clips:
                val_delta = validate_delta_si_sdr(model_cfg, params, val_clips,
                                                  cfg.clamp_db)
                if val_delta > best_val:
                    best_val = val_delta
                    best_params = params
            entry = {"epoch": epoch, "mean_loss_db": mean_loss,
                     "val_delta_sisdr_db": val_delta,
                     "wall_time_s": time.monotonic() - t0}
            history.append(entry)
            log.info("epoch %d: loss %.3f dB, val delta %s", epoch, mean_loss,
                     "n/a" if val_delta is None else f"{val_delta:.3f} dB")
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    final = best_params if val_clips else params
    if checkpoint_path:
        cruse.save_checkpoint(checkpoint_path, model_cfg, final)
    return final, history
