"""Adversarial training loop, optimizer, and initialization.

Each cycle runs critic_steps_per_gen critic updates (Wasserstein loss with
gradient penalty, fresh real batches and interpolation draws; the fake
batch is the previous generator step's detached output, bootstrapped with
one extra forward at the start of a phase) followed by one generator update
(composite loss on the final output, weighted supervision of the
projection-domain intermediate, and a small adversarial term).  Everything
is seeded: data order, interpolation draws, and initialization, so two runs
with the same seed produce identical parameter trajectories and loss logs.

Subjects are normalized per sample before entering the network: volumes by
1 / max(one-angle MLEM) and projections by 1 / max(projection counts); the
stored scale converts predictions back to raw units.  The scale never looks
at the four-angle reference, so inference works on one-angle data alone.
"""
from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import save_checkpoint
from .datamodel import ProjectionSet, VolumeGrid
from .errors import ConfigError, NumericalError
from .losses import LossWeights, critic_objective_t, generator_objective_t
from .model import (
    DualDomainGenerator,
    ModelConfig,
    VolumeCritic,
    resize_modules,
    tokenize_projections,
)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch_size: int = 2
    lr: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.9
    adam_eps: float = 1e-8
    critic_steps_per_gen: int = 5
    seed: int = 0
    checkpoint_interval: int = 250
    fold_index: int | None = None
    pretrain_steps: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be >= 1")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.critic_steps_per_gen < 0:
            raise ConfigError("critic_steps_per_gen must be >= 0")


# ---------------------------------------------------------------------------
# Initialization and optimizer
# ---------------------------------------------------------------------------

def _default_fans(shape):
    if len(shape) == 1:
        return shape[0], shape[0]
    if len(shape) == 2:
        return shape[0], shape[1]
    if len(shape) == 3:  # stacked (groups, in, out)
        return shape[-2], shape[-1]
    receptive = int(np.prod(shape[2:]))
    return shape[1] * receptive, shape[0] * receptive


def xavier_init(params, rng):
    """Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)) for weights;
    biases zero; normalization gains one.  Draw order follows the list."""
    for p in params:
        kind = getattr(p, "init_kind", "xavier")
        if kind == "zeros":
            p.data[...] = 0
        elif kind == "ones":
            p.data[...] = 1
        else:
            fans = getattr(p, "fans", None) or _default_fans(p.data.shape)
            a = float(np.sqrt(6.0 / (fans[0] + fans[1])))
            p.data[...] = rng.uniform(-a, a, size=p.data.shape).astype(p.data.dtype)
        p.grad = None


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    @staticmethod
    def for_params(params):
        s = AdamState()
        s.m = [np.zeros_like(p.data) for p in params]
        s.v = [np.zeros_like(p.data) for p in params]
        return s


def adam_step(params, grads, state: AdamState, lr, betas=(0.9, 0.999), eps=1e-8):
    """Standard bias-corrected Adam update, in place."""
    b1, b2 = betas
    state.t += 1
    t = state.t
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"NaN/Inf gradient for parameter {p.name!r} at step {t}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data[...] = p.data - (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# Samples
# ---------------------------------------------------------------------------

@dataclass
class TrainingSample:
    subject_id: str
    tokens: np.ndarray    # (T, patch^2), normalized projections
    resized: np.ndarray   # (n_modules, ny, nx), normalized projections
    bp: np.ndarray        # (nz, ny, nx), normalized back projection
    mlem: np.ndarray      # (nz, ny, nx), normalized one-angle MLEM
    target: np.ndarray    # (nz, ny, nx), four-angle MLEM in MLEM units
    scale: float          # multiply network output by this for raw units
    has_defect: bool = False
    ref_stats: dict | None = None  # precomputed loss constants of the target


def prepare_sample(subject_id, proj_one: ProjectionSet, img_bp: VolumeGrid,
                   img_mlem: VolumeGrid, i_four: VolumeGrid | None,
                   cfg: ModelConfig, has_defect=False) -> TrainingSample:
    from .losses import reference_stats

    proj = proj_one.as_array()[0]
    proj_scale = max(float(proj.max()), 1e-12)
    proj = proj / proj_scale
    scale = max(float(img_mlem.values.max()), 1e-12)
    bp_arr = img_bp.grid3d()
    bp = bp_arr / max(float(bp_arr.max()), 1e-12)
    mlem = img_mlem.grid3d() / scale
    target = i_four.grid3d() / scale if i_four is not None else np.zeros_like(mlem)
    return TrainingSample(
        subject_id=str(subject_id),
        tokens=tokenize_projections(proj, cfg),
        resized=resize_modules(proj, cfg),
        bp=bp,
        mlem=mlem,
        target=target,
        scale=scale,
        has_defect=bool(has_defect),
        ref_stats=reference_stats(target),
    )


def _batch(samples, idx):
    take = lambda name: np.stack([getattr(samples[i], name) for i in idx])
    return take("tokens"), take("bp"), take("resized"), take("mlem"), take("target")


def _batch_ref(samples, idx):
    return {
        key: np.stack([samples[i].ref_stats[key] for i in idx])
        for key in ("mu", "var", "sobel")
    }


def infer_sample(generator: DualDomainGenerator, sample: TrainingSample):
    """Run the generator on one sample; returns (img_p, final) raw-unit grids."""
    with ad.no_grad():
        img_p, final = generator.forward(
            sample.tokens[None], sample.bp[None], sample.resized[None], sample.mlem[None]
        )
    return (
        np.asarray(img_p.data[0], dtype=np.float64) * sample.scale,
        np.asarray(final.data[0], dtype=np.float64) * sample.scale,
    )


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    log: list
    checkpoints: list
    sampled_ids: set
    heldout: dict | None = None


def initialize(generator: DualDomainGenerator, critic: VolumeCritic, seed):
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    xavier_init(generator.params() + critic.params(), rng)


def load_into(generator: DualDomainGenerator, critic: VolumeCritic, state: dict):
    """Assign checkpoint arrays (by name) into model parameters."""
    params = {p.name: p for p in generator.params() + critic.params()}
    for name, arr in state.items():
        if name not in params:
            raise ConfigError(f"checkpoint has unknown parameter {name!r}")
        p = params[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise ConfigError(f"checkpoint shape {arr.shape} != model shape {p.data.shape} for {name!r}")
        p.data[...] = arr.astype(p.data.dtype)


def train(samples, generator: DualDomainGenerator, critic: VolumeCritic,
          cfg: TrainConfig, weights: LossWeights = LossWeights(), out_dir=None,
          pretrain_samples=None, init=True) -> TrainResult:
    """Run the adversarial loop; returns the metrics log and checkpoint paths.

    The log entries hold only seeded-deterministic values; wall time goes to
    the JSONL file as a separate field.
    """
    if len(samples) == 0:
        raise ConfigError("empty dataset")
    if cfg.fold_index is not None and not (0 <= cfg.fold_index < len(samples)):
        raise ConfigError(f"fold_index {cfg.fold_index} out of range")

    ss = np.random.SeedSequence(cfg.seed)
    seeds = ss.spawn(3)
    if init:
        rng_init = np.random.default_rng(seeds[0])
        xavier_init(generator.params() + critic.params(), rng_init)
    rng_data = np.random.default_rng(seeds[1])
    rng_gp = np.random.default_rng(seeds[2])

    gen_params = generator.params()
    critic_params = critic.params()
    gen_state = AdamState.for_params(gen_params)
    critic_state = AdamState.for_params(critic_params)
    betas = (cfg.adam_beta1, cfg.adam_beta2)

    pool = [i for i in range(len(samples)) if i != cfg.fold_index]
    if not pool:
        raise ConfigError("training pool is empty after fold exclusion")

    log = []
    checkpoints = []
    sampled_ids = set()
    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "metrics.jsonl"), "w", encoding="utf-8")

    def run_phase(phase, phase_samples, phase_pool, steps, step0=0):
        t_start = time.monotonic()
        fake_np = None
        for step in range(steps):
            entry = {"phase": phase, "step": step0 + step, "critic": [], "gen": None}
            if fake_np is None and cfg.critic_steps_per_gen > 0:
                # bootstrap the fake pool; afterwards the previous generator
                # step's detached output serves as the (one step stale) fakes
                idx_fake = rng_data.choice(phase_pool, size=cfg.batch_size, replace=True)
                tokens, bp, resized, mlem, target = _batch(phase_samples, idx_fake)
                for i in idx_fake:
                    sampled_ids.add(phase_samples[i].subject_id)
                with ad.no_grad():
                    _, fake = generator.forward(tokens, bp, resized, mlem)
                fake_np = fake.data[:, None]

            for _ in range(cfg.critic_steps_per_gen):
                idx_real = rng_data.choice(phase_pool, size=cfg.batch_size, replace=True)
                for i in idx_real:
                    sampled_ids.add(phase_samples[i].subject_id)
                real_np = np.stack([phase_samples[i].target for i in idx_real])[:, None]
                u = rng_gp.uniform(size=cfg.batch_size)
                for p in critic_params:
                    p.grad = None
                loss_d, terms_d = critic_objective_t(critic, real_np, fake_np, u, weights)
                ad.backward(loss_d)
                adam_step(
                    critic_params, [p.grad for p in critic_params], critic_state,
                    cfg.lr, betas, cfg.adam_eps,
                )
                entry["critic"].append(terms_d)

            idx_gen = rng_data.choice(phase_pool, size=cfg.batch_size, replace=True)
            for i in idx_gen:
                sampled_ids.add(phase_samples[i].subject_id)
            tokens, bp, resized, mlem, target = _batch(phase_samples, idx_gen)
            for p in gen_params:
                p.grad = None
            img_p, final = generator.forward(tokens, bp, resized, mlem)
            n = tokens.shape[0]
            shape5 = (n, 1) + final.data.shape[1:]
            final5 = ad.reshape(final, shape5)
            imgp5 = ad.reshape(img_p, shape5)
            target5 = ad.Tensor(np.ascontiguousarray(target[:, None], dtype=generator.dtype))
            scores = critic.score(final5)
            ref = _batch_ref(phase_samples, idx_gen)
            loss_g, terms_g = generator_objective_t(
                final5, imgp5, target5, scores, weights, peak=1.0, ref=ref
            )
            if not np.isfinite(loss_g.data):
                raise NumericalError(f"generator loss diverged at step {step0 + step}")
            ad.backward(loss_g)
            adam_step(
                gen_params, [p.grad for p in gen_params], gen_state,
                cfg.lr, betas, cfg.adam_eps,
            )
            fake_np = np.ascontiguousarray(final.data[:, None])
            # retire the step's graph promptly (captured conv buffers are large)
            img_p = final = final5 = imgp5 = scores = loss_g = None
            entry["gen"] = terms_g
            log.append(entry)
            if log_fh is not None:
                rec = dict(entry)
                rec["wall_s"] = round(time.monotonic() - t_start, 3)
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                log_fh.flush()
            global_step = step0 + step
            if out_dir is not None and (
                (global_step + 1) % cfg.checkpoint_interval == 0 or step == steps - 1
            ):
                path = os.path.join(out_dir, f"step{global_step + 1:06d}")
                save_checkpoint(path, gen_params + critic_params)
                checkpoints.append(path)

    try:
        step0 = 0
        if pretrain_samples and cfg.pretrain_steps > 0:
            run_phase("pretrain", pretrain_samples, list(range(len(pretrain_samples))),
                      cfg.pretrain_steps)
            step0 = cfg.pretrain_steps
        run_phase("train", samples, pool, cfg.steps, step0=step0)
    finally:
        if log_fh is not None:
            log_fh.close()

    heldout = None
    if cfg.fold_index is not None:
        from . import metrics as mt

        s = samples[cfg.fold_index]
        _, final = infer_sample(generator, s)
        ref = s.target * s.scale
        peak = max(float(ref.max()), 1e-12)
        heldout = {
            "subject_id": s.subject_id,
            "ssim": mt.ssim(final, ref, peak=peak),
            "rmse": mt.rmse(final, ref),
            "psnr": mt.psnr(final, ref, peak=peak),
        }
    return TrainResult(log=log, checkpoints=checkpoints, sampled_ids=sampled_ids, heldout=heldout)
