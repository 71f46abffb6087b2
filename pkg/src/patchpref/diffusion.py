"""Toy denoising diffusion model and the three training objectives.

A small conditional conv net predicts the noise added by a variance-
preserving forward process. Three objectives are supported: plain noise MSE
on the generated image, an image-level preference loss against a frozen
reference copy, and the patch-weighted two-term loss that rewards good
patches of the generated image while correcting bad ones from the reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DivergenceError, NonFiniteError
from .scenes import ScenePair
from .tensor import (GradTape, Tensor, add, add_channel_bias, concat_channels,
                     conv2d, mul, relu, scale, softplus, ssum, sub)
from .util import fnv1a64

OBJECTIVES = ("mse_gen", "dpo", "patchdpo")


@dataclass
class DiffusionSchedule:
    steps: int
    alpha: np.ndarray  # [T+1], alpha[0] = 1, strictly decreasing
    sigma: np.ndarray  # [T+1], sigma[0] = 0, strictly increasing


def make_schedule(T: int) -> DiffusionSchedule:
    """Linear-beta schedule rescaled to T so the endpoint is near-pure noise.

    Betas run from 0.1/T to 20/T (the canonical 1e-4..0.02 at T=1000),
    clamped below 1 so tiny T stays valid.
    """
    if T < 2:
        raise ConfigError(f"schedule needs T >= 2, got {T}")
    betas = np.clip(np.linspace(0.1 / T, 20.0 / T, T), 1e-8, 0.999)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return DiffusionSchedule(steps=T, alpha=np.sqrt(alpha_bar),
                             sigma=np.sqrt(1.0 - alpha_bar))


def forward_noise(x0: Tensor, t: int, eps: Tensor,
                  schedule: DiffusionSchedule) -> Tensor:
    if eps.shape != x0.shape:
        raise ContractError(f"noise shape {eps.shape} vs image {x0.shape}")
    if not 0 <= t <= schedule.steps:
        raise ContractError(f"step {t} outside 0..{schedule.steps}")
    return Tensor._wrap(schedule.alpha[t] * x0.data + schedule.sigma[t] * eps.data)


# --- denoiser ----------------------------------------------------------------

@dataclass(frozen=True)
class DenoiserConfig:
    layers: int = 4
    channels: int = 16
    kernel: int = 3
    image_channels: int = 3
    image_size: int = 32
    cond_channels: int = 4
    feat_channels: int = 16
    feat_grid: int = 8


@dataclass
class DenoiserParams:
    weights: list
    biases: list

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(list(self.weights), list(self.biases))


def init_denoiser_params(config: DenoiserConfig, seed: int) -> DenoiserParams:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xd0]))
    cin = config.image_channels + config.feat_channels + config.cond_channels
    weights, biases = [], []
    for l in range(config.layers):
        cout = config.image_channels if l == config.layers - 1 else config.channels
        fan_in = cin * config.kernel * config.kernel
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in),
                       size=(cout, cin, config.kernel, config.kernel))
        weights.append(Tensor(w))
        biases.append(Tensor.zeros(cout))
        cin = cout
    return DenoiserParams(weights, biases)


def time_embedding(t: int, channels: int, T: int) -> Tensor:
    """Per-channel sinusoidal bias for the time step."""
    emb = np.empty(channels)
    for c in range(channels):
        freq = 1.0 / (T ** ((c // 2) / max(channels // 2, 1)))
        emb[c] = math.sin(t * freq) if c % 2 == 0 else math.cos(t * freq)
    return Tensor(emb)


class Denoiser:
    """Conditional noise predictor with an optional frozen reference copy."""

    def __init__(self, config: DenoiserConfig, seed: int):
        self.config = config
        self.params = init_denoiser_params(config, seed)
        self.frozen = None

    def freeze_reference(self) -> None:
        self.frozen = self.params.copy()

    def predict(self, x_t: Tensor, cond: Tensor, ref_feats: Tensor, t: int,
                tape: GradTape | None = None,
                params: DenoiserParams | None = None) -> Tensor:
        cfg = self.config
        if x_t.shape != (cfg.image_channels, cfg.image_size, cfg.image_size):
            raise ContractError(f"input shape {x_t.shape}")
        if cond.shape != (cfg.cond_channels,):
            raise ContractError(f"condition shape {cond.shape}")
        params = params if params is not None else self.params

        r = cfg.image_size // ref_feats.shape[1]
        feats_px = np.repeat(np.repeat(ref_feats.data, r, axis=1), r, axis=2)
        cond_px = np.broadcast_to(
            cond.data[:, None, None],
            (cfg.cond_channels, cfg.image_size, cfg.image_size))
        h = concat_channels(
            [x_t, Tensor(feats_px), Tensor(np.ascontiguousarray(cond_px))], tape)

        pad = cfg.kernel // 2
        temb = time_embedding(t, cfg.channels, 10000)
        for l, (w, b) in enumerate(zip(params.weights, params.biases)):
            h = add_channel_bias(conv2d(h, w, 1, pad, tape), b, tape)
            if l == 0:
                h = add_channel_bias(h, temb, tape)
            if l < cfg.layers - 1:
                h = relu(h, tape)
        return h


def descriptor_embedding(descriptor, channels: int = 4) -> Tensor:
    """Fixed hash of a scene descriptor as a small condition vector."""
    h = fnv1a64(repr(descriptor).encode("utf-8"))
    vals = [((h >> (16 * i)) & 0xFFFF) / 65535.0 for i in range(channels)]
    return Tensor(vals)


# --- batches and losses -------------------------------------------------------

@dataclass
class PairConditioning:
    """Static per-pair training inputs, frozen before training starts."""
    pair: ScenePair
    cond: Tensor             # descriptor embedding
    ref_feats: Tensor        # frozen encoder features of the reference image
    w_gen: Tensor | None = None   # upsampled quality of the generated image
    w_ref: Tensor | None = None   # upsampled (1 - quality) of the reference


@dataclass
class TrainBatch:
    conditioning: PairConditioning
    t: int
    eps_gen: Tensor
    eps_ref: Tensor


def make_batch(conditioning: PairConditioning, schedule: DiffusionSchedule,
               rng: np.random.Generator) -> TrainBatch:
    shape = conditioning.pair.reference.shape
    return TrainBatch(
        conditioning=conditioning,
        t=int(rng.integers(1, schedule.steps + 1)),
        eps_gen=Tensor._wrap(rng.standard_normal(shape)),
        eps_ref=Tensor._wrap(rng.standard_normal(shape)),
    )


def _prediction_residual(batch: TrainBatch, denoiser: Denoiser,
                         schedule: DiffusionSchedule, target: str,
                         tape=None, params=None) -> Tensor:
    c = batch.conditioning
    if target == "gen":
        x0, eps = c.pair.generated, batch.eps_gen
    elif target == "ref":
        x0, eps = c.pair.reference, batch.eps_ref
    else:
        raise ConfigError(f"unknown target {target!r}")
    x_t = forward_noise(x0, batch.t, eps, schedule)
    pred = denoiser.predict(x_t, c.cond, c.ref_feats, batch.t, tape, params)
    return sub(eps, pred, tape)


def loss_mse(batch: TrainBatch, denoiser: Denoiser, schedule: DiffusionSchedule,
             target: str = "gen", tape: GradTape | None = None) -> Tensor:
    """Squared noise-prediction error, summed over elements."""
    d = _prediction_residual(batch, denoiser, schedule, target, tape)
    return ssum(mul(d, d, tape), tape)


def loss_dpo(winner_batch: TrainBatch, loser_batch: TrainBatch,
             denoiser: Denoiser, beta: float, schedule: DiffusionSchedule,
             tape: GradTape | None = None) -> Tensor:
    """Image-level preference loss: winner is the reference reconstruction,
    loser is the generated image, against the frozen reference copy."""
    if denoiser.frozen is None:
        raise ContractError("denoiser has no frozen reference copy")

    def err(batch, target, use_tape, params):
        d = _prediction_residual(batch, denoiser, schedule, target,
                                 use_tape, params)
        return ssum(mul(d, d, use_tape), use_tape)

    err_w = err(winner_batch, "ref", tape, None)
    err_l = err(loser_batch, "gen", tape, None)
    err_w_ref = err(winner_batch, "ref", None, denoiser.frozen)
    err_l_ref = err(loser_batch, "gen", None, denoiser.frozen)

    delta = sub(sub(err_w, err_w_ref, tape), sub(err_l, err_l_ref, tape), tape)
    return softplus(scale(delta, beta, tape), tape)


def _broadcast_weight(w: Tensor, channels: int) -> Tensor:
    return Tensor(np.ascontiguousarray(
        np.broadcast_to(w.data[None, :, :], (channels,) + w.shape)))


def loss_patchdpo(batch: TrainBatch, denoiser: Denoiser,
                  schedule: DiffusionSchedule, tape: GradTape | None = None,
                  ref_term_weight: float = 1.0) -> Tensor:
    """Two weighted reconstructions: keep good generated patches, correct bad
    ones toward the reference."""
    c = batch.conditioning
    if c.w_gen is None or c.w_ref is None:
        raise ContractError("batch carries no precomputed weight maps")
    img_hw = c.pair.reference.shape[1:]
    if c.w_gen.shape != img_hw or c.w_ref.shape != img_hw:
        raise ContractError(
            f"weight map shapes {c.w_gen.shape}/{c.w_ref.shape} vs image {img_hw}")
    channels = c.pair.reference.shape[0]

    d_gen = _prediction_residual(batch, denoiser, schedule, "gen", tape)
    wd_gen = mul(d_gen, _broadcast_weight(c.w_gen, channels), tape)
    term_gen = ssum(mul(wd_gen, wd_gen, tape), tape)

    d_ref = _prediction_residual(batch, denoiser, schedule, "ref", tape)
    wd_ref = mul(d_ref, _broadcast_weight(c.w_ref, channels), tape)
    term_ref = ssum(mul(wd_ref, wd_ref, tape), tape)

    if ref_term_weight != 1.0:
        term_ref = scale(term_ref, ref_term_weight, tape)
    return add(term_gen, term_ref, tape)


# --- training and evaluation ---------------------------------------------------

def _watch(tape: GradTape, params: DenoiserParams):
    for p in params.weights + params.biases:
        tape.watch(p)


def train(denoiser: Denoiser, conditioned_pairs, objective: str, steps: int,
          learning_rate: float, seed: int, schedule: DiffusionSchedule,
          beta: float = 1.0, ref_term_weight: float = 1.0):
    """Seeded single-pair gradient descent; returns the per-step loss trace."""
    if objective not in OBJECTIVES:
        raise ConfigError(f"unknown objective {objective!r}, valid: {OBJECTIVES}")
    if objective == "patchdpo":
        for c in conditioned_pairs:
            if c.w_gen is None or c.w_ref is None:
                raise ContractError("patchdpo training needs precomputed weight maps")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7a1]))
    denoiser.freeze_reference()
    trace = []
    for step in range(steps):
        cond = conditioned_pairs[int(rng.integers(len(conditioned_pairs)))]
        batch = make_batch(cond, schedule, rng)
        tape = GradTape()
        _watch(tape, denoiser.params)
        try:
            if objective == "mse_gen":
                loss = loss_mse(batch, denoiser, schedule, "gen", tape)
            elif objective == "dpo":
                loss = loss_dpo(batch, batch, denoiser, beta, schedule, tape)
            else:
                loss = loss_patchdpo(batch, denoiser, schedule, tape,
                                     ref_term_weight)
            grads = tape.backward(loss)
        except NonFiniteError as exc:
            raise DivergenceError(f"{objective} loss diverged: {exc}",
                                  step, trace) from exc
        trace.append(loss.item())
        lr = learning_rate
        denoiser.params = DenoiserParams(
            [Tensor._wrap(p.data - lr * grads[p].data) for p in denoiser.params.weights],
            [Tensor._wrap(p.data - lr * grads[p].data) for p in denoiser.params.biases])
    return trace


def eval_region_error(denoiser: Denoiser, conditioned_pairs,
                      schedule: DiffusionSchedule, seed: int,
                      draws: int = 8) -> tuple:
    """Noise-prediction error on reference reconstructions, split into the
    corrupted region vs the clean object region. Returns (clean, corrupted)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xe7a1]))
    clean_sum = clean_n = corrupt_sum = corrupt_n = 0.0
    for c in conditioned_pairs:
        obj = c.pair.object_mask.data > 0.0
        cor = c.pair.corruption_mask.data > 0.0
        clean = obj & ~cor
        for _ in range(draws):
            batch = make_batch(c, schedule, rng)
            d = _prediction_residual(batch, denoiser, schedule, "ref")
            sq = (d.data ** 2).mean(axis=0)
            clean_sum += float(sq[clean].sum())
            clean_n += float(clean.sum())
            corrupt_sum += float(sq[cor].sum())
            corrupt_n += float(cor.sum())
    clean_err = clean_sum / clean_n if clean_n else 0.0
    corrupt_err = corrupt_sum / corrupt_n if corrupt_n else 0.0
    return clean_err, corrupt_err


def denoiser_param_list(params: DenoiserParams):
    out = []
    for i, (w, b) in enumerate(zip(params.weights, params.biases), start=1):
        out.append((f"conv{i}.weight", i, w))
        out.append((f"conv{i}.bias", i, b))
    return out


def save_denoiser(denoiser: Denoiser, directory) -> None:
    from .tensorio import save_checkpoint
    save_checkpoint(directory, denoiser_param_list(denoiser.params))


def load_denoiser_params(directory, config: DenoiserConfig) -> DenoiserParams:
    from .tensorio import load_checkpoint
    entries = {name: t for name, _, t in load_checkpoint(directory)}
    weights = [entries[f"conv{i}.weight"] for i in range(1, config.layers + 1)]
    biases = [entries[f"conv{i}.bias"] for i in range(1, config.layers + 1)]
    return DenoiserParams(weights, biases)
