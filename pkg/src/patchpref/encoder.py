"""Patch-feature encoder: proxy pretraining and equivariance finetuning.

The encoder is a fixed average-pool patchifier (pixels to the patch grid)
followed by stride-1 padded conv layers, so every layer's feature map stays
aligned with the patch grid. Pretraining solves a patch-identity proxy task;
the self-supervised stage then pulls the feature maps toward commuting with
grid rotations/flips while a drift penalty anchors them to the frozen
pretrained copy.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ContractError, DivergenceError, NonFiniteError
from .scenes import GridTransform, ScenePair
from .tensor import (GradTape, Tensor, add, add_channel_bias, avg_pool2d,
                     conv2d, log_softmax_channels, mean, mul, permute_grid,
                     relu, scale, space_to_depth, ssum, sub)

AUGMENTATIONS = {
    "rot90": GridTransform(90, False, False),
    "rot180": GridTransform(180, False, False),
    "rot270": GridTransform(270, False, False),
    "flipH": GridTransform(0, True, False),
    "flipV": GridTransform(0, False, True),
}


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 5
    channels: int = 16
    kernel: int = 3
    in_channels: int = 3
    patch_size: int = 4
    grid: int = 8
    frontend: str = "patchify"  # "patchify" keeps pixel detail per cell;
                                # "pool" reduces each patch to channel means

    @property
    def image_size(self) -> int:
        return self.patch_size * self.grid

    @property
    def frontend_channels(self) -> int:
        if self.frontend == "patchify":
            return self.in_channels * self.patch_size * self.patch_size
        return self.in_channels

    def validate(self):
        if self.layers < 1:
            raise ConfigError(f"need at least one layer, got {self.layers}")
        if self.kernel % 2 != 1:
            raise ConfigError(f"kernel {self.kernel} must be odd to keep alignment")
        if self.frontend not in ("patchify", "pool"):
            raise ConfigError(f"unknown frontend {self.frontend!r}")


@dataclass
class EncoderParams:
    weights: list
    biases: list

    def copy(self) -> "EncoderParams":
        return EncoderParams(list(self.weights), list(self.biases))


@dataclass
class FeaturePyramid:
    layers: list

    def layer(self, index: int) -> Tensor:
        """Feature map of 1-based layer ``index``."""
        if not 1 <= index <= len(self.layers):
            raise ContractError(f"layer {index} outside 1..{len(self.layers)}")
        return self.layers[index - 1]

    def __len__(self):
        return len(self.layers)


def init_encoder_params(config: EncoderConfig, seed: int) -> EncoderParams:
    """Center-dominant 3x3 kernels with context growing over depth.

    Shallow layers stay locally faithful to their own cell; deeper layers mix
    progressively more neighborhood, so the effective receptive field widens
    with depth and the per-layer matching quality peaks at a middle layer.
    """
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0e0c]))
    weights, biases = [], []
    cin = config.frontend_channels
    mid = config.kernel // 2
    for l in range(config.layers):
        off = min(0.08 * (1.8 ** l), 1.0)
        w = rng.normal(0.0, off * np.sqrt(2.0 / (cin * config.kernel ** 2)),
                       size=(config.channels, cin, config.kernel, config.kernel))
        w[:, :, mid, mid] = rng.normal(0.0, np.sqrt(2.0 / cin),
                                       size=(config.channels, cin))
        weights.append(Tensor(w))
        biases.append(Tensor.zeros(config.channels))
        cin = config.channels
    return EncoderParams(weights, biases)


def _forward(params: EncoderParams, config: EncoderConfig, image: Tensor,
             tape: GradTape | None = None) -> FeaturePyramid:
    """Feature maps are the pre-activation conv outputs (signed, roughly
    centered, so cosine comparisons keep their dynamic range); relu only
    feeds the next layer. The downsampled input is centered for the same
    reason: a DC component would dominate every cosine."""
    if config.frontend == "patchify":
        h = space_to_depth(image, config.patch_size, tape)
    else:
        h = avg_pool2d(image, config.patch_size, tape)
    h = add(h, Tensor.full(h.shape, -0.5), tape)
    pad = config.kernel // 2
    maps = []
    for w, b in zip(params.weights, params.biases):
        pre = add_channel_bias(conv2d(h, w, 1, pad, tape), b, tape)
        maps.append(pre)
        h = relu(pre, tape)
    return FeaturePyramid(maps)


@dataclass
class SslState:
    """Trainable encoder plus its frozen pretrained copy."""
    config: EncoderConfig
    params: EncoderParams
    frozen: EncoderParams
    epoch: int = 0
    ssl_log: list = field(default_factory=list)

    def encode(self, image: Tensor) -> FeaturePyramid:
        expected = (self.config.in_channels, self.config.image_size,
                    self.config.image_size)
        if image.shape != expected:
            raise ContractError(f"image shape {image.shape}, expected {expected}")
        return _forward(self.params, self.config, image)

    def encode_frozen(self, image: Tensor) -> FeaturePyramid:
        return _forward(self.frozen, self.config, image)


def encode(state: SslState, image: Tensor) -> FeaturePyramid:
    return state.encode(image)


def _mse(a: Tensor, b: Tensor, tape=None) -> Tensor:
    d = sub(a, b, tape)
    return mean(mul(d, d, tape), tape)


def ssl_loss(state: SslState, image: Tensor, augmentation: str,
             tape: GradTape | None = None, params: EncoderParams | None = None,
             frozen_pyramid: FeaturePyramid | None = None):
    """Equivariance + drift losses; returns (l_self, l_aug, l_reg) scalars.

    l_aug compares the augmented feature maps with the features of the
    augmented image; l_reg anchors every layer to the frozen copy. Both are
    mean squared errors averaged over all layers, so the default learning
    rate is usable regardless of feature-map size.
    """
    if augmentation not in AUGMENTATIONS:
        raise ConfigError(f"unknown augmentation {augmentation!r}, "
                          f"valid: {sorted(AUGMENTATIONS)}")
    t = AUGMENTATIONS[augmentation]
    params = params if params is not None else state.params
    pyr = _forward(params, state.config, image, tape)
    aug_image = Tensor(t.apply(image.data))
    pyr_aug = _forward(params, state.config, aug_image, tape)
    if frozen_pyramid is None:
        frozen_pyramid = state.encode_frozen(image)
    imap = t.index_map(state.config.grid)

    l_aug = None
    l_reg = None
    for f_x, f_ax, f_ref in zip(pyr.layers, pyr_aug.layers, frozen_pyramid.layers):
        term_aug = _mse(permute_grid(f_x, imap, tape), f_ax, tape)
        term_reg = _mse(f_x, f_ref, tape)
        l_aug = term_aug if l_aug is None else add(l_aug, term_aug, tape)
        l_reg = term_reg if l_reg is None else add(l_reg, term_reg, tape)
    inv = 1.0 / len(pyr.layers)
    l_aug = scale(l_aug, inv, tape)
    l_reg = scale(l_reg, inv, tape)
    l_self = add(l_aug, l_reg, tape)
    return l_self, l_aug, l_reg


def _watch_params(tape: GradTape, params: EncoderParams):
    for p in params.weights + params.biases:
        tape.watch(p)


def _gd_step(params: EncoderParams, grads: dict, lr: float) -> EncoderParams:
    new_w = [Tensor._wrap(p.data - lr * grads[p].data) for p in params.weights]
    new_b = [Tensor._wrap(p.data - lr * grads[p].data) for p in params.biases]
    return EncoderParams(new_w, new_b)


def train_ssl(state: SslState, corpus, epochs: int, learning_rate: float,
              seed: int = 0) -> SslState:
    """Gradient descent on the equivariance objective, one image per step.

    Every image contributes one uniformly sampled augmentation per epoch;
    steps walk the corpus in index order, so runs are seed-reproducible.
    """
    if epochs < 1:
        raise ContractError(f"epochs {epochs} must be >= 1")
    images = ssl_images(corpus)
    if not images:
        raise ContractError("empty corpus")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x551]))
    names = sorted(AUGMENTATIONS)
    frozen_cache = [state.encode_frozen(img) for img in images]

    step = 0
    for _ in range(epochs):
        sums = np.zeros(2)
        for img, f_ref in zip(images, frozen_cache):
            aug = names[int(rng.integers(len(names)))]
            tape = GradTape()
            _watch_params(tape, state.params)
            try:
                l_self, l_aug, l_reg = ssl_loss(state, img, aug, tape,
                                                frozen_pyramid=f_ref)
                grads = tape.backward(l_self)
                state.params = _gd_step(state.params, grads, learning_rate)
            except NonFiniteError as exc:
                raise DivergenceError(f"ssl loss diverged: {exc}", step,
                                      [r["l_self"] for r in state.ssl_log]) from exc
            sums += (l_aug.item(), l_reg.item())
            step += 1
        state.epoch += 1
        mean_aug, mean_reg = sums / len(images)
        state.ssl_log.append({"epoch": state.epoch, "l_aug": mean_aug,
                              "l_reg": mean_reg, "l_self": mean_aug + mean_reg})
    return state


def ssl_images(corpus) -> list:
    """Normalize a corpus to a flat image list (pairs contribute ref and gen)."""
    images = []
    for item in corpus:
        if isinstance(item, ScenePair):
            images.append(item.reference)
            images.append(item.generated)
        else:
            images.append(item)
    return images


def mean_l_aug(state: SslState, corpus) -> float:
    """Mean equivariance residual over a corpus, averaged over augmentations."""
    images = ssl_images(corpus)
    total = 0.0
    for img in images:
        for aug in sorted(AUGMENTATIONS):
            _, l_aug, _ = ssl_loss(state, img, aug)
            total += l_aug.item()
    return total / (len(images) * len(AUGMENTATIONS))


# --- proxy pretraining ------------------------------------------------------

@dataclass(frozen=True)
class PretrainConfig:
    templates: int = 12
    pool_images: int = 48
    eval_images: int = 16
    max_steps: int = 4000
    learning_rate: float = 0.15
    target_accuracy: float = 0.90
    eval_every: int = 25
    feature_rms: float = 1.0


def calibrate_feature_scale(params: EncoderParams, config: EncoderConfig,
                            images, target_rms: float) -> EncoderParams:
    """Rescale each layer so its feature RMS over ``images`` hits the target.

    relu is positively homogeneous, so scaling a layer's weights and bias by k
    scales its output by k without changing anything else about the features.
    Keeps the equivariance finetuning stable at the default learning rate.
    """
    params = params.copy()
    for l in range(config.layers):
        sq = 0.0
        count = 0
        for img in images:
            fmap = _forward(params, config, img).layers[l]
            sq += float((fmap.data ** 2).sum())
            count += fmap.size
        k = target_rms / max(np.sqrt(sq / count), 1e-9)
        params.weights[l] = Tensor._wrap(params.weights[l].data * k)
        params.biases[l] = Tensor._wrap(params.biases[l].data * k)
    return params


@dataclass
class ProxyTask:
    templates: np.ndarray   # [K, C, patch, patch] pixel templates
    train_images: list      # Tensor [C, S, S]
    train_labels: list      # int [grid, grid]
    eval_images: list
    eval_labels: list


def build_proxy_task(corpus, config: EncoderConfig, pretrain: PretrainConfig,
                     seed: int) -> ProxyTask:
    """Patch-identity task: tile images from K template patches drawn
    from the corpus, label every grid cell with its template id."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9e0]))
    images = ssl_images(corpus)
    if not images:
        raise ContractError("empty corpus")
    p = config.patch_size

    templates = []
    means = []
    for _ in range(4000):
        if len(templates) == pretrain.templates:
            break
        img = images[int(rng.integers(len(images)))].data
        r = int(rng.integers(config.grid)) * p
        c = int(rng.integers(config.grid)) * p
        patch = img[:, r:r + p, c:c + p]
        m = patch.mean(axis=(1, 2))
        if all(np.abs(m - prev).max() >= 0.08 for prev in means):
            templates.append(patch.copy())
            means.append(m)
    if len(templates) < pretrain.templates:
        raise ContractError(
            f"only {len(templates)} distinct templates found in corpus")
    templates = np.stack(templates)

    def make(n):
        imgs, labels = [], []
        for _ in range(n):
            ids = rng.integers(pretrain.templates, size=(config.grid, config.grid))
            canvas = np.empty((config.in_channels, config.image_size,
                               config.image_size))
            for r in range(config.grid):
                for c in range(config.grid):
                    canvas[:, r * p:(r + 1) * p, c * p:(c + 1) * p] = templates[ids[r, c]]
            imgs.append(Tensor(canvas))
            labels.append(ids)
        return imgs, labels

    train_images, train_labels = make(pretrain.pool_images)
    eval_images, eval_labels = make(pretrain.eval_images)
    return ProxyTask(templates, train_images, train_labels,
                     eval_images, eval_labels)


def _proxy_logits(params, config, heads, image, tape=None):
    """One linear classification head per layer; returns per-layer logits."""
    pyr = _forward(params, config, image, tape)
    return [add_channel_bias(conv2d(fmap, hw, 1, 0, tape), hb, tape)
            for fmap, (hw, hb) in zip(pyr.layers, heads)]


def proxy_accuracy(params: EncoderParams, config: EncoderConfig,
                   heads, images, labels) -> float:
    """Cell classification accuracy of the deepest head."""
    hits = 0
    total = 0
    for img, lab in zip(images, labels):
        logits = _proxy_logits(params, config, heads, img)[-1]
        pred = np.argmax(logits.data, axis=0)
        hits += int((pred == lab).sum())
        total += lab.size
    return hits / total


def init_proxy_heads(config: EncoderConfig, k: int, seed: int):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4ead]))
    heads = []
    for _ in range(config.layers):
        w = rng.normal(0.0, np.sqrt(2.0 / config.channels),
                       size=(k, config.channels, 1, 1))
        heads.append((Tensor(w), Tensor.zeros(k)))
    return heads


def pretrain_encoder(corpus, config: EncoderConfig, seed: int,
                     pretrain: PretrainConfig = PretrainConfig()) -> SslState:
    """Train the patch-identity proxy until its accuracy target, then freeze
    a copy of the parameters as the drift anchor for the SSL stage."""
    config.validate()
    task = build_proxy_task(corpus, config, pretrain, seed)
    params = init_encoder_params(config, seed)
    heads = init_proxy_heads(config, pretrain.templates, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x12e7]))
    n_cells = config.grid * config.grid
    losses = []

    for step in range(pretrain.max_steps):
        idx = int(rng.integers(len(task.train_images)))
        img, lab = task.train_images[idx], task.train_labels[idx]
        onehot = np.zeros((pretrain.templates, config.grid, config.grid))
        onehot[lab.reshape(-1),
               np.repeat(np.arange(config.grid), config.grid),
               np.tile(np.arange(config.grid), config.grid)] = 1.0
        onehot = Tensor(onehot)

        tape = GradTape()
        _watch_params(tape, params)
        for hw, hb in heads:
            tape.watch(hw)
            tape.watch(hb)
        try:
            loss = None
            for logits in _proxy_logits(params, config, heads, img, tape):
                lsm = log_softmax_channels(logits, tape)
                nll = scale(ssum(mul(onehot, lsm, tape), tape),
                            -1.0 / n_cells, tape)
                loss = nll if loss is None else add(loss, nll, tape)
            loss = scale(loss, 1.0 / config.layers, tape)
            grads = tape.backward(loss)
        except NonFiniteError as exc:
            raise DivergenceError(f"proxy loss diverged: {exc}", step, losses) from exc
        losses.append(loss.item())
        params = _gd_step(params, grads, pretrain.learning_rate)
        heads = [(Tensor._wrap(hw.data - pretrain.learning_rate * grads[hw].data),
                  Tensor._wrap(hb.data - pretrain.learning_rate * grads[hb].data))
                 for hw, hb in heads]

        if (step + 1) % pretrain.eval_every == 0:
            acc = proxy_accuracy(params, config, heads,
                                 task.eval_images, task.eval_labels)
            if acc >= pretrain.target_accuracy:
                return _finish_pretrain(params, config, corpus, pretrain)

    acc = proxy_accuracy(params, config, heads,
                         task.eval_images, task.eval_labels)
    if acc >= pretrain.target_accuracy:
        return _finish_pretrain(params, config, corpus, pretrain)
    raise DivergenceError(
        f"proxy accuracy {acc:.3f} below {pretrain.target_accuracy} after "
        f"{pretrain.max_steps} steps", pretrain.max_steps, losses)




def _finish_pretrain(params, config, corpus, pretrain) -> SslState:
    sample = ssl_images(corpus)[:16]
    params = calibrate_feature_scale(params, config, sample, pretrain.feature_rms)
    return SslState(config=config, params=params, frozen=params.copy())

def argmax_layer(scores: dict) -> int:
    """Highest-scoring layer index; ties resolve to the shallowest layer."""
    best = None
    for layer in sorted(scores):
        if best is None or scores[layer] > scores[best]:
            best = layer
    return best


def select_layer(state: SslState, corr_corpus):
    """Score every layer on the correspondence corpus; pick the argmax."""
    from .matching import s_patch
    scores = {l: s_patch(corr_corpus, state, l)
              for l in range(1, state.config.layers + 1)}
    return argmax_layer(scores), scores


# --- checkpoints ------------------------------------------------------------

def encoder_param_list(params: EncoderParams):
    out = []
    for i, (w, b) in enumerate(zip(params.weights, params.biases), start=1):
        out.append((f"conv{i}.weight", i, w))
        out.append((f"conv{i}.bias", i, b))
    return out


def save_encoder(state: SslState, directory) -> None:
    from .tensorio import save_checkpoint
    save_checkpoint(directory, encoder_param_list(state.params))


def load_encoder(directory, config: EncoderConfig) -> EncoderParams:
    from .tensorio import load_checkpoint
    entries = {name: t for name, _, t in load_checkpoint(directory)}
    weights = [entries[f"conv{i}.weight"] for i in range(1, config.layers + 1)]
    biases = [entries[f"conv{i}.bias"] for i in range(1, config.layers + 1)]
    return EncoderParams(weights, biases)
