"""Staged pipeline: flat config, stage manifest, artifact emission.

Stages run in a fixed order against one output directory. A stage is skipped
when the manifest shows its recorded input and output hashes still match;
--force overrides. All stage artifacts are pure functions of the resolved
config, so two runs with the same config produce identical trees.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffusion, encoder, matching, scenes, tensorio
from .errors import ConfigError, PatchprefError
from .tensor import Tensor
from .util import fnv1a64


class UnknownConfigKey(ConfigError):
    def __init__(self, key: str):
        super().__init__(f"unknown config key: {key}")
        self.key = key


class MissingArtifact(PatchprefError):
    def __init__(self, path):
        super().__init__(f"missing upstream artifact: {path}")
        self.path = str(path)


class LockedOutputDir(PatchprefError):
    pass


DEFAULTS = {
    "seed": 1234,
    "out_dir": "run",
    "image_size": 32,
    "patch_size": 4,
    "train_pairs": 48,
    "heldout_pairs": 24,
    "corruption_rate": 0.3,
    "corr_groups": 6,
    "corr_images_per_group": 4,
    "encoder_layers": 5,
    "encoder_channels": 16,
    "encoder_kernel": 3,
    "pretrain_templates": 12,
    "pretrain_max_steps": 4000,
    "pretrain_learning_rate": 0.15,
    "ssl_epochs": 10,
    "ssl_learning_rate": 0.1,
    "selected_layer": 0,
    "quality_normalize": "affine",
    "objectives": "mse_gen,dpo,patchdpo",
    "diffusion_t": 100,
    "train_steps": 300,
    "train_learning_rate": 0.05,
    "dpo_beta": 1.0,
    "patchdpo_ref_weight": 1.0,
    "eval_draws": 8,
    "heatmap_pairs": 8,
}

STAGES = ("gen-data", "train-ssl", "eval-spatch", "estimate-quality",
          "train-dpo", "evaluate")


@dataclass
class PipelineConfig:
    values: dict

    def __getattr__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key) from None

    @property
    def objective_list(self):
        return [o for o in self.objectives.split(",") if o]

    def validate(self):
        if self.image_size != scenes.IMAGE_SIZE or self.patch_size != scenes.PATCH_SIZE:
            raise ConfigError(
                f"only image_size={scenes.IMAGE_SIZE} patch_size={scenes.PATCH_SIZE} "
                f"geometry is supported")
        if self.quality_normalize not in ("affine", "minmax"):
            raise ConfigError(f"quality_normalize must be affine or minmax, "
                              f"got {self.quality_normalize!r}")
        for o in self.objective_list:
            if o not in diffusion.OBJECTIVES:
                raise ConfigError(f"unknown objective {o!r} in objectives")
        if not 0 <= self.selected_layer <= self.encoder_layers:
            raise ConfigError(f"selected_layer {self.selected_layer} outside "
                              f"0..{self.encoder_layers}")

    def echo(self) -> str:
        lines = [f"{key} = {self.values[key]}" for key in DEFAULTS]
        return "\n".join(lines) + "\n"


def parse_config(text: str) -> PipelineConfig:
    """Flat ``key = value`` lines, ``#`` comments; unknown keys are rejected."""
    values = dict(DEFAULTS)
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in DEFAULTS:
            raise UnknownConfigKey(key)
        default = DEFAULTS[key]
        try:
            if isinstance(default, int):
                values[key] = int(raw)
            elif isinstance(default, float):
                values[key] = float(raw)
            else:
                values[key] = raw
        except ValueError as exc:
            raise ConfigError(f"config key {key}: cannot parse {raw!r}") from exc
    cfg = PipelineConfig(values)
    cfg.validate()
    return cfg


def load_config(path=None, seed=None, out_dir=None) -> PipelineConfig:
    text = Path(path).read_text() if path else ""
    cfg = parse_config(text)
    if seed is not None:
        cfg.values["seed"] = int(seed)
    if out_dir is not None:
        cfg.values["out_dir"] = str(out_dir)
    return cfg


def derive_seed(seed: int, stream: int) -> int:
    rng = np.random.default_rng(np.random.SeedSequence([seed, stream]))
    return int(rng.integers(2 ** 62))


# --- output tree -------------------------------------------------------------

class Paths:
    def __init__(self, out_dir):
        self.out = Path(out_dir)
        self.config_echo = self.out / "config.resolved.txt"
        self.manifest = self.out / "manifest.json"
        self.lock = self.out / "lock"
        self.data_train = self.out / "data" / "train"
        self.data_heldout = self.out / "data" / "heldout"
        self.data_corr = self.out / "data" / "corr"
        self.encoder_pre = self.out / "encoder_pre"
        self.encoder_ssl = self.out / "encoder_ssl"
        self.ssl_log = self.out / "ssl_log.csv"
        self.spatch_csv = self.out / "spatch.csv"
        self.selected_layer = self.out / "selected_layer.txt"
        self.quality = self.out / "quality"
        self.heatmaps = self.out / "heatmaps"
        self.loss_trace = self.out / "loss_trace.csv"
        self.eval_csv = self.out / "eval.csv"
        self.report_csv = self.out / "report.csv"

    def denoiser(self, objective: str) -> Path:
        return self.out / f"denoiser_{objective}"


def stage_io(paths: Paths):
    """Input and output artifact roots per stage (inputs exclude the config)."""
    return {
        "gen-data": ([], [paths.data_train, paths.data_heldout, paths.data_corr]),
        "train-ssl": ([paths.data_train],
                      [paths.encoder_pre, paths.encoder_ssl, paths.ssl_log]),
        "eval-spatch": ([paths.data_corr, paths.encoder_pre, paths.encoder_ssl],
                        [paths.spatch_csv, paths.selected_layer]),
        "estimate-quality": ([paths.data_train, paths.encoder_ssl,
                              paths.selected_layer],
                             [paths.quality, paths.heatmaps]),
        "train-dpo": ([paths.data_train, paths.encoder_ssl,
                       paths.selected_layer, paths.quality],
                      None),  # denoiser dirs depend on the objective list
        "evaluate": ([paths.data_heldout, paths.encoder_ssl,
                      paths.selected_layer],
                     [paths.eval_csv]),
    }


# --- manifest ----------------------------------------------------------------

def _tree_files(root: Path):
    if root.is_file():
        return [root]
    if root.is_dir():
        return sorted(p for p in root.rglob("*") if p.is_file())
    return []


def hash_artifacts(out: Path, roots):
    """FNV-1a per file, keyed by path relative to the output directory."""
    hashes = {}
    for root in roots:
        for f in _tree_files(Path(root)):
            hashes[str(f.relative_to(out))] = f"{fnv1a64(f.read_bytes()):016x}"
    return hashes


class Manifest:
    def __init__(self, path: Path):
        self.path = path
        self.data = {"stages": {}}
        if path.exists():
            self.data = json.loads(path.read_text())

    def save(self):
        self.path.write_text(json.dumps(self.data, indent=1, sort_keys=True) + "\n")

    def record(self, stage, inputs, outputs, wall_clock):
        self.data["stages"][stage] = {
            "inputs": inputs, "outputs": outputs, "wall_clock": wall_clock}
        self.save()

    def is_fresh(self, stage, out, in_roots, out_roots) -> bool:
        entry = self.data["stages"].get(stage)
        if entry is None:
            return False
        return (hash_artifacts(out, in_roots) == entry["inputs"]
                and hash_artifacts(out, out_roots) == entry["outputs"])

    def completed_stages(self):
        return [s for s in STAGES if s in self.data["stages"]]


# --- stage bodies --------------------------------------------------------------

def _encoder_config(cfg) -> encoder.EncoderConfig:
    return encoder.EncoderConfig(
        layers=cfg.encoder_layers, channels=cfg.encoder_channels,
        kernel=cfg.encoder_kernel, patch_size=cfg.patch_size,
        grid=cfg.image_size // cfg.patch_size)


def _denoiser_config(cfg) -> diffusion.DenoiserConfig:
    return diffusion.DenoiserConfig(
        image_size=cfg.image_size, feat_channels=cfg.encoder_channels,
        feat_grid=cfg.image_size // cfg.patch_size)


def stage_gen_data(cfg, paths: Paths):
    train = scenes.build_pair_corpus(
        cfg.train_pairs, scenes.CorpusConfig(derive_seed(cfg.seed, 1),
                                             cfg.corruption_rate))
    heldout = scenes.build_pair_corpus(
        cfg.heldout_pairs, scenes.CorpusConfig(derive_seed(cfg.seed, 2),
                                               cfg.corruption_rate))
    corr = scenes.build_correspondence_corpus(
        cfg.corr_groups, cfg.corr_images_per_group, derive_seed(cfg.seed, 3))
    scenes.save_pair_corpus(train, paths.data_train)
    scenes.save_pair_corpus(heldout, paths.data_heldout)
    scenes.save_correspondence_corpus(corr, paths.data_corr)


def stage_train_ssl(cfg, paths: Paths):
    corpus = scenes.load_pair_corpus(paths.data_train)
    enc_cfg = _encoder_config(cfg)
    pre = encoder.PretrainConfig(templates=cfg.pretrain_templates,
                                 max_steps=cfg.pretrain_max_steps,
                                 learning_rate=cfg.pretrain_learning_rate)
    state = encoder.pretrain_encoder(corpus, enc_cfg, derive_seed(cfg.seed, 4), pre)
    encoder.save_encoder(state, paths.encoder_pre)
    encoder.train_ssl(state, corpus, cfg.ssl_epochs, cfg.ssl_learning_rate,
                      seed=derive_seed(cfg.seed, 5))
    encoder.save_encoder(state, paths.encoder_ssl)
    rows = ["epoch,l_aug,l_reg,l_self"]
    rows += [f"{r['epoch']},{r['l_aug']!r},{r['l_reg']!r},{r['l_self']!r}"
             for r in state.ssl_log]
    paths.ssl_log.write_text("\n".join(rows) + "\n")


def _load_state(cfg, ckpt_dir) -> encoder.SslState:
    enc_cfg = _encoder_config(cfg)
    params = encoder.load_encoder(ckpt_dir, enc_cfg)
    return encoder.SslState(config=enc_cfg, params=params, frozen=params.copy())


def stage_eval_spatch(cfg, paths: Paths):
    corr = scenes.load_correspondence_corpus(paths.data_corr)
    state_pre = _load_state(cfg, paths.encoder_pre)
    state_ssl = _load_state(cfg, paths.encoder_ssl)
    rows = ["layer,before,after"]
    after_scores = {}
    for layer in range(1, cfg.encoder_layers + 1):
        before = matching.s_patch(corr, state_pre, layer)
        after = matching.s_patch(corr, state_ssl, layer)
        after_scores[layer] = after
        rows.append(f"{layer},{before!r},{after!r}")
    paths.spatch_csv.write_text("\n".join(rows) + "\n")
    selected = (cfg.selected_layer if cfg.selected_layer > 0
                else encoder.argmax_layer(after_scores))
    paths.selected_layer.write_text(f"{selected}\n")


def _selected_layer(paths: Paths) -> int:
    return int(paths.selected_layer.read_text().strip())


def _object_weight(pair) -> np.ndarray:
    grid = scenes.object_patch_grid(pair.object_mask).astype(np.float64)
    return np.repeat(np.repeat(grid, scenes.PATCH_SIZE, axis=0),
                     scenes.PATCH_SIZE, axis=1)


def stage_estimate_quality(cfg, paths: Paths):
    corpus = scenes.load_pair_corpus(paths.data_train)
    state = _load_state(cfg, paths.encoder_ssl)
    layer = _selected_layer(paths)
    size = cfg.image_size
    paths.heatmaps.mkdir(parents=True, exist_ok=True)
    for i, pair in enumerate(corpus):
        f_gen = state.encode(pair.generated).layer(layer)
        f_ref = state.encode(pair.reference).layer(layer)
        q_gen = matching.patch_quality(f_gen, f_ref, "gen->ref", layer)
        q_ref = matching.patch_quality(f_ref, f_gen, "ref->gen", layer)
        masked = _object_weight(pair)
        w_gen = matching.normalize_upsample(q_gen, size, size,
                                            mode=cfg.quality_normalize)
        w_ref = matching.normalize_upsample(q_ref, size, size, invert=True,
                                            mode=cfg.quality_normalize)
        w_gen = Tensor(w_gen.values.data * masked)
        w_ref = Tensor(w_ref.values.data * masked)

        d = paths.quality / str(i)
        d.mkdir(parents=True, exist_ok=True)
        tensorio.write_tensor(q_gen.raw, d / "q_gen.tnsr")
        tensorio.write_tensor(q_ref.raw, d / "q_ref.tnsr")
        tensorio.write_tensor(w_gen, d / "w_gen.tnsr")
        tensorio.write_tensor(w_ref, d / "w_ref.tnsr")

        if i < cfg.heatmap_pairs:
            matching.write_pgm(w_gen, paths.heatmaps / f"pair{i}_wgen.pgm")
            matching.write_pgm(w_ref, paths.heatmaps / f"pair{i}_wref.pgm")
            obj = scenes.object_patch_grid(pair.object_mask)
            raw = np.where(obj, q_gen.raw.data, np.inf)
            h, w = np.unravel_index(int(np.argmin(raw)), raw.shape)
            z = matching.heatmap(f_gen, (int(h), int(w)), f_ref)
            z_img = matching.heatmap_to_unit(z)
            from .tensor import upsample_nearest
            matching.write_pgm(upsample_nearest(z_img, size, size),
                               paths.heatmaps / f"pair{i}_worst_patch.pgm")


def _conditioning(cfg, pairs, state, layer, quality_dir=None):
    conds = []
    for i, pair in enumerate(pairs):
        w_gen = w_ref = None
        if quality_dir is not None:
            w_gen = tensorio.read_tensor(Path(quality_dir) / str(i) / "w_gen.tnsr")
            w_ref = tensorio.read_tensor(Path(quality_dir) / str(i) / "w_ref.tnsr")
        conds.append(diffusion.PairConditioning(
            pair=pair,
            cond=diffusion.descriptor_embedding(pair.descriptor),
            ref_feats=state.encode(pair.reference).layer(layer),
            w_gen=w_gen, w_ref=w_ref))
    return conds


def stage_train_dpo(cfg, paths: Paths):
    corpus = scenes.load_pair_corpus(paths.data_train)
    state = _load_state(cfg, paths.encoder_ssl)
    layer = _selected_layer(paths)
    conds = _conditioning(cfg, corpus, state, layer, paths.quality)
    schedule = diffusion.make_schedule(cfg.diffusion_t)
    rows = ["step,objective,loss"]
    for objective in cfg.objective_list:
        den = diffusion.Denoiser(_denoiser_config(cfg), derive_seed(cfg.seed, 6))
        trace = diffusion.train(
            den, conds, objective, cfg.train_steps, cfg.train_learning_rate,
            derive_seed(cfg.seed, 7), schedule, beta=cfg.dpo_beta,
            ref_term_weight=cfg.patchdpo_ref_weight)
        diffusion.save_denoiser(den, paths.denoiser(objective))
        rows += [f"{s},{objective},{v!r}" for s, v in enumerate(trace)]
    paths.loss_trace.write_text("\n".join(rows) + "\n")


def stage_evaluate(cfg, paths: Paths):
    heldout = scenes.load_pair_corpus(paths.data_heldout)
    state = _load_state(cfg, paths.encoder_ssl)
    layer = _selected_layer(paths)
    conds = _conditioning(cfg, heldout, state, layer)
    schedule = diffusion.make_schedule(cfg.diffusion_t)
    eval_seed = derive_seed(cfg.seed, 8)
    den_cfg = _denoiser_config(cfg)
    rows = ["objective,clean_err,corrupt_err,seed"]
    for objective in cfg.objective_list:
        den = diffusion.Denoiser(den_cfg, 0)
        den.params = diffusion.load_denoiser_params(paths.denoiser(objective), den_cfg)
        clean, corrupt = diffusion.eval_region_error(
            den, conds, schedule, eval_seed, draws=cfg.eval_draws)
        rows.append(f"{objective},{clean!r},{corrupt!r},{eval_seed}")
    paths.eval_csv.write_text("\n".join(rows) + "\n")


STAGE_BODIES = {
    "gen-data": stage_gen_data,
    "train-ssl": stage_train_ssl,
    "eval-spatch": stage_eval_spatch,
    "estimate-quality": stage_estimate_quality,
    "train-dpo": stage_train_dpo,
    "evaluate": stage_evaluate,
}


# --- runner --------------------------------------------------------------------

def _clear(roots):
    import shutil
    for root in roots:
        root = Path(root)
        if root.is_dir():
            shutil.rmtree(root)
        elif root.exists():
            root.unlink()


class _Lock:
    """Advisory one-instance-per-output-directory lock."""

    def __init__(self, path: Path):
        self.path = path

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockedOutputDir(
                f"another pipeline instance owns {self.path.parent}") from None
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def run(command: str, cfg: PipelineConfig, force: bool = False) -> None:
    """Execute one stage or ``all``; raises on failure."""
    if command == "all":
        stages = list(STAGES)
    elif command in STAGES:
        stages = [command]
    else:
        raise ConfigError(f"unknown subcommand {command!r}")

    paths = Paths(cfg.out_dir)
    paths.out.mkdir(parents=True, exist_ok=True)
    paths.config_echo.write_text(cfg.echo())

    io = stage_io(paths)
    with _Lock(paths.lock):
        manifest = Manifest(paths.manifest)
        for stage in stages:
            in_roots, out_roots = io[stage]
            in_roots = [paths.config_echo] + in_roots
            if out_roots is None:
                out_roots = [paths.denoiser(o) for o in cfg.objective_list]
                out_roots.append(paths.loss_trace)
            for root in in_roots:
                if not Path(root).exists():
                    raise MissingArtifact(root)
            if not force and manifest.is_fresh(stage, paths.out, in_roots, out_roots):
                continue
            _clear(out_roots)
            started = time.monotonic()
            STAGE_BODIES[stage](cfg, paths)
            manifest.record(
                stage,
                hash_artifacts(paths.out, in_roots),
                hash_artifacts(paths.out, out_roots),
                time.monotonic() - started)
    if command == "all":
        build_report(cfg.out_dir)


# --- report ----------------------------------------------------------------------

def _read_csv_rows(path: Path):
    if not path.exists():
        return None
    lines = path.read_text().splitlines()
    return [line.split(",") for line in lines[1:]]


def build_report(out_dir):
    """Assemble report.csv from the stage CSVs; values are copied verbatim.

    Incomplete runs produce MISSING cells rather than errors.
    """
    paths = Paths(out_dir)
    rows = [["kind", "name", "value_a", "value_b"]]

    eval_rows = _read_csv_rows(paths.eval_csv)
    cfg_objectives = None
    if paths.config_echo.exists():
        for line in paths.config_echo.read_text().splitlines():
            if line.startswith("objectives ="):
                cfg_objectives = [o for o in line.split("=", 1)[1].strip().split(",") if o]
    by_obj = {r[0]: r for r in eval_rows} if eval_rows else {}
    for obj in cfg_objectives or sorted(by_obj):
        row = by_obj.get(obj)
        if row:
            rows.append(["objective", obj, row[1], row[2]])
        else:
            rows.append(["objective", obj, "MISSING", "MISSING"])

    spatch_rows = _read_csv_rows(paths.spatch_csv)
    if spatch_rows:
        for layer, before, after in spatch_rows:
            rows.append(["layer", layer, before, after])
    else:
        rows.append(["layer", "MISSING", "MISSING", "MISSING"])

    if paths.selected_layer.exists():
        rows.append(["selected_layer", paths.selected_layer.read_text().strip(),
                     "", ""])
    else:
        rows.append(["selected_layer", "MISSING", "", ""])

    paths.report_csv.write_text("\n".join(",".join(r) for r in rows) + "\n")
    return rows


def format_report(rows) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    lines = []
    for r in rows:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip())
    return "\n".join(lines)
