"""Episodic training, checkpoints, evaluation and the ablation matrix."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
from safetensors.torch import load_file, save_file

from .backbone import Backbone, BackboneConfig, normalize_images
from .dataio import (
    MIN_FG_FRACTION,
    DataError,
    Episode,
    EpisodeSampler,
    Geography,
    LabeledTile,
    augment,
    load_tiles,
    read_manifest,
    resize_tile,
)
from .grabcut import refine_mask
from .losses import LossBreakdown, par_loss, total_loss
from .protoseg import (
    PredictedMask,
    apply_texture_attention,
    background_prototype,
    foreground_prototype,
    predict_mask,
    segmentation_loss,
)
from .texture import TextureAttention

log = logging.getLogger(__name__)

FOREST = 1
MAX_RESAMPLES = 20
CHECKPOINT_KEY = "forestfss"


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class AblationConfig:
    use_q2s: bool = True
    ta_in_s2q: bool = True
    ta_in_q2s: bool = False
    use_grabcut: bool = True

    def __post_init__(self):
        if self.ta_in_q2s and not self.use_q2s:
            raise ValueError("ta_in_q2s requires use_q2s")


# Row labels follow the ablation tables; "S2Q+Q2S-TA" carries TA in the reverse pass only.
ABLATION_ROWS = {
    "S2Q": AblationConfig(use_q2s=False, ta_in_s2q=False, use_grabcut=False),
    "S2Q-TA": AblationConfig(use_q2s=False, ta_in_s2q=True, use_grabcut=True),
    "S2Q+Q2S": AblationConfig(use_q2s=True, ta_in_s2q=False, use_grabcut=False),
    "S2Q+Q2S-TA": AblationConfig(use_q2s=True, ta_in_s2q=False, ta_in_q2s=True, use_grabcut=False),
    "S2Q-TA+Q2S-TA": AblationConfig(use_q2s=True, ta_in_s2q=True, ta_in_q2s=True, use_grabcut=True),
    "S2Q-TA+Q2S": AblationConfig(use_q2s=True, ta_in_s2q=True, ta_in_q2s=False, use_grabcut=True),
}


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    iterations: int = 30_000
    alpha: float = 20.0
    lambda_par: float = 1.0
    way: int = 1
    shot: int = 1
    seed: int = 0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    data_root: str = "."
    train_manifest: str = ""
    test_manifest: str = ""
    image_side: int = 128
    augment: bool = True
    min_fg_fraction: float = MIN_FG_FRACTION
    normalize_by_attention: bool = False
    texture_filters: int = 32
    texture_kernel: int = 11
    texture_wavelengths: tuple[float, float] = (2.0, 16.0)
    grabcut_iterations: int = 5
    grabcut_gamma: float = 50.0
    grabcut_k: int = 5
    refine_classes: tuple[int, ...] = (FOREST,)
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.way not in (1, 2):
            raise ValueError("way must be 1 or 2")
        if self.shot < 1:
            raise ValueError("shot must be >= 1")
        if isinstance(self.backbone, dict):
            object.__setattr__(self, "backbone", BackboneConfig(**self.backbone))
        object.__setattr__(self, "texture_wavelengths", tuple(self.texture_wavelengths))
        object.__setattr__(self, "refine_classes", tuple(self.refine_classes))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# ------------------------------------------------------------------ model


class FewShotSegmenter(nn.Module):
    """Backbone plus texture-attention network sharing one parameter set."""

    def __init__(self, config: TrainConfig):
        super().__init__()
        self.backbone = Backbone(config.backbone)
        self.texture = TextureAttention(
            config.texture_filters, config.texture_kernel, seed=config.seed, wavelengths=config.texture_wavelengths
        )

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def encode(self, pixels: torch.Tensor, with_texture: bool) -> tuple[torch.Tensor, torch.Tensor | None]:
        x = normalize_images(pixels, self.dtype)
        feats = self.backbone(x)
        att = self.texture(x)[:, 0] if with_texture else None
        return feats, att


def support_prototypes(
    feats: torch.Tensor,
    masks: torch.Tensor,
    refined: torch.Tensor,
    attention: torch.Tensor | None,
    n_classes: int,
    normalize_by_attention: bool = False,
) -> torch.Tensor:
    """Stack background and foreground prototypes, ``(n_classes, D)``.

    ``refined`` holds the forest masks to pool with (GrabCut output or raw
    annotation); other foreground classes use their raw masks and uniform
    attention. Background pools over pixels outside every foreground mask.
    """
    fg_masks = []
    for k in range(len(feats)):
        per_class = {c: masks[k] == c for c in range(1, n_classes)}
        per_class[FOREST] = refined[k]
        fg_masks.append(per_class)
    protos = []
    union = [torch.stack([fm[c] for c in fm]).any(dim=0) for fm in fg_masks]
    protos.append(background_prototype([(feats[k], union[k]) for k in range(len(feats))]))
    for c in range(1, n_classes):
        items = []
        for k in range(len(feats)):
            g = fg_masks[k][c]
            if c == FOREST and attention is not None:
                t_hat = apply_texture_attention(attention[k], g)
            else:
                t_hat = g.to(feats.dtype)
            items.append((feats[k], t_hat, g))
        protos.append(foreground_prototype(items, normalize_by_attention))
    return torch.stack(protos)


def episode_forward(
    model: FewShotSegmenter,
    pixels: torch.Tensor,
    masks: torch.Tensor,
    refined: torch.Tensor,
    ablation: AblationConfig,
    n_classes: int,
    alpha: float = 20.0,
    lambda_par: float = 1.0,
    normalize_by_attention: bool = False,
    diagnostics: Counter | None = None,
) -> tuple[LossBreakdown, PredictedMask]:
    """One episode: ``pixels``/``masks`` hold K supports then the query.

    Raises ValueError when a support yields an empty prototype mask.
    """
    k = len(pixels) - 1
    need_texture = ablation.ta_in_s2q or ablation.ta_in_q2s
    feats, att = model.encode(pixels, need_texture)
    s_att = att[:k] if (att is not None and ablation.ta_in_s2q) else None
    protos = support_prototypes(feats[:k], masks[:k], refined, s_att, n_classes, normalize_by_attention)
    pred = predict_mask(feats[k], protos, alpha, diagnostics)
    l_seg = segmentation_loss(pred, masks[k])
    if ablation.use_q2s:
        q_att = att[k] if (att is not None and ablation.ta_in_q2s) else None
        l_par = par_loss(
            feats[k], pred.labels, [(feats[i], masks[i]) for i in range(k)], n_classes, alpha, q_att, diagnostics
        )
    else:
        l_par = torch.zeros((), dtype=feats.dtype)
    return total_loss(l_seg, l_par, lambda_par if ablation.use_q2s else 0.0), pred


# ------------------------------------------------------------ mask refinement


class RefinedMaskCache:
    """GrabCut outputs cached per (tile, class); flipped tiles reuse the unflipped result."""

    def __init__(self, iterations: int = 5, gamma: float = 50.0, k: int = 5, seed: int = 0):
        self.iterations = iterations
        self.gamma = gamma
        self.k = k
        self.seed = seed
        self._cache: dict[tuple, np.ndarray] = {}
        self.fallbacks = 0

    def get(self, tile: LabeledTile, cls: int) -> np.ndarray:
        key = (tile.source_id, cls, tile.shape)
        if key not in self._cache:
            pixels = np.asarray(tile.pixels)
            raw = np.asarray(tile.mask) == cls
            if tile.flipped:
                pixels, raw = pixels[:, ::-1], raw[:, ::-1]
            rng = np.random.default_rng([self.seed, zlib.crc32(tile.source_id.encode()), cls])
            try:
                g = refine_mask(pixels, raw.astype(np.uint8), self.iterations, self.gamma, self.k, rng).astype(bool)
                if not g.any():
                    raise ValueError("refinement removed all foreground")
            except ValueError as exc:
                log.debug("grabcut fallback for %s class %d: %s", tile.source_id, cls, exc)
                self.fallbacks += 1
                g = raw
            self._cache[key] = np.ascontiguousarray(g)
        g = self._cache[key]
        return g[:, ::-1] if tile.flipped else g


def _class_mask(mask: np.ndarray, way: int) -> np.ndarray:
    out = np.asarray(mask).astype(np.int64)
    out[out > way] = 0
    return out


def episode_tensors(
    episode: Episode, refiner: RefinedMaskCache | None, refine_classes: Sequence[int] = (FOREST,)
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    tiles = list(episode.supports) + [episode.query]
    pixels = torch.from_numpy(np.stack([np.asarray(t.pixels) for t in tiles]))
    masks = torch.from_numpy(np.stack([_class_mask(t.mask, episode.way) for t in tiles]))
    refined = []
    for t, m in zip(episode.supports, masks[:-1]):
        if refiner is not None and FOREST in refine_classes:
            refined.append(torch.from_numpy(refiner.get(t, FOREST).copy()))
        else:
            refined.append(m == FOREST)
    return pixels, masks, torch.stack(refined)


# ------------------------------------------------------------------ training


@dataclass
class Checkpoint:
    path: Path | None
    model: FewShotSegmenter
    config: TrainConfig
    ablation: AblationConfig
    iteration: int


def _tensor_dict(model: FewShotSegmenter) -> dict[str, torch.Tensor]:
    tensors = {}
    for name, t in model.state_dict().items():
        ns, rest = name.split(".", 1)
        tensors[f"{ns}/{rest}"] = t.detach().contiguous().clone()
    g = model.texture.gabor
    exported = {
        "theta": g.theta, "lambda": g.log_lam.exp(), "psi": g.psi,
        "sigma": g.log_sigma.exp(), "gamma": g.log_gamma.exp(),
    }
    for name, t in exported.items():
        tensors[f"texture/gabor/{name}"] = t.detach().contiguous().clone()
    return tensors


def save_checkpoint(path: str | Path, model: FewShotSegmenter, config: TrainConfig,
                    ablation: AblationConfig, iteration: int) -> Path:
    path = Path(path)
    meta = json.dumps(
        {"train_config": config.to_dict(), "ablation": dataclasses.asdict(ablation), "iteration": iteration},
        sort_keys=True,
    )
    save_file(_tensor_dict(model), str(path), metadata={CHECKPOINT_KEY: meta})
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    from safetensors import safe_open

    with safe_open(str(path), framework="pt") as fh:
        meta = json.loads(fh.metadata()[CHECKPOINT_KEY])
    config = TrainConfig.from_dict(meta["train_config"])
    ablation = AblationConfig(**meta["ablation"])
    model = FewShotSegmenter(config)
    tensors = load_file(str(path))
    state = {k.replace("/", ".", 1): v for k, v in tensors.items() if not k.startswith("texture/gabor/")}
    model.load_state_dict(state)
    model.eval()
    return Checkpoint(Path(path), model, config, ablation, meta["iteration"])


def train_pool(config: TrainConfig) -> list[LabeledTile]:
    rows = read_manifest(config.train_manifest, config.data_root)
    return load_tiles(rows, config.data_root, geography=Geography.TRAIN, side=config.image_side)


def train(
    config: TrainConfig,
    ablation: AblationConfig,
    pool: Sequence[LabeledTile] | None = None,
    out_dir: str | Path | None = None,
    log_path: str | Path | None = None,
) -> Checkpoint:
    """Run SGD-with-momentum episodes on the total loss.

    Only train-domain tiles are used. Each iteration draws its episode from
    ``np.random.default_rng([seed, iteration])``, so every step is
    replayable on its own.
    """
    torch.manual_seed(config.seed)
    tiles = [t for t in (pool if pool is not None else train_pool(config)) if t.geography is Geography.TRAIN]
    if not tiles:
        raise DataError("no train-domain tiles available")
    sampler = EpisodeSampler(tiles, config.way, config.shot, config.seed, config.min_fg_fraction)
    model = FewShotSegmenter(config)
    model.train()
    opt = torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum)
    refiner = None
    if ablation.use_grabcut:
        refiner = RefinedMaskCache(config.grabcut_iterations, config.grabcut_gamma, config.grabcut_k, config.seed)
    n_classes = config.way + 1
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_fh = open(log_path, "w", encoding="utf-8") if log_path is not None else None
    diagnostics: Counter = Counter()
    try:
        for it in range(1, config.iterations + 1):
            rng = np.random.default_rng([config.seed, it])
            breakdown = None
            for attempt in range(MAX_RESAMPLES):
                ep = sampler.sample(rng)
                ep = _prepare_episode(ep, config, rng)
                pixels, masks, refined = episode_tensors(ep, refiner, config.refine_classes)
                try:
                    breakdown, _ = episode_forward(
                        model, pixels, masks, refined, ablation, n_classes, config.alpha,
                        config.lambda_par, config.normalize_by_attention, diagnostics,
                    )
                    break
                except ValueError as exc:
                    diagnostics["resampled"] += 1
                    log.debug("iteration %d: resampling episode (%s)", it, exc)
            if breakdown is None:
                raise DataError(f"iteration {it}: no usable episode after {MAX_RESAMPLES} draws")
            if not math.isfinite(float(breakdown.total.detach())):
                ids = [t.source_id for t in list(ep.supports) + [ep.query]]
                raise NumericError(f"non-finite loss at iteration {it} (episode seed [{config.seed}, {it}], tiles {ids})")
            opt.zero_grad()
            breakdown.total.backward()
            opt.step()
            if log_fh is not None:
                log_fh.write(json.dumps({"iter": it, **breakdown.as_record()}) + "\n")
            if out_dir is not None and config.checkpoint_every and it % config.checkpoint_every == 0:
                save_checkpoint(out_dir / f"checkpoint_{it:06d}.safetensors", model, config, ablation, it)
    finally:
        if log_fh is not None:
            log_fh.close()
    model.eval()
    path = None
    if out_dir is not None:
        path = save_checkpoint(out_dir / "checkpoint_final.safetensors", model, config, ablation, config.iterations)
    if diagnostics:
        log.info("training diagnostics: %s", dict(diagnostics))
    return Checkpoint(path, model, config, ablation, config.iterations)


def _prepare_episode(ep: Episode, config: TrainConfig, rng: np.random.Generator | None) -> Episode:
    def prep(t):
        if rng is not None and config.augment:
            t = augment(t, rng)
        return resize_tile(t, config.image_side)

    return Episode(tuple(prep(t) for t in ep.supports), prep(ep.query), ep.way, ep.shot, ep.class_list)


# ------------------------------------------------------------------ metrics


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, n_classes: int) -> np.ndarray:
    """Rows are ground truth, columns are predictions."""
    pred = np.asarray(pred, dtype=np.int64).ravel()
    gt = np.asarray(gt, dtype=np.int64).ravel()
    return np.bincount(gt * n_classes + pred, minlength=n_classes**2).reshape(n_classes, n_classes)


@dataclass
class MetricsReport:
    confusion: np.ndarray
    iou_per_class: list[float]
    miou: float
    episodes: int
    seed: int
    class_names: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @classmethod
    def from_confusion(cls, confusion: np.ndarray, episodes: int = 0, seed: int = 0,
                       class_names: Sequence[str] = (), config: dict | None = None) -> "MetricsReport":
        conf = np.asarray(confusion, dtype=np.int64)
        tp = np.diag(conf).astype(np.float64)
        denom = conf.sum(axis=0) + conf.sum(axis=1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            iou = np.where(denom > 0, tp / np.where(denom > 0, denom, 1), np.nan)
        defined = iou[~np.isnan(iou)]
        miou = float(defined.sum() / len(defined)) if len(defined) else float("nan")
        return cls(conf, [float(v) for v in iou], miou, episodes, seed, list(class_names), config or {})

    @property
    def forest_iou(self) -> float:
        return self.iou_per_class[FOREST]

    def to_dict(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "iou_per_class": self.iou_per_class,
            "class_names": self.class_names,
            "forest_iou": self.forest_iou,
            "miou": self.miou,
            "episodes": self.episodes,
            "seed": self.seed,
            "config": self.config,
        }

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def predict_episode(model: FewShotSegmenter, ep: Episode, ablation: AblationConfig,
                    refiner: RefinedMaskCache | None, config: TrainConfig) -> PredictedMask:
    pixels, masks, refined = episode_tensors(ep, refiner, config.refine_classes)
    k = len(pixels) - 1
    with torch.no_grad():
        feats, att = model.encode(pixels[:k + 1], ablation.ta_in_s2q)
        protos = support_prototypes(
            feats[:k], masks[:k], refined, att[:k] if att is not None else None, ep.way + 1,
            config.normalize_by_attention,
        )
        return predict_mask(feats[k], protos, config.alpha)


def evaluate(
    checkpoint: Checkpoint | str | Path,
    pool: Sequence[LabeledTile] | None = None,
    way: int | None = None,
    shot: int | None = None,
    n_episodes: int = 1000,
    seed: int = 0,
    manifest: str | Path | None = None,
    data_root: str | Path | None = None,
) -> MetricsReport:
    """Aggregate one confusion matrix over ``n_episodes`` test-domain query masks."""
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    config = ckpt.config
    way = way or config.way
    shot = shot or config.shot
    if pool is None:
        root = data_root if data_root is not None else config.data_root
        rows = read_manifest(manifest or config.test_manifest, root)
        pool = load_tiles(rows, root, geography=Geography.TEST, side=config.image_side)
    tiles = [t for t in pool if t.geography is Geography.TEST]
    if not tiles:
        raise DataError("empty test-domain pool")
    sampler = EpisodeSampler(tiles, way, shot, seed, config.min_fg_fraction)
    refiner = None
    if ckpt.ablation.use_grabcut:
        refiner = RefinedMaskCache(config.grabcut_iterations, config.grabcut_gamma, config.grabcut_k, seed)
    model = ckpt.model
    model.eval()
    n_classes = way + 1
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    eval_config = dataclasses.replace(config, way=way, shot=shot)
    done = 0
    for _ in range(n_episodes):
        for attempt in range(MAX_RESAMPLES):
            ep = _prepare_episode(sampler.sample(), eval_config, None)
            try:
                pred = predict_episode(model, ep, ckpt.ablation, refiner, eval_config)
                break
            except ValueError:
                continue
        else:
            raise DataError(f"no usable evaluation episode after {MAX_RESAMPLES} draws")
        conf += confusion_matrix(pred.labels.numpy(), _class_mask(ep.query.mask, way), n_classes)
        done += 1
    names = ["Background", "Forest", "Water"][:n_classes]
    echo = {"way": way, "shot": shot, "ablation": dataclasses.asdict(ckpt.ablation), "train_seed": config.seed}
    return MetricsReport.from_confusion(conf, done, seed, names, echo)


# ------------------------------------------------------------------ ablation


@dataclass
class AblationTable:
    miou: dict[str, dict[str, float]]
    forest_iou: dict[str, dict[str, float]]
    reports: dict[str, dict[str, MetricsReport]]

    def render(self) -> str:
        out = []
        for title, table in (("mIoU", self.miou), ("forest IoU", self.forest_iou)):
            cols = list(next(iter(table.values())).keys()) if table else []
            out.append(f"| method/{title} | " + " | ".join(cols) + " |")
            out.append("|---" * (len(cols) + 1) + "|")
            for row, vals in table.items():
                out.append(f"| {row} | " + " | ".join(f"{vals[c]:.3f}" for c in cols) + " |")
            out.append("")
        return "\n".join(out)

    def to_dict(self) -> dict:
        return {"miou": self.miou, "forest_iou": self.forest_iou}


def run_ablation_suite(
    base: TrainConfig,
    rows: dict[str, AblationConfig] | Iterable[str] = ABLATION_ROWS,
    settings: Sequence[tuple[int, int]] = ((1, 1), (1, 5), (2, 1), (2, 5)),
    train_tiles: Sequence[LabeledTile] | None = None,
    test_tiles: Sequence[LabeledTile] | None = None,
    n_episodes: int = 1000,
    eval_seed: int = 0,
) -> AblationTable:
    """Train and evaluate each row for every (way, shot) setting with shared seeds."""
    if not isinstance(rows, dict):
        rows = {name: ABLATION_ROWS[name] for name in rows}
    miou, forest, reports = {}, {}, {}
    for name, ablation in rows.items():
        miou[name], forest[name], reports[name] = {}, {}, {}
        for way, shot in settings:
            col = f"{way}-way {shot}-shot"
            cfg = dataclasses.replace(base, way=way, shot=shot)
            ckpt = train(cfg, ablation, train_tiles)
            rep = evaluate(ckpt, test_tiles, way, shot, n_episodes, eval_seed)
            reports[name][col] = rep
            miou[name][col] = rep.miou
            forest[name][col] = rep.forest_iou
    return AblationTable(miou, forest, reports)
