"""Training driver: alternate match estimation and metric updates.

One minibatch is every line of one image pair. For each line the current
metric produces the similarity matrices; the loss (and, for
CONTRASTIVE_DP, the match path recomputed from the current metric)
yields gradients on the matrix entries, which are pushed back through the
cosine head and the embedding network before a single ADAM step.

Only images are read here. Ground truth is never loaded.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .data import StereoPair, negative_rows, read_manifest, valid_center_rows
from .dp import filter_occluded_segments, max_average_path
from .embedding import EmbeddingNetwork, save_checkpoint, standardize
from .errors import ConfigError, TrainingError
from .losses import LossConfig, LossResult, Method, contrastive_dp_loss, contrastive_loss, \
    mil_contrastive_loss, mil_loss
from .numeric import Adam
from .similarity import build_banded_similarity, similarity_backward

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    method: Method = Method.CONTRASTIVE_DP
    mu: float = 0.2
    t_sup: int = 2
    t_occ: int = 3
    d_max: int = 0  # 0: take d_max from the manifest
    patch_size: int = 9
    epochs: int = 10
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    manifest_path: str = ""
    checkpoint_path: str = ""

    def __post_init__(self):
        self.method = Method(self.method)
        if self.patch_size not in (9, 11):
            raise ConfigError(f"patch_size must be 9 or 11, got {self.patch_size}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.d_max < 0:
            raise ConfigError("d_max must be >= 0")
        self.loss_config()  # validates mu, t_sup, t_occ

    def loss_config(self) -> LossConfig:
        return LossConfig(self.method, self.mu, self.t_sup, self.t_occ)


def read_config(path: str | Path) -> TrainConfig:
    """Flat ``key = value`` text; ``#`` comments; unknown keys are rejected."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        kind = types[key]
        try:
            if kind == "int":
                values[key] = int(raw)
            elif kind == "float":
                values[key] = float(raw)
            elif kind == "Method":
                values[key] = Method(raw.upper().replace("-", "_"))
            else:
                values[key] = raw
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: bad value {raw!r} for {key}") from None
    return TrainConfig(**values)


def write_config(config: TrainConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        for key, value in asdict(config).items():
            fh.write(f"{key} = {value.value if isinstance(value, Method) else value}\n")


def line_loss(method: Method, cfg: LossConfig, a, b, n, d_max: int):
    """Loss and descriptor gradients for one line triplet.

    Returns (LossResult, grad_a, grad_b, grad_n); ``n`` and ``grad_n`` are
    None for methods that ignore the negative line.
    """
    s_rp = build_banded_similarity(a, b, d_max)
    if method is Method.CONTRASTIVE_DP:
        path = filter_occluded_segments(max_average_path(s_rp), cfg.t_occ)
        result = contrastive_dp_loss(s_rp, path.kept_cells(), cfg.mu, cfg.t_sup)
    elif method is Method.CONTRASTIVE:
        result = contrastive_loss(s_rp, None, cfg.mu, cfg.t_sup)
    else:
        s_rn = build_banded_similarity(a, n, d_max)
        s_np = build_banded_similarity(n, b, d_max)
        if method is Method.MIL:
            result = mil_loss(s_rp, s_rn, s_np, None, cfg.mu)
        else:
            result = mil_contrastive_loss(s_rp, s_rn, s_np, None, cfg.mu, cfg.t_sup)
    ga, gb = similarity_backward(result.grads["rp"], a, b, s_rp.valid)
    gn = None
    if method.needs_negative:
        ga_n, gn = similarity_backward(result.grads["rn"], a, n, s_rn.valid)
        gn_b, gb_n = similarity_backward(result.grads["np"], n, b, s_np.valid)
        ga = ga + ga_n
        gb = gb + gb_n
        gn = gn + gn_b
    return result, ga, gb, gn


def minibatch_step(net: EmbeddingNetwork, pair: StereoPair, cfg: LossConfig,
                   d_max: int, rng: np.random.Generator) -> float:
    """Accumulate gradients of the mean line loss over all rows of one pair.

    Returns the mean loss. Parameter gradients are left in ``net`` (zeroed first).
    """
    s = net.patch_size
    half = (s - 1) // 2
    left, trace_l = net.forward(standardize(pair.left))
    right, trace_r = net.forward(standardize(pair.right))
    if not (np.isfinite(left).all() and np.isfinite(right).all()):
        raise TrainingError("non-finite descriptors")
    centers = valid_center_rows(pair.shape[0], s)
    negs = negative_rows(centers, pair.shape[0], s, rng)
    grad_l = np.zeros(left.shape)
    grad_r = np.zeros(right.shape)
    weight = 1.0 / len(centers)
    total = 0.0
    for center, neg in zip(centers, negs):
        r, rn = center - half, neg - half
        negative = right[rn] if cfg.method.needs_negative else None
        result, ga, gb, gn = line_loss(cfg.method, cfg, left[r], right[r], negative, d_max)
        total += result.value
        grad_l[r] += weight * ga
        grad_r[r] += weight * gb
        if gn is not None:
            grad_r[rn] += weight * gn
    net.zero_grad()
    net.backward(grad_l, trace_l)
    net.backward(grad_r, trace_r)
    return total * weight


@dataclass
class TrainResult:
    net: EmbeddingNetwork
    losses: list[float]
    checkpoint: Path | None


def train(config: TrainConfig, pairs: list[StereoPair], out_dir: str | Path | None = None,
          net: EmbeddingNetwork | None = None, on_epoch=None) -> TrainResult:
    """Run ``config.epochs`` passes over ``pairs``.

    With ``out_dir``, writes ``checkpoint.bin`` (initial weights before the
    first epoch, then the latest), ``checkpoint_epochN.bin``, ``loss.log``
    (``epoch mean_loss``) and ``timing.log`` (``epoch seconds``).
    ``on_epoch(epoch, net, mean_loss)`` is called after every epoch.
    """
    cfg = config.loss_config()
    rng = np.random.default_rng(config.seed)
    if net is None:
        net = EmbeddingNetwork.create(config.patch_size, seed=int(rng.integers(2 ** 31)))
    elif net.patch_size != config.patch_size:
        raise ConfigError("network patch size differs from the configuration")
    adam = Adam(config.lr, config.beta1, config.beta2, config.eps)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(net, out / "checkpoint.bin")
        (out / "loss.log").write_text("")
        (out / "timing.log").write_text("")
    losses = []
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(len(pairs))
        epoch_losses = []
        for k in order:
            pair = pairs[k]
            d_max = config.d_max or pair.d_max
            try:
                value = minibatch_step(net, pair, cfg, d_max, rng)
                if not np.isfinite(value):
                    raise TrainingError("non-finite loss")
                adam.step(net.parameters(), net.gradients())
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, pair {pair.id}: {exc}") from None
            epoch_losses.append(value)
        mean = float(np.mean(epoch_losses)) if epoch_losses else 0.0
        losses.append(mean)
        seconds = time.perf_counter() - start
        log.info("epoch %d  loss %.6f  (%.1fs)", epoch, mean, seconds)
        if out is not None:
            with open(out / "loss.log", "a") as fh:
                fh.write(f"{epoch} {mean:.9f}\n")
            with open(out / "timing.log", "a") as fh:
                fh.write(f"{epoch} {seconds:.3f}\n")
            save_checkpoint(net, out / f"checkpoint_epoch{epoch}.bin")
            save_checkpoint(net, out / "checkpoint.bin")
        if on_epoch is not None:
            on_epoch(epoch, net, mean)
    return TrainResult(net, losses, out / "checkpoint.bin" if out is not None else None)


def load_training_pairs(manifest_path: str | Path, d_max: int = 0) -> list[StereoPair]:
    """Images only; ground-truth columns of the manifest are ignored."""
    pairs = []
    for entry in read_manifest(manifest_path):
        pair = entry.load_pair()
        if d_max:
            pair = replace(pair, d_max=d_max)
        pairs.append(pair)
    return pairs
