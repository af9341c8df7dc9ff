"""Downstream heads: tile classification and sub-patch semantic segmentation.

Change detection is binary segmentation. Three adaptation modes are
supported: ``scratch`` (random backbone, everything trained), ``finetune``
(pretrained backbone, everything trained) and ``probe`` (pretrained backbone
frozen, only a linear head trained on precomputed features).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data.specs import ValidatedDataset
from .data.tilefile import TileSample
from .geometry import TileGeometry, subpatch_layout, tile_pixels
from .metrics import compute_metrics
from .model import BACKBONE, AnySat
from .nn import MLP, Linear, Module, ParamTree
from .numerics import OptimizerState, ReduceOnPlateau, Tensor, make_schedule

log = logging.getLogger(__name__)

TASKS = ("classify", "segment", "changedet")
MODES = ("scratch", "finetune", "probe")


class HeadConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TaskConfig:
    task: str = "segment"
    mode: str = "probe"
    N: int = 2
    multilabel: bool = False
    m_ref: str | None = None
    P: float | None = None
    head: str | None = None  # "linear" | "mlp"; default linear for probe, mlp otherwise
    naive_semseg: bool = False
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.01
    schedule: str | None = None  # default: warmup-cosine (classify) / reduce-on-plateau (segment)
    plateau_patience: int = 10
    plateau_factor: float = 0.5
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise HeadConfigError(f"task must be one of {TASKS}")
        if self.mode not in MODES:
            raise HeadConfigError(f"mode must be one of {MODES}")
        if self.N < 2:
            raise HeadConfigError("N must be >= 2")
        if self.task == "changedet" and self.N != 2:
            raise HeadConfigError("change detection is binary: N must be 2")
        if self.head not in (None, "linear", "mlp"):
            raise HeadConfigError("head must be 'linear' or 'mlp'")
        if self.mode == "probe" and self.head == "mlp":
            raise HeadConfigError("probing uses a linear head")
        if self.epochs < 1 or self.batch_size < 1 or not 0 < self.test_fraction < 1:
            raise HeadConfigError("epochs and batch_size must be >= 1, test_fraction in (0, 1)")

    @property
    def head_kind(self) -> str:
        return self.head or ("linear" if self.mode == "probe" else "mlp")

    @property
    def schedule_kind(self) -> str:
        return self.schedule or ("warmup-cosine" if self.task == "classify" else "reduce-on-plateau")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- heads


class ClassificationHead(Module):
    """Linear map from the tile embedding to N logits."""

    def __init__(self, E: int, N: int, multilabel: bool = False, name: str = "head"):
        super().__init__(name)
        self.E, self.N, self.multilabel = E, N, multilabel
        self.linear = Linear(f"{name}/linear", E, N)

    def __call__(self, params, tile_embedding: Tensor) -> Tensor:
        if tile_embedding.shape[-1] != self.E:
            raise nx.ShapeMismatchError("classification head", tile_embedding.shape, (self.E,))
        return self.linear(params, tile_embedding)


class SegmentationHead(Module):
    """Per sub-patch map from [sub-patch feature, patch embedding] (2E) to delta^2 * N logits."""

    def __init__(self, E: int, N: int, delta: int, kind: str = "linear", name: str = "head"):
        super().__init__(name)
        self.E, self.N, self.delta, self.kind = E, N, delta, kind
        out = delta * delta * N
        self.net = Linear(f"{name}/linear", 2 * E, out) if kind == "linear" else MLP(f"{name}/mlp", 2 * E, 2 * E, out)

    def __call__(self, params, features: Tensor) -> Tensor:
        return self.net(params, features)


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) 1-D bilinear resampling with aligned pixel centres."""
    if n_in == n_out:
        return np.eye(n_in)
    u = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    u = np.clip(u, 0.0, n_in - 1)
    lo = np.floor(u).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = u - lo
    A = np.zeros((n_out, n_in))
    np.add.at(A, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(A, (np.arange(n_out), hi), frac)
    return A


@dataclass
class SegGeometry:
    per_axis: int
    count: int  # sub-patches per patch axis
    delta: int
    pixel_side: int
    label_side: int
    resample: np.ndarray | None  # (label_side, pixel_side) or None for identity


def seg_geometry(ds: ValidatedDataset, P: float, m_ref: str, label_side: int) -> SegGeometry:
    ms = ds.modalities[m_ref]
    layout = subpatch_layout(P, ms.R_m, ms.delta_m)
    per_axis = TileGeometry(ds.spec.S_d, P).per_axis
    pixel_side = tile_pixels(ds.spec.S_d, ms.R_m)
    if label_side < 1:
        raise HeadConfigError("label grid must be nonempty")
    R = None if label_side == pixel_side else bilinear_matrix(pixel_side, label_side)
    return SegGeometry(per_axis, layout.count_per_axis, layout.delta_eff, pixel_side, label_side, R)


def assemble(logits: Tensor, geo: SegGeometry, N: int) -> Tensor:
    """(B, n_patches, n_sub, d*d*N) -> (B, H_label, W_label, N)."""
    B = logits.shape[0]
    n, c, d = geo.per_axis, geo.count, geo.delta
    grid = logits.reshape(B, n, n, c, c, d, d, N).transpose(0, 1, 3, 5, 2, 4, 6, 7).reshape(B, n * c * d, n * c * d, N)
    if geo.resample is None:
        return grid
    x = grid.transpose(0, 3, 1, 2)  # (B, N, H, W)
    x = nx.matmul(nx.matmul(geo.resample, x), geo.resample.T)
    return x.transpose(0, 2, 3, 1)


# ---------------------------------------------------------------- losses


def cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy; ``logits`` (..., N), integer ``target`` (...)."""
    N = logits.shape[-1]
    onehot = np.eye(N)[np.asarray(target, dtype=np.int64)]
    n = onehot.size // N
    return nx.sum_(nx.log_softmax(logits, axis=-1) * onehot) * (-1.0 / n)


def binary_cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean of independent sigmoid cross-entropies, computed stably via a 2-way log-softmax."""
    y = np.asarray(target, dtype=np.float64)
    pair = nx.log_softmax(nx.stack([np.zeros(logits.shape), logits], axis=-1), axis=-1)  # log sigma(-x), log sigma(x)
    ll = pair[..., 1] * y + pair[..., 0] * (1.0 - y)
    return nx.mean(ll) * -1.0


# ---------------------------------------------------------------- tasks


def _default_m_ref(ds: ValidatedDataset, task: str) -> str:
    mods = ds.patch_modalities()
    if task == "changedet":
        ts = [m for m in mods if ds.modalities[m].is_time_series]
        if ts:
            return ts[0]
    return min(mods, key=lambda m: ds.modalities[m].R_m)


class HeadTask:
    """Binds a task configuration to a dataset: head module, geometry, targets."""

    def __init__(self, model: AnySat, ds: ValidatedDataset, cfg: TaskConfig, label_side: int | None = None):
        self.model, self.ds, self.cfg = model, ds, cfg
        self.E = model.cfg.E
        self.P = float(cfg.P if cfg.P is not None else ds.spec.P_d[0])
        if not any(abs(self.P - q) < 1e-9 for q in ds.spec.P_d):
            raise HeadConfigError(f"P={self.P} not in P_d={ds.spec.P_d}")
        if cfg.task == "classify":
            self.head = ClassificationHead(self.E, cfg.N, cfg.multilabel)
            self.m_ref = None
            self.geo = None
        else:
            self.m_ref = cfg.m_ref or _default_m_ref(ds, cfg.task)
            if self.m_ref not in ds.patch_modalities():
                raise HeadConfigError(f"reference modality {self.m_ref!r} not available in {ds.name}")
            side = label_side or round(ds.spec.S_d / ds.label_resolution())
            self.geo = seg_geometry(ds, self.P, self.m_ref, side)
            self.head = SegmentationHead(self.E, cfg.N, self.geo.delta, cfg.head_kind)

    @property
    def is_seg(self) -> bool:
        return self.geo is not None

    def features(self, params, tile: TileSample) -> Tensor:
        """Backbone output the head reads: tile embedding (E,) or sub-patch features (n_patches, n_sub, 2E)."""
        em, mm = self.model.backbone(params, tile, self.ds, self.P, want_tile_embedding=not self.is_seg)
        if not self.is_seg:
            return mm.tile
        sub = em.subpatch[self.m_ref]
        n_p, n_sub, E = sub.shape
        if self.cfg.naive_semseg:
            sub = Tensor(np.zeros(sub.shape))
        patch = nx.broadcast_to(mm.per_patch.reshape(n_p, 1, E), (n_p, n_sub, E))
        return nx.concat([sub, patch], axis=-1)

    def logits(self, params, feats: Tensor) -> Tensor:
        """Batched: feats (B, ...) -> (B, N) or (B, H_label, W_label, N)."""
        if "head/feat_mean" in params:  # fixed standardisation of frozen features (probing)
            feats = (feats - params["head/feat_mean"]) / params["head/feat_std"]
        out = self.head(params, feats)
        return assemble(out, self.geo, self.cfg.N) if self.is_seg else out

    def target(self, tile: TileSample) -> np.ndarray:
        lab = tile.labels
        if lab is None:
            raise HeadConfigError(f"tile {tile.tile_id} has no labels")
        if self.is_seg:
            if lab.pixel is None or lab.pixel.shape != (self.geo.label_side, self.geo.label_side):
                raise HeadConfigError(f"tile {tile.tile_id}: label grid incompatible with {self.geo.label_side}^2")
            return np.asarray(lab.pixel, dtype=np.int64)
        if self.cfg.multilabel:
            y = np.zeros(self.cfg.N)
            y[list(lab.classes_present)] = 1.0
            return y
        return np.int64(lab.dominant)

    def loss(self, logits: Tensor, targets: np.ndarray) -> Tensor:
        if self.cfg.task == "classify" and self.cfg.multilabel:
            return binary_cross_entropy(logits, targets)
        return cross_entropy(logits, targets)

    def predict(self, logits: np.ndarray) -> np.ndarray:
        if self.cfg.task == "classify" and self.cfg.multilabel:
            return 1.0 / (1.0 + np.exp(-logits))
        return np.argmax(logits, axis=-1)

    def metric_task(self) -> str:
        return "multilabel" if (self.cfg.task == "classify" and self.cfg.multilabel) else "multiclass"


def split_ids(n: int, test_fraction: float, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic train / held-out split of tile ids."""
    perm = np.random.default_rng([seed, 7919]).permutation(n)
    n_test = max(1, int(round(test_fraction * n)))
    if n_test >= n:
        raise HeadConfigError(f"cannot hold out {n_test} of {n} tiles")
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


# ---------------------------------------------------------------- adaptation


@dataclass
class AdaptResult:
    params: ParamTree
    task: HeadTask
    history: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    test_metrics: dict | None = None


def downstream_params(model: AnySat, backbone: dict[str, np.ndarray] | None, task: HeadTask, mode: str, rng) -> ParamTree:
    """Backbone (random for scratch, given otherwise) plus a fresh head; frozen backbone when probing."""
    if mode == "scratch" or backbone is None:
        fresh = model.init(rng).subtree(*BACKBONE)
        arrays = fresh.arrays()
    else:
        arrays = {k: v for k, v in backbone.items() if k.split("/", 1)[0] in BACKBONE}
    tree = ParamTree.from_arrays(arrays, trainable=(mode != "probe"))
    model.check_tree(tree, prefixes=BACKBONE)
    for k, v in task.head.init(rng).items():
        tree.add(k, v)
    return tree


def _batches(ids: np.ndarray, size: int, rng) -> list[np.ndarray]:
    order = rng.permutation(ids)
    return [order[i : i + size] for i in range(0, len(order), size)]


def adapt(
    model: AnySat,
    dataset,
    cfg: TaskConfig,
    backbone: dict[str, np.ndarray] | None = None,
    pretrained: bool = True,
    train_ids: Sequence[int] | None = None,
    test_ids: Sequence[int] | None = None,
) -> AdaptResult:
    """Train a head (and, unless probing, the backbone) on a labelled dataset."""
    info = dataset.info
    first = dataset[0]
    label_side = first.labels.pixel.shape[0] if (cfg.task != "classify" and first.labels and first.labels.pixel is not None) else None
    task = HeadTask(model, info, cfg, label_side)
    rng = np.random.default_rng([cfg.seed, 17])
    params = downstream_params(model, backbone, task, cfg.mode, rng)
    meta = {"task": cfg.to_dict(), "pretrained": bool(pretrained and backbone is not None and cfg.mode != "scratch")}
    if cfg.mode == "probe" and not meta["pretrained"]:
        meta["warning"] = "probe on a backbone that was never pretrained"
    if train_ids is None or test_ids is None:
        train_ids, test_ids = split_ids(len(dataset), cfg.test_fraction, cfg.seed)
    train_ids = np.asarray(train_ids)
    meta["train_ids"] = [int(i) for i in train_ids]
    meta["test_ids"] = [int(i) for i in test_ids]
    trainable = params.parameters()
    steps_per_epoch = math.ceil(len(train_ids) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    kind = cfg.schedule_kind
    if kind == "reduce-on-plateau":
        sched = make_schedule(kind, cfg.lr, patience=cfg.plateau_patience, factor=cfg.plateau_factor)
    elif kind == "warmup-cosine":
        sched = make_schedule(kind, cfg.lr, total, min_lr=min(1e-6, cfg.lr))
    else:
        sched = make_schedule(kind, cfg.lr)
    opt = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)

    cache: dict[int, np.ndarray] = {}
    if cfg.mode == "probe":
        with nx.no_grad():
            for i in list(train_ids) + list(test_ids):
                cache[int(i)] = task.features(params, dataset[int(i)]).data
        flat = np.concatenate([cache[int(i)].reshape(-1, cache[int(i)].shape[-1]) for i in train_ids])
        params.add("head/feat_mean", Tensor(flat.mean(axis=0)))
        params.add("head/feat_std", Tensor(flat.std(axis=0) + 1e-6))

    def batch_features(ids) -> Tensor:
        if cfg.mode == "probe":
            return Tensor(np.stack([cache[int(i)] for i in ids]))
        return nx.stack([task.features(params, dataset[int(i)]) for i in ids], axis=0)

    history = []
    step = 0
    lr = cfg.lr
    for epoch in range(cfg.epochs):
        losses = []
        for ids in _batches(train_ids, cfg.batch_size, rng):
            params.zero_grad()
            logits = task.logits(params, batch_features(ids))
            loss = task.loss(logits, np.stack([task.target(dataset[int(i)]) for i in ids]))
            if not math.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite loss in epoch {epoch}")
            nx.backward(loss, trainable)
            if not isinstance(sched, ReduceOnPlateau):
                lr = sched.lr_at(step)
            nx.adamw_step(trainable, opt, lr)
            losses.append(loss.item())
            step += 1
        epoch_loss = float(np.mean(losses))
        if isinstance(sched, ReduceOnPlateau):
            lr = sched.lr_at(epoch, epoch_loss)
        history.append({"epoch": epoch, "train_loss": epoch_loss, "lr": lr})
        log.info("epoch %d loss %.4f lr %.2e", epoch, epoch_loss, lr)

    result = AdaptResult(params, task, history, meta)
    result.test_metrics = evaluate(task, params, dataset, test_ids, features=cache if cache else None)["metrics"]
    return result


def predict_tiles(task: HeadTask, params, dataset, ids, features: dict | None = None) -> dict[int, np.ndarray]:
    out = {}
    with nx.no_grad():
        for i in ids:
            i = int(i)
            f = features[i] if features is not None and i in features else task.features(params, dataset[i]).data
            out[i] = task.predict(task.logits(params, Tensor(f[None])).data[0])
    return out


def evaluate(task: HeadTask, params, dataset, ids, features: dict | None = None) -> dict:
    """Predictions and metrics on the given tiles."""
    ids = [int(i) for i in ids]
    preds = predict_tiles(task, params, dataset, ids, features)
    P = np.stack([preds[i] for i in ids])
    Y = np.stack([task.target(dataset[i]) for i in ids])
    return {"predictions": preds, "metrics": compute_metrics(P, Y, task.metric_task(), task.cfg.N)}
