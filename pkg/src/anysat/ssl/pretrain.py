"""Multi-dataset JEPA + contrastive pretraining loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import numerics as nx
from ..data.sampler import sample_step
from ..geometry import TileGeometry
from ..model import AnySat
from ..nn import ParamTree
from ..numerics import OptimizerState, ReduceOnPlateau, make_schedule
from .jepa import ema_update, tile_loss
from .masking import MaskConfig, sample_mask_plan

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, meta: dict):
        super().__init__(f"non-finite loss at step {step}: {meta}")
        self.step, self.meta = step, meta


@dataclass(frozen=True)
class PretrainConfig:
    tau: float = 0.1
    ema_decay: float = 0.996
    lambda_con: float = 1.0
    lr: float = 5e-5
    weight_decay: float = 0.01
    schedule: str = "reduce-on-plateau"
    plateau_patience: int = 10
    plateau_factor: float = 0.5
    eval_every: int = 10  # steps averaged into one plateau evaluation
    warmup_frac: float = 0.05
    min_lr: float = 1e-6
    mask: MaskConfig = field(default_factory=MaskConfig)
    no_contrastive: bool = False
    random_drop: bool = False
    max_grad_norm: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0 < self.ema_decay <= 1:
            raise ValueError("ema_decay must lie in (0, 1]")
        if self.lambda_con < 0 or self.eval_every < 1:
            raise ValueError("lambda_con must be >= 0 and eval_every >= 1")

    @property
    def effective_lambda(self) -> float:
        return 0.0 if self.no_contrastive else self.lambda_con

    @property
    def effective_mask(self) -> MaskConfig:
        return replace(self.mask, random_drop=True) if self.random_drop else self.mask


@dataclass
class LossBreakdown:
    step: int
    dataset: str
    P: float
    l_jepa: float
    l_con: float | None
    total: float
    lr: float
    n_dropped: int
    n_masked: int
    config_hash: str = ""
    dropped: list[list[int]] = field(default_factory=list)  # per tile

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class PretrainState:
    student: ParamTree
    teacher: ParamTree
    opt: OptimizerState
    schedule: object
    step: int
    rng: np.random.Generator
    recent: list[float] = field(default_factory=list)

    def meta(self) -> dict:
        sched = self.schedule.state_dict() if isinstance(self.schedule, ReduceOnPlateau) else {}
        return {
            "step": self.step,
            "opt_step": self.opt.step,
            "rng": self.rng.bit_generator.state,
            "schedule": sched,
            "recent": list(self.recent),
        }


def build_schedule(cfg: PretrainConfig, total_steps: int):
    if cfg.schedule == "reduce-on-plateau":
        return make_schedule(cfg.schedule, cfg.lr, patience=cfg.plateau_patience, factor=cfg.plateau_factor)
    if cfg.schedule == "warmup-cosine":
        warm = max(1, round(cfg.warmup_frac * total_steps))
        return make_schedule(cfg.schedule, cfg.lr, total_steps, warmup_steps=warm, min_lr=min(cfg.min_lr, cfg.lr))
    return make_schedule(cfg.schedule, cfg.lr)


def init_state(model: AnySat, cfg: PretrainConfig, total_steps: int = 1) -> PretrainState:
    rng = np.random.default_rng(cfg.seed)
    student = model.init(rng)
    opt = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    return PretrainState(student, model.teacher_from(student), opt, build_schedule(cfg, total_steps), 0, rng)


def restore_state(model: AnySat, cfg: PretrainConfig, arrays: dict, meta: dict, total_steps: int = 1) -> PretrainState:
    """Rebuild a state from checkpoint arrays (``student/...``, ``teacher/...``, ``opt/...``) and metadata."""
    student = ParamTree.from_arrays({k[8:]: v for k, v in arrays.items() if k.startswith("student/")})
    teacher = ParamTree.from_arrays({k[8:]: v for k, v in arrays.items() if k.startswith("teacher/")}, trainable=False)
    model.check_tree(student)
    model.check_tree(teacher, prefixes=("encoder", "combiner"))
    opt = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay, step=int(meta.get("opt_step", 0)))
    for k, v in arrays.items():
        if k.startswith("opt/m/"):
            opt.exp_avg[k[6:]] = np.array(v, dtype=np.float64)
        elif k.startswith("opt/v/"):
            opt.exp_avg_sq[k[6:]] = np.array(v, dtype=np.float64)
    sched = build_schedule(cfg, total_steps)
    if isinstance(sched, ReduceOnPlateau) and meta.get("schedule"):
        sched.load_state_dict(meta["schedule"])
    rng = np.random.default_rng()
    if "rng" in meta:
        rng.bit_generator.state = meta["rng"]
    return PretrainState(student, teacher, opt, sched, int(meta.get("step", 0)), rng, list(meta.get("recent", [])))


def state_arrays(state: PretrainState) -> dict[str, np.ndarray]:
    out = {f"student/{k}": v.data for k, v in state.student.items()}
    out.update({f"teacher/{k}": v.data for k, v in state.teacher.items()})
    out.update({f"opt/m/{k}": v for k, v in state.opt.exp_avg.items()})
    out.update({f"opt/v/{k}": v for k, v in state.opt.exp_avg_sq.items()})
    return out


def _current_lr(state: PretrainState, cfg: PretrainConfig) -> float:
    sched = state.schedule
    if isinstance(sched, ReduceOnPlateau):
        if state.step > 0 and state.step % cfg.eval_every == 0 and state.recent:
            lr = sched.lr_at(state.step, float(np.mean(state.recent)))
            state.recent.clear()
            return lr
        return sched.current_lr
    return sched.lr_at(state.step)


def _clip(params, max_norm: float) -> None:
    norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            p.grad = p.grad * scale


def train_step(model: AnySat, datasets: Sequence, state: PretrainState, cfg: PretrainConfig, config_hash: str = "") -> LossBreakdown:
    """One optimisation step: sample, forward every tile, backward, AdamW on the student, EMA on the teacher."""
    draw = sample_step([d.spec for d in datasets], state.rng)
    ds = datasets[draw.dataset_index]
    info = ds.info
    per_axis = TileGeometry(info.spec.S_d, draw.P).per_axis
    params = state.student.parameters()
    state.student.zero_grad()
    lam = cfg.effective_lambda
    mask_cfg = cfg.effective_mask
    B = len(draw.tile_ids)
    sums = {"jepa": 0.0, "con": 0.0, "total": 0.0, "drop": 0, "mask": 0}
    con_seen = False
    dropped = []
    for tid in draw.tile_ids:
        tile = ds[tid]
        T = {m: tile.arrays[m].shape[2] for m in info.spec.modalities}
        plan = sample_mask_plan(per_axis, info.patch_modalities(), T, state.rng, mask_cfg)
        dropped.append(list(plan.dropped))
        tl = tile_loss(model, state.student, state.teacher, tile, info, draw.P, plan, cfg.tau, lam)
        total = tl.total.item()
        if not math.isfinite(total):
            raise NonFiniteLossError(
                state.step, {"dataset": draw.dataset, "P": draw.P, "tile": tid, "l_jepa": tl.l_jepa, "l_con": tl.l_con}
            )
        nx.backward(tl.total, params, grad_scale=1.0 / B)
        sums["jepa"] += tl.l_jepa
        sums["total"] += total
        sums["drop"] += tl.n_dropped
        sums["mask"] += tl.n_masked
        if tl.l_con is not None:
            con_seen = True
            sums["con"] += tl.l_con
    if cfg.max_grad_norm is not None:
        _clip(params, cfg.max_grad_norm)
    lr = _current_lr(state, cfg)
    nx.adamw_step(params, state.opt, lr)
    ema_update(state.teacher, state.student, cfg.ema_decay)
    mean_total = sums["total"] / B
    state.recent.append(mean_total)
    rec = LossBreakdown(
        step=state.step,
        dataset=draw.dataset,
        P=draw.P,
        l_jepa=sums["jepa"] / B,
        l_con=sums["con"] / B if con_seen else None,
        total=mean_total,
        lr=lr,
        n_dropped=sums["drop"],
        n_masked=sums["mask"],
        config_hash=config_hash,
        dropped=dropped,
    )
    state.step += 1
    return rec


def pretrain(
    model: AnySat,
    datasets: Sequence,
    cfg: PretrainConfig,
    steps: int,
    state: PretrainState | None = None,
    trace_path: str | Path | None = None,
    config_hash: str = "",
    callback=None,
) -> tuple[PretrainState, list[LossBreakdown]]:
    """Run ``steps`` more steps from ``state`` (a fresh one if omitted); append to ``trace_path``."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if not datasets:
        raise ValueError("no datasets")
    for d in datasets:
        missing = [m for m in d.spec.modalities if m not in model.registry]
        if missing:
            raise ValueError(f"{d.name}: modalities {missing} unknown to the model")
    if state is None:
        state = init_state(model, cfg, steps)
    trace: list[LossBreakdown] = []
    fh = open(trace_path, "a") if trace_path is not None else None
    try:
        for _ in range(steps):
            rec = train_step(model, datasets, state, cfg, config_hash)
            trace.append(rec)
            if fh is not None:
                fh.write(rec.to_json() + "\n")
                fh.flush()
            if callback is not None:
                callback(rec, state)
            if rec.step % 50 == 0:
                log.info("step %d %s P=%g total=%.4f lr=%.2e", rec.step, rec.dataset, rec.P, rec.total, rec.lr)
    finally:
        if fh is not None:
            fh.close()
    return state, trace
