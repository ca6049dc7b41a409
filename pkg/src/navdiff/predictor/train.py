"""Two-stage predictor training with JSON-lines logging and versioned checkpoints."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch.optim.swa_utils import AveragedModel, get_ema_multi_avg_fn

from navdiff.harness.persist import config_hash, load_checkpoint, save_checkpoint
from navdiff.oracle import TrainingTuple
from navdiff.predictor.model import Predictor, PredictorConfig, collate, diffusion_loss, heldout_loss

log = logging.getLogger(__name__)


@dataclass
class PredictorTrainConfig:
    stage1_steps: int = 2000
    stage2_steps: int = 2000
    batch_size: int = 32
    lr: float = 2e-4
    grad_clip: float = 1.0
    seed: int = 0
    heldout_size: int = 256
    # Decay of the weight average used for evaluation and checkpoints; 0 disables it.
    ema_decay: float = 0.999


class TrainingError(ValueError):
    pass


class _FrameTable:
    """Deduplicated frame storage; tuples share frame arrays by identity."""

    def __init__(self, tuples: Sequence[TrainingTuple]):
        index: dict[int, int] = {}
        frames = []

        def ref(arr) -> int:
            key = id(arr)
            if key not in index:
                index[key] = len(frames)
                frames.append(np.asarray(arr, dtype=np.float32))
            return index[key]

        self.t = np.array([ref(tp.x_t) for tp in tuples])
        self.tk = np.array([ref(tp.x_tk) for tp in tuples])
        self.g = np.array([ref(tp.x_g) for tp in tuples])
        self.h = np.array([[ref(f) for f in tp.x_h] for tp in tuples])
        self.y = torch.as_tensor([list(tp.y) for tp in tuples], dtype=torch.long)
        self.frames = torch.from_numpy(np.stack(frames)).permute(0, 3, 1, 2).contiguous()

    def __len__(self) -> int:
        return len(self.t)

    def batch(self, idx: np.ndarray) -> dict:
        f = self.frames
        return {
            "x_t": f[self.t[idx]],
            "x_tk": f[self.tk[idx]],
            "x_g": f[self.g[idx]],
            "x_h": f[self.h[idx].reshape(-1)].view(len(idx), self.h.shape[1], *f.shape[1:]),
            "y": self.y[idx],
        }


def _validate(tuples: Sequence[TrainingTuple], resolution: int) -> None:
    if not tuples:
        raise TrainingError("empty dataset")
    for tp in tuples:
        if np.shape(tp.x_t)[:2] != (resolution, resolution):
            raise TrainingError(f"tuple resolution {np.shape(tp.x_t)[:2]} does not match model resolution {resolution}")


def train_predictor(
    train: Sequence[TrainingTuple],
    heldout: Sequence[TrainingTuple],
    model_config: PredictorConfig,
    config: PredictorTrainConfig,
    out_dir: str | Path | None = None,
    callback: Callable[[int, int, Predictor], dict | None] | None = None,
) -> tuple[Predictor, list[dict]]:
    """Stage one trains the denoiser with learned constant conditioning; stage
    two switches on the full conditioning chain and trains everything.

    Returns the model and the log records (also written to ``train_log.jsonl``).
    One epoch is one pass over the training tuples; held-out loss is logged
    after every epoch and at each stage boundary. ``callback(step, stage, model)``
    runs at the same points and may return extra fields for the log. With
    ``ema_decay > 0`` held-out loss, callbacks and the returned weights use the
    running weight average of the current stage.
    """
    _validate(train, model_config.resolution)
    if heldout:
        _validate(heldout, model_config.resolution)
    torch.manual_seed(config.seed)
    model = Predictor(model_config)
    table = _FrameTable(train)
    held = list(heldout)[: config.heldout_size]
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed + 1)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.jsonl"
        log_path.write_text("")
    records: list[dict] = []
    meta = {"model": model_config.to_dict(), "train": asdict(config)}
    chash = config_hash(meta)

    def emit(rec: dict) -> None:
        records.append(rec)
        if out is not None:
            with open(out / "train_log.jsonl", "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    steps_per_epoch = max(1, len(table) // config.batch_size)
    step = 0
    for stage, n_steps in ((1, config.stage1_steps), (2, config.stage2_steps)):
        if stage == 1:
            model.conditioned = False
        else:
            model.begin_conditioned_stage()
        opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=0.0)
        ema = None
        if config.ema_decay > 0:
            ema = AveragedModel(model, multi_avg_fn=get_ema_multi_avg_fn(config.ema_decay), use_buffers=True)
        view = ema.module if ema is not None else model
        if held:
            emit({"step": step, "stage": stage, "split": "heldout", "loss": heldout_loss(model, held)})
        perm = rng.permutation(len(table))
        cursor = 0
        for i in range(n_steps):
            if cursor + config.batch_size > len(perm):
                perm, cursor = rng.permutation(len(table)), 0
            idx = perm[cursor : cursor + config.batch_size]
            cursor += config.batch_size
            loss = diffusion_loss(model, table.batch(idx), model.schedule, gen)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            if ema is not None:
                ema.update_parameters(model)
            step += 1
            emit({"step": step, "stage": stage, "split": "train", "loss": float(loss.detach())})
            if (i + 1) % steps_per_epoch == 0 or i + 1 == n_steps:
                if held:
                    emit({"step": step, "stage": stage, "split": "heldout", "loss": heldout_loss(view, held)})
                if callback is not None:
                    extra = callback(step, stage, view)
                    if extra:
                        emit({"step": step, "stage": stage, "split": "callback", **extra})
        if ema is not None:
            model.load_state_dict(ema.module.state_dict())
        if out is not None:
            save_predictor(out / f"predictor_stage{stage}", model, step, chash)
    return model, records


def save_predictor(path: str | Path, model: Predictor, step: int, chash: str | None = None) -> Path:
    cfg = model.config.to_dict()
    meta = {
        "kind": "predictor",
        "config": cfg,
        "config_hash": chash or config_hash(cfg),
        "step": step,
        "schedule": model.schedule.to_dict(),
        "conditioned": model.conditioned,
    }
    return save_checkpoint(path, model.state_dict(), meta)


def load_predictor(path: str | Path) -> Predictor:
    state, meta = load_checkpoint(path)
    if meta.get("kind") != "predictor":
        raise ValueError(f"{path} is not a predictor checkpoint")
    model = Predictor(PredictorConfig.from_dict(meta["config"]))
    model.load_state_dict(state)
    model.conditioned = bool(meta.get("conditioned", True))
    model.eval()
    return model
