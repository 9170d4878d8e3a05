"""Deterministic training loop with distilled and supervised modes.

The loop is single-threaded and a pure function of (dataset, config):
parameter init, shuffle order, and batch assembly all derive from
``config.seed``, so identical seeds give bit-identical histories and
checkpoints.

Per step each sample is cropped around its prompt on the fly (the crop
IS the prompt encoding), the batch is run in one forward pass, the loss
and its gradient are computed per sample and averaged, and one backward
pass accumulates parameter gradients for AdamW.

Modes:
* distilled: blended loss against teacher logits + ground truth;
  every sample must carry teacher logits.
* supervised: 0.5*balanced BCE + 0.5*Dice only; teacher files are
  never opened in this mode.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .fileio import load_pgm, load_ppm, load_tensor, save_checkpoint
from .losses import LambdaPolicy, supervised_loss, total_loss
from .metrics import binarize, iou, mask_score, miou
from .model import Model
from .optim import AdamWState, adamw_step, init_params
from .prompt import PromptPoint, crop_centered, uncrop_mask
from .tensor import Tensor, stable_sigmoid

MODES = ("distilled", "supervised")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    batch_size: int = 8
    epochs: int = 5
    seed: int = 0
    mode: str = "distilled"
    lambda_policy: LambdaPolicy = field(default_factory=LambdaPolicy)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError(f"betas must lie in (0,1), got ({self.beta1}, {self.beta2})")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError(f"bad eps={self.eps} or weight_decay={self.weight_decay}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError(f"batch_size and epochs must be >= 1, got "
                              f"{self.batch_size}/{self.epochs}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class Sample:
    """One prompt instance: full-frame image/mask plus the click."""

    image: Tensor
    mask: Tensor
    point: PromptPoint
    teacher: Tensor | None
    name: str


def _read_prompt(path: str) -> PromptPoint:
    with open(path, "r", encoding="utf-8") as f:
        parts = f.read().split()
    if len(parts) != 2:
        raise DataError(f"{path}: expected 'x y', got {parts!r}")
    try:
        x, y = int(parts[0]), int(parts[1])
    except ValueError:
        raise DataError(f"{path}: prompt coordinates must be ints, got {parts!r}") from None
    return PromptPoint(y=y, x=x)


def load_sample(sample_dir: str, with_teacher: bool) -> Sample:
    image = load_ppm(os.path.join(sample_dir, "image.ppm"))
    mask = load_pgm(os.path.join(sample_dir, "mask.pgm"))
    if image.shape[2:] != mask.shape[2:]:
        raise DataError(f"{sample_dir}: mask size {mask.shape[2:]} does not match "
                        f"image size {image.shape[2:]}")
    point = _read_prompt(os.path.join(sample_dir, "prompt.txt"))
    teacher = None
    if with_teacher:
        tp = os.path.join(sample_dir, "teacher.ptsr")
        if not os.path.exists(tp):
            raise DataError(f"distilled mode needs teacher logits, none in {sample_dir}")
        teacher = load_tensor(tp)
    return Sample(image, mask, point, teacher, os.path.basename(sample_dir))


def load_dataset(root: str, with_teacher: bool) -> list[Sample]:
    """Load every sample_* directory under root, sorted by name."""
    if not os.path.isdir(root):
        raise DataError(f"dataset root {root!r} is not a directory")
    dirs = sorted(
        os.path.join(root, d) for d in os.listdir(root)
        if os.path.isfile(os.path.join(root, d, "image.ppm"))
    )
    if not dirs:
        raise DataError(f"no sample directories under {root!r}")
    return [load_sample(d, with_teacher) for d in dirs]


@dataclass
class _Crops:
    """Prompt-centered crops precomputed once per sample."""

    x: np.ndarray      # [3,S,S] float32 image crop
    m: np.ndarray      # [1,S,S] float32 mask crop
    t: np.ndarray | None  # [1,S,S] float32 teacher logits


def _precrop(samples: list[Sample], side: int, need_teacher: bool) -> list[_Crops]:
    out = []
    for s in samples:
        xc, _ = crop_centered(s.image, s.point, side)
        mc, _ = crop_centered(s.mask, s.point, side)
        t = None
        if need_teacher:
            if s.teacher is None:
                raise DataError(f"distilled mode needs teacher logits, none in {s.name}")
            if s.teacher.shape != (1, 1, side, side):
                raise DataError(f"{s.name}: teacher shape {s.teacher.shape}, "
                                f"expected (1,1,{side},{side})")
            t = s.teacher.data[0]
        out.append(_Crops(xc.data[0], mc.data[0], t))
    return out


def evaluate(model: Model, samples: list[Sample]) -> tuple[float, list[float], list]:
    """Original-frame mIoU plus (score, iou) pairs for mAP.

    Each prompt is cropped, predicted, binarized at 0.5, mapped back to
    the original frame, and scored against the full ground-truth mask.
    """
    side = model.config.input_size
    ious, preds = [], []
    for s in samples:
        xc, spec = crop_centered(s.image, s.point, side)
        logits = model.forward(xc)
        prob = stable_sigmoid(logits.data[0, 0])
        pred_crop = binarize(logits)
        full = uncrop_mask(pred_crop, spec)
        v = iou(full, s.mask)
        ious.append(v)
        preds.append((mask_score(prob, pred_crop.data[0, 0]), v))
    return miou(ious), ious, preds


def _batch_loss(model, crops, idxs, config):
    """Forward/backward one batch; returns its mean loss."""
    xb = np.stack([crops[i].x for i in idxs]).astype(np.float32)
    tape: dict = {}
    logits = model.forward(Tensor(xb), tape)
    b = len(idxs)
    grad = np.zeros_like(logits.data)
    loss_sum = 0.0
    for j, i in enumerate(idxs):
        sl = Tensor(logits.data[j : j + 1])
        gt = Tensor(crops[i].m[None])
        if config.mode == "supervised":
            loss, g = supervised_loss(sl, gt)
        else:
            loss, g, _ = total_loss(sl, Tensor(crops[i].t[None]), gt, config.lambda_policy)
        loss_sum += loss
        grad[j] = g.data[0] / b
    if not np.isfinite(loss_sum):
        raise NumericError(f"non-finite training loss {loss_sum}")
    model.zero_grad()
    model.backward(Tensor(grad), tape)
    return loss_sum / b


def train(model: Model, train_samples: list[Sample], config: TrainConfig,
          val_samples: list[Sample] = (), ckpt_path: str | None = None,
          history_path: str | None = None, log=None) -> list:
    """Run the loop; returns history rows (epoch, train_loss, val_miou).

    Parameters are (re)initialized from config.seed, so the result is a
    pure function of (datasets, config).  The checkpoint written to
    ckpt_path is the best-validation epoch (last epoch when there is no
    validation set).  History rows are also emitted as CSV lines
    "epoch,train_loss,val_miou" through ``log`` and to history_path.
    """
    if not train_samples:
        raise DataError("empty training set")
    side = model.config.input_size
    need_teacher = config.mode == "distilled"
    crops = _precrop(train_samples, side, need_teacher)

    init_params(model, config.seed)
    state = AdamWState(model.params())
    rng = np.random.default_rng(config.seed)

    history = []
    lines = []
    best = -1.0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(crops))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idxs = order[start : start + config.batch_size]
            losses.append(_batch_loss(model, crops, idxs, config))
            adamw_step(model.params(), state, config)
        train_loss = float(np.mean(losses))
        if val_samples:
            val_miou = evaluate(model, list(val_samples))[0]
            if ckpt_path and val_miou > best:
                best = val_miou
                save_checkpoint(model, ckpt_path)
        else:
            val_miou = float("nan")
            if ckpt_path:
                save_checkpoint(model, ckpt_path)
        history.append((epoch, train_loss, val_miou))
        line = f"{epoch},{train_loss!r},{val_miou!r}"
        lines.append(line)
        if log:
            log(line)
    if history_path:
        with open(history_path, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")
    return history
