"""Optimization on top of the autodiff graph: Adam, the hinge/MSE losses,
crop-and-flip augmentation, per-epoch quantizer recalibration, and the staged
schedules (BN then BSN for the classifier; the three-phase codec protocol).

Forward passes run the hard quantizers; their straight-through backward rules
are wired inside the tensor module, so a plain ``loss.backward()`` yields the
surrogate gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import to_unit_float
from .layers import BatchNormLayer
from .models import Net, Purenet
from .tensor import Tensor

LOSSES = ("squared_hinge", "mse")


class TrainingDiverged(RuntimeError):
    """Loss left the reals; carries the metric records gathered so far."""

    def __init__(self, message: str, records: list[dict]):
        super().__init__(message)
        self.records = records


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 50
    epochs_stage1: int = 100
    epochs_stage2: int = 120
    lr_init: float = 1e-3
    lr_decay: float = 0.8
    decay_period: int = 10
    loss: str = "squared_hinge"
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.lr_init <= 0:
            raise ValueError("lr_init must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch statistics)")
        if self.decay_period < 1:
            raise ValueError("decay_period must be at least 1")


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    """Stepwise exponential decay: one decay factor per decay_period epochs."""
    return cfg.lr_init * cfg.lr_decay ** (epoch // cfg.decay_period)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: list[Tensor]) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState, lr: float):
    """Bias-corrected Adam update, in place."""
    if len(params) != len(state.m):
        raise ValueError("optimizer state does not match parameter list")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**state.t)
        vhat = v / (1 - b2**state.t)
        p.data -= lr * mhat / (np.sqrt(vhat) + state.eps)


def one_vs_rest(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Integer labels -> a (N, num_classes) matrix of -1/+1 targets."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError("label outside [0, num_classes)")
    out = -np.ones((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def squared_hinge_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise ValueError(f"target shape {targets.shape} != logits shape {logits.shape}")
    if not np.all(np.abs(targets) == 1.0):
        raise ValueError("squared hinge targets must be -1 or +1")
    return ((1.0 - logits * targets).relu() ** 2).mean()


def mse_loss(pred: Tensor, target) -> Tensor:
    tdata = target.data if isinstance(target, Tensor) else np.asarray(target)
    if tdata.shape != pred.shape:
        raise ValueError(f"target shape {tdata.shape} != prediction shape {pred.shape}")
    diff = pred - (target if isinstance(target, Tensor) else Tensor(tdata))
    return (diff * diff).mean()


def augment(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """4-pixel zero padding, random 32x32 crop, random horizontal flip."""
    n, c, h, w = images.shape
    if (h, w) != (32, 32):
        raise ValueError("augmentation is defined for 32x32 inputs")
    padded = np.zeros((n, c, 40, 40), dtype=images.dtype)
    padded[:, :, 4:36, 4:36] = images
    offsets = rng.integers(0, 9, size=(n, 2))
    flips = rng.random(n) < 0.5
    out = np.empty_like(images)
    for k in range(n):
        r, col = offsets[k]
        crop = padded[k, :, r : r + 32, col : col + 32]
        out[k] = crop[:, :, ::-1] if flips[k] else crop
    return out


def calibration_log(model: Net) -> dict[str, dict[str, float]]:
    out = {}
    for name, layer in model.quantized_layers():
        if layer.spec is not None:
            out[name] = {"delta": layer.spec.delta, "tau": layer.spec.tau}
    return out


def evaluate_accuracy(model: Net, images: np.ndarray, labels: np.ndarray, batch: int = 256) -> float:
    hits = 0
    xf = to_unit_float(images)
    for k in range(0, len(xf), batch):
        logits = model.forward(Tensor(xf[k : k + batch]), mode="infer").data
        hits += int(np.sum(np.argmax(logits, axis=1) == labels[k : k + batch]))
    return hits / len(xf)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for k in range(0, n, batch_size):
        idx = order[k : k + batch_size]
        if idx.size >= 2:  # batch statistics need two samples
            yield idx


def train_classifier(model: Net, data, cfg: TrainConfig) -> list[dict]:
    """Two-stage protocol: stage 1 under BN, then BSN conversion and a
    fine-tuning stage 2. Quantizer steps are re-estimated after every epoch
    and stay fixed within one."""
    images, labels = data
    if len(images) == 0:
        raise ValueError("empty dataset")
    xf = to_unit_float(images)
    targets = one_vs_rest(labels, model.config.num_classes)
    rng = np.random.default_rng(cfg.seed)
    records: list[dict] = []

    for stage, epochs in ((1, cfg.epochs_stage1), (2, cfg.epochs_stage2)):
        if stage == 2:
            model.convert_to_bsn()
        opt = AdamState.create(model.params())
        params = model.params()
        for epoch in range(epochs):
            lr = lr_schedule(cfg, epoch)
            losses = []
            for idx in _batches(len(xf), cfg.batch_size, rng):
                xb = xf[idx]
                if cfg.augment:
                    xb = augment(xb, rng)
                for p in params:
                    p.zero_grad()
                loss = squared_hinge_loss(
                    model.forward(Tensor(xb), mode="train"), targets[idx]
                )
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingDiverged(
                        f"loss is not finite at stage {stage} epoch {epoch}", records
                    )
                loss.backward()
                adam_step(params, [p.grad for p in params], opt, lr)
                losses.append(value)
            model.recalibrate()
            records.append(
                {
                    "stage": stage,
                    "epoch": epoch,
                    "loss": float(np.mean(losses)),
                    "accuracy": evaluate_accuracy(model, images, labels),
                    "lr": lr,
                    "calibration": calibration_log(model),
                }
            )
    return records


CODEC_STAGES = ("A", "B", "C")


def _check_stage_order(stages) -> tuple[str, ...]:
    stages = tuple(stages)
    if stages != CODEC_STAGES[: len(stages)] or not stages:
        raise ValueError(f"stages must be a prefix of {CODEC_STAGES}, got {stages}")
    return stages


def _norm_states(module, _seen=None):
    """Every BatchNormState reachable from ``module`` by attribute walking."""
    seen = _seen if _seen is not None else set()
    if id(module) in seen:
        return []
    seen.add(id(module))
    if isinstance(module, BatchNormLayer):
        return [module.state] if module.bsn is None else []
    out = []
    if isinstance(module, (list, tuple)):
        for item in module:
            out.extend(_norm_states(item, seen))
    elif hasattr(module, "__dict__"):
        for item in vars(module).values():
            out.extend(_norm_states(item, seen))
    return out


def refresh_norm_stats(decoder: Purenet, codes: Tensor, rows: int = 1,
                       cols: int = 1) -> None:
    """Pin the decoder's moving normalization statistics to a calibration
    batch: one train-mode pass with the momentum zeroed, so infer mode
    reproduces train-mode behaviour on data like the batch.

    Moving averages with keep-factor 0.99 trail far behind the weights over
    the few hundred steps of a short run; without this the decoder can lose
    several dB between its training loss and its deployed reconstruction.
    """
    states = _norm_states(decoder)
    saved = [st.momentum for st in states]
    for st in states:
        st.momentum = 0.0
    try:
        decoder.forward(codes, rows, cols, mode="train")
    finally:
        for st, momentum in zip(states, saved):
            st.momentum = momentum


def train_codec(
    encoder: Net,
    decoder: Purenet,
    patch_images: np.ndarray,
    frames: np.ndarray | None,
    cfg: TrainConfig,
    stages=("A",),
    stage_b_epochs: int = 30,
    stage_c_epochs: int = 30,
) -> list[dict]:
    """Three-phase codec protocol.

    Stage A trains the encoder jointly with the patch-independent decoder on
    patches (BN epochs, then BSN conversion and fine-tuning). Stage B freezes
    the encoder and trains the aggregating decoder on full frames, batch 1,
    decaying 0.95x per epoch past the fifth. Stage C freezes the upsampler
    and fine-tunes refinement on frame pairs, decaying past the tenth.
    Every trained decoder ends with a normalization statistics refresh so its
    infer-mode reconstructions match what the training loss measured.
    """
    stages = _check_stage_order(stages)
    if ("B" in stages or "C" in stages) and frames is None:
        raise ValueError("stages B and C need full frames")
    rng = np.random.default_rng(cfg.seed)
    records: list[dict] = []

    def step(params, opt, loss, lr, tag):
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(f"loss is not finite in {tag}", records)
        loss.backward()
        adam_step(params, [p.grad for p in params], opt, lr)
        return value

    if "A" in stages:
        patches = to_unit_float(patch_images)
        for phase, epochs in (("bn", cfg.epochs_stage1), ("bsn", cfg.epochs_stage2)):
            if phase == "bsn":
                encoder.convert_to_bsn()
            params = encoder.params() + decoder.params()
            opt = AdamState.create(params)
            for epoch in range(epochs):
                lr = lr_schedule(cfg, epoch)
                losses = []
                for idx in _batches(len(patches), cfg.batch_size, rng):
                    xb = Tensor(patches[idx])
                    for p in params:
                        p.zero_grad()
                    codes = encoder.encode(xb, mode="train")
                    recon = decoder.forward(codes, rows=1, cols=1, mode="train")
                    losses.append(step(params, opt, mse_loss(recon, xb), lr,
                                       f"stage A/{phase}"))
                encoder.recalibrate()
                records.append(
                    {
                        "stage": "A",
                        "phase": phase,
                        "epoch": epoch,
                        "loss": float(np.mean(losses)),
                        "lr": lr,
                        "calibration": calibration_log(encoder),
                    }
                )

    if "B" in stages or "C" in stages:
        from .codec import extract_patches

        full = decoder.as_variant("purenet")
        snapshot = [l.w.data.copy() for _, l in encoder.quantized_layers()]

        def frame_codes(batch):
            # the encoder is frozen past stage A: detach its codes
            grids = [extract_patches(img, full.cfg.patch) for img in batch]
            stacked = np.concatenate([g.patches for g in grids])
            codes = encoder.encode(Tensor(to_unit_float(stacked)), mode="infer")
            return Tensor(codes.data), grids[0].rows, grids[0].cols

        for stage, epochs, freeze_pu, batch, warm in (
            ("B", stage_b_epochs, False, 1, 5),
            ("C", stage_c_epochs, True, 2, 10),
        ):
            if stage not in stages:
                continue
            params = full.refine.params() if freeze_pu else full.params()
            opt = AdamState.create(params)
            lr = cfg.lr_init
            for epoch in range(1, epochs + 1):
                if epoch > warm:
                    lr *= 0.95
                order = rng.permutation(len(frames))
                losses = []
                for k in range(0, len(order) - (batch - 1), batch):
                    idx = order[k : k + batch]
                    codes, rows, cols = frame_codes(frames[idx])
                    for p in params:
                        p.zero_grad()
                    recon = full.forward(codes, rows, cols, mode="train")
                    target = Tensor(to_unit_float(frames[idx]))
                    losses.append(step(params, opt, mse_loss(recon, target), lr,
                                       f"stage {stage}"))
                records.append({"stage": stage, "epoch": epoch,
                                "loss": float(np.mean(losses)), "lr": lr})
        for before, (_, layer) in zip(snapshot, encoder.quantized_layers()):
            if not np.array_equal(before, layer.w.data):
                raise AssertionError("frozen encoder drifted during stages B/C")

    calib = encoder.encode(Tensor(patches[:2048]), mode="infer")
    refresh_norm_stats(decoder, Tensor(calib.data))
    if "B" in stages or "C" in stages:
        codes, rows, cols = frame_codes(frames[:16])
        refresh_norm_stats(full, codes, rows, cols)
    return records
