"""Collaborative one-stage training of the two edge networks.

Each epoch walks the (shuffled, augmented) samples one at a time, builds the
corrected soft targets from the momentum networks' fused predictions, back-
propagates both trainable networks, and applies one optimizer step every
``accumulate_to_batch`` samples. At every epoch boundary the momentum
networks absorb their back-propagated twins by parameter averaging (a plain
copy after the first epoch). Momentum and snapshot networks are never touched
by gradients; the deployable artifact is the momentum non-recurrent network.

Ablation modes swap out the target-construction source (see
``ablation_targets``); ``baseline`` degenerates to ordinary supervised
training of the non-recurrent network on the raw labels.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import Image, Sample
from .ensemble import TrustSchedule, eta_at, fuse, momentum_update, soft_target
from .loss import LossConfig, total_loss_nonrecurrent, total_loss_recurrent
from .models import (
    ModelParams,
    NonRecurrentConfig,
    NonRecurrentEdgeNet,
    RecurrentConfig,
    RecurrentEdgeNet,
    net_from_params,
)
from .models.nonrecurrent import KIND as NONR_KIND
from .models.recurrent import KIND as REC_KIND

ABLATION_MODES = (
    "full",
    "baseline",
    "nims",
    "eadm",
    "eads",
    "mlhs",
    "average",
    "two_stage",
)
# modes whose target source is the previous epoch's raw parameters
_SNAPSHOT_MODES = ("nims", "eads")

CHECKPOINT_FORMAT = "edgecollab-checkpoint-v1"


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    total_epochs: int = 30
    warmup_epochs: int = 4
    peak_lr: float = 1e-3
    optimizer_momentum: float = 0.9
    weight_decay: float = 1e-3
    accumulate_to_batch: int = 16
    lam: float = 1.1
    eta_final: float = 0.8
    seed: int = 0
    ablation_mode: str = "full"
    alpha_convention: str = "paper"
    augment_data: bool = True
    device: str = "cpu"
    recurrent: RecurrentConfig = field(default_factory=RecurrentConfig)
    nonrecurrent: NonRecurrentConfig = field(default_factory=NonRecurrentConfig)

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("warmup_epochs must satisfy 0 <= warmup < total_epochs")
        if self.accumulate_to_batch < 1:
            raise ValueError("accumulate_to_batch must be >= 1")
        if self.ablation_mode not in ABLATION_MODES:
            raise ValueError(
                f"ablation_mode {self.ablation_mode!r} not in {ABLATION_MODES}"
            )

    def loss_config(self) -> LossConfig:
        return LossConfig(lam=self.lam, alpha_convention=self.alpha_convention)

    def schedule(self) -> TrustSchedule:
        return TrustSchedule(self.eta_final, self.total_epochs)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("recurrent"), dict):
            d["recurrent"] = RecurrentConfig(**d["recurrent"])
        if isinstance(d.get("nonrecurrent"), dict):
            nr = dict(d["nonrecurrent"])
            nr["stage_channels"] = tuple(nr["stage_channels"])
            d["nonrecurrent"] = NonRecurrentConfig(**nr)
        return cls(**d)


def trains_recurrent(mode: str) -> bool:
    return mode in ("full", "average", "eads", "mlhs", "two_stage")


def has_momentum(mode: str) -> bool:
    return mode in ("full", "average", "eadm", "mlhs", "two_stage")


@dataclass
class TrainState:
    cfg: TrainConfig
    bp_nets: dict
    optimizers: dict
    momentum_params: dict = field(default_factory=dict)
    momentum_nets: dict = field(default_factory=dict)
    snapshot_params: dict = field(default_factory=dict)
    snapshot_nets: dict = field(default_factory=dict)
    frozen_nets: dict = field(default_factory=dict)  # two_stage phase 2
    epoch: int = 0          # within the current phase
    step: int = 0           # optimizer steps within the current phase
    global_step: int = 0
    phase: int = 0


def lr_at(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """LR for optimizer step ``step``: linear warm-up then linear decay to 0."""
    if step < 0:
        raise ValueError("step must be >= 0")
    warm = cfg.warmup_epochs * steps_per_epoch
    total = cfg.total_epochs * steps_per_epoch
    if warm > 0 and step < warm:
        return cfg.peak_lr * (step + 1) / warm
    return max(0.0, cfg.peak_lr * (total - step) / (total - warm))


# ---------------------------------------------------------------------------
# colour augmentation


def _luma(rgb: np.ndarray) -> np.ndarray:
    return rgb @ np.array([0.299, 0.587, 0.114])


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(int) % 6
    choices = [
        (v, t, p),
        (q, v, p),
        (p, v, t),
        (p, q, v),
        (t, p, v),
        (v, p, q),
    ]
    rgb = np.zeros(hsv.shape, dtype=np.float64)
    for idx, (rr, gg, bb) in enumerate(choices):
        mask = i == idx
        rgb[..., 0][mask] = rr[mask]
        rgb[..., 1][mask] = gg[mask]
        rgb[..., 2][mask] = bb[mask]
    return rgb


GRAYSCALE_PROB = 0.2


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    """Photometric jitter: brightness/contrast/saturation/hue each scaled to
    50%..150% of the original, plus grayscale conversion with probability 0.2.

    Draw order is fixed (brightness, contrast, saturation, hue, grayscale) so
    a given generator state always produces the same sample. Labels are left
    untouched; output pixels are clamped to [0, 1].
    """
    px = sample.image.pixels.astype(np.float64)
    b = rng.uniform(0.5, 1.5)
    c = rng.uniform(0.5, 1.5)
    s = rng.uniform(0.5, 1.5)
    hue = rng.uniform(0.5, 1.5)
    to_gray = rng.random() < GRAYSCALE_PROB

    if b != 1.0:
        px = px * b
    if c != 1.0:
        anchor = _luma(np.clip(px, 0.0, 1.0)).mean()
        px = anchor + c * (px - anchor)
    if s != 1.0:
        gray = _luma(np.clip(px, 0.0, 1.0))[..., None]
        px = gray + s * (px - gray)
    px = np.clip(px, 0.0, 1.0)
    if hue != 1.0:
        hsv = _rgb_to_hsv(px)
        hsv[..., 0] = (hsv[..., 0] * hue) % 1.0
        px = _hsv_to_rgb(hsv)
    if to_gray:
        px = np.repeat(_luma(px)[..., None], 3, axis=-1)
    px = np.clip(px, 0.0, 1.0).astype(np.float32)
    return Sample(Image(px), sample.annotations, sample.gt_binary, sample.identifier)


# ---------------------------------------------------------------------------
# state construction and target building


def _new_net(kind: str, cfg: TrainConfig, seed: int):
    if kind == REC_KIND:
        net = RecurrentEdgeNet(cfg.recurrent)
    else:
        net = NonRecurrentEdgeNet(cfg.nonrecurrent)
    net.init_parameters(seed)
    return net.to(cfg.device)


def init_state(cfg: TrainConfig) -> TrainState:
    keys = [NONR_KIND]
    if trains_recurrent(cfg.ablation_mode):
        keys = [REC_KIND, NONR_KIND]
    if cfg.ablation_mode == "two_stage":
        keys = [REC_KIND]  # phase 1 trains the recurrent pair alone
    bp_nets = {}
    optimizers = {}
    for i, key in enumerate(keys):
        net = _new_net(key, cfg, cfg.seed * 2 + i)
        bp_nets[key] = net
        optimizers[key] = _make_optimizer(net, cfg)
    return TrainState(cfg=cfg, bp_nets=bp_nets, optimizers=optimizers)


def _make_optimizer(net, cfg: TrainConfig):
    return torch.optim.AdamW(
        net.parameters(),
        lr=cfg.peak_lr,
        betas=(cfg.optimizer_momentum, 0.999),
        weight_decay=cfg.weight_decay,
    )


def _params_of(key: str, net) -> ModelParams:
    return ModelParams.from_module(key, asdict(net.config), net)


def _materialize(params: ModelParams, cache: dict, key: str, device: str):
    if key not in cache:
        net = net_from_params(params).to(device)
    else:
        net = cache[key]
        params.load_into(net)
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    cache[key] = net
    return net


@torch.no_grad()
def _predict(net, image) -> np.ndarray:
    return net(image).fused.detach().cpu().numpy().astype(np.float64)


def ablation_targets(state: TrainState, image, y_hard: np.ndarray, eta: float):
    """Per-network soft targets for one sample under the active ablation mode.

    Returns (targets, m_maps): targets maps each trainable network key to its
    soft target array; m_maps carries the intermediate fused predictions for
    logging/tracing. During epoch 0 (and for ``baseline``) the targets are
    the raw labels.
    """
    cfg = state.cfg
    mode = cfg.ablation_mode
    y = y_hard.astype(np.float64)
    keys = list(state.bp_nets.keys())

    hard = {k: y for k in keys}
    if mode == "baseline" or state.epoch == 0:
        return hard, {}

    if mode == "mlhs":
        m_r = _predict(state.momentum_nets[REC_KIND], image)
        m_nonr = _predict(state.momentum_nets[NONR_KIND], image)
        return (
            {
                REC_KIND: soft_target(m_nonr, y, eta),
                NONR_KIND: soft_target(m_r, y, eta),
            },
            {"m_for_recurrent": m_nonr, "m_for_nonrecurrent": m_r},
        )

    if mode == "nims":
        m = _predict(state.snapshot_nets[NONR_KIND], image)
    elif mode == "eadm":
        m = _predict(state.momentum_nets[NONR_KIND], image)
    elif mode == "eads":
        m = fuse(
            _predict(state.snapshot_nets[REC_KIND], image),
            _predict(state.snapshot_nets[NONR_KIND], image),
        )
    elif mode == "average":
        m_r = _predict(state.momentum_nets[REC_KIND], image)
        m_nonr = _predict(state.momentum_nets[NONR_KIND], image)
        m = (m_r + m_nonr) / 2.0
    elif mode == "full":
        m = fuse(
            _predict(state.momentum_nets[REC_KIND], image),
            _predict(state.momentum_nets[NONR_KIND], image),
        )
    elif mode == "two_stage":
        if state.phase == 0:
            m = _predict(state.momentum_nets[REC_KIND], image)
        else:
            m = fuse(
                _predict(state.frozen_nets[REC_KIND], image),
                _predict(state.momentum_nets[NONR_KIND], image),
            )
    else:  # pragma: no cover
        raise ValueError(mode)

    target = soft_target(m, y, eta)
    return {k: target for k in keys}, {"m": m}


def _end_of_epoch(state: TrainState) -> None:
    """Momentum averaging (copy after the first epoch) and snapshot refresh."""
    cfg = state.cfg
    if has_momentum(cfg.ablation_mode):
        for key, net in state.bp_nets.items():
            w_bp = _params_of(key, net)
            if state.epoch == 0 or key not in state.momentum_params:
                state.momentum_params[key] = w_bp
            else:
                state.momentum_params[key] = momentum_update(
                    w_bp, state.momentum_params[key]
                )
            _materialize(
                state.momentum_params[key], state.momentum_nets, key, cfg.device
            )
    if cfg.ablation_mode in _SNAPSHOT_MODES:
        for key, net in state.bp_nets.items():
            state.snapshot_params[key] = _params_of(key, net)
            _materialize(
                state.snapshot_params[key], state.snapshot_nets, key, cfg.device
            )
    state.epoch += 1


class TraceRecorder:
    """Captures per-sample target construction for offline verification."""

    def __init__(self):
        self.records = []

    def add(self, epoch, sample_id, eta, m_maps, targets, y_hard):
        self.records.append(
            {
                "epoch": epoch,
                "sample_id": sample_id,
                "eta": eta,
                "m_maps": {k: v.copy() for k, v in m_maps.items()},
                "targets": {k: np.asarray(v).copy() for k, v in targets.items()},
                "y_hard": np.asarray(y_hard).copy(),
            }
        )


def train_epoch(
    state: TrainState,
    samples,
    cfg: TrainConfig | None = None,
    log_fh=None,
    trace: TraceRecorder | None = None,
) -> TrainState:
    """One pass over the dataset; mutates and returns ``state``.

    Samples are visited in an epoch-seeded shuffled order; gradients of the
    per-sample losses (scaled by 1/accumulate_to_batch) accumulate until the
    group is complete, then every optimizer steps once at the scheduled LR.
    """
    cfg = cfg or state.cfg
    if state.epoch >= cfg.total_epochs:
        raise ValueError("state is already past the final epoch")
    n = len(samples)
    if n == 0:
        raise ValueError("empty dataset")
    steps_per_epoch = math.ceil(n / cfg.accumulate_to_batch)
    rng = np.random.default_rng([cfg.seed, state.phase, state.epoch])
    order = rng.permutation(n)
    eta = eta_at(cfg.schedule(), state.epoch)
    loss_cfg = cfg.loss_config()

    for net in state.bp_nets.values():
        net.train()
    for opt in state.optimizers.values():
        opt.zero_grad()

    pending = 0
    group_losses = {k: 0.0 for k in state.bp_nets}
    for i, idx in enumerate(order):
        sample = samples[int(idx)]
        if cfg.augment_data:
            sample = augment(sample, rng)
        y_hard = sample.gt_binary.astype(np.float64)

        targets, m_maps = ablation_targets(state, sample.image, y_hard, eta)
        if trace is not None:
            trace.add(state.epoch, sample.identifier, eta, m_maps, targets, y_hard)

        for key, net in state.bp_nets.items():
            outputs = net(sample.image)
            loss_fn = (
                total_loss_recurrent if key == REC_KIND else total_loss_nonrecurrent
            )
            loss = loss_fn(outputs, targets[key], y_hard, loss_cfg)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss ({float(loss.detach())}) for sample "
                    f"'{sample.identifier}' at epoch {state.epoch}, "
                    f"step {state.global_step}, network {key}"
                )
            (loss / cfg.accumulate_to_batch).backward()
            group_losses[key] += float(loss.detach())

        pending += 1
        if pending == cfg.accumulate_to_batch or i == n - 1:
            lr = lr_at(state.step, steps_per_epoch, cfg)
            for opt in state.optimizers.values():
                for group in opt.param_groups:
                    group["lr"] = lr
                opt.step()
                opt.zero_grad()
            if log_fh is not None:
                record = {
                    "step": state.global_step,
                    "epoch": state.epoch,
                    "lr": lr,
                    "loss_r": (
                        group_losses.get(REC_KIND, 0.0) / pending
                        if REC_KIND in state.bp_nets
                        else None
                    ),
                    "loss_nonr": (
                        group_losses.get(NONR_KIND, 0.0) / pending
                        if NONR_KIND in state.bp_nets
                        else None
                    ),
                    "eta": eta,
                }
                log_fh.write(json.dumps(record) + "\n")
            state.step += 1
            state.global_step += 1
            pending = 0
            group_losses = {k: 0.0 for k in state.bp_nets}

    _end_of_epoch(state)
    return state


@dataclass
class TrainOutcome:
    state: TrainState
    checkpoint_path: str | None
    deployable: str


def _checkpoint_entries(state: TrainState) -> dict:
    entries = {}
    for key, net in state.bp_nets.items():
        entries[f"{key}_bp"] = _params_of(key, net)
    for key, net in state.frozen_nets.items():
        entries[f"{key}_momentum"] = _params_of(key, net)
    for key, params in state.momentum_params.items():
        entries[f"{key}_momentum"] = params
    for key, params in state.snapshot_params.items():
        entries[f"{key}_snapshot"] = params
    return entries


def deployable_key(entries: dict) -> str:
    for name in ("nonrecurrent_momentum", "nonrecurrent_bp"):
        if name in entries:
            return name
    return sorted(entries)[0]


def model_card(entries: dict) -> str:
    lines = ["# MODEL_CARD", ""]
    for name in sorted(entries):
        params = entries[name]
        n = params.n_parameters()
        lines.append(f"## {name}")
        lines.append(f"- kind: {params.kind}")
        lines.append(f"- config: {params.config}")
        lines.append(f"- parameters: {n} ({n * 4 / 1024:.1f} KB fp32)")
        if params.kind == NONR_KIND:
            net = net_from_params(params)
            stage_counts = net.stage_parameter_counts()
            lines.append(f"- per-stage parameters (module + branches): {stage_counts}")
        lines.append("- arrays:")
        for pname, tensor in params.items():
            lines.append(f"    - {pname}: {tuple(tensor.shape)} ({tensor.numel()})")
        lines.append("")
    return "\n".join(lines)


def save_checkpoint(path, state: TrainState) -> str:
    entries = _checkpoint_entries(state)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "epoch": state.epoch,
        "phase": state.phase,
        "config": asdict(state.cfg),
        "deployable": deployable_key(entries),
        "params": {
            name: {"kind": p.kind, "config": p.config, "tensors": p.tensors}
            for name, p in entries.items()
        },
        "model_card": model_card(entries),
    }
    torch.save(payload, path)
    return str(path)


@dataclass
class Checkpoint:
    epoch: int
    config: dict
    deployable: str
    params: dict
    model_card: str


def load_checkpoint(path) -> Checkpoint:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    tag = payload.get("format")
    if tag != CHECKPOINT_FORMAT:
        raise ValueError(
            f"unsupported checkpoint format {tag!r} (expected {CHECKPOINT_FORMAT})"
        )
    params = {
        name: ModelParams(entry["kind"], entry["config"], entry["tensors"])
        for name, entry in payload["params"].items()
    }
    return Checkpoint(
        epoch=payload["epoch"],
        config=payload["config"],
        deployable=payload["deployable"],
        params=params,
        model_card=payload["model_card"],
    )


def train(
    dataset,
    cfg: TrainConfig,
    out_dir=None,
    trace: TraceRecorder | None = None,
) -> TrainOutcome:
    """Run the full schedule; optionally persist checkpoint, log and MODEL_CARD.

    ``two_stage`` runs the schedule twice: first the recurrent pair alone,
    then a fresh non-recurrent pair supervised by the frozen stage-1 result.
    """
    state = init_state(cfg)
    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.jsonl", "w")
    try:
        phases = 2 if cfg.ablation_mode == "two_stage" else 1
        for phase in range(phases):
            if phase == 1:
                _enter_second_stage(state)
            for _ in range(cfg.total_epochs):
                train_epoch(state, dataset, cfg, log_fh=log_fh, trace=trace)
    finally:
        if log_fh is not None:
            log_fh.close()

    entries = _checkpoint_entries(state)
    ckpt_path = None
    if out_dir is not None:
        ckpt_path = save_checkpoint(out_dir / "checkpoint.pt", state)
        (out_dir / "MODEL_CARD.md").write_text(model_card(entries))
    return TrainOutcome(state, ckpt_path, deployable_key(entries))


def _enter_second_stage(state: TrainState) -> None:
    """Freeze the stage-1 recurrent momentum net; start a fresh non-recurrent pair."""
    cfg = state.cfg
    state.frozen_nets = {
        REC_KIND: _materialize(state.momentum_params[REC_KIND], {}, REC_KIND, cfg.device)
    }
    net = _new_net(NONR_KIND, cfg, cfg.seed * 2 + 7)
    state.bp_nets = {NONR_KIND: net}
    state.optimizers = {NONR_KIND: _make_optimizer(net, cfg)}
    state.momentum_params = {}
    state.momentum_nets = {}
    state.epoch = 0
    state.step = 0
    state.phase = 1
