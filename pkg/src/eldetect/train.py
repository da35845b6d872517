"""Momentum-SGD training loop, step-decay schedule, checkpoints and run metadata."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint, imageio
from .detector import Detector, DetectorConfig, normalize_image
from .synth import read_manifest
from .tensor import DimensionError, Tensor
from .voc import Annotation, parse_voc


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_steps: tuple = (800, 1500)
    decay_factor: float = 10.0
    batch_size: int = 1
    max_iter: int = 2000
    seed: int = 0
    checkpoint_every: int = 500
    log_every: int = 100

    def __post_init__(self):
        self.decay_steps = tuple(int(s) for s in self.decay_steps)
        if self.lr <= 0 or self.decay_factor <= 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("rates must be positive and momentum in [0, 1)")
        if list(self.decay_steps) != sorted(set(self.decay_steps)):
            raise ValueError("decay steps must be strictly ascending")
        if self.batch_size != 1:
            raise ValueError("only batch size 1 is supported")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(it: int, cfg: TrainConfig) -> float:
    """Piecewise-constant rate: divided by ``decay_factor`` at each step passed."""
    passed = sum(it >= s for s in cfg.decay_steps)
    return cfg.lr / cfg.decay_factor**passed


def momentum_step(params: list[np.ndarray], grads: list[np.ndarray], state: list[np.ndarray],
                  cfg: TrainConfig, lr: float | None = None) -> None:
    """In-place classic momentum with coupled weight decay.

    v <- mu * v + g + wd * w ;  w <- w - lr * v
    """
    if not len(params) == len(grads) == len(state):
        raise DimensionError("params, grads and state differ in length")
    eta = cfg.lr if lr is None else lr
    for w, g, v in zip(params, grads, state):
        if not w.shape == g.shape == v.shape:
            raise DimensionError(f"shape mismatch: w {w.shape}, g {g.shape}, v {v.shape}")
        v *= cfg.momentum
        v += g
        if cfg.weight_decay:
            v += cfg.weight_decay * w
        w -= eta * v


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class Sample:
    image_id: str
    pixels: np.ndarray  # float64 H x W, resized
    boxes: np.ndarray  # (n, 4) corners, in resized coordinates
    labels: np.ndarray  # (n,) class indices
    annotations: list[Annotation]


def load_sample(image_path: Path, xml_path: Path | None, size: int) -> Sample:
    """Read one PGM (+ optional VOC XML) and square-resize both to ``size``."""
    img = imageio.read_pgm(image_path).astype(np.float64)
    h, w = img.shape
    if (h, w) != (size, size):
        img = imageio.resize_bilinear(img, (size, size))
    anns: list[Annotation] = []
    if xml_path is not None:
        anns = parse_voc(Path(xml_path).read_text()).objects
    sx, sy = size / w, size / h
    anns = [Annotation(a.name, a.xmin * sx, a.ymin * sy, a.xmax * sx, a.ymax * sy) for a in anns]
    boxes = np.array([a.corners() for a in anns], dtype=np.float64).reshape(-1, 4)
    labels = np.array([a.class_id for a in anns], dtype=np.int64)
    return Sample(Path(image_path).stem, img, boxes, labels, anns)


def load_dataset(manifest: str | Path, size: int = 128) -> list[Sample]:
    manifest = Path(manifest)
    root = manifest.parent
    return [load_sample(root / row["image"], root / row["annotation"], size) for row in read_manifest(manifest)]


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def code_version() -> str:
    """Content hash of the package sources (stands in for a VCS revision)."""
    h = hashlib.sha256()
    for src in sorted(Path(__file__).parent.glob("*.py")):
        h.update(src.name.encode())
        h.update(src.read_bytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, model: Detector, velocity: dict[str, np.ndarray] | None,
                    iteration: int, train_cfg: TrainConfig | None) -> None:
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    for k, v in (velocity or {}).items():
        tensors[f"velocity/{k}"] = v
    meta = {"iteration": iteration, "detector": model.cfg.to_dict(),
            "train": train_cfg.to_dict() if train_cfg else None}
    checkpoint.save(path, tensors, meta)


def load_checkpoint(path: str | Path) -> tuple[Detector, dict[str, np.ndarray], dict]:
    tensors, meta = checkpoint.load(path)
    model = Detector(DetectorConfig.from_dict(meta["detector"]))
    model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model/")})
    velocity = {k[9:]: v for k, v in tensors.items() if k.startswith("velocity/")}
    return model, velocity, meta


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


@dataclass
class RunMetadata:
    train: dict
    detector: dict
    code_version: str
    manifest_hash: str
    start_iteration: int = 0
    loss_log: list[dict] = field(default_factory=list)
    wall_clock_s: float = 0.0
    threads: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


def sample_order(n: int, it: int, seed: int) -> int:
    """Index of the sample used at iteration ``it``: a fresh permutation per epoch."""
    epoch, pos = divmod(it, n)
    perm = np.random.default_rng([seed, 7, epoch]).permutation(n)
    return int(perm[pos])


def _dump_batch(out_dir: Path, it: int, sample: Sample, info: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"nan_dump_iter{it:06d}.npz"
    np.savez(path, pixels=sample.pixels, boxes=sample.boxes, labels=sample.labels,
             image_id=sample.image_id, info=json.dumps(info, default=str))
    return path


def train(
    data: list[Sample],
    train_cfg: TrainConfig,
    model: Detector | None = None,
    detector_cfg: DetectorConfig | None = None,
    out_dir: str | Path | None = None,
    velocity: dict[str, np.ndarray] | None = None,
    start_iteration: int = 0,
    manifest_hash: str = "",
    callback: Callable[[int, dict], None] | None = None,
) -> tuple[Detector, RunMetadata]:
    """Optimise the whole detector end-to-end on single-image batches.

    Randomness at iteration ``it`` (anchor and RoI sampling) comes from a
    generator seeded with ``(seed, it)`` and the sample visited is a pure
    function of ``(seed, it)`` too, so resuming from a checkpoint at any
    iteration reproduces the uninterrupted trajectory.  Checkpoints go to
    ``out_dir/ckpt_<iter>.bin`` every ``checkpoint_every`` iterations and
    ``out_dir/model.bin`` at the end.
    """
    if not data:
        raise ValueError("empty training set")
    if model is None:
        model = Detector(detector_cfg or DetectorConfig())
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    named = list(model.named_parameters())
    velocity = dict(velocity or {})
    for name, p in named:
        velocity.setdefault(name, np.zeros_like(p.data))
    params = [p.data for _, p in named]
    state = [velocity[name] for name, _ in named]
    meta = RunMetadata(train_cfg.to_dict(), model.cfg.to_dict(), code_version(), manifest_hash, start_iteration)
    images = {}
    t0 = time.perf_counter()
    for it in range(start_iteration, train_cfg.max_iter):
        sample = data[sample_order(len(data), it, train_cfg.seed)]
        if sample.image_id not in images:
            images[sample.image_id] = normalize_image(sample.pixels)
        rng = np.random.default_rng([train_cfg.seed, it])
        model.zero_grad()
        loss, info = model.loss(images[sample.image_id], sample.boxes, sample.labels, rng)
        if not np.isfinite(info["loss"]):
            where = _dump_batch(out or Path("."), it, sample, info)
            raise TrainingError(f"non-finite loss at iteration {it} on {sample.image_id}; batch dumped to {where}")
        loss.backward()
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for _, p in named]
        lr = lr_at(it, train_cfg)
        momentum_step(params, grads, state, train_cfg, lr)
        info = {"iter": it, "lr": lr, "image": sample.image_id, **info}
        meta.loss_log.append(info)
        if callback is not None:
            callback(it, info)
        done = it + 1
        if out is not None and train_cfg.checkpoint_every and done % train_cfg.checkpoint_every == 0:
            save_checkpoint(out / f"ckpt_{done:06d}.bin", model, velocity, done, train_cfg)
    meta.wall_clock_s = time.perf_counter() - t0
    if out is not None:
        save_checkpoint(out / "model.bin", model, velocity, max(train_cfg.max_iter, start_iteration), train_cfg)
        meta.write(out / "run_metadata.json")
    return model, meta


def resume(path: str | Path, data: list[Sample], train_cfg: TrainConfig | None = None, **kwargs):
    """Continue training from a checkpoint written by :func:`train`."""
    model, velocity, meta = load_checkpoint(path)
    cfg = train_cfg or TrainConfig(**meta["train"])
    return train(data, cfg, model=model, velocity=velocity, start_iteration=int(meta["iteration"]), **kwargs)


def detect_dataset(model: Detector, data: list[Sample], score_threshold: float | None = None) -> dict:
    return {s.image_id: model.detect(normalize_image(s.pixels), score_threshold, s.image_id) for s in data}
