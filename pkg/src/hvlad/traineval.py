"""Training loop, evaluation and the JSON evaluation report.

Randomness is keyed on ``(seed, step)`` for training batches and on
``(seed, record index, crop)`` for evaluation crops, so a resumed run follows
exactly the same trajectory as an unbroken one and re-evaluating a
checkpoint reproduces the same report.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import re
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .data import PairingManifest
from .errors import ConfigMismatch, NonFinite
from .metrics import moving_average, topk_accuracy
from .model import EncoderConfig, build_encoder
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.optim import LEARNING_RATE, AdamState, adam_step

log = logging.getLogger(__name__)

MODEL_CFG = "model.cfg"
TRAIN_LOG = "train_log.csv"
_CKPT_RE = re.compile(r"step_(\d+)\.hvckpt$")


@dataclass
class TrainConfig:
    batch_size: int = 32
    steps: int = 500
    seed: int = 0
    crop_s: float = 2.5
    eval_every: int = 100
    lr: float = LEARNING_RATE
    checkpoint_dir: str = "run"
    sample_rate: int = dsp.DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.crop_s <= 0:
            raise ValueError("crop_s must be positive")
        if self.steps < 0 or self.eval_every < 1:
            raise ValueError("steps must be >= 0 and eval_every >= 1")


def input_frames(crop_s, rate=dsp.DEFAULT_SAMPLE_RATE):
    n = int(round(crop_s * rate))
    return dsp.frame_count(n, int(round(dsp.WIN_S * rate)), int(round(dsp.HOP_S * rate)))


class FeatureSource:
    """Turns manifest records into normalized spectrogram crops.

    Audio is read from ``converted_path`` and kept in memory (float32) after
    the first load. With ``cache_dir`` set, precomputed full-utterance
    spectrograms from the ``extract`` stage are cropped in the frame domain
    instead.
    """

    def __init__(self, rate=dsp.DEFAULT_SAMPLE_RATE, cache_dir=None, loader=None):
        self.rate = rate
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.loader = loader
        self._audio = {}

    def waveform(self, record) -> dsp.Waveform:
        if self.loader is not None:
            return self.loader(record)
        path = record.converted_path
        if path is None:
            raise FileNotFoundError(f"record for {record.source_utt} has not been converted")
        if path not in self._audio:
            self._audio[path] = dsp.load_audio(path, self.rate).samples.astype(np.float32)
        return dsp.Waveform(self._audio[path], self.rate)

    def example(self, record, rng, crop_s) -> np.ndarray:
        """Normalized ``[n_bins, n_frames]`` crop."""
        if self.cache_dir is not None and record.converted_path:
            cached = spec_cache_path(self.cache_dir, record)
            if cached.exists():
                spec = dsp.read_spec_cache(cached)
                spec = dsp.crop_frames(spec, input_frames(crop_s, self.rate), rng)
                return dsp.normalize(spec).values.T
        w = dsp.crop_or_pad(self.waveform(record), crop_s, rng)
        return dsp.normalize(dsp.stft_magnitude(w)).values.T


def spec_cache_path(cache_dir, record) -> Path:
    return Path(cache_dir) / (Path(record.converted_path).stem + ".hvspec")


def extract_spectrograms(manifest: PairingManifest, cache_dir, rate=dsp.DEFAULT_SAMPLE_RATE):
    """Write one unnormalized full-utterance spectrogram per converted record."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    n = 0
    for rec in manifest.records:
        if not rec.converted_path:
            continue
        spec = dsp.stft_magnitude(dsp.load_audio(rec.converted_path, rate))
        dsp.write_spec_cache(spec_cache_path(cache_dir, rec), spec)
        n += 1
    return n


def make_batch(records, source, rng, crop_s):
    x = np.stack([source.example(r, rng, crop_s) for r in records])[:, None]
    y = np.array([r.label for r in records], dtype=np.int64)
    return x.astype(np.float32), y


# -- checkpoints and config files --------------------------------------------

def checkpoint_path(run_dir, step):
    return Path(run_dir) / f"step_{step:06d}.hvckpt"


def list_checkpoints(run_dir):
    out = []
    for p in Path(run_dir).iterdir():
        m = _CKPT_RE.search(p.name)
        if m:
            out.append((int(m.group(1)), p))
    return [p for _, p in sorted(out)]


def write_model_config(run_dir, cfg: EncoderConfig):
    Path(run_dir).mkdir(parents=True, exist_ok=True)
    (Path(run_dir) / MODEL_CFG).write_text(cfg.to_text(), encoding="utf-8")


def read_model_config(run_dir) -> EncoderConfig:
    p = Path(run_dir) / MODEL_CFG
    if not p.exists():
        raise ConfigMismatch(f"no {MODEL_CFG} next to the checkpoint in {run_dir}")
    return EncoderConfig.from_text(p.read_text(encoding="utf-8"))


def load_model(checkpoint, cfg: EncoderConfig | None = None):
    """Model restored from a checkpoint file; config read from the run directory."""
    checkpoint = Path(checkpoint)
    cfg = cfg or read_model_config(checkpoint.parent)
    model = build_encoder(cfg)
    tensors, step, adam = load_checkpoint(checkpoint)
    model.load_tensors(tensors)
    return model, step, adam


# -- training -----------------------------------------------------------------

@dataclass
class TrainResult:
    model: object
    log: list           # (step, loss, top1)
    checkpoints: list   # paths
    adam: AdamState


def _log_header(model_cfg, train_cfg, manifest):
    stamp = time.strftime("%Y-%m-%dT%H:%M:%S")
    return [
        f"# started {stamp}",
        f"# variant={model_cfg.variant} clusters={model_cfg.K} n_classes={model_cfg.n_classes} "
        f"n_targets={manifest.n_targets}",
        f"# lr={train_cfg.lr} batch_size={train_cfg.batch_size} steps={train_cfg.steps} "
        f"seed={train_cfg.seed} crop_s={train_cfg.crop_s}",
        "step,loss,top1",
    ]


def train(model_cfg: EncoderConfig, manifest: PairingManifest, train_cfg: TrainConfig,
          source: FeatureSource | None = None, resume=None, write_files=True) -> TrainResult:
    """Fixed-rate Adam on random crops of the training split.

    A fresh run writes ``step_000000`` before the first update; further
    checkpoints follow every ``eval_every`` steps and at the end. With
    ``resume`` (a checkpoint path) the model, optimizer moments and step
    counter are restored and training continues to ``train_cfg.steps``.
    """
    source = source or FeatureSource(train_cfg.sample_rate)
    records = manifest.split_records("train")
    if not records:
        raise ValueError("manifest has no training records")
    run_dir = Path(train_cfg.checkpoint_dir)
    model = build_encoder(model_cfg, seed=train_cfg.seed)
    adam = AdamState(lr=train_cfg.lr)
    checkpoints = []
    start = 0

    if resume is not None:
        tensors, start, saved = load_checkpoint(resume)
        model.load_tensors(tensors)
        if saved is not None:
            adam.t, adam.m, adam.v = saved.t, saved.m, saved.v
    elif model_cfg.uses_vlad:
        rng = np.random.default_rng([train_cfg.seed, 2**31 - 1])
        warm = [records[i] for i in rng.choice(len(records), size=min(len(records), 64),
                                                replace=False)]
        x, _ = make_batch(warm, source, rng, train_cfg.crop_s)
        model.init_centroids(x, seed=train_cfg.seed)

    log_rows = []
    log_file = None
    if write_files:
        write_model_config(run_dir, model_cfg)
        log_path = run_dir / TRAIN_LOG
        if resume is None or not log_path.exists():
            log_path.write_text("\n".join(_log_header(model_cfg, train_cfg, manifest)) + "\n")
        log_file = open(log_path, "a", encoding="utf-8")
        if resume is None:
            checkpoints.append(checkpoint_path(run_dir, 0))
            save_checkpoint(checkpoints[-1], model.params.tensors, 0, adam)

    try:
        for step in range(start, train_cfg.steps):
            rng = np.random.default_rng([train_cfg.seed, step])
            idx = rng.choice(len(records), size=train_cfg.batch_size,
                             replace=len(records) < train_cfg.batch_size)
            x, y = make_batch([records[i] for i in idx], source, rng, train_cfg.crop_s)
            try:
                loss, logits = model.loss_and_grads(x, y)
                adam_step(model.params.parameters(), model.params.grads, adam)
                for name in model.params.trainable:
                    if not np.all(np.isfinite(model.params[name])):
                        raise NonFinite(f"parameter {name} became non-finite")
            except NonFinite:
                if write_files:
                    save_checkpoint(run_dir / f"nonfinite_step_{step:06d}.hvckpt",
                                    model.params.tensors, step, adam)
                raise
            done = step + 1
            top1 = topk_accuracy(logits, y, 1)
            log_rows.append((done, loss, top1))
            if log_file:
                log_file.write(f"{done},{loss:.6f},{top1:.4f}\n")
            if write_files and (done % train_cfg.eval_every == 0 or done == train_cfg.steps):
                checkpoints.append(checkpoint_path(run_dir, done))
                save_checkpoint(checkpoints[-1], model.params.tensors, done, adam)
                log_file.flush()
    finally:
        if log_file:
            log_file.close()
    return TrainResult(model, log_rows, checkpoints, adam)


def read_train_log(path):
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#") or line.startswith("step"):
            continue
        s, loss, top1 = line.split(",")
        rows.append((int(s), float(loss), float(top1)))
    return rows


# -- evaluation ---------------------------------------------------------------

def predict(model, records, source, seed=0, crop_s=2.5, n_crops=1, batch_size=32):
    """Eval-mode logits, averaged over ``n_crops`` seeded crops per record."""
    out = np.zeros((len(records), model.cfg.n_classes))
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        total = 0.0
        for c in range(n_crops):
            xs = []
            for j, rec in enumerate(chunk):
                rng = np.random.default_rng([seed, start + j, c])
                xs.append(source.example(rec, rng, crop_s))
            x = np.stack(xs)[:, None].astype(np.float32)
            total = total + model.forward(x, train=False)
        out[start:start + len(chunk)] = total / n_crops
    return out


def accuracies(logits, labels):
    k5 = min(5, logits.shape[1])
    return topk_accuracy(logits, labels, 1), topk_accuracy(logits, labels, k5)


@dataclass
class EvalReport:
    variant: str
    K: int
    n_targets: int
    n_classes: int
    step: int
    top1: float
    top5: float
    n_items: int
    seed: int
    split: str = "test"
    checkpoint: str = ""
    series: list = field(default_factory=list)    # [step, top1, top5]
    smoothed: list = field(default_factory=list)  # top-1 smoothed over 5 points

    def __post_init__(self):
        if not 0.0 <= self.top1 <= self.top5 <= 1.0:
            raise ValueError(f"inconsistent accuracies top1={self.top1} top5={self.top5}")

    @property
    def group_key(self):
        return (self.variant, self.K, self.n_targets)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text) -> "EvalReport":
        return cls(**json.loads(text))

    def percent(self, which="top1"):
        return f"{100 * getattr(self, which):.2f}"


def _check_labels(model, records):
    top = max(r.label for r in records)
    if top >= model.cfg.n_classes:
        raise ConfigMismatch(f"manifest label {top} exceeds model's {model.cfg.n_classes} classes")


def evaluate(checkpoints, manifest: PairingManifest, split="test", seed=0, n_crops=1,
             crop_s=2.5, source=None, batch_size=32) -> EvalReport:
    """Evaluate one checkpoint, or a run's checkpoint series (headline from the last)."""
    if isinstance(checkpoints, (str, Path)):
        checkpoints = [checkpoints]
    checkpoints = [Path(c) for c in checkpoints]
    records = manifest.split_records(split)
    if not records:
        raise ValueError(f"manifest has no {split!r} records")
    labels = np.array([r.label for r in records])
    source = source or FeatureSource()
    series = []
    cfg = read_model_config(checkpoints[0].parent)
    for ck in checkpoints:
        if read_model_config(ck.parent) != cfg:
            raise ConfigMismatch(f"{ck} was trained with a different model config")
        model, step, _ = load_model(ck, cfg)
        _check_labels(model, records)
        logits = predict(model, records, source, seed, crop_s, n_crops, batch_size)
        t1, t5 = accuracies(logits, labels)
        series.append([step, t1, t5])
    series.sort()
    smoothed = moving_average([s[1] for s in series], 5).tolist()
    last = series[-1]
    return EvalReport(variant=cfg.variant, K=cfg.K, n_targets=manifest.n_targets,
                      n_classes=cfg.n_classes, step=last[0], top1=last[1], top5=last[2],
                      n_items=len(records), seed=seed, split=split,
                      checkpoint=str(checkpoints[-1]), series=series, smoothed=smoothed)
