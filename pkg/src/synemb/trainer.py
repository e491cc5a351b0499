"""Training loop, fine-tuning, and the binary checkpoint format."""

from __future__ import annotations

import json
import logging
import math
import os
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from synemb import FormatError, SynEmbError
from synemb import model as M
from synemb import nncore as nn
from synemb.corpus import PAD_ID, LanguageRegistry, ParallelExample
from synemb.nncore import AdamConfig, Param, ParamSet

log = logging.getLogger(__name__)

MAGIC = b"SYNEMB"
VERSION = b"01"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-4
    max_steps: int = 1000
    eval_every: int = 0
    log_every: int = 50
    seed: int = 0
    clip_norm: float = 5.0
    shuffle: bool = True
    bucket_width: int = 4
    val_fraction: float = 0.05
    freeze_encoder: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise SynEmbError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_steps < 0:
            raise SynEmbError(f"max_steps must be >= 0, got {self.max_steps}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise SynEmbError(f"val_fraction must be in [0, 1), got {self.val_fraction}")


@dataclass
class Checkpoint:
    """Everything needed to resume training or embed sentences."""

    config: M.ModelConfig
    params: ParamSet
    registry: LanguageRegistry
    bpe_hash: str
    adam: AdamConfig = field(default_factory=AdamConfig)
    step: int = 0
    schedule_step: int = 0
    seed: int = 0

    @classmethod
    def initial(cls, config: M.ModelConfig, registry: LanguageRegistry, bpe_model, seed: int = 0) -> Checkpoint:
        if config.num_langs < len(registry):
            config = config.replace(num_langs=len(registry))
        if config.bpe_vocab_size != bpe_model.vocab_size:
            config = config.replace(bpe_vocab_size=bpe_model.vocab_size)
        return cls(config, M.init_params(config, seed), registry.copy(), bpe_model.content_hash(), seed=seed)

    def copy(self) -> Checkpoint:
        return Checkpoint(
            self.config, self.params.copy(), self.registry.copy(), self.bpe_hash,
            AdamConfig(**asdict(self.adam)), self.step, self.schedule_step, self.seed,
        )


@dataclass
class TrainReport:
    steps: int
    losses: list[float]
    accs: list[float]
    final_loss: float = float("nan")
    final_acc: float = float("nan")
    val_acc: float | None = None


# ---------------------------------------------------------------- data

Item = tuple  # (bpe ids, target language index, target UPOS tuple)


def encode_examples(examples, bpe_model, registry: LanguageRegistry) -> list[Item]:
    items = []
    dropped = 0
    for ex in examples:
        ids = bpe_model.encode(ex.src_text)
        if not ids:
            dropped += 1
            continue
        items.append((ids, registry.get(ex.tgt_lang.iso).index, ex.tgt_upos))
    if dropped:
        log.warning("dropped %d example(s) whose source text encodes to no BPE pieces", dropped)
    return items


def epoch_batches(lengths, batch_size: int, seed: int, epoch: int, shuffle: bool = True, bucket_width: int = 4):
    """Index batches for one epoch: length buckets shuffled within and across; fixed by (seed, epoch)."""
    n = len(lengths)
    if not shuffle:
        return [np.arange(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]
    rng = np.random.default_rng([seed, epoch])
    perm = rng.permutation(n)
    if bucket_width and bucket_width > 0:
        keys = (np.asarray(lengths)[perm] - 1) // bucket_width
        perm = perm[np.argsort(keys, kind="stable")]
        keys = np.sort(keys, kind="stable")
        batches = []
        for k in np.unique(keys):
            members = perm[keys == k]
            batches += [members[s:s + batch_size] for s in range(0, len(members), batch_size)]
    else:
        batches = [perm[s:s + batch_size] for s in range(0, n, batch_size)]
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


class _Schedule:
    def __init__(self, items, cfg: TrainConfig, seed: int):
        self.items = items
        self.cfg = cfg
        self.seed = seed
        self.lengths = [len(it[0]) for it in items]
        self._epoch = None
        self._batches = None

    def batch_at(self, schedule_step: int):
        _, pos = self._locate(schedule_step)
        return self._batches[pos]

    def _locate(self, s):
        # epochs may differ in batch count under bucketing, so walk forward
        if self._epoch is None or s < self._start:
            self._epoch, self._start = 0, 0
            self._batches = self._make(0)
        while s >= self._start + len(self._batches):
            self._start += len(self._batches)
            self._epoch += 1
            self._batches = self._make(self._epoch)
        return self._epoch, s - self._start

    def _make(self, epoch):
        return epoch_batches(self.lengths, self.cfg.batch_size, self.seed, epoch, self.cfg.shuffle, self.cfg.bucket_width)


def split_validation(items, fraction: float, seed: int):
    n_val = int(math.floor(len(items) * fraction))
    if n_val == 0:
        return items, []
    perm = np.random.default_rng([seed, 7919]).permutation(len(items))
    val = set(perm[:n_val].tolist())
    return [it for i, it in enumerate(items) if i not in val], [items[i] for i in sorted(val)]


def evaluate_items(ckpt: Checkpoint, items, batch_size: int = 256) -> tuple[float, float]:
    """Teacher-forced loss and per-tag accuracy over ``items`` without dropout."""
    total_loss = total_correct = total = 0.0
    for s in range(0, len(items), batch_size):
        batch = M.make_batch(items[s:s + batch_size])
        n = int(np.sum(batch.dec_out != PAD_ID))
        loss, acc = M.forward_loss(ckpt.params, ckpt.config, batch)
        total_loss += loss * n
        total_correct += acc * n
        total += n
    if total == 0:
        raise SynEmbError("no items to evaluate")
    return total_loss / total, total_correct / total


# ---------------------------------------------------------------- training

def _emit(sink, record: dict) -> None:
    if sink is None:
        return
    if callable(sink):
        sink(record)
    else:
        sink.write(json.dumps(record) + "\n")
        sink.flush()


def encoder_param_names(params) -> set[str]:
    return {n for n in params if n == "src_emb" or n.startswith("encoder.")}


def train(ckpt: Checkpoint, cfg: TrainConfig, dataset, bpe_model=None, progress=None) -> TrainReport:
    """Run ``cfg.max_steps`` optimizer steps on ``dataset``, updating ``ckpt`` in place.

    ``dataset`` is a list of ParallelExample (then ``bpe_model`` is required) or of
    already-encoded items. Batch order and dropout masks are functions of
    ``(cfg.seed, ckpt.schedule_step)`` only, so a reloaded checkpoint continues
    exactly where it stopped.
    """
    if not dataset:
        raise SynEmbError("training dataset is empty")
    if isinstance(dataset[0], ParallelExample):
        if bpe_model is None:
            raise SynEmbError("a BPE model is needed to encode raw examples")
        for ex in dataset:
            if ex.tgt_lang.iso not in ckpt.registry:
                raise SynEmbError(f"target language {ex.tgt_lang.iso!r} is not registered in the checkpoint")
        items = encode_examples(dataset, bpe_model, ckpt.registry)
    else:
        items = list(dataset)
    if bpe_model is not None and bpe_model.content_hash() != ckpt.bpe_hash:
        raise SynEmbError("BPE model does not match the one the checkpoint was trained with")
    M.check_params(ckpt.params, ckpt.config)

    val_items: list = []
    if cfg.eval_every > 0:
        items, val_items = split_validation(items, cfg.val_fraction, cfg.seed)
    ckpt.adam.lr = cfg.lr
    ckpt.seed = cfg.seed
    frozen = encoder_param_names(ckpt.params) if cfg.freeze_encoder else set()
    schedule = _Schedule(items, cfg, cfg.seed)
    report = TrainReport(0, [], [])
    t0 = time.perf_counter()
    for _ in range(cfg.max_steps):
        idx = schedule.batch_at(ckpt.schedule_step)
        batch = M.make_batch(items[i] for i in idx)
        rng = np.random.default_rng([cfg.seed, ckpt.schedule_step, 1])
        loss, acc = M.forward_backward(ckpt.params, ckpt.config, batch, training=True, rng=rng)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss} at step {ckpt.step} on batch items {idx.tolist()}")
        nn.clip_grad_norm(ckpt.params, cfg.clip_norm)
        try:
            nn.adam_step(ckpt.params, ckpt.adam, frozen)
        except nn.NonFiniteError as e:
            raise TrainingError(f"step {ckpt.step}, batch items {idx.tolist()}: {e}") from None
        ckpt.step += 1
        ckpt.schedule_step += 1
        report.steps += 1
        report.losses.append(loss)
        report.accs.append(acc)
        record = None
        if cfg.log_every and ckpt.step % cfg.log_every == 0:
            record = {"step": ckpt.step, "loss": loss, "acc": acc}
        if val_items and ckpt.step % cfg.eval_every == 0:
            record = record or {"step": ckpt.step, "loss": loss, "acc": acc}
            record["val_loss"], record["val_acc"] = evaluate_items(ckpt, val_items)
        if record is not None:
            record["wall_ms"] = int((time.perf_counter() - t0) * 1000)
            _emit(progress, record)
    if items:
        report.final_loss, report.final_acc = evaluate_items(ckpt, items)
    if val_items:
        _, report.val_acc = evaluate_items(ckpt, val_items)
    return report


def finetune(ckpt: Checkpoint, new_pairs, cfg: TrainConfig, bpe_model, progress=None) -> tuple[Checkpoint, TrainReport]:
    """Continue training a copy of ``ckpt`` on ``new_pairs`` only.

    Target languages must already be registered. Unseen source languages are
    registered and get fresh language-table rows; the encoder never reads them.
    The optimizer state and batch schedule restart.
    """
    out = ckpt.copy()
    for ex in new_pairs:
        if ex.tgt_lang.iso not in out.registry:
            raise SynEmbError(
                f"target language {ex.tgt_lang.iso!r} is not in the checkpoint registry {out.registry.isos}"
            )
    for ex in new_pairs:
        out.registry.register(ex.src_lang.iso)
    out.config = M.grow_languages(out.params, out.config, len(out.registry), seed=cfg.seed)
    out.params.reset_adam()
    out.adam = AdamConfig(lr=cfg.lr)
    out.schedule_step = 0
    if cfg.max_steps == 0 or not new_pairs:
        return out, TrainReport(0, [], [])
    report = train(out, cfg, list(new_pairs), bpe_model, progress)
    return out, report


# ---------------------------------------------------------------- checkpoint files

def _metadata(ckpt: Checkpoint) -> dict:
    names = sorted(ckpt.params)
    return {
        "format": 1,
        "model_config": ckpt.config.to_dict(),
        "registry": ckpt.registry.isos,
        "bpe_hash": ckpt.bpe_hash,
        "adam": asdict(ckpt.adam),
        "step": ckpt.step,
        "schedule_step": ckpt.schedule_step,
        "seed": ckpt.seed,
        "params": [{"name": n, "shape": list(ckpt.params[n].shape)} for n in names],
    }


def dump_checkpoint(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(_metadata(ckpt), sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC + VERSION, struct.pack("<Q", len(meta)), meta]
    for name in sorted(ckpt.params):
        p = ckpt.params[name]
        for arr in (p.value, p.adam_m, p.adam_v):
            chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(chunks)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dump_checkpoint(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path, bpe_model=None, expect_config: M.ModelConfig | None = None) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:6] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic {data[:8]!r})")
    if data[6:8] != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {data[6:8]!r}, expected {VERSION!r}")
    if len(data) < 16:
        raise FormatError(f"{path}: truncated checkpoint header")
    (meta_len,) = struct.unpack("<Q", data[8:16])
    try:
        meta = json.loads(data[16:16 + meta_len].decode("utf-8"))
        config = M.ModelConfig.from_dict(meta["model_config"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise FormatError(f"{path}: corrupt checkpoint metadata: {e}") from None
    if bpe_model is not None and bpe_model.content_hash() != meta["bpe_hash"]:
        raise SynEmbError(f"{path}: BPE model hash does not match the checkpoint's (trained with {meta['bpe_hash'][:12]}...)")
    if expect_config is not None and expect_config != config:
        diffs = {k: (v, getattr(config, k)) for k, v in expect_config.to_dict().items() if getattr(config, k) != v}
        raise SynEmbError(f"{path}: checkpoint model config differs from the requested one: {diffs}")
    offset = 16 + meta_len
    params = ParamSet()
    for entry in meta["params"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) * 8
        arrays = []
        for _ in range(3):
            chunk = data[offset:offset + size]
            if len(chunk) != size:
                raise FormatError(f"{path}: truncated checkpoint while reading {entry['name']}")
            arrays.append(np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape))
            offset += size
        params[entry["name"]] = Param(entry["name"], arrays[0], None, arrays[1], arrays[2])
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes after parameter data")
    M.check_params(params, config)
    return Checkpoint(
        config, params, LanguageRegistry(meta["registry"]), meta["bpe_hash"],
        AdamConfig(**meta["adam"]), meta["step"], meta["schedule_step"], meta["seed"],
    )
