"""Adam training loop, learning-rate schedule and checkpoint files."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import numcore as nc
from .config import ModelConfig, TrainConfig, from_items, replace, to_items
from .data import Dataset, ObjectFeatureSet, TokenSequence, Vocabulary, build_vocab, load_word_vectors, tokenize
from .model import AblationSpec, HSLModel

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAGIC = b"HSL-CHECKPOINT\n"


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr * cfg.decay ** epoch


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, nc.Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam update; replaces each parameter's values in place of mutation."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    epoch: int = 0
    rng_state: dict | None = None
    vocab: Vocabulary | None = None

    def build_model(self) -> HSLModel:
        model = HSLModel(self.model_cfg, np.random.default_rng(0))
        load_parameters(model, self.params)
        return model


def load_parameters(model: HSLModel, values: dict[str, np.ndarray]) -> None:
    params = model.parameters()
    if set(params) != set(values):
        missing = sorted(set(params) ^ set(values))
        raise ValueError(f"parameter names differ from the model, first: {missing[0]}")
    for name, p in params.items():
        p.data = values[name]


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Text header of ``key=value`` sections followed by little-endian float64 parameter blocks."""
    lines = [f"format_version={FORMAT_VERSION}", "[model]"]
    lines += [f"{k}={v}" for k, v in to_items(ckpt.model_cfg).items()]
    lines.append("[train]")
    lines += [f"{k}={v}" for k, v in to_items(ckpt.train_cfg).items()]
    lines += ["[state]", f"epoch={ckpt.epoch}", f"rng_state={json.dumps(ckpt.rng_state, sort_keys=True)}"]
    if ckpt.vocab is not None:
        lines += ["[vocab]", f"min_count={ckpt.vocab.min_count}"]
        lines += [f"token={t}\t{ckpt.vocab.counts.get(t, 0)}" for t in ckpt.vocab.tokens]
    lines += ["[params]", f"count={len(ckpt.params)}", "END"]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for name, arr in ckpt.params.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(f"{name}\t{','.join(str(d) for d in arr.shape)}\n".encode("utf-8"))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        sections: dict[str, dict[str, str]] = {"": {}}
        tokens: list[tuple[str, int]] = []
        current = ""
        while True:
            raw = fh.readline()
            if not raw:
                raise ValueError(f"{path}: truncated header")
            line = raw.decode("utf-8").rstrip("\n")
            if line == "END":
                break
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1]
                sections.setdefault(current, {})
                continue
            key, value = line.split("=", 1)
            if current == "vocab" and key == "token":
                tok, count = value.rsplit("\t", 1)
                tokens.append((tok, int(count)))
            else:
                sections[current][key] = value
        version = int(sections[""].get("format_version", -1))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        params: dict[str, np.ndarray] = {}
        for _ in range(int(sections["params"]["count"])):
            name, shape_raw = fh.readline().decode("utf-8").rstrip("\n").split("\t")
            shape = tuple(int(d) for d in shape_raw.split(",")) if shape_raw else ()
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise ValueError(f"{path}: truncated block for {name}")
            params[name] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
    vocab = None
    if tokens:
        vocab = Vocabulary([t for t, _ in tokens], {t: c for t, c in tokens if c > 0},
                           int(sections["vocab"]["min_count"]))
    state = sections["state"]
    return Checkpoint(
        params=params,
        model_cfg=from_items(ModelConfig, sections["model"]),
        train_cfg=from_items(TrainConfig, sections["train"]),
        epoch=int(state["epoch"]),
        rng_state=json.loads(state["rng_state"]),
        vocab=vocab,
    )


# ---------------------------------------------------------------------------
# training loop


@dataclass
class LossRecord:
    epoch: int
    step: int
    level: str
    granularity: str
    loss: float


def write_loss_csv(records: list[LossRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "step", "level", "granularity", "loss"])
        for r in records:
            w.writerow([r.epoch, r.step, r.level, r.granularity, repr(r.loss)])


@dataclass
class TrainResult:
    model: HSLModel
    vocab: Vocabulary
    checkpoint: Checkpoint
    records: list[LossRecord]

    def epoch_means(self) -> list[float]:
        totals: dict[int, list[float]] = {}
        for r in self.records:
            if r.level == "all":
                totals.setdefault(r.epoch, []).append(r.loss)
        return [float(np.mean(v)) for _, v in sorted(totals.items())]


class TrainingDiverged(RuntimeError):
    pass


def tokenized_pairs(dataset: Dataset, vocab: Vocabulary, max_tokens: int) -> list[tuple[ObjectFeatureSet, TokenSequence]]:
    return [
        (dataset.images[iid], tokenize(dataset.train_queries[qid], vocab, max_tokens, qid))
        for qid, iid in dataset.train_pairs
    ]


def train(
    dataset: Dataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    spec: AblationSpec | None = None,
    vocab: Vocabulary | None = None,
    word_vectors=None,
    out_dir=None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Train on ``dataset.train_pairs`` with in-batch negatives.

    Each epoch shuffles the pairs under the seeded generator and walks them
    in batches of ``batch_size``; a trailing partial batch is dropped.
    ``spec`` restricts which (level, granularity) losses are optimized.
    """
    if vocab is None:
        vocab = build_vocab(dataset.train_queries.values(), train_cfg.min_count)
    model_cfg = replace(model_cfg, vocab_size=len(vocab))
    init_seq, batch_seq = np.random.SeedSequence(train_cfg.seed).spawn(2)
    init_rng = np.random.default_rng(init_seq)
    batch_rng = np.random.default_rng(batch_seq)
    table = None
    if word_vectors is not None:
        table = load_word_vectors(word_vectors, vocab, model_cfg.word_dim, init_rng)
    model = HSLModel(model_cfg, init_rng, table)
    pairs = tokenized_pairs(dataset, vocab, model_cfg.max_tokens)
    N = train_cfg.batch_size
    if len(pairs) < N:
        raise ValueError(f"dataset has {len(pairs)} pairs, fewer than batch_size={N}")

    params = model.parameters()
    state = AdamState()
    records: list[LossRecord] = []
    step = 0
    last_grad = 0.0
    out = Path(out_dir) if out_dir is not None else None
    for epoch in range(train_cfg.epochs):
        lr = lr_at_epoch(epoch, train_cfg)
        order = batch_rng.permutation(len(pairs))
        epoch_losses = []
        for start in range(0, len(pairs) - N + 1, N):
            batch = [pairs[i] for i in order[start:start + N]]
            try:
                breakdown = model.loss([b[0] for b in batch], [b[1] for b in batch], spec)
                grads = nc.gradients(breakdown.total, params)
            except FloatingPointError as exc:
                raise TrainingDiverged(
                    f"non-finite value at epoch {epoch} step {step}: {exc}; max |grad| at previous step {last_grad:.3e}"
                ) from exc
            last_grad = max(float(np.abs(g).max()) for g in grads.values())
            adam_step(params, grads, state, lr, train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
            for (l, g), value in breakdown.values().items():
                records.append(LossRecord(epoch, step, str(l), g, value))
            total = breakdown.total.item()
            records.append(LossRecord(epoch, step, "all", "total", total))
            epoch_losses.append(total)
            step += 1
        mean_loss = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
        log.info("epoch %d lr %.3e mean loss %.6f", epoch, lr, mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)
        if out is not None and train_cfg.checkpoint_every and (epoch + 1) % train_cfg.checkpoint_every == 0:
            ckpt = _snapshot(model, model_cfg, train_cfg, epoch + 1, batch_rng, vocab)
            save_checkpoint(ckpt, out / f"checkpoint_epoch{epoch + 1:03d}.ckpt")

    ckpt = _snapshot(model, model_cfg, train_cfg, train_cfg.epochs, batch_rng, vocab)
    return TrainResult(model, vocab, ckpt, records)


def _snapshot(model, model_cfg, train_cfg, epoch, rng, vocab) -> Checkpoint:
    return Checkpoint(
        params={k: p.data.copy() for k, p in model.parameters().items()},
        model_cfg=model_cfg,
        train_cfg=train_cfg,
        epoch=epoch,
        rng_state=rng.bit_generator.state,
        vocab=vocab,
    )
