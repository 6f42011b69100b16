"""Training loop, checkpoint container, dataset cache, and evaluation.

Checkpoint container (binary, little-endian): magic ``EVCK``, version
u16 = 1, config-hash 32 bytes, then a parameter section and an optimizer
section, each ``u32 count`` followed by blobs of (name-length u16, name
UTF-8, rank u8, dims u32 each, float32 LE data). A u32-length JSON
trailer stores epoch, optimizer step, and RNG provenance (seed; per-epoch
generators are derived statelessly from (seed, epoch)).
"""

from __future__ import annotations

import csv
import json
import os
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import figures
from .autodiff import Tensor, backward
from .config import Config
from .events import encode_clip, parse_event_file
from .heads import SPECIAL_TOKENS
from .metrics import ClipScore, ScoreReport, aggregate, wer
from .model import ClipBatchItem, SignModel
from .optim import AdamState, adam_step, cosine_lr
from .sparse import sparsify_clip
from .synth import Corpus, load_corpus

CHECKPOINT_MAGIC = b"EVCK"
CHECKPOINT_VERSION = 1


class TrainError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def worker_count() -> int:
    """Thread cap from EVSIGN_THREADS (default: cpu count, max 4)."""
    env = os.environ.get("EVSIGN_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise TrainError(f"bad EVSIGN_THREADS value {env!r}")
    return max(1, min(4, os.cpu_count() or 1))


# ----------------------------------------------------------------------
# dataset


def load_clip(corpus: Corpus, record, config: Config, model: SignModel
              ) -> ClipBatchItem:
    stream = parse_event_file(corpus.clip_path(record).read_bytes())
    grid = encode_clip(stream, config.segments, config.bins)
    sp = sparsify_clip(grid)
    chain = None
    if sp.n_active:
        chain = model.backbone.trace(sp.coords, sp.shape)
    return ClipBatchItem(
        clip_id=Path(record.path).stem,
        coords=sp.coords,
        features=sp.features.data,
        shape=sp.shape,
        n_segments=sp.n_batch,
        gloss_ids=list(record.glosses),
        word_ids=list(record.words),
        chain=chain)


def load_dataset(corpus: Corpus, config: Config, model: SignModel
                 ) -> dict[str, list[ClipBatchItem]]:
    """Encode every clip once; per-clip work is independent so a small
    thread pool is used, results kept in manifest order."""
    out: dict[str, list[ClipBatchItem]] = {}
    workers = worker_count()
    for split, records in corpus.splits.items():
        if workers > 1 and len(records) > 8:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                out[split] = list(pool.map(
                    lambda r: load_clip(corpus, r, config, model), records))
        else:
            out[split] = [load_clip(corpus, r, config, model) for r in records]
    return out


# ----------------------------------------------------------------------
# checkpoint container


def _write_blob(parts: list[bytes], name: str, array: np.ndarray):
    encoded = name.encode("utf-8")
    arr = np.ascontiguousarray(array, dtype="<f4")
    parts.append(struct.pack("<H", len(encoded)))
    parts.append(encoded)
    parts.append(struct.pack("<B", arr.ndim))
    parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    parts.append(arr.tobytes())


def _read_blob(buf: bytes, off: int) -> tuple[str, np.ndarray, int]:
    (name_len,) = struct.unpack_from("<H", buf, off)
    off += 2
    name = buf[off:off + name_len].decode("utf-8")
    off += name_len
    (rank,) = struct.unpack_from("<B", buf, off)
    off += 1
    dims = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    count = int(np.prod(dims)) if rank else 1
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=off)
    off += 4 * count
    return name, data.reshape(dims).astype(np.float32), off


def save_checkpoint(path: str | Path, model: SignModel, state: AdamState,
                    epoch: int, config: Config, extra: dict | None = None):
    parts: list[bytes] = [CHECKPOINT_MAGIC,
                          struct.pack("<H", CHECKPOINT_VERSION),
                          config.hash_bytes()]
    params = list(model.named_parameters())
    buffers = list(model.named_buffers())
    parts.append(struct.pack("<I", len(params) + len(buffers)))
    for name, p in params:
        _write_blob(parts, name, p.data)
    for name, b in buffers:
        _write_blob(parts, name, b)
    opt_names = sorted(state.m)
    parts.append(struct.pack("<I", 2 * len(opt_names)))
    for name in opt_names:
        _write_blob(parts, "adam.m." + name, state.m[name])
        _write_blob(parts, "adam.v." + name, state.v[name])
    meta = {"epoch": epoch, "adam_step": state.step, "seed": config.seed,
            "rng": "derived(seed, epoch)"}
    meta.update(extra or {})
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path, model: SignModel, config: Config
                    ) -> tuple[AdamState, dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic in {path}")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    stored_hash = buf[6:38]
    if stored_hash != config.hash_bytes():
        raise CheckpointError(
            "checkpoint config hash does not match the supplied config")
    off = 38
    (n_params,) = struct.unpack_from("<I", buf, off)
    off += 4
    loaded: dict[str, np.ndarray] = {}
    for _ in range(n_params):
        name, data, off = _read_blob(buf, off)
        loaded[name] = data
    params = dict(model.named_parameters())
    bufs = dict(model.named_buffers())
    expected = set(params) | set(bufs)
    if set(loaded) != expected:
        missing = sorted(expected - set(loaded))[:3]
        extra = sorted(set(loaded) - expected)[:3]
        raise CheckpointError(
            f"parameter names mismatch (missing={missing}, extra={extra})")
    for name, data in loaded.items():
        if name in params:
            if params[name].data.shape != data.shape:
                raise CheckpointError(f"shape mismatch for {name}")
            params[name].data[...] = data
        else:
            model.set_buffer(name, data)
    (n_opt,) = struct.unpack_from("<I", buf, off)
    off += 4
    state = AdamState()
    for _ in range(n_opt):
        name, data, off = _read_blob(buf, off)
        if name.startswith("adam.m."):
            state.m[name[len("adam.m."):]] = data
        elif name.startswith("adam.v."):
            state.v[name[len("adam.v."):]] = data
        else:
            raise CheckpointError(f"unknown optimizer blob {name}")
    (json_len,) = struct.unpack_from("<I", buf, off)
    off += 4
    meta = json.loads(buf[off:off + json_len].decode("utf-8"))
    state.step = int(meta.get("adam_step", 0))
    return state, meta


# ----------------------------------------------------------------------
# evaluation


def evaluate_split(model: SignModel, items: list[ClipBatchItem], split: str,
                   gloss_names: list[str], word_names: list[str],
                   with_translation: bool) -> tuple[ScoreReport, list[ClipScore]]:
    model.set_training(False)
    rows: list[ClipScore] = []
    for item in items:
        hyp_ids, _ = model.recognize(item)
        ref = [gloss_names[g] for g in item.gloss_ids]
        hyp = [gloss_names[g] for g in hyp_ids if 0 <= g < len(gloss_names)]
        row = ClipScore(item.clip_id, ref, hyp, wer(ref, hyp))
        if with_translation:
            row.text_ref = [word_names[w] for w in item.word_ids]
            gen = model.translate(item)
            row.text_hyp = [word_names[w] if 0 <= w < len(word_names)
                            else "<unk>" for w in gen]
        rows.append(row)
    model.set_training(True)
    return aggregate(split, rows, with_translation), rows


def write_eval_outputs(out_dir: Path, split: str, report: ScoreReport,
                       rows: list[ClipScore]):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"report_{split}.json").write_text(report.to_json() + "\n")
    with (out_dir / f"hyps_{split}.jsonl").open("w") as fh:
        for row in rows:
            rec = {"clip_id": row.clip_id, "gloss_hyp": row.gloss_hyp,
                   "gloss_ref": row.gloss_ref}
            if row.text_ref is not None:
                rec["text_hyp"] = row.text_hyp
                rec["text_ref"] = row.text_ref
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with (out_dir / f"clips_{split}.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["clip_id", "wer", "n_sub", "n_ins", "n_del", "n_ref"])
        for row in rows:
            writer.writerow([row.clip_id, f"{row.wer.wer:.6f}", row.wer.n_sub,
                             row.wer.n_ins, row.wer.n_del, row.wer.n_ref])
    figures.score_figure(report.to_dict(), [r.wer.wer for r in rows],
                         out_dir / f"scores_{split}.png")


# ----------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    out_dir: Path
    best_path: Path
    last_path: Path
    report_rows: list[dict]
    best_dev_wer: float
    infeasible_clips: int


def build_model(config: Config, n_glosses: int, n_words: int) -> SignModel:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    return SignModel(config, n_glosses, n_words, rng)


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 3, epoch]))


def train(config: Config, resume: str | Path | None = None,
          log=None) -> TrainResult:
    """Seeded end-to-end training; keeps best-dev and last checkpoints,
    writes a JSON-lines report and a curve figure under out_dir."""
    config.validate()
    corpus = load_corpus(config.corpus_dir)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_glosses = len(corpus.gloss_vocab)
    word_names = list(corpus.word_vocab)
    if word_names[:4] != SPECIAL_TOKENS:
        raise TrainError("corpus word vocabulary missing special tokens")
    model = build_model(config, n_glosses, len(word_names))
    dataset = load_dataset(corpus, config, model)
    train_items = dataset["train"]
    dev_items = dataset["dev"]
    if not train_items or not dev_items:
        raise TrainError("corpus has empty train or dev split")

    state = AdamState()
    start_epoch = 0
    best_dev = float("inf")
    report_rows: list[dict] = []
    report_path = out_dir / "train_report.jsonl"
    best_path = out_dir / "checkpoint_best.evck"
    last_path = out_dir / "checkpoint_last.evck"
    if resume is not None:
        state, meta = load_checkpoint(resume, model, config)
        start_epoch = int(meta["epoch"]) + 1
        best_dev = float(meta.get("best_dev_wer", float("inf")))
        if report_path.exists():
            report_rows = [json.loads(line)
                           for line in report_path.read_text().splitlines()
                           if line.strip()][:start_epoch]

    s2gt = config.protocol == "s2gt"
    params = model.parameters()
    infeasible = 0
    for epoch in range(start_epoch, config.epochs):
        model.set_training(True)
        lr = cosine_lr(epoch, config.epochs, config.lr0)
        order = _epoch_rng(config.seed, epoch).permutation(len(train_items))
        losses: list[float] = []
        for chunk_start in range(0, len(order), config.batch_size):
            batch = order[chunk_start:chunk_start + config.batch_size]
            grad_sum: dict[str, np.ndarray] = {}
            n_used = 0
            for clip_idx in batch:
                item = train_items[int(clip_idx)]
                if s2gt:
                    out = model.forward_s2gt(item)
                    total = out.loss
                else:
                    out = model.forward_s2g(item)
                    total = out.loss
                if total is None:
                    infeasible += 1
                    continue
                losses.append(float(total.data))
                grad_map = backward(total)
                for name, p in params.items():
                    g = grad_map.get(id(p))
                    if g is None:
                        continue
                    acc = grad_sum.get(name)
                    grad_sum[name] = g.copy() if acc is None else acc + g
                n_used += 1
            if n_used == 0:
                continue
            scale = 1.0 / n_used
            grads = {name: g * scale for name, g in grad_sum.items()}
            adam_step(params, grads, state, lr,
                      weight_decay=config.weight_decay)
        dev_report, _ = evaluate_split(model, dev_items, "dev",
                                       corpus.gloss_vocab, word_names, s2gt)
        row = {"epoch": epoch, "lr": lr,
               "train_loss": float(np.mean(losses)) if losses else float("nan"),
               "dev_wer": dev_report.wer}
        if s2gt:
            row["dev_bleu1"] = dev_report.bleu[0]
        report_rows.append(row)
        if log:
            log(f"epoch {epoch}: lr={lr:.2e} loss={row['train_loss']:.4f} "
                f"dev_wer={dev_report.wer:.4f}"
                + (f" dev_bleu1={row['dev_bleu1']:.2f}" if s2gt else ""))
        extra = {"best_dev_wer": min(best_dev, dev_report.wer)}
        save_checkpoint(last_path, model, state, epoch, config, extra)
        if dev_report.wer < best_dev:
            best_dev = dev_report.wer
            save_checkpoint(best_path, model, state, epoch, config, extra)
        with report_path.open("w") as fh:
            for r in report_rows:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
    if report_rows:
        figures.train_curves(report_rows, out_dir / "train_curves.png")
    if not best_path.exists():
        save_checkpoint(best_path, model, state, config.epochs - 1, config,
                        {"best_dev_wer": best_dev})
    return TrainResult(out_dir, best_path, last_path, report_rows, best_dev,
                       infeasible)


def evaluate_checkpoint(config: Config, checkpoint: str | Path, split: str,
                        out_dir: str | Path | None = None
                        ) -> tuple[ScoreReport, list[ClipScore]]:
    """Load a checkpoint and score one split; writes report/JSONL/CSV/PNG."""
    corpus = load_corpus(config.corpus_dir)
    if split not in corpus.splits:
        raise TrainError(f"unknown split {split!r}")
    model = build_model(config, len(corpus.gloss_vocab), len(corpus.word_vocab))
    load_checkpoint(checkpoint, model, config)
    dataset = load_dataset(corpus, config, model)
    report, rows = evaluate_split(model, dataset[split], split,
                                  corpus.gloss_vocab, list(corpus.word_vocab),
                                  config.protocol == "s2gt")
    target = Path(out_dir) if out_dir is not None else Path(config.out_dir)
    write_eval_outputs(target, split, report, rows)
    return report, rows
