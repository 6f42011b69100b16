"""Deterministic micro-sign event corpus.

Each gloss is a stroke template: a bright dot tracing a polyline over a
dark background. A per-pixel log-intensity threshold model turns the
motion into sparse +-1 events, so clips stress exactly what a real event
stream does: moving content only. Clips concatenate several glosses with
silent gaps and carry gloss and word annotations.

Everything is a pure function of (config, seed); per-clip RNG is derived
from (seed, clip index) so parallel and serial generation match.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .events import EventStream, write_event_file

LOG_CONTRAST = 0.7  # log-intensity step when the dot covers a pixel


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class GlossTemplate:
    gloss_id: int
    waypoints: tuple[tuple[float, float], ...]
    duration_ms: float

    def __post_init__(self):
        if len(self.waypoints) < 2:
            raise SynthError("template needs at least 2 waypoints")
        for wx, wy in self.waypoints:
            if not (0.0 <= wx <= 1.0 and 0.0 <= wy <= 1.0):
                raise SynthError("waypoints must lie in the unit square")


@dataclass
class SynthConfig:
    n_glosses: int = 12
    resolution: int = 32
    n_clips: int = 380
    split_fractions: tuple[float, float, float] = (300 / 380, 40 / 380, 40 / 380)
    min_seq: int = 2
    max_seq: int = 5
    gap_ms: float = 150.0
    contrast_threshold: float = 0.35
    dt_us: int = 1000
    dot_radius: float = 1.3
    jitter_px: float = 0.5

    def validate(self):
        if self.n_glosses < 2:
            raise SynthError("need at least 2 glosses")
        if self.resolution < 8:
            raise SynthError("resolution must be at least 8x8")
        if not (1 <= self.min_seq <= self.max_seq):
            raise SynthError("bad sequence length bounds")
        if abs(sum(self.split_fractions) - 1.0) > 1e-6:
            raise SynthError(
                f"split fractions must sum to 1, got {self.split_fractions}")
        if self.n_clips < 3:
            raise SynthError("need at least one clip per split")
        if self.contrast_threshold <= 0:
            raise SynthError("contrast threshold must be positive")

    def split_counts(self) -> tuple[int, int, int]:
        train = round(self.n_clips * self.split_fractions[0])
        dev = round(self.n_clips * self.split_fractions[1])
        test = self.n_clips - train - dev
        if min(train, dev, test) < 1:
            raise SynthError("split fractions leave an empty split")
        return train, dev, test


def make_gloss_vocab(n_glosses: int, seed: int) -> list[GlossTemplate]:
    """Seeded distinct stroke templates, 3-4 waypoints each."""
    if n_glosses < 2:
        raise SynthError("need at least 2 glosses")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x61_76]))
    templates: list[GlossTemplate] = []
    seen: set[tuple] = set()
    for gid in range(n_glosses):
        while True:
            n_points = int(rng.integers(3, 5))
            pts = []
            for _ in range(n_points):
                for _attempt in range(100):
                    cand = tuple(np.round(rng.uniform(0.15, 0.85, size=2), 4))
                    if not pts or math.dist(cand, pts[-1]) > 0.25:
                        pts.append(cand)
                        break
                else:
                    raise SynthError("failed to place distinct waypoints")
            key = tuple(pts)
            if key not in seen:
                seen.add(key)
                break
        duration = float(rng.uniform(260.0, 400.0))
        templates.append(GlossTemplate(gid, tuple(pts), round(duration, 1)))
    return templates


def _dot_pixels(cx: float, cy: float, radius: float, res: int) -> set[tuple[int, int]]:
    out = set()
    r = int(math.ceil(radius))
    ix, iy = int(math.floor(cx)), int(math.floor(cy))
    for y in range(max(0, iy - r), min(res, iy + r + 2)):
        for x in range(max(0, ix - r), min(res, ix + r + 2)):
            if (x + 0.5 - cx) ** 2 + (y + 0.5 - cy) ** 2 <= radius * radius:
                out.add((y, x))
    return out


def _polyline_point(waypoints, s: float) -> tuple[float, float]:
    """Point at arc-length fraction s in [0, 1] along the polyline."""
    pts = np.asarray(waypoints, dtype=np.float64)
    seg_len = np.sqrt(((pts[1:] - pts[:-1]) ** 2).sum(axis=1))
    total = seg_len.sum()
    if total == 0:
        return float(pts[0][0]), float(pts[0][1])
    target = s * total
    acc = 0.0
    for i, sl in enumerate(seg_len):
        if acc + sl >= target or i == len(seg_len) - 1:
            u = 0.0 if sl == 0 else (target - acc) / sl
            p = pts[i] + u * (pts[i + 1] - pts[i])
            return float(p[0]), float(p[1])
        acc += sl
    return float(pts[-1][0]), float(pts[-1][1])


def emit_events(template: GlossTemplate, resolution: int,
                contrast_threshold: float, dt_us: int,
                dot_radius: float = 1.3,
                offset_px: tuple[float, float] = (0.0, 0.0)) -> EventStream:
    """Trace the stroke and emit threshold-crossing events.

    The scene is a dark background with one bright dot; a pixel's log
    intensity steps by LOG_CONTRAST while covered. Each dt step emits one
    event per full threshold crossing, reference updated by the threshold,
    so doubling the threshold can only reduce the event count.
    """
    if contrast_threshold <= 0:
        raise SynthError("contrast threshold must be positive")
    if resolution < 8:
        raise SynthError("resolution must be at least 8x8")
    if template.duration_ms <= 0:
        raise SynthError("zero-length trajectory duration")
    theta = contrast_threshold
    n_steps = max(2, int(round(template.duration_ms * 1000.0 / dt_us)))
    ref = np.zeros((resolution, resolution), dtype=np.float64)
    covered_prev: set[tuple[int, int]] = set()
    ts, xs, ys, ps = [], [], [], []

    def dot_at(step: int) -> set[tuple[int, int]]:
        s = step / (n_steps - 1)
        ux, uy = _polyline_point(template.waypoints, s)
        cx = ux * (resolution - 1) + 0.5 + offset_px[0]
        cy = uy * (resolution - 1) + 0.5 + offset_px[1]
        return _dot_pixels(cx, cy, dot_radius, resolution)

    for step in range(n_steps):
        covered = dot_at(step)
        if step == 0:
            # reference initialized to the first scene: no events at t=0
            for (y, x) in covered:
                ref[y, x] = LOG_CONTRAST
            covered_prev = covered
            continue
        t_now = step * dt_us
        changed = sorted(covered_prev ^ covered)
        for (y, x) in changed:
            level = LOG_CONTRAST if (y, x) in covered else 0.0
            while level - ref[y, x] >= theta:
                ts.append(t_now)
                xs.append(x)
                ys.append(y)
                ps.append(1)
                ref[y, x] += theta
            while ref[y, x] - level >= theta:
                ts.append(t_now)
                xs.append(x)
                ys.append(y)
                ps.append(-1)
                ref[y, x] -= theta
        covered_prev = covered
    return EventStream.from_arrays(ts, xs, ys, ps, resolution, resolution)


def compose_clip(gloss_ids, gap_ms: float, config: SynthConfig,
                 templates: list[GlossTemplate],
                 rng: np.random.Generator | None = None
                 ) -> tuple[EventStream, list[int]]:
    """Concatenate per-gloss streams with silent gaps.

    Per-instance spatial jitter (if configured) comes from `rng`; without
    one the composition is the plain deterministic concatenation.
    """
    gloss_ids = list(gloss_ids)
    if not (1 <= len(gloss_ids) <= config.max_seq):
        raise SynthError(f"clip must contain 1..{config.max_seq} glosses")
    by_id = {t.gloss_id: t for t in templates}
    ts, xs, ys, ps = [], [], [], []
    offset_us = 0
    for gid in gloss_ids:
        if gid not in by_id:
            raise SynthError(f"unknown gloss id {gid}")
        jitter = (0.0, 0.0)
        if rng is not None and config.jitter_px > 0:
            jitter = tuple(rng.uniform(-config.jitter_px, config.jitter_px, size=2))
        part = emit_events(by_id[gid], config.resolution,
                           config.contrast_threshold, config.dt_us,
                           dot_radius=config.dot_radius, offset_px=jitter)
        ts.append(part.t + offset_us)
        xs.append(part.x)
        ys.append(part.y)
        ps.append(part.p)
        duration_us = int(round(by_id[gid].duration_ms * 1000))
        offset_us += duration_us + int(round(gap_ms * 1000))
    stream = EventStream.from_arrays(
        np.concatenate(ts), np.concatenate(xs), np.concatenate(ys),
        np.concatenate(ps), config.resolution, config.resolution)
    return stream, gloss_ids


def build_word_mapping(n_glosses: int, seed: int) -> dict[int, tuple[str, ...]]:
    """Injective gloss -> 1-2 word expansion, seeded."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x77_6D]))
    function_words = ["so", "na", "ke"]
    mapping: dict[int, tuple[str, ...]] = {}
    for gid in range(n_glosses):
        words = [f"w{gid:02d}"]
        if rng.random() < 0.5:
            words.append(function_words[int(rng.integers(0, len(function_words)))])
        mapping[gid] = tuple(words)
    return mapping


def gloss_to_words(gloss_ids, mapping: dict[int, tuple[str, ...]]) -> list[str]:
    out: list[str] = []
    for gid in gloss_ids:
        if gid not in mapping:
            raise SynthError(f"gloss {gid} outside mapping")
        out.extend(mapping[gid])
    return out


@dataclass
class ClipRecord:
    path: str
    glosses: list[int]
    words: list[int]


@dataclass
class Corpus:
    root: Path
    gloss_vocab: list[str]
    word_vocab: list[str]
    mapping: dict[int, tuple[str, ...]]
    splits: dict[str, list[ClipRecord]]
    seed: int

    def clip_path(self, record: ClipRecord) -> Path:
        return self.root / record.path


def _word_vocab_from_mapping(mapping: dict[int, tuple[str, ...]]) -> list[str]:
    specials = ["<bos>", "<eos>", "<pad>", "<unk>"]
    seen: list[str] = []
    for gid in sorted(mapping):
        for w in mapping[gid]:
            if w not in seen:
                seen.append(w)
    return specials + seen


def generate_corpus(config: SynthConfig, seed: int, out_dir: str | Path) -> Corpus:
    """Write event files plus a JSON manifest; byte-reproducible per seed."""
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    templates = make_gloss_vocab(config.n_glosses, seed)
    mapping = build_word_mapping(config.n_glosses, seed)
    gloss_vocab = [f"G{gid:02d}" for gid in range(config.n_glosses)]
    word_vocab = _word_vocab_from_mapping(mapping)
    word_id = {w: i for i, w in enumerate(word_vocab)}

    counts = config.split_counts()
    names = ("train", "dev", "test")
    splits: dict[str, list[ClipRecord]] = {name: [] for name in names}
    clip_index = 0
    for name, count in zip(names, counts):
        (out / name).mkdir(exist_ok=True)
        for _ in range(count):
            rng = np.random.default_rng(np.random.SeedSequence([seed, 1, clip_index]))
            n = int(rng.integers(config.min_seq, config.max_seq + 1))
            ids: list[int] = []
            for _k in range(n):
                # no immediate repeats: keeps every clip CTC-feasible
                while True:
                    gid = int(rng.integers(0, config.n_glosses))
                    if not ids or gid != ids[-1]:
                        break
                ids.append(gid)
            gap = float(rng.uniform(config.gap_ms * 0.8, config.gap_ms * 1.2))
            stream, gloss_seq = compose_clip(ids, gap, config, templates, rng=rng)
            rel = f"{name}/clip{clip_index:05d}.evs"
            (out / rel).write_bytes(write_event_file(stream))
            words = gloss_to_words(gloss_seq, mapping)
            splits[name].append(ClipRecord(
                path=rel, glosses=gloss_seq, words=[word_id[w] for w in words]))
            clip_index += 1

    manifest = {
        "format": "evsign-corpus v1",
        "seed": seed,
        "config": {
            "n_glosses": config.n_glosses,
            "resolution": config.resolution,
            "n_clips": config.n_clips,
            "split_fractions": list(config.split_fractions),
            "min_seq": config.min_seq,
            "max_seq": config.max_seq,
            "gap_ms": config.gap_ms,
            "contrast_threshold": config.contrast_threshold,
            "dt_us": config.dt_us,
            "dot_radius": config.dot_radius,
            "jitter_px": config.jitter_px,
        },
        "gloss_vocab": gloss_vocab,
        "word_vocab": word_vocab,
        "mapping": {str(gid): list(words) for gid, words in mapping.items()},
        "splits": {
            name: [{"path": r.path, "glosses": r.glosses, "words": r.words}
                   for r in records]
            for name, records in splits.items()
        },
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return Corpus(out, gloss_vocab, word_vocab, mapping, splits, seed)


def load_corpus(root: str | Path) -> Corpus:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    mapping = {int(g): tuple(ws) for g, ws in manifest["mapping"].items()}
    splits = {
        name: [ClipRecord(r["path"], list(r["glosses"]), list(r["words"]))
               for r in records]
        for name, records in manifest["splits"].items()
    }
    return Corpus(root, manifest["gloss_vocab"], manifest["word_vocab"],
                  mapping, splits, manifest["seed"])
