"""Task samples, token layouts and the on-disk dataset format.

Manifest layout (``manifest.txt``, UTF-8, one record per line)::

    klal-dataset v1
    id  task  image  system  visual  instruction  answer  targets  gt  label  seed

Fields are tab-separated in exactly that order.  ``system``,
``instruction``, ``answer`` and ``targets`` are comma-separated integers;
``visual`` is ``start:length``; ``gt`` holds comma-separated decimals with
nine places; ``label`` is the task answer as text (``3``, ``yes``,
``2,5``); ``image`` is a path relative to the dataset directory pointing at
a binary PPM file.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import vocab
from .geometry import (
    GraphConfig,
    PatchGrid,
    PolylineConfig,
    connected,
    count_intersections,
    gen_graph,
    gen_polyline_pair,
    point_to_patch,
    trace_polyline_patches,
)
from .gtmap import DEFAULT_SMOOTHING, Smoothing, build_gt_map
from .raster import Image, Scene, Style, rasterize, read_ppm, write_png, write_ppm

MANIFEST = "manifest.txt"
HEADER = "klal-dataset v1"
TASKS = ("intersection", "tracing", "gridpatch")
GT_PLACES = 9


class DatasetFormatError(ValueError):
    """A manifest line could not be parsed."""


@dataclass(frozen=True)
class TokenLayout:
    """[system, visual, instruction, answer]; the answer ends with EOS."""

    system: tuple[int, ...]
    visual_start: int
    visual_len: int
    instruction: tuple[int, ...]
    answer: tuple[int, ...]

    def __post_init__(self):
        if self.visual_start != len(self.system):
            raise ValueError("visual span must follow the system tokens")
        if not self.answer:
            raise ValueError("answer must be non-empty")

    @property
    def visual_end(self) -> int:
        return self.visual_start + self.visual_len

    @property
    def prefix_len(self) -> int:
        return self.visual_end + len(self.instruction)

    def __len__(self) -> int:
        return self.prefix_len + len(self.answer)

    def tokens(self) -> np.ndarray:
        """Full id sequence with ``<img>`` placeholders on the visual span."""
        return np.array(self.system + (vocab.IMG,) * self.visual_len + self.instruction + self.answer, dtype=np.int64)

    def prefix(self) -> np.ndarray:
        return self.tokens()[: self.prefix_len]

    @property
    def content_answer(self) -> tuple[int, ...]:
        return self.answer[:-1] if self.answer[-1] == vocab.EOS and len(self.answer) > 1 else self.answer

    @property
    def anchor(self) -> int:
        """Query position that emits the last content answer token.

        Under teacher forcing the logits at position t score token t + 1, so
        this is the row of each attention matrix that produces the final
        answer token.
        """
        return self.prefix_len + len(self.content_answer) - 2


@dataclass(frozen=True)
class Sample:
    id: str
    task: str
    image: Image
    image_path: str
    layout: TokenLayout
    targets: tuple[int, ...]
    gt_map: tuple[float, ...]
    label: str
    seed: int

    def gt_array(self) -> np.ndarray:
        return np.array(self.gt_map)


@dataclass(frozen=True)
class ForgeConfig:
    image: int = 64
    patch: int = 8
    smoothing: Smoothing = DEFAULT_SMOOTHING
    style: Style = Style()
    polyline: PolylineConfig = PolylineConfig()
    graph: GraphConfig = GraphConfig()
    max_count: int = 3
    questions_per_image: int = 5

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid(self.image, self.image, self.patch)


def quantize_map(values: np.ndarray, places: int = GT_PLACES) -> tuple[float, ...]:
    """Round to ``places`` decimals keeping the exact decimal sum at one.

    Largest-remainder rounding in units of 10**-places, so the stored text and
    the in-memory floats agree bit for bit after a round trip.
    """
    unit = 10**places
    scaled = np.asarray(values, dtype=float) * unit
    floors = np.floor(scaled).astype(np.int64)
    short = unit - int(floors.sum())
    order = np.argsort(-(scaled - floors), kind="stable")
    floors[order[:short]] += 1
    return tuple(int(n) / unit for n in floors)


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _layout(cfg: ForgeConfig, instruction: str, answer: Sequence[str]) -> TokenLayout:
    system = vocab.encode(vocab.SYSTEM_PROMPT)
    return TokenLayout(system, len(system), cfg.grid.size, vocab.encode(instruction), vocab.encode(list(answer) + ["<eos>"]))


def _finish(sid, task, image, layout, targets, cfg: ForgeConfig, label, seed, image_path=None) -> Sample:
    gt = build_gt_map(targets, cfg.grid, cfg.smoothing)
    return Sample(
        id=sid,
        task=task,
        image=image,
        image_path=image_path or f"images/{sid}.ppm",
        layout=layout,
        targets=tuple(sorted(set(targets))),
        gt_map=quantize_map(gt.values),
        label=label,
        seed=seed,
    )


# -- Line Intersection ------------------------------------------------------------
def make_intersection_sample(seed: int, count: int, cfg: ForgeConfig = ForgeConfig(), sid: str | None = None) -> Sample:
    red, blue = gen_polyline_pair(seed, count, cfg.polyline)
    hits = count_intersections(red, blue)
    grid = cfg.grid
    if hits.count:
        targets = {point_to_patch(p, grid) for p in hits.points}
    else:
        # nothing to point at: supervise towards both curves instead
        targets = set(trace_polyline_patches(red, grid)) | set(trace_polyline_patches(blue, grid))
    image = rasterize(Scene(cfg.image, cfg.image, strokes=[red, blue]), cfg.style)
    layout = _layout(cfg, vocab.INTERSECTION_PROMPT, [str(hits.count)])
    return _finish(sid or f"intersection-{seed}", "intersection", image, layout, targets, cfg, str(hits.count), seed)


# -- Line Tracing -----------------------------------------------------------------
def make_tracing_sample(
    seed: int, node_pair: tuple[str, str], cfg: ForgeConfig = ForgeConfig(), sid: str | None = None, image_path: str | None = None
) -> Sample:
    scene = gen_graph(seed, cfg.graph)
    a, b = node_pair
    i, j = scene.node_index(a), scene.node_index(b)
    if i == j:
        raise ValueError("a node is trivially connected to itself")
    grid = cfg.grid
    yes = connected(scene, i, j)
    if yes:
        targets = trace_polyline_patches(scene.paths[scene.edge_between(i, j)], grid)
    else:
        targets = [point_to_patch(scene.nodes[k].center, grid) for k in (i, j)]
    image = rasterize(Scene.from_graph(scene), cfg.style)
    layout = _layout(cfg, vocab.TRACING_PROMPT.format(a=a, b=b), ["yes" if yes else "no"])
    sid = sid or f"tracing-{seed}-{a}{b}"
    return _finish(sid, "tracing", image, layout, targets, cfg, "yes" if yes else "no", seed, image_path)


def tracing_questions(seed: int, cfg: ForgeConfig, want_yes: Sequence[bool]) -> list[tuple[str, str]]:
    """Ordered node pairs for one image, matching the requested answers."""
    scene = gen_graph(seed, cfg.graph)
    labels = [n.label for n in scene.nodes]
    yes_pairs = [(labels[u], labels[v]) for u, v in scene.edges] + [(labels[v], labels[u]) for u, v in scene.edges]
    no_pairs = [
        (labels[u], labels[v])
        for u in range(len(labels))
        for v in range(len(labels))
        if u != v and not connected(scene, u, v)
    ]
    rng = np.random.default_rng([seed, 31])
    pools = {
        True: [yes_pairs[k] for k in rng.permutation(len(yes_pairs))],
        False: [no_pairs[k] for k in rng.permutation(len(no_pairs))],
    }
    used = {True: 0, False: 0}
    out = []
    for want in want_yes:
        pool = pools[bool(want)]
        out.append(pool[used[bool(want)] % len(pool)])
        used[bool(want)] += 1
    return out


# -- Grid Patch -------------------------------------------------------------------
def make_gridpatch_sample(seed: int, cfg: ForgeConfig = ForgeConfig(), sid: str | None = None) -> Sample:
    grid = cfg.grid
    rng = np.random.default_rng([seed, 101])
    row, col = int(rng.integers(grid.rows)), int(rng.integers(grid.cols))
    p = grid.patch
    scene = Scene(cfg.image, cfg.image, cells=[(col * p, row * p, (col + 1) * p, (row + 1) * p, "red")], grid=grid)
    image = rasterize(scene, cfg.style)
    layout = _layout(cfg, vocab.GRIDPATCH_PROMPT, [f"c{row}", f"c{col}"])
    return _finish(sid or f"gridpatch-{seed}", "gridpatch", image, layout, [grid.index(row, col)], cfg, f"{row},{col}", seed)


# -- whole datasets ---------------------------------------------------------------
def make_dataset(task: str, n: int, seed: int, cfg: ForgeConfig = ForgeConfig(), offset: int = 0) -> list[Sample]:
    """``n`` samples with indices ``offset .. offset + n - 1``.

    Intersection counts cycle through 0..max_count so the classes stay
    balanced; tracing emits ``questions_per_image`` questions per image with
    alternating Yes/No answers across the whole dataset.
    """
    if task == "intersection":
        return [
            make_intersection_sample(sample_seed(seed, k), k % (cfg.max_count + 1), cfg, sid=f"intersection-{k:06d}")
            for k in range(offset, offset + n)
        ]
    if task == "gridpatch":
        return [make_gridpatch_sample(sample_seed(seed, k), cfg, sid=f"gridpatch-{k:06d}") for k in range(offset, offset + n)]
    if task == "tracing":
        q = cfg.questions_per_image
        out: list[Sample] = []
        for img in range(offset // q, (offset + n + q - 1) // q + 1):
            s = sample_seed(seed, img)
            pairs = tracing_questions(s, cfg, [(img * q + j) % 2 == 0 for j in range(q)])
            path = f"images/tracing-{img:06d}.ppm"
            for j, pair in enumerate(pairs):
                if offset <= img * q + j < offset + n:
                    out.append(make_tracing_sample(s, pair, cfg, sid=f"tracing-{img:06d}-{j}", image_path=path))
        return out
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


def split_counts(total: int, train_fraction: float = 0.8) -> tuple[int, int]:
    n_train = int(round(total * train_fraction))
    return n_train, total - n_train


# -- label parsing ---------------------------------------------------------------
def label_of(sample: Sample):
    if sample.task == "intersection":
        return int(sample.label)
    if sample.task == "tracing":
        return sample.label
    r, c = sample.label.split(",")
    return int(r), int(c)


# -- serialisation ----------------------------------------------------------------
def _ints(xs: Iterable[int]) -> str:
    return ",".join(str(int(x)) for x in xs)


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",")) if text else ()


def format_record(s: Sample) -> str:
    lay = s.layout
    fields = [
        s.id,
        s.task,
        s.image_path,
        _ints(lay.system),
        f"{lay.visual_start}:{lay.visual_len}",
        _ints(lay.instruction),
        _ints(lay.answer),
        _ints(s.targets),
        ",".join(f"{v:.{GT_PLACES}f}" for v in s.gt_map),
        s.label,
        str(s.seed),
    ]
    return "\t".join(fields)


def parse_record(line: str, lineno: int, root: Path | None = None, images: dict | None = None) -> Sample:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 11:
        raise DatasetFormatError(f"line {lineno}: expected 11 fields, found {len(parts)}")
    try:
        sid, task, image_path, system, visual, instruction, answer, targets, gt, label, seed = parts
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}")
        start, length = (int(v) for v in visual.split(":"))
        layout = TokenLayout(_parse_ints(system), start, length, _parse_ints(instruction), _parse_ints(answer))
        gt_map = tuple(float(v) for v in gt.split(","))
        if len(gt_map) != length:
            raise ValueError(f"gt map has {len(gt_map)} values for {length} visual tokens")
        if root is not None:
            cache = images if images is not None else {}
            if image_path not in cache:
                cache[image_path] = read_ppm(root / image_path)
            image = cache[image_path]
        else:
            image = Image.blank(1, 1)
        return Sample(sid, task, image, image_path, layout, _parse_ints(targets), gt_map, label, int(seed))
    except (ValueError, OSError) as exc:
        raise DatasetFormatError(f"line {lineno}: {exc}") from exc


def write_dataset(samples: Sequence[Sample], directory, png: bool = False) -> Path:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    written = set()
    lines = [HEADER]
    for s in samples:
        if s.image_path not in written:
            write_ppm(directory / s.image_path, s.image)
            if png:
                write_png((directory / s.image_path).with_suffix(".png"), s.image)
            written.add(s.image_path)
        lines.append(format_record(s))
    path = directory / MANIFEST
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_dataset(directory) -> list[Sample]:
    directory = Path(directory)
    text = (directory / MANIFEST).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines[0] != HEADER:
        raise DatasetFormatError(f"line 1: unsupported header {lines[0]!r}, expected {HEADER!r}")
    if text and not text.endswith("\n"):
        raise DatasetFormatError(f"line {len(lines)}: truncated record (no trailing newline)")
    images: dict = {}
    return [parse_record(line, k + 1, directory, images) for k, line in enumerate(lines[1:], start=1) if line]
