"""Training loop, scoring rules and the attention/embedding statistics."""

from __future__ import annotations

import json
import math
import os
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from . import vocab
from .dataset import Sample, label_of, read_dataset
from .model import ModelConfig, ToyVLM, save_checkpoint
from .optim import AdamHyper, AdamW, cosine_lr
from .supervision import Batch, extract_visual_attention, total_loss
from .textfmt import dump_kv, load_kv

REGIMES = ("ntp", "ntp+klal")
POINT_TOLERANCE = 3.0


class TrainingDiverged(RuntimeError):
    """The loss became non-finite; the last good checkpoint is kept."""


@dataclass(frozen=True)
class TrainConfig:
    regime: str = "ntp+klal"
    lam: float = 1.0
    steps: int = 3000
    batch_size: int = 16
    lr: float = 3e-4
    warmup: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    layers: int = 4
    heads: int = 4
    d_model: int = 128
    mlp_ratio: int = 4
    dtype: str = "float64"
    klal_layers: str = ""  # comma-separated layer indices; empty = all
    train_path: str = ""
    test_path: str = ""
    eval_every: int = 0  # 0 = only at the end
    checkpoint_dir: str = ""

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")

    @property
    def effective_lam(self) -> float:
        return self.lam if self.regime == "ntp+klal" else 0.0

    @property
    def layer_subset(self) -> list[int] | None:
        return [int(x) for x in self.klal_layers.split(",")] if self.klal_layers else None

    def model_config(self, sample: Sample | None = None) -> ModelConfig:
        max_seq = 96 if sample is None else max(96, len(sample.layout))
        grid = 8 if sample is None else int(round(math.sqrt(sample.layout.visual_len)))
        patch = 8 if sample is None else sample.image.width // grid
        return ModelConfig(
            layers=self.layers,
            heads=self.heads,
            d_model=self.d_model,
            mlp_ratio=self.mlp_ratio,
            patch=patch,
            grid_rows=grid,
            grid_cols=grid,
            max_seq=max_seq,
            seed=self.seed,
            dtype=self.dtype,
        )

    def to_text(self) -> str:
        return dump_kv(asdict(self))

    @classmethod
    def from_text(cls, text: str, **overrides) -> TrainConfig:
        raw = load_kv(text)
        kinds = {f.name: f.type for f in fields(cls)}
        unknown = set(raw) - set(kinds)
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        cast = {"int": int, "float": float, "str": str}
        values = {k: cast[kinds[k]](v) for k, v in raw.items()}
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass
class TrainResult:
    model: ToyVLM
    init: ToyVLM
    log: list[dict]
    rejected_steps: int = 0


def batch_order(n: int, steps: int, batch_size: int, seed: int) -> list[np.ndarray]:
    """Index batches from seeded epoch-wise permutations."""
    rng = np.random.default_rng([seed, 1])
    out: list[np.ndarray] = []
    perm = rng.permutation(n)
    pos = 0
    while len(out) < steps:
        if pos + batch_size > n:
            perm = rng.permutation(n)
            pos = 0
        out.append(perm[pos : pos + batch_size])
        pos += batch_size
    return out


def train(cfg: TrainConfig, train_set: Sequence[Sample] | None = None, test_set: Sequence[Sample] | None = None, init: ToyVLM | None = None) -> TrainResult:
    """Mini-batch AdamW on NTP (+ lam * KLAL); deterministic for a fixed config."""
    if train_set is None:
        train_set = read_dataset(cfg.train_path)
    if test_set is None and cfg.test_path and cfg.eval_every:
        test_set = read_dataset(cfg.test_path)
    if not train_set:
        raise ValueError("training set is empty")
    init = init or ToyVLM(cfg.model_config(train_set[0]))
    model = init.copy()
    params = model.parameters()
    decay = [p.ndim == 2 for p in params]
    opt = AdamW(params, AdamHyper(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay), decay_mask=decay)
    lam = cfg.effective_lam
    out_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(init, out_dir / "init.ckpt")
        save_checkpoint(model, out_dir / "last_good.ckpt")
        log_file = open(out_dir / "metrics.jsonl", "w", encoding="utf-8")
    log: list[dict] = []
    try:
        for step, idx in enumerate(batch_order(len(train_set), cfg.steps, cfg.batch_size, cfg.seed)):
            batch = Batch.from_samples([train_set[i] for i in idx])
            out = model.forward(batch.inputs, batch.images, batch.visual_start)
            loss, parts = total_loss(out, batch, lam, cfg.layer_subset)
            if not math.isfinite(parts.total):
                raise TrainingDiverged(f"non-finite loss at step {step}; last good checkpoint kept")
            opt.zero_grad()
            loss.backward()
            lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.warmup)
            opt.step(lr)
            record = {"step": step, "ntp": parts.ntp, "klal": parts.klal, "total": parts.total, "lr": lr}
            log.append(record)
            if out_dir:
                log_file.write(json.dumps(record) + "\n")
            if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
                if out_dir:
                    save_checkpoint(model, out_dir / "last_good.ckpt")
                if test_set:
                    rep = evaluate(model, test_set, base=init)
                    entry = {"step": step, "eval": rep.summary()}
                    log.append(entry)
                    if out_dir:
                        log_file.write(json.dumps(entry) + "\n")
    finally:
        if out_dir:
            log_file.close()
    if out_dir:
        save_checkpoint(model, out_dir / "final.ckpt")
        save_checkpoint(model, out_dir / "last_good.ckpt")
    return TrainResult(model, init, log, opt.state.rejected)


# -- scoring ----------------------------------------------------------------------
def parse_answer(task: str, ids: Sequence[int]):
    """Decoded ids -> task answer, or None if unparseable."""
    words = vocab.decode(ids)
    if task == "intersection":
        return int(words[0]) if len(words) == 1 and words[0] in vocab.DIGITS else None
    if task == "tracing":
        return words[0] if len(words) == 1 and words[0] in vocab.ANSWERS else None
    if task == "gridpatch":
        if len(words) == 2 and all(w in vocab.COORDS for w in words):
            return int(words[0][1:]), int(words[1][1:])
        return None
    raise ValueError(f"unknown task {task!r}")


def score_count(pred, truth: int) -> bool:
    return pred is not None and pred == truth


def score_yes_no(pred, truth: str) -> bool:
    return pred is not None and pred == truth


def score_point(pred, truth, tol: float = POINT_TOLERANCE) -> bool:
    if pred is None:
        return False
    return math.dist(pred, truth) < tol


def is_correct(task: str, pred, truth) -> bool:
    if task == "intersection":
        return score_count(pred, truth)
    if task == "tracing":
        return score_yes_no(pred, truth)
    return score_point(pred, truth)


def _groups(samples: Sequence[Sample], chunk: int):
    by_shape = defaultdict(list)
    for i, s in enumerate(samples):
        by_shape[(s.task, s.layout.prefix_len, len(s.layout))].append(i)
    for key in sorted(by_shape):
        idx = by_shape[key]
        for k in range(0, len(idx), chunk):
            yield idx[k : k + chunk]


def predict(model: ToyVLM, samples: Sequence[Sample], chunk: int = 64) -> list:
    """Greedy-decode and parse every sample (None when unparseable)."""
    preds: list = [None] * len(samples)
    for idx in _groups(samples, chunk):
        group = [samples[i] for i in idx]
        prefix = np.stack([s.layout.prefix() for s in group])
        images = np.stack([s.image.array() for s in group])
        max_new = len(group[0].layout.answer) + 1
        answers = model.greedy_decode(prefix, images, group[0].layout.visual_start, max_new)
        for i, ans in zip(idx, answers):
            preds[i] = parse_answer(samples[i].task, ans)
    return preds


def evaluate_accuracy(model: ToyVLM, samples: Sequence[Sample]) -> dict[str, float]:
    preds = predict(model, samples)
    hits: dict[str, list[bool]] = defaultdict(list)
    for s, p in zip(samples, preds):
        hits[s.task].append(is_correct(s.task, p, label_of(s)))
    return {task: float(np.mean(v)) for task, v in sorted(hits.items())}


# -- attention and embedding statistics ----------------------------------------------
def visual_attention(model: ToyVLM, samples: Sequence[Sample], chunk: int = 64) -> np.ndarray:
    """(S, L, n_visual) head-averaged visual attention at each sample's anchor."""
    out = [None] * len(samples)
    with T.no_grad():
        for idx in _groups(samples, chunk):
            batch = Batch.from_samples([samples[i] for i in idx])
            fwd = model.forward(batch.inputs, batch.images, batch.visual_start)
            q = extract_visual_attention(fwd.attentions, batch.visual_start, batch.visual_len, batch.anchors).data
            for j, i in enumerate(idx):
                out[i] = q[j]
    return np.stack(out)


def ratio_from_attention(q: np.ndarray, targets: Sequence[int]) -> np.ndarray:
    """Mean attention on targets over mean attention on all visual tokens, per layer."""
    q = np.asarray(q)
    return q[..., list(targets)].mean(axis=-1) / q.mean(axis=-1)


@dataclass
class RatioStats:
    per_layer_mean: list[float]
    per_layer_sd: list[float]
    mean: float  # mean over samples of the layer-mean ratio
    sd: float
    per_sample: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))


def attention_ratio(model: ToyVLM, samples: Sequence[Sample]) -> RatioStats:
    q = visual_attention(model, samples)
    ratios = np.stack([ratio_from_attention(q[i], s.targets) for i, s in enumerate(samples)])  # (S, L)
    layer_mean = ratios.mean(axis=1)
    return RatioStats(
        per_layer_mean=[float(x) for x in ratios.mean(axis=0)],
        per_layer_sd=[float(x) for x in ratios.std(axis=0)],
        mean=float(layer_mean.mean()),
        sd=float(layer_mean.std()),
        per_sample=layer_mean,
    )


def target_hidden_norms(model: ToyVLM, samples: Sequence[Sample], chunk: int = 64) -> np.ndarray:
    """Per sample, mean L2 norm of final hidden states at the target visual positions."""
    out = np.zeros(len(samples))
    with T.no_grad():
        for idx in _groups(samples, chunk):
            batch = Batch.from_samples([samples[i] for i in idx])
            hidden = model.forward(batch.inputs, batch.images, batch.visual_start).hidden.data
            for j, i in enumerate(idx):
                pos = batch.visual_start + np.asarray(samples[i].targets)
                out[i] = np.linalg.norm(hidden[j, pos], axis=-1).mean()
    return out


def embedding_norm_ratio(after: ToyVLM, base: ToyVLM, samples: Sequence[Sample]) -> float:
    if after.cfg != base.cfg:
        raise ValueError("models have different configurations")
    return float(np.mean(target_hidden_norms(after, samples) / target_hidden_norms(base, samples)))


# -- reports ----------------------------------------------------------------------
@dataclass
class EvalReport:
    accuracy: dict[str, float]
    attention: RatioStats
    norm_ratio: float | None
    n: int
    confusion: dict[tuple[int, int], int]  # (truth, prediction) -> count; prediction -1 = unparseable

    def summary(self) -> dict:
        out: dict = {"n": self.n}
        for task, acc in self.accuracy.items():
            out[f"accuracy.{task}"] = acc
        out["attention_ratio.mean"] = self.attention.mean
        out["attention_ratio.sd"] = self.attention.sd
        for l, (m, s) in enumerate(zip(self.attention.per_layer_mean, self.attention.per_layer_sd)):
            out[f"attention_ratio.layer{l}.mean"] = m
            out[f"attention_ratio.layer{l}.sd"] = s
        if self.norm_ratio is not None:
            out["embedding_norm_ratio"] = self.norm_ratio
        for (truth, pred), c in sorted(self.confusion.items()):
            out[f"confusion.{truth}.{pred}"] = c
        return out

    def to_text(self) -> str:
        return dump_kv(self.summary())


def evaluate(model: ToyVLM, samples: Sequence[Sample], base: ToyVLM | None = None) -> EvalReport:
    preds = predict(model, samples)
    hits: dict[str, list[bool]] = defaultdict(list)
    confusion: dict[tuple[int, int], int] = defaultdict(int)
    for s, p in zip(samples, preds):
        truth = label_of(s)
        hits[s.task].append(is_correct(s.task, p, truth))
        if s.task == "intersection":
            confusion[(truth, -1 if p is None else p)] += 1
    accuracy = {task: float(np.mean(v)) for task, v in sorted(hits.items())}
    norm = embedding_norm_ratio(model, base, samples) if base is not None else None
    return EvalReport(accuracy, attention_ratio(model, samples), norm, len(samples), dict(confusion))


# -- paired regimes ------------------------------------------------------------------
@dataclass
class RegimeRun:
    seed: int
    regime: str
    report: EvalReport
    final_loss: float


@dataclass
class Comparison:
    runs: list[RegimeRun]

    def by(self, regime: str) -> list[RegimeRun]:
        return sorted((r for r in self.runs if r.regime == regime), key=lambda r: r.seed)

    def deltas(self, key: str) -> np.ndarray:
        a = self.by("ntp+klal")
        b = self.by("ntp")
        return np.array([x.report.summary()[key] - y.report.summary()[key] for x, y in zip(a, b)])

    def summary(self) -> dict:
        out: dict = {}
        keys = [k for k in self.runs[0].report.summary() if not k.startswith("confusion")]
        for regime in REGIMES:
            for run in self.by(regime):
                for k in keys:
                    out[f"{regime}.seed{run.seed}.{k}"] = run.report.summary()[k]
        for k in keys:
            if k == "n":
                continue
            d = self.deltas(k)
            out[f"delta.{k}.mean"] = float(d.mean())
            out[f"delta.{k}.sd"] = float(d.std())
        return out

    def to_text(self) -> str:
        return dump_kv(self.summary())


def _run_one(args) -> RegimeRun:
    cfg, train_set, test_set = args
    res = train(cfg, train_set, test_set)
    report = evaluate(res.model, test_set, base=res.init)
    if cfg.checkpoint_dir:
        Path(cfg.checkpoint_dir, "report.txt").write_text(report.to_text(), encoding="utf-8")
    return RegimeRun(cfg.seed, cfg.regime, report, res.log[-1]["total"] if res.log else float("nan"))


def compare_regimes(
    cfg: TrainConfig, seeds: Sequence[int], train_set: Sequence[Sample], test_set: Sequence[Sample], workers: int | None = None
) -> Comparison:
    """Train NTP and NTP+KLAL from the same initialisation for each seed."""
    jobs = []
    for seed in seeds:
        for regime in REGIMES:
            ckpt = str(Path(cfg.checkpoint_dir, f"{regime}-seed{seed}")) if cfg.checkpoint_dir else ""
            jobs.append((replace(cfg, seed=seed, regime=regime, checkpoint_dir=ckpt), train_set, test_set))
    workers = workers or int(os.environ.get("KLAL_THREADS", "1"))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_run_one, jobs))
    else:
        runs = [_run_one(j) for j in jobs]
    return Comparison(runs)
