"""Synthetic multi-image QA instances and desk-scale experiments.

Generator model
---------------
Per instance an orthonormal basis is drawn: one *category* direction (what
the question is about) and one *answer* direction per option. The object
behind answer ``o`` looks like ``normalize(category + answer_o)``.

* Relevant images hold a contiguous hotspot of tokens
  ``signal_strength * content + noise_sigma * eps``; everything else is
  ``noise_sigma * eps`` apart from ``clutter_tokens`` isolated cells showing
  wrong-option objects. Clutter shares the category with the caption, so it
  responds strongly at the token level while lying outside the hotspot.
  Caption rows are the content direction plus ``caption_noise`` jitter.
* Distractors are either all-zero ("blank") grids with no caption, or
  confusers: noise grids whose hotspot shows a wrong option's object at
  ``confuser_strength``.
* The question rows are ``category + question_noise * eps``.

Toy answerer
------------
Option ``o`` scores ``mean_t cos(o, t) + prior_weight * cos(o, q)`` where
``t`` runs over every retained visual token of every image and ``q`` is the
pooled question. The second term is a fixed-size text prior: it does not
shrink when blank tokens pad the visual mean, which is what lets padding
change the argmax at all.
"""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .anchor import AnchorBox, crop_tokens, select_optimal
from .baseline import gather_tokens, topk_retention
from .codecode import FusionConfig, beta, fuse
from .errors import ConfigError
from .respmap import RECTIFY_MODES, image_response_map, pool_text
from .tensorio import ImageEntry, InstanceBundle

DISTRACTOR_KINDS = ("blank", "noise")


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = 0
    grid_u: int = 4
    grid_v: int = 4
    dim: int = 32
    relevant_images: int = 2
    distractor_images: int = 4
    distractor_kind: str = "blank"
    replaced_confusers: int = 0
    hotspot_w: tuple[int, int] = (2, 3)
    hotspot_h: tuple[int, int] = (2, 3)
    signal_strength: float = 0.8
    noise_sigma: float = 0.3
    confuser_strength: float = 0.4
    clutter_tokens: int = 3
    caption_len: int = 4
    question_len: int = 8
    caption_noise: float = 0.1
    question_noise: float = 1.0
    prior_weight: float = 0.1
    use_captions: bool = True
    options: int = 4
    instances: int = 500
    score_temperature: float = 0.05
    rectify: str = "relu"

    def __post_init__(self):
        # JSON hands us lists
        for name in ("hotspot_w", "hotspot_h"):
            val = getattr(self, name)
            if isinstance(val, list):
                object.__setattr__(self, name, tuple(val))
        self.validate()

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(isinstance(self.seed, int) and 0 <= self.seed < 2**64, "seed must be a 64-bit unsigned integer")
        need(self.grid_u >= 1 and self.grid_v >= 1, "grid dims must be positive")
        need(self.options >= 2, "need at least two answer options")
        need(self.dim >= self.options + 1, "dim must exceed the option count")
        need(self.relevant_images >= 0 and self.distractor_images >= 0, "image counts must be >= 0")
        need(self.relevant_images + self.distractor_images >= 1, "instance needs at least one image")
        need(self.distractor_kind in DISTRACTOR_KINDS, f"distractor_kind must be one of {DISTRACTOR_KINDS}")
        need(
            0 <= self.replaced_confusers <= self.distractor_images,
            "replaced_confusers must lie in [0, distractor_images]",
        )
        need(
            self.replaced_confusers == 0 or self.distractor_kind == "noise",
            "replacement only applies to noise (confuser) distractors",
        )
        for name, hi in (("hotspot_w", self.grid_u), ("hotspot_h", self.grid_v)):
            lo_, hi_ = getattr(self, name)
            need(1 <= lo_ <= hi_ <= hi, f"{name} range must satisfy 1 <= lo <= hi <= grid size")
        need(0.0 < self.signal_strength <= 1.0, "signal_strength must lie in (0, 1]")
        need(
            0 <= self.clutter_tokens <= self.grid_u * self.grid_v - self.hotspot_w[1] * self.hotspot_h[1],
            "clutter_tokens must fit outside the largest hotspot",
        )
        for name in ("noise_sigma", "confuser_strength", "caption_noise", "question_noise", "prior_weight"):
            need(math.isfinite(getattr(self, name)) and getattr(self, name) >= 0, f"{name} must be >= 0")
        need(self.caption_len >= 1 and self.question_len >= 1, "text lengths must be positive")
        need(self.instances >= 1, "instances must be positive")
        need(self.score_temperature > 0, "score_temperature must be positive")
        need(self.rectify in RECTIFY_MODES, f"rectify must be one of {RECTIFY_MODES}")

    def replace(self, **kw) -> "GeneratorConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hotspot_w"] = list(self.hotspot_w)
        d["hotspot_h"] = list(self.hotspot_h)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        if not isinstance(d, dict):
            raise ConfigError("experiment config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass(frozen=True, eq=False)
class SyntheticInstance:
    bundle: InstanceBundle
    ground_truth: int
    hotspot_boxes: tuple[AnchorBox, ...]
    option_embeddings: np.ndarray  # [options, D], unit rows
    relevant: tuple[int, ...] = ()
    config: GeneratorConfig = field(default_factory=GeneratorConfig)


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x)


def _rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _hotspot_image(rng, cfg: GeneratorConfig, direction, strength, clutter=()):
    U, V, D = cfg.grid_u, cfg.grid_v, cfg.dim
    w = int(rng.integers(cfg.hotspot_w[0], cfg.hotspot_w[1] + 1))
    h = int(rng.integers(cfg.hotspot_h[0], cfg.hotspot_h[1] + 1))
    left = int(rng.integers(0, U - w + 1))
    top = int(rng.integers(0, V - h + 1))
    grid = cfg.noise_sigma * rng.standard_normal((V, U, D))
    grid[top : top + h, left : left + w] += strength * direction
    if len(clutter):
        outside = np.ones((V, U), dtype=bool)
        outside[top : top + h, left : left + w] = False
        cells = rng.choice(np.flatnonzero(outside), size=len(clutter), replace=False)
        for cell, cdir in zip(cells, clutter):
            grid[cell // U, cell % U] += strength * cdir
    caption = direction + cfg.caption_noise * rng.standard_normal((cfg.caption_len, D))
    box = AnchorBox(left, top, left + w - 1, top + h - 1)
    return grid, caption, box


def gen_instance(config: GeneratorConfig, index: int) -> SyntheticInstance:
    """Deterministic synthetic instance for ``(config.seed, index)``.

    Random draws happen in a fixed order (basis, answer, relevant images,
    question, confusers) so varying the number of blank distractors or
    replaced confusers leaves every other tensor unchanged.
    """
    cfg = config
    if index < 0:
        raise ConfigError("instance index must be >= 0")
    rng = _rng(cfg.seed, index)
    U, V, D = cfg.grid_u, cfg.grid_v, cfg.dim
    basis, _ = np.linalg.qr(rng.standard_normal((D, cfg.options + 1)))
    category = basis[:, 0]
    answers = basis[:, 1:].T.copy()
    gt = int(rng.integers(cfg.options))

    def content(o):
        return _unit(category + answers[o])

    images, boxes, relevant = [], [], []
    wrong = [o for o in range(cfg.options) if o != gt]
    for _ in range(cfg.relevant_images):
        clutter = [content(o) for o in rng.choice(wrong, size=cfg.clutter_tokens)]
        grid, cap, box = _hotspot_image(rng, cfg, content(gt), cfg.signal_strength, clutter)
        relevant.append(len(images))
        images.append((grid, cap if cfg.use_captions else None))
        boxes.append(box)

    question = category + cfg.question_noise * rng.standard_normal((cfg.question_len, D))

    for j in range(cfg.distractor_images):
        if cfg.distractor_kind == "blank":
            images.append((np.zeros((V, U, D)), None))
            continue
        grid, cap, _ = _hotspot_image(rng, cfg, content(wrong[j % len(wrong)]), cfg.confuser_strength)
        if j < cfg.replaced_confusers:
            images.append((np.zeros((V, U, D)), None))
        else:
            images.append((grid, cap if cfg.use_captions else None))

    entries = tuple(
        ImageEntry(
            u=U,
            v=V,
            tokens=g.reshape(U * V, D).astype(np.float32),
            caption=None if c is None else c.astype(np.float32),
        )
        for g, c in images
    )
    bundle = InstanceBundle(images=entries, question=question.astype(np.float32)).validate()
    return SyntheticInstance(
        bundle=bundle,
        ground_truth=gt,
        hotspot_boxes=tuple(boxes),
        option_embeddings=answers,
        relevant=tuple(relevant),
        config=cfg,
    )


@dataclass(frozen=True)
class Policy:
    kind: str = "full"
    value: float = 1.0

    @classmethod
    def full(cls) -> "Policy":
        return cls("full", 1.0)

    @classmethod
    def anchor(cls, R: float = 0.5) -> "Policy":
        return cls("anchor", float(R))

    @classmethod
    def topk(cls, ratio: float) -> "Policy":
        return cls("topk", float(ratio))

    def label(self) -> str:
        return "full" if self.kind == "full" else f"{self.kind}({self.value:g})"


@dataclass(frozen=True, eq=False)
class Evaluation:
    predicted: int
    scores: np.ndarray
    retained: int
    total: int
    beta: float | None = None

    @property
    def redundancy_rate(self) -> float:
        return 1.0 - self.retained / self.total


def retained_tokens(inst: SyntheticInstance, policy: Policy, rectify: str = "relu") -> list[np.ndarray]:
    """Per-image retained token rows under ``policy``."""
    b = inst.bundle
    if policy.kind == "full":
        return [img.tokens for img in b.images]
    out = []
    for i, img in enumerate(b.images):
        rmap = image_response_map(b, i, mode=rectify)
        if policy.kind == "anchor":
            sel = select_optimal(rmap, policy.value)
            crop = crop_tokens(img.grid(), sel.box)
            out.append(crop.reshape(-1, img.dim))
        elif policy.kind == "topk":
            out.append(gather_tokens(img.tokens, topk_retention(rmap, policy.value)))
        else:
            raise ConfigError(f"unknown policy {policy.kind!r}")
    return out


def option_scores(inst: SyntheticInstance, tokens: Sequence[np.ndarray], prior_weight: float) -> np.ndarray:
    opts = inst.option_embeddings
    x = np.concatenate([np.asarray(t, dtype=np.float64) for t in tokens], axis=0)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    # zero-norm (blank) tokens score 0 against every option
    xn = np.divide(x, norms, out=np.zeros_like(x), where=norms >= 1e-12)
    visual = (xn @ opts.T).mean(axis=0)
    q = pool_text(inst.bundle.question)
    prior = (opts @ q) / np.linalg.norm(q)
    return visual + prior_weight * prior


def _softmax(x: np.ndarray, temperature: float) -> np.ndarray:
    z = np.exp((x - x.max()) / temperature)
    return z / z.sum()


def evaluate(
    inst: SyntheticInstance,
    policy: Policy,
    fusion: FusionConfig | None = None,
    *,
    prior_weight: float | None = None,
    temperature: float | None = None,
    rectify: str | None = None,
) -> Evaluation:
    """Score every option under ``policy``; scoring knobs default to the instance's config."""
    cfg = inst.config
    prior_weight = cfg.prior_weight if prior_weight is None else prior_weight
    temperature = cfg.score_temperature if temperature is None else temperature
    rectify = cfg.rectify if rectify is None else rectify
    kept = retained_tokens(inst, policy, rectify)
    retained = sum(len(k) for k in kept)
    total = sum(img.tokens.shape[0] for img in inst.bundle.images)
    scores = option_scores(inst, kept, prior_weight)
    if fusion is None:
        return Evaluation(int(np.argmax(scores)), scores, retained, total)
    full_scores = option_scores(inst, [img.tokens for img in inst.bundle.images], prior_weight)
    b = beta(fusion, 1.0 - retained / total)
    p_cd = fuse(
        _softmax(full_scores, temperature),
        _softmax(scores, temperature),
        b,
        swap_weights=fusion.swap_weights,
    )
    return Evaluation(int(np.argmax(p_cd)), p_cd, retained, total, beta=b)


def toy_answer(inst: SyntheticInstance, policy: Policy, fusion: FusionConfig | None = None, **kw) -> int:
    """Predicted option index under ``policy`` (optionally fused with the full input)."""
    return evaluate(inst, policy, fusion, **kw).predicted


# --------------------------------------------------------------------------
# experiments


@dataclass(frozen=True)
class Condition:
    x: Any
    config: GeneratorConfig
    policy: Policy
    fusion: FusionConfig | None = None
    label: str = ""


@dataclass
class ExperimentReport:
    kind: str
    seed: int
    config: dict
    points: list[dict]
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "config": self.config,
            "params": self.params,
            "points": self.points,
        }

    def accuracy(self, x=None, label: str | None = None) -> float:
        for p in self.points:
            if (x is None or p["x"] == x) and (label is None or p["label"] == label):
                return p["accuracy"]
        raise KeyError((x, label))


def _eval_chunk(args) -> list[list[tuple[int, int, int]]]:
    conditions, indices = args
    out = []
    for idx in indices:
        cache: dict[GeneratorConfig, SyntheticInstance] = {}
        row = []
        for c in conditions:
            inst = cache.get(c.config)
            if inst is None:
                inst = cache[c.config] = gen_instance(c.config, idx)
            ev = evaluate(inst, c.policy, c.fusion)
            row.append((int(ev.predicted == inst.ground_truth), ev.retained, ev.total))
        out.append(row)
    return out


def run_conditions(conditions: Sequence[Condition], instances: int, jobs: int = 1) -> list[dict]:
    """Evaluate every condition on instance indices ``0..instances-1``."""
    conditions = list(conditions)
    indices = list(range(instances))
    if jobs > 1 and instances > 1:
        size = max(1, math.ceil(instances / (jobs * 4)))
        chunks = [indices[i : i + size] for i in range(0, instances, size)]
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            rows = [r for part in ex.map(_eval_chunk, [(conditions, c) for c in chunks]) for r in part]
    else:
        rows = _eval_chunk((conditions, indices))

    points = []
    for ci, c in enumerate(conditions):
        correct = sum(r[ci][0] for r in rows)
        kept = sum(r[ci][1] for r in rows)
        total = sum(r[ci][2] for r in rows)
        points.append(
            {
                "x": c.x,
                "label": c.label or c.policy.label(),
                "policy": c.policy.label(),
                "fusion": None if c.fusion is None else _fusion_dict(c.fusion),
                "correct": correct,
                "instances": instances,
                "accuracy": correct / instances,
                "retained_tokens": kept,
                "total_tokens": total,
                "compression_ratio": kept / total,
                "redundancy_rate": 1.0 - kept / total,
            }
        )
    return points


def _fusion_dict(f: FusionConfig) -> dict:
    return {"lambda": f.lam, "beta_override": f.beta_override, "swap_weights": f.swap_weights}


def _report(kind: str, config: GeneratorConfig, points, **params) -> ExperimentReport:
    return ExperimentReport(kind=kind, seed=config.seed, config=config.to_dict(), points=points, params=params)


def run_submergence(config: GeneratorConfig, max_distractors: int = 4, jobs: int = 1) -> ExperimentReport:
    """Full-input accuracy as 0..max_distractors blank images are appended.

    With no relevant images the 0-distractor point would be an empty
    instance, so the curve starts at 1.
    """
    if max_distractors < 0:
        raise ConfigError("max_distractors must be >= 0")
    start = 0 if config.relevant_images > 0 else 1
    if max_distractors < start:
        raise ConfigError("an instance without relevant images needs at least one distractor")
    conds = [
        Condition(n, config.replace(distractor_images=n, distractor_kind="blank", replaced_confusers=0), Policy.full())
        for n in range(start, max_distractors + 1)
    ]
    return _report("submergence", config, run_conditions(conds, config.instances, jobs), max_distractors=max_distractors)


def run_retention_sweep(config: GeneratorConfig, ratios: Sequence[float], jobs: int = 1) -> ExperimentReport:
    """Top-k retention accuracy per ratio on one shared instance set (1.0 always included)."""
    ratios = [float(r) for r in ratios]
    if not ratios:
        raise ConfigError("retention sweep needs at least one ratio")
    if any(not (0.0 < r <= 1.0) for r in ratios):
        raise ConfigError(f"ratios must lie in (0, 1], got {ratios}")
    if 1.0 not in ratios:
        ratios.append(1.0)
    conds = [Condition(r, config, Policy.topk(r)) for r in sorted(set(ratios), reverse=True)]
    return _report("retention", config, run_conditions(conds, config.instances, jobs), ratios=sorted(set(ratios)))


def run_replacement(config: GeneratorConfig, max_replaced: int, jobs: int = 1) -> ExperimentReport:
    """Full-input accuracy as confuser images are swapped one by one for blanks."""
    base = config.replace(distractor_kind="noise", replaced_confusers=0)
    if not (0 <= max_replaced <= base.distractor_images):
        raise ConfigError(
            f"max_replaced must lie in [0, {base.distractor_images}] (the confuser count), got {max_replaced}"
        )
    conds = [Condition(j, base.replace(replaced_confusers=j), Policy.full()) for j in range(max_replaced + 1)]
    return _report("replacement", base, run_conditions(conds, config.instances, jobs), max_replaced=max_replaced)


def matched_topk_ratio(anchor_point: dict) -> float:
    return anchor_point["retained_tokens"] / anchor_point["total_tokens"]


def run_policy_compare(
    config: GeneratorConfig,
    R: float = 0.5,
    lam: float = 5.0,
    swap_weights: bool = False,
    jobs: int = 1,
) -> ExperimentReport:
    """Full vs anchor(R) vs anchor(R)+fusion(lambda) vs top-k at the anchor's mean retention."""
    if not (0.0 < R <= 1.0):
        raise ConfigError(f"R must lie in (0, 1], got {R}")
    try:
        fusion = FusionConfig(lam=lam, swap_weights=swap_weights)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    first = [
        Condition("full", config, Policy.full(), label="full"),
        Condition("anchor", config, Policy.anchor(R), label="anchor"),
        Condition("anchor+cd", config, Policy.anchor(R), fusion, label="anchor+cd"),
    ]
    points = run_conditions(first, config.instances, jobs)
    ratio = matched_topk_ratio(points[1])
    points += run_conditions([Condition("topk", config, Policy.topk(ratio), label="topk")], config.instances, jobs)
    return _report(
        "compare", config, points, R=R, **{"lambda": lam}, swap_weights=swap_weights, matched_topk_ratio=ratio
    )


def run_sweep(
    config: GeneratorConfig,
    R_values: Sequence[float] = (0.1, 0.3, 0.5),
    lambda_values: Sequence[float] = (5.0,),
    swap_weights: bool = False,
    jobs: int = 1,
) -> ExperimentReport:
    """One row per (R, lambda) grid point: anchor(R)+fusion(lambda) accuracy."""
    if not R_values or not lambda_values:
        raise ConfigError("sweep needs at least one R and one lambda value")
    conds = []
    for R in R_values:
        if not (0.0 < R <= 1.0):
            raise ConfigError(f"R must lie in (0, 1], got {R}")
        for lam in lambda_values:
            try:
                fusion = FusionConfig(lam=float(lam), swap_weights=swap_weights)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
            conds.append(Condition([float(R), float(lam)], config, Policy.anchor(R), fusion, label=f"R={R:g},lambda={lam:g}"))
    rows = run_conditions(conds, config.instances, jobs)
    for row in rows:
        row["R"], row["lambda"] = row["x"]
    baseline = run_conditions([Condition("full", config, Policy.full(), label="full")], config.instances, jobs)
    return _report(
        "sweep",
        config,
        rows,
        R_values=[float(r) for r in R_values],
        lambda_values=[float(v) for v in lambda_values],
        swap_weights=swap_weights,
        baseline=baseline[0],
    )


def run_text_selection(config: GeneratorConfig, R: float = 0.5, jobs: int = 1) -> ExperimentReport:
    """Anchoring driven by captions vs by the question text alone."""
    conds = [
        Condition("vanilla", config, Policy.full(), label="vanilla"),
        Condition("question", config.replace(use_captions=False), Policy.anchor(R), label="question-based"),
        Condition("caption", config.replace(use_captions=True), Policy.anchor(R), label="caption-based"),
    ]
    return _report("text_selection", config, run_conditions(conds, config.instances, jobs), R=R)
