"""Evaluation protocols over frozen checkpoints.

Zero-shot prompt classification, zero-shot grasp prediction, linear probing,
cross-modal retrieval mAP, and the ablation/sigma-sweep harness. Sensor ids
are always resolved from pixel prototypes here, never taken from ground
truth, mirroring the inference-time procedure.
"""

from __future__ import annotations

import dataclasses
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import trainer as trainer_mod
from .anchor import (
    AnchorSpace,
    anchor_text,
    audio_embeddings,
    build_anchor,
    is_haptic_template,
    material_names,
    vision_embeddings,
)
from .datagen import Dataset
from .encoder import encode_batch, resolve_sensors_batch
from .trainer import Checkpoint, TrainConfig

# Prompt templates with a [CLS] slot; haptic phrasings and their visual
# counterparts. Grasp outcomes use full phrases with no slot.
DEFAULT_TEMPLATES = (
    "This is an image of [CLS]",
    "This is a touch image of [CLS]",
    "This looks like [CLS]",
    "This feels like [CLS]",
    "Image of [CLS]",
    "Touch of [CLS]",
)
TEMPLATE_PAIRS = (
    ("This is a touch image of [CLS]", "This is an image of [CLS]"),
    ("This feels like [CLS]", "This looks like [CLS]"),
    ("Touch of [CLS]", "Image of [CLS]"),
)
GRASP_PHRASES = ("the object is lifted in the air", "the object is falling on the ground")
DEFAULT_ZERO_SHOT_TEMPLATE = "This feels like [CLS]"

SIGMA_SWEEP = (0.0, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class ParsedPrompt:
    kind: str  # "class" or "grasp"
    template: str
    name: str
    index: int


class PromptTemplateRegistry:
    """Known templates, class names and grasp phrases; parses full prompts."""

    def __init__(
        self,
        class_names: Sequence[str],
        templates: Sequence[str] = DEFAULT_TEMPLATES,
        grasp_phrases: Sequence[str] = GRASP_PHRASES,
    ):
        if len(set(class_names)) != len(class_names):
            raise ValueError("duplicate class names")
        for name in class_names:
            if not name or "[" in name or "]" in name:
                raise ValueError(f"invalid class name {name!r}")
        for t in templates:
            if t.count("[CLS]") != 1:
                raise ValueError(f"template {t!r} must contain exactly one [CLS] slot")
        for p in grasp_phrases:
            if "[CLS]" in p:
                raise ValueError("grasp phrases take no [CLS] slot")
        if len(grasp_phrases) != 2:
            raise ValueError("exactly two grasp phrases (stable, slip) expected")
        self.class_names = list(class_names)
        self.templates = list(templates)
        self.grasp_phrases = list(grasp_phrases)

    def substitute(self, template: str, class_name: str) -> str:
        if template not in self.templates:
            raise ValueError(f"unknown template {template!r}")
        if class_name not in self.class_names:
            raise ValueError(f"unknown class name {class_name!r}")
        return template.replace("[CLS]", f"[{class_name}]")

    def parse(self, prompt: str) -> ParsedPrompt:
        if prompt in self.grasp_phrases:
            return ParsedPrompt(
                kind="grasp", template=prompt, name=prompt,
                index=self.grasp_phrases.index(prompt),
            )
        for template in self.templates:
            prefix, suffix = template.split("[CLS]")
            head, tail = prefix + "[", "]" + suffix
            if (
                prompt.startswith(head)
                and prompt.endswith(tail)
                and len(prompt) > len(head) + len(tail)
            ):
                name = prompt[len(head) : len(prompt) - len(tail)]
                if name not in self.class_names:
                    raise ValueError(f"unknown class name {name!r} in prompt {prompt!r}")
                return ParsedPrompt(
                    kind="class", template=template, name=name,
                    index=self.class_names.index(name),
                )
        raise ValueError(f"prompt {prompt!r} matches no registered template or grasp phrase")

    @staticmethod
    def is_haptic(template: str) -> bool:
        return is_haptic_template(template)


def registry_for(anchor_space: AnchorSpace) -> PromptTemplateRegistry:
    return PromptTemplateRegistry(material_names(anchor_space.m))


def class_prompt_matrix(
    anchor_space: AnchorSpace,
    class_names: Sequence[str],
    template: str,
    registry: PromptTemplateRegistry,
) -> np.ndarray:
    """(n_classes, C) prompt embeddings for one template."""
    rows = [
        anchor_text(anchor_space, registry.substitute(template, name), registry)
        for name in class_names
    ]
    return np.stack(rows)


def zero_shot_classify(
    touch_embedding: np.ndarray,
    class_names: Sequence[str],
    template: str,
    registry: PromptTemplateRegistry,
    anchor_space: AnchorSpace,
) -> tuple[int, np.ndarray]:
    """(predicted class index, cosine score vector); ties go to the lowest index."""
    if len(class_names) < 2:
        raise ValueError("need at least 2 classes")
    prompts = class_prompt_matrix(anchor_space, class_names, template, registry)
    scores = prompts @ np.asarray(touch_embedding, dtype=np.float64)
    return int(np.argmax(scores)), scores


def zero_shot_grasp(
    touch_embedding: np.ndarray,
    registry: PromptTemplateRegistry,
    anchor_space: AnchorSpace,
) -> str:
    """Binary argmax over the two grasp phrases; equidistant resolves to stable."""
    stable = anchor_text(anchor_space, registry.grasp_phrases[0], registry)
    slip = anchor_text(anchor_space, registry.grasp_phrases[1], registry)
    emb = np.asarray(touch_embedding, dtype=np.float64)
    return "stable" if float(stable @ emb) >= float(slip @ emb) else "slip"


# ---------------------------------------------------------------------------
# Linear probing

@dataclass(frozen=True)
class ProbeConfig:
    iterations: int = 500
    lr: float = 0.1
    l2: float = 1e-4


@dataclass
class ProbeResult:
    accuracy: float
    train_accuracy: float
    n_test: int
    n_unseen: int  # test samples whose label never appears in training


def _probe_softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def linear_probe(
    train_embeddings: np.ndarray,
    train_labels: np.ndarray,
    test_embeddings: np.ndarray,
    test_labels: np.ndarray,
    probe_config: ProbeConfig = ProbeConfig(),
) -> ProbeResult:
    """Multinomial logistic regression by full-batch GD on frozen embeddings.

    Deterministic: zero init, fixed iteration count, no shuffling. Test labels
    absent from training are counted as errors and flagged in the result.
    """
    x = np.asarray(train_embeddings, dtype=np.float64)
    y_raw = np.asarray(train_labels)
    classes = np.unique(y_raw)
    if classes.size < 2:
        raise ValueError("need at least 2 classes in train labels")
    index_of = {int(c): i for i, c in enumerate(classes)}
    y = np.array([index_of[int(v)] for v in y_raw])
    n, c_dim = x.shape
    k = classes.size
    onehot = np.zeros((n, k))
    onehot[np.arange(n), y] = 1.0

    w = np.zeros((c_dim, k))
    b = np.zeros(k)
    for _ in range(probe_config.iterations):
        probs = _probe_softmax(x @ w + b)
        g = (probs - onehot) / n
        w -= probe_config.lr * (x.T @ g + probe_config.l2 * w)
        b -= probe_config.lr * g.sum(axis=0)

    train_pred = classes[np.argmax(x @ w + b, axis=1)]
    train_acc = float(np.mean(train_pred == y_raw))

    xt = np.asarray(test_embeddings, dtype=np.float64)
    yt = np.asarray(test_labels)
    pred = classes[np.argmax(xt @ w + b, axis=1)]
    unseen = np.array([int(v) not in index_of for v in yt])
    correct = (pred == yt) & ~unseen
    return ProbeResult(
        accuracy=float(np.mean(correct)) if yt.size else 0.0,
        train_accuracy=train_acc,
        n_test=int(yt.size),
        n_unseen=int(unseen.sum()),
    )


# ---------------------------------------------------------------------------
# Retrieval

@dataclass
class RetrievalTask:
    query_embeddings: np.ndarray  # (nq, C)
    query_object_ids: np.ndarray  # (nq,)
    gallery_embeddings: np.ndarray  # (ng, C)
    gallery_object_ids: np.ndarray  # (ng,)


@dataclass
class RetrievalResult:
    map: float
    n_queries: int  # queries with at least one gallery positive
    n_zero_positive: int  # excluded queries


def average_precision(ranked_relevance: Sequence[int] | np.ndarray) -> float:
    """Interpolation-free AP: mean of precision@k over positive ranks k."""
    rel = np.asarray(ranked_relevance)
    if rel.ndim != 1 or rel.size == 0:
        raise ValueError("relevance list must be non-empty and 1-d")
    if not np.all((rel == 0) | (rel == 1)):
        raise ValueError("relevance must be binary")
    positives = np.nonzero(rel)[0]
    if positives.size == 0:
        raise ValueError("query has zero positives")
    cum = np.cumsum(rel)
    precisions = cum[positives] / (positives + 1)
    return float(precisions.mean())


def cross_modal_retrieval(task: RetrievalTask) -> RetrievalResult:
    """Rank each query's gallery by cosine (ties by gallery index), average AP."""
    q = np.asarray(task.query_embeddings, dtype=np.float64)
    g = np.asarray(task.gallery_embeddings, dtype=np.float64)
    if g.shape[0] == 0:
        raise ValueError("empty gallery")
    q_obj = np.asarray(task.query_object_ids)
    g_obj = np.asarray(task.gallery_object_ids)
    scores = q @ g.T
    aps = []
    zero_pos = 0
    for i in range(q.shape[0]):
        order = np.argsort(-scores[i], kind="stable")
        rel = (g_obj[order] == q_obj[i]).astype(np.int64)
        if rel.sum() == 0:
            zero_pos += 1
            continue
        aps.append(average_precision(rel))
    return RetrievalResult(
        map=float(np.mean(aps)) if aps else 0.0,
        n_queries=len(aps),
        n_zero_positive=zero_pos,
    )


# ---------------------------------------------------------------------------
# Checkpoint-level evaluation

@dataclass
class SplitEmbeddings:
    embeddings: np.ndarray  # (n, C) touch embeddings
    material: np.ndarray
    grasp: np.ndarray
    object_id: np.ndarray
    freq: np.ndarray
    depth: np.ndarray
    centers: np.ndarray
    resolved_sensor: np.ndarray


def embed_split(ckpt: Checkpoint, dataset: Dataset, split: str) -> SplitEmbeddings:
    """Encode all touch images of a split, resolving sensors from prototypes."""
    images, material, grasp, object_id, freq, depth, centers = [], [], [], [], [], [], []
    for part in dataset.parts:
        idx = part.split_indices(split)
        if idx.size == 0:
            continue
        images.append(part.touch[idx])
        material.append(part.material_class[idx])
        grasp.append(part.grasp_outcome[idx])
        object_id.append(part.object_id[idx])
        freq.append(part.texture_frequency[idx])
        depth.append(part.contact_depth[idx])
        centers.append(part.contact_center[idx])
    if not images:
        raise ValueError(f"split {split!r} holds no samples")
    imgs = np.concatenate(images)
    resolved = resolve_sensors_batch(imgs, ckpt.prototypes)
    emb = encode_batch(ckpt.params, ckpt.encoder_config, imgs, resolved)
    return SplitEmbeddings(
        embeddings=emb,
        material=np.concatenate(material),
        grasp=np.concatenate(grasp),
        object_id=np.concatenate(object_id),
        freq=np.concatenate(freq),
        depth=np.concatenate(depth),
        centers=np.concatenate(centers),
        resolved_sensor=resolved,
    )


def eval_zero_shot(
    ckpt: Checkpoint,
    dataset: Dataset,
    split: str = "test",
    template: str = DEFAULT_ZERO_SHOT_TEMPLATE,
    embedded: SplitEmbeddings | None = None,
) -> dict[str, Any]:
    space = build_anchor(ckpt.anchor_config)
    registry = registry_for(space)
    names = registry.class_names
    se = embedded if embedded is not None else embed_split(ckpt, dataset, split)
    prompts = class_prompt_matrix(space, names, template, registry)
    scores = se.embeddings.astype(np.float64) @ prompts.T
    pred = np.argmax(scores, axis=1)
    correct = pred == se.material
    per_class = {
        names[c]: float(np.mean(correct[se.material == c]))
        for c in range(space.m)
        if np.any(se.material == c)
    }
    return {
        "accuracy": float(np.mean(correct)),
        "n": int(se.material.size),
        "template": template,
        "split": split,
        "per_class": per_class,
    }


def eval_grasp(
    ckpt: Checkpoint,
    dataset: Dataset,
    split: str = "test",
    embedded: SplitEmbeddings | None = None,
) -> dict[str, Any]:
    space = build_anchor(ckpt.anchor_config)
    registry = registry_for(space)
    se = embedded if embedded is not None else embed_split(ckpt, dataset, split)
    stable = anchor_text(space, registry.grasp_phrases[0], registry)
    slip = anchor_text(space, registry.grasp_phrases[1], registry)
    emb = se.embeddings.astype(np.float64)
    # >= keeps the tie rule: equidistant predicts stable.
    pred_stable = (emb @ stable) >= (emb @ slip)
    pred_outcome = pred_stable.astype(np.int64)  # 1 = stable, matching labels
    return {
        "accuracy": float(np.mean(pred_outcome == se.grasp)),
        "n": int(se.grasp.size),
        "split": split,
    }


def eval_probe(
    ckpt: Checkpoint,
    dataset: Dataset,
    split: str = "test",
    probe_config: ProbeConfig = ProbeConfig(),
) -> dict[str, Any]:
    train_se = embed_split(ckpt, dataset, "train")
    test_se = embed_split(ckpt, dataset, split)
    result = linear_probe(
        train_se.embeddings, train_se.material, test_se.embeddings, test_se.material,
        probe_config,
    )
    return {
        "accuracy": result.accuracy,
        "train_accuracy": result.train_accuracy,
        "n_test": result.n_test,
        "n_unseen_class": result.n_unseen,
        "iterations": probe_config.iterations,
        "split": split,
    }


def eval_retrieval(
    ckpt: Checkpoint,
    dataset: Dataset,
    modality: str = "vision",
    split: str = "test",
    embedded: SplitEmbeddings | None = None,
) -> dict[str, Any]:
    """Touch queries against a frozen-anchor gallery of the chosen modality.

    The gallery pairs each split sample with its own anchor embedding, so the
    query's paired point is present. Text galleries use the class prompt of
    each sample (object-level positives are then class-level ties; reported
    for completeness, the headline retrieval metric is touch -> vision).
    """
    space = build_anchor(ckpt.anchor_config)
    se = embedded if embedded is not None else embed_split(ckpt, dataset, split)
    if modality == "vision":
        gallery = vision_embeddings(space, se.material, se.freq, se.depth, se.centers, se.grasp)
    elif modality == "audio":
        gallery = audio_embeddings(space, se.material, se.freq, se.depth, se.centers, se.grasp)
    elif modality == "text":
        registry = registry_for(space)
        prompts = class_prompt_matrix(
            space, registry.class_names, DEFAULT_ZERO_SHOT_TEMPLATE, registry
        )
        gallery = prompts[se.material]
    else:
        raise ValueError(f"unknown modality {modality!r}")
    task = RetrievalTask(
        query_embeddings=se.embeddings,
        query_object_ids=se.object_id,
        gallery_embeddings=gallery,
        gallery_object_ids=se.object_id,
    )
    result = cross_modal_retrieval(task)
    return {
        "map": result.map,
        "n_queries": result.n_queries,
        "n_zero_positive": result.n_zero_positive,
        "modality": modality,
        "split": split,
    }


# ---------------------------------------------------------------------------
# Ablation grid

def grid_cells() -> list[dict[str, Any]]:
    """4 flag cells + 4 sigma cells; the sigma family runs the full model."""
    cells: list[dict[str, Any]] = [
        {"id": "flags-baseline", "family": "flags", "use_sensor_tokens": False, "use_mix_sampling": False, "sigma": 0.75},
        {"id": "flags-tokens", "family": "flags", "use_sensor_tokens": True, "use_mix_sampling": False, "sigma": 0.75},
        {"id": "flags-sampling", "family": "flags", "use_sensor_tokens": False, "use_mix_sampling": True, "sigma": 0.75},
        {"id": "flags-full", "family": "flags", "use_sensor_tokens": True, "use_mix_sampling": True, "sigma": 0.75},
    ]
    for sigma in SIGMA_SWEEP:
        cells.append(
            {
                "id": f"sigma-{sigma:g}",
                "family": "sigma",
                "use_sensor_tokens": True,
                "use_mix_sampling": True,
                "sigma": sigma,
            }
        )
    return cells


def _cell_config(base: TrainConfig, cell: dict[str, Any], seed: int) -> TrainConfig:
    return dataclasses.replace(
        base,
        use_sensor_tokens=bool(cell["use_sensor_tokens"]),
        use_mix_sampling=bool(cell["use_mix_sampling"]),
        sigma=float(cell["sigma"]),
        seed=seed,
    )


def _run_one(dataset: Dataset, config: TrainConfig, template: str) -> dict[str, Any]:
    ckpt = trainer_mod.fit(dataset, config)
    zs = eval_zero_shot(ckpt, dataset, "test", template)
    last = ckpt.metrics[-1] if ckpt.metrics else {}
    return {
        "seed": config.seed,
        "accuracy": zs["accuracy"],
        "final_train_loss": last.get("loss"),
        "final_val_loss": last.get("val_loss"),
    }


_WORKER_DATASET: Dataset | None = None


def _worker_init(dataset_dir: str) -> None:
    global _WORKER_DATASET
    from .datagen import read_dataset

    _WORKER_DATASET = read_dataset(dataset_dir)


def _worker_run(args: tuple[dict, int, str]) -> dict[str, Any]:
    config_dict, seed, template = args
    config = TrainConfig.from_dict(config_dict)
    assert _WORKER_DATASET is not None
    return _run_one(_WORKER_DATASET, dataclasses.replace(config, seed=seed), template)


def run_ablation_grid(
    dataset: Dataset,
    base_config: TrainConfig,
    seeds: Sequence[int] = (0, 1, 2),
    jobs: int = 1,
    dataset_dir: str | Path | None = None,
    template: str = DEFAULT_ZERO_SHOT_TEMPLATE,
) -> dict[str, Any]:
    """Train and score every (cell, seed) combination; 8 cells x len(seeds) runs.

    jobs > 1 distributes runs over worker processes, each loading the dataset
    from dataset_dir once. Failures are annotated per cell, never raised.
    """
    if dataset.k < 2:
        raise ValueError("ablation grid needs a multi-sensor dataset")
    if len(seeds) < 3:
        raise ValueError("ablation grid needs at least 3 seeds")
    cells = grid_cells()
    results: dict[str, list[dict[str, Any]]] = {cell["id"]: [] for cell in cells}
    errors: dict[str, list[dict[str, Any]]] = {cell["id"]: [] for cell in cells}

    if jobs > 1:
        if dataset_dir is None:
            raise ValueError("jobs > 1 requires dataset_dir for worker processes")
        from concurrent.futures import ProcessPoolExecutor

        tasks = []
        for cell in cells:
            for seed in seeds:
                cfg = _cell_config(base_config, cell, seed)
                tasks.append((cell["id"], (cfg.to_dict(), seed, template)))
        with ProcessPoolExecutor(
            max_workers=jobs, initializer=_worker_init, initargs=(str(dataset_dir),)
        ) as pool:
            futures = [(cid, pool.submit(_worker_run, args)) for cid, args in tasks]
            for cid, fut in futures:
                try:
                    results[cid].append(fut.result())
                except Exception as exc:  # noqa: BLE001 - annotate, keep the grid going
                    errors[cid].append({"error": f"{type(exc).__name__}: {exc}"})
    else:
        for cell in cells:
            for seed in seeds:
                cfg = _cell_config(base_config, cell, seed)
                try:
                    results[cell["id"]].append(_run_one(dataset, cfg, template))
                except Exception as exc:  # noqa: BLE001
                    errors[cell["id"]].append({"seed": seed, "error": f"{type(exc).__name__}: {exc}"})

    report_cells = []
    for cell in cells:
        runs = results[cell["id"]]
        accs = [r["accuracy"] for r in runs]
        report_cells.append(
            {
                **cell,
                "runs": runs,
                "median": statistics.median(accs) if accs else None,
                "errors": errors[cell["id"]],
            }
        )
    return {
        "metric": "zero_shot_accuracy",
        "template": template,
        "seeds": list(seeds),
        "n_runs": len(cells) * len(seeds),
        "cells": report_cells,
    }


def report_to_csv(report: dict[str, Any]) -> str:
    """Flat per-run CSV mirror of the grid report."""
    lines = ["cell_id,family,use_sensor_tokens,use_mix_sampling,sigma,seed,accuracy,final_val_loss,median"]
    for cell in report["cells"]:
        for run in cell["runs"]:
            lines.append(
                f"{cell['id']},{cell['family']},{cell['use_sensor_tokens']},"
                f"{cell['use_mix_sampling']},{cell['sigma']},{run['seed']},"
                f"{run['accuracy']},{run['final_val_loss']},{cell['median']}"
            )
    return "\n".join(lines) + "\n"


def plot_sigma_sweep(report: dict[str, Any], path: str | Path) -> None:
    """Accuracy vs sigma figure (per-seed points plus median line) as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cells = [c for c in report["cells"] if c["family"] == "sigma"]
    cells.sort(key=lambda c: c["sigma"])
    sigmas = [c["sigma"] for c in cells]
    medians = [c["median"] for c in cells]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for cell in cells:
        for run in cell["runs"]:
            ax.plot(cell["sigma"], run["accuracy"], "o", color="tab:gray", alpha=0.6, markersize=4)
    ax.plot(sigmas, medians, "-o", color="tab:blue", label="median")
    ax.set_xlabel("sigma (majority fraction per batch)")
    ax.set_ylabel("zero-shot accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
