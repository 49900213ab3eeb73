"""Bayesian active-learning loop.

Per acquisition step: rank unlabeled slices by mean class-summed
predictive variance, pick representative slices per case by greedy
similarity coverage, split each selected slice's pixels into trusted
(auto-labeled by argmax) and queried (uncertainty >= tau, sent to the
annotator), merge the answers into the labeled set, then re-initialize
and retrain the model and evaluate on held-out cases.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import yaml
from scipy import ndimage

import zlib

from .core import Volume3D, _atomic_write_text
from .metrics import dice, mac
from .model import (
    ModelWeights,
    TrainConfig,
    UNetConfig,
    build_model,
    derive_seed,
    mc_forward,
    predict_volume,
    train_on_slices,
)

SliceId = tuple[str, int]  # (case_id, z_index)

STRATEGIES = ("manual", "random", "semi")


@dataclass(frozen=True)
class QueryConfig:
    tau: float = 2.5e-3
    step_fraction: float = 0.05
    n_representative: int | None = None  # per-case override of step_fraction
    pool_min_fraction: float = 0.1       # D_c >= this fraction of |D_u|

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError("tau must be >= 0")
        if not 0 < self.step_fraction <= 1:
            raise ValueError("step_fraction must lie in (0, 1]")


@dataclass
class QueryItem:
    case_id: str
    z_index: int
    query_mask: np.ndarray        # bool (H, W): pixels to annotate
    predicted_labels: np.ndarray  # argmax labels for trusted pixels
    summed_variance: np.ndarray   # float (H, W)


@dataclass
class QueryBatch:
    items: list[QueryItem] = field(default_factory=list)


@dataclass
class AnnotationResult:
    annotator_id: str
    manual_labels: list[np.ndarray] = field(default_factory=list)  # per item


@dataclass
class AcquisitionState:
    labeled: dict = field(default_factory=dict)    # SliceId -> label (H, W)
    unlabeled: list = field(default_factory=list)  # list[SliceId]
    step_index: int = 0
    history: list = field(default_factory=list)


def rank_uncertain_slices(
    weights: ModelWeights,
    slice_ids: list[SliceId],
    get_image,
    t_mc: int,
    seed: int = 0,
    pool_size: int | None = None,
) -> list[SliceId]:
    """Slices sorted by descending mean class-summed variance.

    Ties break by (case_id, z). When pool_size is given, only the top
    pool_size candidates are returned (the uncertain pool D_c).
    """
    if not slice_ids:
        raise ValueError("no unlabeled slices to rank")
    scored = []
    for sid in slice_ids:
        case_id, z = sid
        _, var = mc_forward(weights, get_image(case_id, z), t_mc,
                            seed=derive_seed(seed, zlib.crc32(case_id.encode()), z))
        scored.append((float(var.sum(axis=0).mean()), sid))
    scored.sort(key=lambda e: (-e[0], e[1]))
    ordered = [sid for _, sid in scored]
    if pool_size is not None:
        ordered = ordered[:pool_size]
    return ordered


def candidate_pool_size(n_total_step: int, n_unlabeled: int,
                        pool_min_fraction: float = 0.1) -> int:
    """Default D_c size: max(2N for this step, fraction of |D_u|)."""
    return min(
        n_unlabeled,
        max(2 * n_total_step, int(np.ceil(pool_min_fraction * n_unlabeled))),
    )


def default_descriptor(image: np.ndarray, size: int = 32) -> np.ndarray:
    """Per-slice descriptor: downsampled, mean-subtracted, unit-normalized."""
    img = np.asarray(image, dtype=np.float64)
    zoom = (size / img.shape[0], size / img.shape[1])
    small = ndimage.zoom(img, zoom, order=1, prefilter=False)
    v = small.ravel()
    v = v - v.mean()
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


def select_representative(
    d_c: list[SliceId],
    d_u: list[SliceId],
    n: int,
    get_image,
    descriptor_fn=default_descriptor,
) -> list[SliceId]:
    """Greedy pick of N slices from the uncertain pool that maximize the
    summed best cosine similarity to the whole unlabeled set.

    Ties break by candidate scan order.
    """
    if n > len(d_c):
        raise ValueError(f"n={n} exceeds candidate pool size {len(d_c)}")
    if n == 0:
        return []
    desc = {}
    for sid in set(d_c) | set(d_u):
        desc[sid] = descriptor_fn(get_image(*sid))
    u_mat = np.stack([desc[sid] for sid in d_u])  # (|D_u|, d)
    remaining = list(d_c)
    selected: list[SliceId] = []
    best_per_u = np.full(len(d_u), -np.inf)
    while len(selected) < n:
        best_val = -np.inf
        best_idx = -1
        for i, cand in enumerate(remaining):
            sims = u_mat @ desc[cand]
            val = float(np.maximum(best_per_u, sims).sum())
            if val > best_val:
                best_val, best_idx = val, i
        chosen = remaining.pop(best_idx)
        selected.append(chosen)
        best_per_u = np.maximum(best_per_u, u_mat @ desc[chosen])
    return selected


def greedy_objective(selected: list[SliceId], d_u: list[SliceId],
                     get_image, descriptor_fn=default_descriptor) -> float:
    """Objective value sum_j max_k similarity(I_j, I_k) of a selection."""
    if not selected:
        return 0.0
    u = np.stack([descriptor_fn(get_image(*sid)) for sid in d_u])
    s = np.stack([descriptor_fn(get_image(*sid)) for sid in selected])
    return float((u @ s.T).max(axis=1).sum())


def build_query(
    case_id: str,
    z_index: int,
    mean_prob: np.ndarray,
    variance: np.ndarray,
    tau: float,
) -> QueryItem:
    """Split a slice into trusted and queried pixels.

    Pixels with class-summed variance < tau are trusted and receive the
    argmax label; pixels at or above tau are queried.
    """
    sv = np.asarray(variance, dtype=np.float64).sum(axis=0)
    return QueryItem(
        case_id=case_id,
        z_index=z_index,
        query_mask=sv >= tau,
        predicted_labels=np.asarray(mean_prob).argmax(axis=0).astype(np.uint8),
        summed_variance=sv,
    )


def annotate(batch: QueryBatch, oracle) -> AnnotationResult:
    """Fill manual labels for every queried pixel via the oracle callable
    (case_id, z) -> ground-truth slice labels."""
    result = AnnotationResult(annotator_id="oracle")
    for item in batch.items:
        gt = np.asarray(oracle(item.case_id, item.z_index))
        manual = np.zeros_like(item.predicted_labels)
        manual[item.query_mask] = gt[item.query_mask]
        result.manual_labels.append(manual)
    return result


def merge_labels(item: QueryItem, manual: np.ndarray) -> np.ndarray:
    """Merged training label: manual on queried pixels, predicted elsewhere."""
    return np.where(item.query_mask, manual, item.predicted_labels).astype(np.uint8)


def run_acquisition_loop(
    pool_images: dict,
    pool_labels: dict,
    test_images: dict,
    test_labels: dict,
    initial_labeled: list[SliceId],
    model_config: UNetConfig,
    train_config: TrainConfig,
    query_config: QueryConfig,
    strategy: str,
    n_steps: int,
    seed: int = 0,
    t_mc: int = 10,
    pixel_budget_schedule: list | None = None,
    augment_params=None,
    annotator=None,
) -> tuple[ModelWeights, list[dict]]:
    """Run the oracle-driven acquisition loop.

    pool_images/test_images: case_id -> normalized image volume (Z, H, W);
    pool_labels/test_labels: case_id -> ground-truth labels (Z, H, W).
    The oracle copies ground truth on queried pixels. For the "random"
    strategy, pixel_budget_schedule (per step, list of per-slice queried
    counts recorded from a semi run) fixes the number of queried pixels;
    without it the tau rule's own counts are used. A non-None annotator
    callable (batch, step) -> list of manual label arrays replaces the
    simulated oracle (e.g. the HTTP annotation session).

    Returns the final model and the per-step history.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    all_ids = [(cid, z) for cid, vol in pool_images.items()
               for z in range(vol.shape[0])]
    labeled = {sid: pool_labels[sid[0]][sid[1]].astype(np.uint8)
               for sid in initial_labeled}
    if not labeled:
        raise ValueError("initial labeled fraction must be > 0")
    unlabeled = sorted(sid for sid in all_ids if sid not in labeled)
    state = AcquisitionState(labeled=labeled, unlabeled=unlabeled)

    def get_image(case_id, z):
        return pool_images[case_id][z]

    def oracle(case_id, z):
        return pool_labels[case_id][z]

    def retrain(step):
        weights = build_model(model_config, seed=derive_seed(seed, step, 0x41))
        slices = [(get_image(*sid), state.labeled[sid].astype(np.int64))
                  for sid in sorted(state.labeled)]
        train_on_slices(weights, slices, train_config, augment_params,
                        np.random.default_rng(derive_seed(seed, step, 0x42)))
        return weights

    def evaluate(weights):
        per_class = {c: [] for c in range(1, model_config.n_classes)}
        for cid in sorted(test_images):
            vol = Volume3D(test_images[cid])
            pred, _, _ = predict_volume(weights, vol, t_mc=t_mc,
                                        seed=derive_seed(seed, zlib.crc32(cid.encode())))
            for c in per_class:
                per_class[c].append(dice(pred.labels, test_labels[cid], c))
        mean_by_class = {c: float(np.mean(v)) for c, v in per_class.items()}
        return mean_by_class, float(np.mean(list(mean_by_class.values())))

    weights = retrain(step=0)
    for step in range(1, n_steps + 1):
        if not state.unlabeled:
            break
        # Slice selection: per-case representative pick from the uncertain pool.
        n_per_case = {}
        for cid, vol in pool_images.items():
            if query_config.n_representative is not None:
                n_per_case[cid] = query_config.n_representative
            else:
                n_per_case[cid] = max(
                    1, int(round(query_config.step_fraction * vol.shape[0])))
        n_total = sum(n_per_case.values())
        pool = rank_uncertain_slices(
            weights, state.unlabeled, get_image, t_mc,
            seed=derive_seed(seed, step, 0x43),
            pool_size=candidate_pool_size(
                n_total, len(state.unlabeled), query_config.pool_min_fraction),
        )
        selected: list[SliceId] = []
        for cid in sorted(pool_images):
            case_candidates = [sid for sid in pool if sid[0] == cid]
            case_unlabeled = [sid for sid in state.unlabeled if sid[0] == cid]
            if not case_candidates or not case_unlabeled:
                continue
            k = min(n_per_case[cid], len(case_candidates))
            selected.extend(select_representative(
                case_candidates, case_unlabeled, k, get_image))

        # Pixel selection per strategy.
        batch = QueryBatch()
        plan = None
        if strategy == "random" and pixel_budget_schedule is not None \
                and step - 1 < len(pixel_budget_schedule) and selected:
            # Replay the recorded per-step pixel total. The replayed run may
            # select a different slice set (slice ranking depends on the
            # current model), so the per-slice entries are folded onto the
            # selected slices in order, spilling any surplus onto the last.
            plan = [0] * len(selected)
            for i, b in enumerate(pixel_budget_schedule[step - 1]):
                plan[min(i, len(selected) - 1)] += int(b)
        for idx, sid in enumerate(selected):
            mean, var = mc_forward(weights, get_image(*sid), t_mc,
                                   seed=derive_seed(seed, step, 0x44, idx))
            item = build_query(sid[0], sid[1], mean, var, query_config.tau)
            if strategy == "manual":
                item.query_mask = np.ones_like(item.query_mask)
            elif strategy == "random":
                count = int(item.query_mask.sum())
                if plan is not None:
                    count = plan[idx]
                    if count > item.query_mask.size and idx + 1 < len(plan):
                        plan[idx + 1] += count - item.query_mask.size
                rng = np.random.default_rng(derive_seed(seed, step, 0x45, idx))
                flat = np.zeros(item.query_mask.size, dtype=bool)
                if count > 0:
                    flat[rng.choice(flat.size, size=min(count, flat.size),
                                    replace=False)] = True
                item.query_mask = flat.reshape(item.query_mask.shape)
            batch.items.append(item)

        if annotator is None:
            manual_list = annotate(batch, oracle).manual_labels
        else:
            manual_list = annotator(batch, step)
        macs, counts = [], []
        for item, manual in zip(batch.items, manual_list):
            state.labeled[(item.case_id, item.z_index)] = merge_labels(item, manual)
            macs.append(mac(item.query_mask))
            counts.append(int(item.query_mask.sum()))
        selected_set = set(selected)
        state.unlabeled = [sid for sid in state.unlabeled
                           if sid not in selected_set]
        state.step_index = step

        weights = retrain(step)
        dice_by_class, mean_dice = evaluate(weights)
        state.history.append({
            "step": step,
            "strategy": strategy,
            "tau": float(query_config.tau),
            "selected": [[cid, int(z)] for cid, z in selected],
            "queried_counts": counts,
            "mac": [float(m) for m in macs],
            "mac_quartiles": [float(q) for q in
                              np.percentile(macs, [25, 50, 75])] if macs else [],
            "dice_by_class": {int(c): v for c, v in dice_by_class.items()},
            "mean_dice": mean_dice,
            "n_labeled": len(state.labeled),
            "n_unlabeled": len(state.unlabeled),
        })
    return weights, state.history


def write_history(history: list[dict], path: str) -> None:
    _atomic_write_text(path, yaml.safe_dump({"steps": history}, sort_keys=False))


def load_history(path: str) -> list[dict]:
    with open(path) as f:
        return yaml.safe_load(f)["steps"]
