"""Expert construction: head grouping, neuron splits, balanced k-means
router initialization, and gradient-based neuron importance partitioning.

All operations are pure functions of (weights, dataset, seed); identical
inputs produce identical plans.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import container
from .errors import ConfigError, ContractError, InsufficientDataError, NumericError
from .model import DenseWeights, FeatureBank, ForwardTrace, ModelConfig, lm_loss
from .tensor import zero_grads


@dataclass
class AttentionExpertPlan:
    """Contiguous query-head ranges per expert plus their KV-head references."""

    n_experts: int
    head_ranges: list[tuple[int, int]]
    kv_heads: list[list[int]]

    def heads_of(self, expert: int) -> list[int]:
        lo, hi = self.head_ranges[expert]
        return list(range(lo, hi))

    def validate(self, h: int) -> None:
        flat = [i for lo, hi in self.head_ranges for i in range(lo, hi)]
        if flat != list(range(h)):
            raise ConfigError("attention plan does not cover query heads in order")
        sizes = {hi - lo for lo, hi in self.head_ranges}
        if len(sizes) != 1:
            raise ConfigError("attention experts differ in head count")


@dataclass
class MlpPartitionPlan:
    """Disjoint, exhaustive neuron subsets: routed experts plus an
    optional always-active shared subset."""

    n_experts: int
    routed: list[list[int]]
    shared: list[int]
    mode: str  # "even" | "residual"

    def validate(self, n: int) -> None:
        seen: set[int] = set()
        for subset in self.routed + [self.shared]:
            for idx in subset:
                if idx in seen:
                    raise ConfigError(f"neuron {idx} assigned twice")
                seen.add(idx)
        if seen != set(range(n)):
            raise ConfigError(f"plan covers {len(seen)} of {n} neurons")
        sizes = {len(s) for s in self.routed}
        if len(sizes) != 1:
            raise ConfigError(f"routed expert sizes differ: {sorted(sizes)}")
        if self.mode not in ("even", "residual"):
            raise ConfigError(f"unknown plan mode {self.mode!r}")


@dataclass
class Centroids:
    """Balanced k-means result for one feature set."""

    centers: np.ndarray          # [N_E, d]
    assignment: np.ndarray       # [N] cluster index per feature
    objective: float
    objective_history: list[float] = field(default_factory=list)

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.centers.shape[0])


@dataclass
class RouterWeights:
    """Per-layer routing matrices, each [d_h, N_E]."""

    layers: list[np.ndarray]

    @property
    def n_experts(self) -> int:
        return self.layers[0].shape[1]


@dataclass
class ImportanceAccumulator:
    """Running-mean neuron importance per expert, one table per layer."""

    scores: list[np.ndarray]   # each [N_E, n]
    counts: list[np.ndarray]   # each [N_E] int64


# -- plan constructors -----------------------------------------------------------


def plan_attention_experts(h: int, h_kv: int, n_experts: int) -> AttentionExpertPlan:
    """Group query heads into ``n_experts`` contiguous, equal-size blocks.

    Expert j owns heads [j*h/N, (j+1)*h/N); its KV references follow the
    grouped-query rule head // (h / h_kv). Experts may share a KV head.
    """
    if h % h_kv != 0:
        raise ConfigError(f"h={h} must be divisible by h_kv={h_kv}")
    if n_experts < 1 or h % n_experts != 0:
        raise ConfigError(f"expert count {n_experts} must divide head count {h}")
    per = h // n_experts
    group = h // h_kv
    ranges = [(j * per, (j + 1) * per) for j in range(n_experts)]
    kv = [sorted({i // group for i in range(lo, hi)}) for lo, hi in ranges]
    plan = AttentionExpertPlan(n_experts=n_experts, head_ranges=ranges, kv_heads=kv)
    plan.validate(h)
    return plan


def plan_even_mlp_split(n: int, n_experts: int) -> MlpPartitionPlan:
    """Contiguous equal blocks of intermediate neurons, no shared subset."""
    if n_experts < 1 or n % n_experts != 0:
        raise ConfigError(f"expert count {n_experts} must divide neuron count {n}")
    per = n // n_experts
    plan = MlpPartitionPlan(
        n_experts=n_experts,
        routed=[list(range(j * per, (j + 1) * per)) for j in range(n_experts)],
        shared=[],
        mode="even",
    )
    plan.validate(n)
    return plan


# -- balanced k-means --------------------------------------------------------------


def _pairwise_sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    p2 = (points * points).sum(axis=1)[:, None]
    c2 = (centers * centers).sum(axis=1)[None, :]
    d = p2 + c2 - 2.0 * points @ centers.T
    np.maximum(d, 0.0, out=d)
    return d


def _seed_centers(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Distance-weighted (k-means++ style) seeding."""
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=points.dtype)
    centers[0] = points[rng.integers(n)]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = points[rng.integers(n)]
            continue
        probs = d2 / total
        centers[j] = points[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, ((points - centers[j]) ** 2).sum(axis=1))
    return centers


def _balanced_assign(dists: np.ndarray, base: int, extra: int) -> np.ndarray:
    """Greedy capacity-constrained assignment by ascending distance.

    Every cluster takes at most ``base`` points; ``extra`` overflow slots
    of one point each are handed out first-come. Ties resolve by point
    then cluster index.
    """
    n, k = dists.shape
    order = np.argsort(dists, axis=None, kind="stable")
    assignment = np.full(n, -1, dtype=np.int64)
    counts = np.zeros(k, dtype=np.int64)
    overflow_used = 0
    assigned = 0
    for flat in order:
        p, c = divmod(int(flat), k)
        if assignment[p] >= 0:
            continue
        if counts[c] < base:
            assignment[p] = c
        elif counts[c] == base and overflow_used < extra:
            assignment[p] = c
            overflow_used += 1
        else:
            continue
        counts[c] += 1
        assigned += 1
        if assigned == n:
            break
    return assignment


def balanced_kmeans(features: np.ndarray, n_experts: int, max_iters: int = 50,
                    seed: int = 0) -> Centroids:
    """L2 k-means constrained to cluster sizes within +-1 of N/N_E.

    The assignment step is greedy by ascending point-centroid distance
    under per-cluster capacities; a candidate assignment is kept only if
    it does not increase the objective, so the objective is non-increasing
    across iterations by construction.
    """
    points = np.asarray(features, dtype=np.float64)
    if points.ndim != 2:
        raise ContractError(f"features must be 2-D, got shape {list(points.shape)}")
    n = points.shape[0]
    if n < n_experts:
        raise ContractError(f"need at least {n_experts} features, got {n}")
    base, extra = divmod(n, n_experts)

    rng = np.random.default_rng(seed)
    centers = _seed_centers(points, n_experts, rng)
    dists = _pairwise_sq_dists(points, centers)
    assignment = _balanced_assign(dists, base, extra)
    objective = float(dists[np.arange(n), assignment].sum())
    history = [objective]

    for _ in range(max_iters):
        for j in range(n_experts):
            членs = points[assignment == j]
            if len(членs):
                centers[j] = членs.mean(axis=0)
        dists = _pairwise_sq_dists(points, centers)
        candidate = _balanced_assign(dists, base, extra)
        cand_obj = float(dists[np.arange(n), candidate].sum())
        cur_obj = float(dists[np.arange(n), assignment].sum())
        if cand_obj <= cur_obj:
            changed = not np.array_equal(candidate, assignment)
            assignment = candidate
            objective = cand_obj
        else:
            changed = False
            objective = cur_obj
        history.append(objective)
        if not changed:
            break

    for j in range(n_experts):
        members = points[assignment == j]
        if len(members):
            centers[j] = members.mean(axis=0)
    dists = _pairwise_sq_dists(points, centers)
    objective = float(dists[np.arange(n), assignment].sum())
    history.append(objective)
    return Centroids(centers=centers, assignment=assignment, objective=objective,
                     objective_history=history)


def init_router(bank: FeatureBank, n_experts: int, seed: int,
                max_iters: int = 50) -> RouterWeights:
    """Cluster each layer's MLP-input features; centroids become the
    router columns, so every column is representative of a same-size
    feature set."""
    if not bank.layers:
        raise ContractError("feature bank has no layers")
    layers = []
    for i, feats in enumerate(bank.layers):
        layer_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        cents = balanced_kmeans(feats, n_experts, max_iters=max_iters, seed=layer_seed)
        layers.append(np.ascontiguousarray(cents.centers.T.astype(np.float32)))
    return RouterWeights(layers=layers)


def random_router(cfg: ModelConfig, n_experts: int, seed: int, std: float = 0.02) -> RouterWeights:
    """Seeded normal(0, std) routers for constructions that skip clustering."""
    rng = np.random.default_rng(seed)
    return RouterWeights(
        layers=[rng.normal(0.0, std, size=(cfg.d_h, n_experts)).astype(np.float32)
                for _ in range(cfg.l)]
    )


# -- importance accumulation ---------------------------------------------------------


def accumulate_importance(weights: DenseWeights, cfg: ModelConfig,
                          router: RouterWeights, dataset) -> ImportanceAccumulator:
    """Per-expert running mean of neuron importance over a validation set.

    For each token feature f, neuron i scores |a_i * dL/da_i| where a_i is
    its intermediate activation under the language-model loss: the
    first-order loss change if the neuron were pruned. The token's scores
    update the expert argmax(f . W_R) as a running mean, in corpus order.
    """
    dataset = list(dataset)
    if not dataset:
        raise ContractError("accumulate_importance: dataset is empty")
    if len(router.layers) != cfg.l:
        raise ContractError(
            f"router covers {len(router.layers)} layers, model has {cfg.l}"
        )
    n_experts = router.n_experts
    scores = [np.zeros((n_experts, cfg.n), dtype=np.float64) for _ in range(cfg.l)]
    counts = [np.zeros(n_experts, dtype=np.int64) for _ in range(cfg.l)]

    for seq_idx, seq in enumerate(dataset):
        trace = ForwardTrace()
        loss = lm_loss(np.asarray(seq), cfg, weights, trace=trace)
        zero_grads(loss)
        loss.backward()
        for layer in range(cfg.l):
            act = trace.mlp_activations[layer]
            grad = act.grad
            if grad is None:
                grad = np.zeros_like(act.data)
            if not np.isfinite(grad).all():
                raise NumericError(
                    f"non-finite activation gradient at layer {layer}, sequence {seq_idx}"
                )
            feats = trace.mlp_inputs[layer].data  # [T, d_h]
            s = np.abs(act.data.astype(np.float64) * grad.astype(np.float64))  # [T, n]
            routed = np.argmax(feats @ router.layers[layer], axis=1)
            for t in range(feats.shape[0]):
                expert = int(routed[t])
                k = counts[layer][expert]
                scores[layer][expert] = scores[layer][expert] * (k / (k + 1)) + s[t] / (k + 1)
                counts[layer][expert] += 1
    return ImportanceAccumulator(scores=scores, counts=counts)


# -- importance-based partition --------------------------------------------------------


def partition_neurons(importance: np.ndarray, n_shared: int,
                      counts: np.ndarray | None = None) -> MlpPartitionPlan:
    """Split neurons into a shared subset plus balanced routed experts.

    The shared subset takes the ``n_shared`` neurons with the highest
    min-over-experts importance (valuable to everyone). Remaining neurons
    go to experts greedily by descending importance under equal per-expert
    capacity; ties resolve by (neuron index, expert index).
    """
    importance = np.asarray(importance, dtype=np.float64)
    n_experts, n = importance.shape
    if n_shared < 0 or (n - n_shared) % n_experts != 0:
        raise ConfigError(
            f"cannot split {n} neurons into {n_shared} shared + {n_experts} equal experts"
        )
    if counts is not None and (np.asarray(counts) == 0).any():
        idle = np.nonzero(np.asarray(counts) == 0)[0].tolist()
        raise InsufficientDataError(
            f"experts {idle} received no features; use a larger validation set"
        )

    sharedness = importance.min(axis=0)  # [n]
    shared_order = sorted(range(n), key=lambda i: (-sharedness[i], i))
    shared = sorted(shared_order[:n_shared])
    remaining = sorted(set(range(n)) - set(shared))

    capacity = (n - n_shared) // n_experts
    pairs = sorted(
        ((i, j) for i in remaining for j in range(n_experts)),
        key=lambda p: (-importance[p[1], p[0]], p[0], p[1]),
    )
    routed: list[list[int]] = [[] for _ in range(n_experts)]
    taken: set[int] = set()
    for i, j in pairs:
        if i in taken or len(routed[j]) >= capacity:
            continue
        routed[j].append(i)
        taken.add(i)
        if len(taken) == len(remaining):
            break
    plan = MlpPartitionPlan(
        n_experts=n_experts,
        routed=[sorted(s) for s in routed],
        shared=shared,
        mode="residual",
    )
    plan.validate(n)
    return plan


def partition_all_layers(acc: ImportanceAccumulator, n_shared: int) -> list[MlpPartitionPlan]:
    return [
        partition_neurons(acc.scores[i], n_shared, counts=acc.counts[i])
        for i in range(len(acc.scores))
    ]


# -- serialization -----------------------------------------------------------------


def plan_to_json(plan, top_k: int) -> str:
    """Plan documents: {"type", "n_experts", "top_k", "shared_size", "assignments"}."""
    if isinstance(plan, AttentionExpertPlan):
        doc = {
            "type": "attention",
            "n_experts": plan.n_experts,
            "top_k": top_k,
            "shared_size": 0,
            "assignments": [plan.heads_of(j) for j in range(plan.n_experts)],
        }
    else:
        doc = {
            "type": "mlp",
            "n_experts": plan.n_experts,
            "top_k": top_k,
            "shared_size": len(plan.shared),
            "assignments": [list(s) for s in plan.routed],
        }
    return json.dumps(doc, indent=2)


def plan_from_json(text: str, n_units: int):
    """Inverse of plan_to_json. ``n_units`` is h for attention plans and n
    for MLP plans; the shared subset is recovered as the complement of the
    routed assignments. Returns (plan, top_k)."""
    doc = json.loads(text)
    for key in ("type", "n_experts", "top_k", "shared_size", "assignments"):
        if key not in doc:
            raise ConfigError(f"plan document missing key {key!r}")
    assigns = [list(map(int, s)) for s in doc["assignments"]]
    if doc["type"] == "attention":
        ranges = []
        for heads in assigns:
            if heads != list(range(heads[0], heads[-1] + 1)):
                raise ConfigError("attention plan heads must be contiguous")
            ranges.append((heads[0], heads[-1] + 1))
        group = None
        plan = AttentionExpertPlan(n_experts=doc["n_experts"], head_ranges=ranges, kv_heads=[])
        plan.validate(n_units)
        return plan, int(doc["top_k"])
    if doc["type"] == "mlp":
        covered = set()
        for s in assigns:
            covered.update(s)
        if len(covered) != sum(len(s) for s in assigns):
            raise ConfigError("mlp plan has overlapping neuron assignments")
        shared = sorted(set(range(n_units)) - covered)
        if len(shared) != doc["shared_size"]:
            raise ConfigError(
                f"shared_size {doc['shared_size']} does not match uncovered neurons {len(shared)}"
            )
        plan = MlpPartitionPlan(
            n_experts=doc["n_experts"],
            routed=assigns,
            shared=shared,
            mode="residual" if shared else "even",
        )
        plan.validate(n_units)
        return plan, int(doc["top_k"])
    raise ConfigError(f"unknown plan type {doc['type']!r}")


def save_routers(router: RouterWeights, path) -> None:
    container.write_tensors(
        path, {f"router.layer{i}": w for i, w in enumerate(router.layers)}
    )


def load_routers(path) -> RouterWeights:
    tensors = container.read_tensors(path)
    layers = []
    i = 0
    while f"router.layer{i}" in tensors:
        layers.append(tensors[f"router.layer{i}"])
        i += 1
    if not layers:
        raise ConfigError("no router tensors in container")
    return RouterWeights(layers=layers)


def save_importance(acc: ImportanceAccumulator, path) -> None:
    tensors = {}
    for i, table in enumerate(acc.scores):
        for j in range(table.shape[0]):
            tensors[f"importance.layer{i}.expert{j}"] = table[j]
        tensors[f"importance_counts.layer{i}"] = acc.counts[i].astype(np.float64)
    container.write_tensors(path, tensors)
