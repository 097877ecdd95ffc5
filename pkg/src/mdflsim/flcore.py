"""Federated-learning substrate: datasets and partitioners, local training,
the four aggregation strategies, and accuracy/energy metrics."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping

import numpy as np

from . import nn
from .comms import EnergyLedger

PARTITION_MODES = ("iid", "pathological", "dirichlet")
AGGREGATION_KINDS = ("fedavg", "fednova", "fedprox", "scaffold")

WEIGHT_SUM_TOL = 1e-9
ECR_ZETA = 1e-9


@dataclass
class ClientDataset:
    """One vehicle's local training data and private validation split."""

    x: np.ndarray
    y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray

    def __post_init__(self):
        if len(self.y) == 0:
            raise ValueError("client training set must be non-empty")
        if len(self.x) != len(self.y) or len(self.val_x) != len(self.val_y):
            raise ValueError("feature/label lengths disagree")

    @property
    def sample_count(self) -> int:
        return len(self.y)


@dataclass(frozen=True)
class PartitionSpec:
    mode: str = "iid"
    num_clients: int = 10
    alpha: float = 0.3  # Dirichlet concentration
    seed: int = 0

    def __post_init__(self):
        if self.mode not in PARTITION_MODES:
            raise ValueError(f"unknown partition mode {self.mode!r}")
        if self.num_clients < 2:
            raise ValueError("need at least 2 clients")
        if self.alpha <= 0:
            raise ValueError("Dirichlet concentration must be positive")


def make_blobs(n_samples: int, dims: int, classes: int, rng: np.random.Generator,
               radius: float = 3.0, noise: float = 1.0):
    """Gaussian blobs with class centers evenly spaced on a circle (first two
    dimensions); labels cycle through the classes."""
    if dims < 1 or classes < 2 or n_samples < classes:
        raise ValueError("need dims >= 1, classes >= 2, n_samples >= classes")
    angles = 2.0 * np.pi * np.arange(classes) / classes
    centers = np.zeros((classes, dims))
    centers[:, 0] = radius * np.cos(angles)
    if dims > 1:
        centers[:, 1] = radius * np.sin(angles)
    y = np.arange(n_samples) % classes
    x = centers[y] + rng.normal(0.0, noise, size=(n_samples, dims))
    perm = rng.permutation(n_samples)
    return x[perm], y[perm]


def partition(x: np.ndarray, y: np.ndarray, val_x: np.ndarray, val_y: np.ndarray,
              spec: PartitionSpec) -> list[ClientDataset]:
    """Split a labelled pool into per-client datasets.

    iid: uniform random split. pathological: each class is cut into equal
    shards and every client receives two shards from two distinct classes.
    dirichlet: per-class client proportions drawn from Dirichlet(alpha),
    redrawn until every client is non-empty. Validation data is always
    split uniformly.
    """
    rng = np.random.default_rng(spec.seed)
    n = len(y)
    if n < spec.num_clients:
        raise ValueError("fewer samples than clients")
    if spec.mode == "iid":
        idx_sets = np.array_split(rng.permutation(n), spec.num_clients)
    elif spec.mode == "pathological":
        idx_sets = _pathological_split(y, spec.num_clients, rng)
    else:
        idx_sets = _dirichlet_split(y, spec.num_clients, spec.alpha, rng)
    val_sets = np.array_split(rng.permutation(len(val_y)), spec.num_clients)
    clients = []
    for idx, vidx in zip(idx_sets, val_sets):
        idx = np.sort(np.asarray(idx))
        vidx = np.sort(np.asarray(vidx))
        clients.append(ClientDataset(x[idx], y[idx], val_x[vidx], val_y[vidx]))
    return clients


def _pathological_split(y: np.ndarray, num_clients: int, rng: np.random.Generator):
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("pathological split needs at least 2 classes")
    if (2 * num_clients) % len(classes) != 0:
        raise ValueError(
            f"cannot build {2 * num_clients} shards from {len(classes)} classes")
    shards_per_class = 2 * num_clients // len(classes)
    shards = []  # (class, indices)
    for c in classes:
        idx = np.flatnonzero(y == c)
        idx = idx[rng.permutation(len(idx))]
        if len(idx) < shards_per_class:
            raise ValueError(f"class {c} too small for {shards_per_class} shards")
        for part in np.array_split(idx, shards_per_class):
            shards.append((int(c), part))
    order = list(rng.permutation(len(shards)))
    pairs = []
    for i in range(num_clients):
        a = order[2 * i]
        b = order[2 * i + 1]
        if shards[a][0] == shards[b][0]:
            # swap with a later shard of a different class
            for j in range(2 * i + 2, len(order)):
                if shards[order[j]][0] != shards[a][0]:
                    order[2 * i + 1], order[j] = order[j], order[2 * i + 1]
                    b = order[2 * i + 1]
                    break
            else:
                raise ValueError("cannot give every client two distinct classes")
        pairs.append(np.concatenate([shards[a][1], shards[b][1]]))
    return pairs


def _dirichlet_split(y: np.ndarray, num_clients: int, alpha: float,
                     rng: np.random.Generator, max_tries: int = 100):
    classes = np.unique(y)
    for _ in range(max_tries):
        buckets = [[] for _ in range(num_clients)]
        for c in classes:
            idx = np.flatnonzero(y == c)
            idx = idx[rng.permutation(len(idx))]
            props = rng.dirichlet(np.full(num_clients, alpha))
            cuts = (np.cumsum(props)[:-1] * len(idx)).astype(int)
            for client, part in enumerate(np.split(idx, cuts)):
                buckets[client].append(part)
        sets = [np.concatenate(b) for b in buckets]
        if all(len(s) > 0 for s in sets):
            return sets
    raise ValueError("could not draw a Dirichlet split with all clients non-empty")


class FedAvg:
    """Sample-count weighted parameter averaging."""

    name = "fedavg"

    def prepare(self, client_ids: Iterable[int], n_params: int) -> None:
        pass

    def gradient_correction(self, client_id, params, start_params):
        return None

    def after_local_training(self, client_id, start_params, end_params,
                             iterations, eta) -> None:
        pass

    def aggregate(self, global_params: np.ndarray,
                  models: Mapping[int, np.ndarray],
                  weights: Mapping[int, float],
                  iterations: Mapping[int, int]) -> np.ndarray:
        _check_aggregate_inputs(global_params, models, weights)
        out = np.zeros_like(global_params)
        for vid in sorted(models):
            out += weights[vid] * models[vid]
        return out


class FedProx(FedAvg):
    """FedAvg aggregation plus a proximal pull toward the round's start model."""

    name = "fedprox"

    def __init__(self, mu: float = 0.01):
        if mu < 0:
            raise ValueError("proximal coefficient must be >= 0")
        self.mu = float(mu)

    def gradient_correction(self, client_id, params, start_params):
        if self.mu == 0.0:
            return None
        return self.mu * (params - start_params)


class FedNova(FedAvg):
    """Normalized averaging: per-client updates are rescaled by their local
    iteration counts so heterogeneous step counts do not bias the average."""

    name = "fednova"

    def aggregate(self, global_params, models, weights, iterations):
        _check_aggregate_inputs(global_params, models, weights)
        tau_eff = 0.0
        normalized = np.zeros_like(global_params)
        for vid in sorted(models):
            tau = iterations[vid]
            if tau < 1:
                raise ValueError("iteration counts must be >= 1")
            tau_eff += weights[vid] * tau
            normalized += weights[vid] * (models[vid] - global_params) / tau
        return global_params + tau_eff * normalized


class Scaffold(FedAvg):
    """FedAvg plus server/client control variates correcting client drift."""

    name = "scaffold"

    def __init__(self):
        self.server_control: np.ndarray | None = None
        self.client_controls: dict[int, np.ndarray] = {}
        self._pending: dict[int, np.ndarray] = {}

    def prepare(self, client_ids: Iterable[int], n_params: int) -> None:
        self.server_control = np.zeros(n_params)
        self.client_controls = {int(v): np.zeros(n_params) for v in client_ids}
        self._pending = {}

    def _ensure(self, client_id, n_params):
        if self.server_control is None:
            self.server_control = np.zeros(n_params)
        if client_id not in self.client_controls:
            self.client_controls[client_id] = np.zeros(n_params)

    def gradient_correction(self, client_id, params, start_params):
        self._ensure(client_id, len(params))
        return self.server_control - self.client_controls[client_id]

    def after_local_training(self, client_id, start_params, end_params,
                             iterations, eta) -> None:
        self._ensure(client_id, len(start_params))
        c_old = self.client_controls[client_id]
        c_new = c_old - self.server_control + (start_params - end_params) / (iterations * eta)
        self._pending[client_id] = c_new

    def aggregate(self, global_params, models, weights, iterations):
        out = super().aggregate(global_params, models, weights, iterations)
        n_total = max(len(self.client_controls), 1)
        delta = np.zeros_like(global_params)
        for vid in sorted(self._pending):
            delta += self._pending[vid] - self.client_controls[vid]
            self.client_controls[vid] = self._pending[vid]
        self._pending = {}
        self.server_control = self.server_control + delta / n_total
        return out


def _check_aggregate_inputs(global_params, models, weights):
    if set(models) != set(weights):
        raise ValueError("model and weight keys disagree")
    total = sum(float(weights[v]) for v in weights)
    if abs(total - 1.0) > WEIGHT_SUM_TOL:
        raise ValueError(f"aggregation weights sum to {total}, expected 1")
    for vid, m in models.items():
        if m.shape != global_params.shape:
            raise ValueError(f"model shape mismatch for vehicle {vid}")


def build_strategy(kind: str, mu: float = 0.01):
    kind = kind.lower()
    if kind == "fedavg":
        return FedAvg()
    if kind == "fednova":
        return FedNova()
    if kind == "fedprox":
        return FedProx(mu)
    if kind == "scaffold":
        return Scaffold()
    raise ValueError(f"unknown aggregation strategy {kind!r}")


def sample_weights(clients: Mapping[int, ClientDataset],
                   members: Iterable[int]) -> dict[int, float]:
    """FedAvg weights beta_v = n_v / sum(n) over the participating vehicles."""
    members = sorted(members)
    total = sum(clients[v].sample_count for v in members)
    return {v: clients[v].sample_count / total for v in members}


def local_train(params: np.ndarray, client: ClientDataset, iterations: int,
                eta: float, netspec: nn.NetSpec, strategy=None,
                client_id: int | None = None) -> np.ndarray:
    """Run full-batch gradient steps on the client's cross-entropy loss.

    The strategy hook adds per-step gradient corrections (FedProx proximal
    term, Scaffold control variates) and observes the finished update.
    """
    if iterations < 1:
        raise ValueError("iteration count must be >= 1")
    start = params
    p = params.copy()
    for _ in range(iterations):
        loss, grad = nn.softmax_cross_entropy(netspec, p, client.x, client.y)
        if not np.isfinite(loss):
            raise ValueError("local loss diverged")
        if strategy is not None:
            correction = strategy.gradient_correction(client_id, p, start)
            if correction is not None:
                grad = grad + correction
        p = nn.sgd_step(p, grad, eta)
    if strategy is not None:
        strategy.after_local_training(client_id, start, p, iterations, eta)
    return p


def evaluate(netspec: nn.NetSpec, params: np.ndarray,
             val_x: np.ndarray, val_y: np.ndarray) -> float:
    """Fraction of argmax-correct predictions on the validation set."""
    if len(val_y) == 0:
        raise ValueError("validation set must be non-empty")
    out, _ = nn.forward(netspec, params, val_x)
    return float((out.argmax(axis=-1) == np.asarray(val_y)).mean())


def f_acc(models: Mapping[int, np.ndarray], members: Iterable[int],
          clients: Mapping[int, ClientDataset], netspec: nn.NetSpec) -> float:
    """Mean per-vehicle validation accuracy over the given members."""
    members = sorted(members)
    if not members:
        raise ValueError("accuracy is undefined for an empty member set")
    accs = [evaluate(netspec, models[v], clients[v].val_x, clients[v].val_y)
            for v in members]
    return float(np.mean(accs))


def ecr(ledger: EnergyLedger, zeta: float = ECR_ZETA,
        per_vehicle_mean: bool = False) -> float:
    """Share of spent energy that went into computation.

    Default is the ratio of totals across all vehicles and rounds; the
    per-vehicle variant averages each vehicle's own ratio instead.
    """
    if per_vehicle_mean:
        cmp_by_v: dict[int, Fraction] = {}
        sum_by_v: dict[int, Fraction] = {}
        for row in ledger.per_round:
            cmp_by_v[row.vehicle_id] = cmp_by_v.get(row.vehicle_id, Fraction(0)) + row.e_cmp
            sum_by_v[row.vehicle_id] = sum_by_v.get(row.vehicle_id, Fraction(0)) + row.e_sum
        if not cmp_by_v:
            return 0.0
        ratios = [float(cmp_by_v[v]) / (float(sum_by_v[v]) + zeta) for v in cmp_by_v]
        return float(np.mean(ratios))
    total_cmp = sum((row.e_cmp for row in ledger.per_round), Fraction(0))
    total_sum = sum((row.e_sum for row in ledger.per_round), Fraction(0))
    return float(total_cmp) / (float(total_sum) + zeta)


def e_total(ledger: EnergyLedger, round_k: int | None = None) -> Fraction:
    """Total energy drawn from all vehicles up to and including round_k."""
    if round_k is None:
        return ledger.total_spent()
    return sum((row.e_sum for row in ledger.per_round if row.round_k <= round_k),
               Fraction(0))


IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def ingest_idx(images_path, labels_path, num_classes: int | None = None):
    """Load an IDX image/label pair into (features in [0,1], labels)."""
    with open(images_path, "rb") as fh:
        img = fh.read()
    with open(labels_path, "rb") as fh:
        lab = fh.read()
    if len(img) < 16 or struct.unpack(">I", img[:4])[0] != IDX_IMAGES_MAGIC:
        raise ValueError("bad IDX image magic")
    if len(lab) < 8 or struct.unpack(">I", lab[:4])[0] != IDX_LABELS_MAGIC:
        raise ValueError("bad IDX label magic")
    n_img, rows, cols = struct.unpack(">III", img[4:16])
    n_lab = struct.unpack(">I", lab[4:8])[0]
    if n_img != n_lab:
        raise ValueError(f"image count {n_img} != label count {n_lab}")
    if len(img) - 16 != n_img * rows * cols:
        raise ValueError("truncated IDX image payload")
    if len(lab) - 8 != n_lab:
        raise ValueError("truncated IDX label payload")
    x = np.frombuffer(img, dtype=np.uint8, offset=16).reshape(n_img, rows * cols)
    y = np.frombuffer(lab, dtype=np.uint8, offset=8).astype(np.int64)
    if num_classes is not None and y.size and int(y.max()) >= num_classes:
        raise ValueError(f"label {int(y.max())} outside 0..{num_classes - 1}")
    return x.astype(np.float64) / 255.0, y
