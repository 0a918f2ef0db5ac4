"""Loss, optimizer, subject-level splits, metrics and attention ranking."""
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from . import numerics as nx
from .connectome import build_brain_graph
from .errors import ConfigError, DivergenceError, MetricUndefinedError, ShapeError
from .instancegen import BagLayout
from .milhead import AttentionReport, forward_bags, init_model

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-12
_MAX_SPLIT_RETRIES = 200


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 50
    batch_size: int = 8
    seed: int = 0
    splits: int = 10
    val_fraction: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 10
    pos_weight: float = 1.0
    stratify: bool = False

    def validate(self):
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        for name in ("epochs", "batch_size", "splits", "patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("optimizer moment coefficients must lie in [0, 1)")
        if self.pos_weight <= 0:
            raise ConfigError(f"pos_weight must be positive, got {self.pos_weight}")
        return self

    def to_dict(self):
        return asdict(self)


# ------------------------------------------------------------ splits


@dataclass(frozen=True)
class SplitPlan:
    train_subjects: tuple
    val_subjects: tuple

    def indices(self, scans):
        train = set(self.train_subjects)
        tr = [j for j, s in enumerate(scans) if s.subject_id in train]
        va = [j for j, s in enumerate(scans) if s.subject_id not in train]
        return tr, va


def _subject_labels(scans):
    labels = {}
    for s in scans:
        labels.setdefault(s.subject_id, set()).add(int(s.label))
    return labels


def make_splits(scans, config):
    """Random subject-level train/validation partitions.

    Every scan of a subject lands on the same side, and both classes must
    appear on both sides; offending draws are redrawn.
    """
    config.validate()
    labels = _subject_labels(scans)
    subjects = sorted(labels)
    pos = [s for s in subjects if 1 in labels[s]]
    neg = [s for s in subjects if 0 in labels[s]]
    if len(pos) < 2 or len(neg) < 2:
        raise ConfigError(
            f"need >= 2 subjects per class for subject-level splits, got {len(neg)} / {len(pos)}")
    n = len(subjects)
    n_val = min(max(1, int(round(config.val_fraction * n))), n - 1)
    plans = []
    for seed in nx.derive_seeds(config.seed, config.splits, purpose=1):
        rng = nx.make_rng(seed)
        for _ in range(_MAX_SPLIT_RETRIES):
            if config.stratify:
                val = []
                for group in (neg, pos):
                    m = max(1, int(round(config.val_fraction * len(group))))
                    val += list(rng.permutation(group)[:m])
                val = set(val)
            else:
                val = set(rng.permutation(subjects)[:n_val].tolist())
            train = [s for s in subjects if s not in val]
            val_labels = set().union(*(labels[s] for s in val))
            train_labels = set().union(*(labels[s] for s in train))
            if val_labels == {0, 1} and train_labels == {0, 1}:
                break
        else:
            raise ConfigError("could not draw a split with both classes on both sides")
        plans.append(SplitPlan(tuple(train), tuple(sorted(val))))
    return plans


# ------------------------------------------------------------ loss / optimizer


def bce_loss(probability, label, pos_weight=1.0):
    """Elementwise binary cross-entropy on probabilities clamped away from 0 and 1."""
    p = nx.clip(probability, PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(label, dtype=np.float64)
    pos = nx.scale(nx.mul(nx.log(p), y), pos_weight)
    neg = nx.mul(nx.log(nx.add(nx.scale(p, -1.0), 1.0)), 1.0 - y)
    return nx.scale(nx.add(pos, neg), -1.0)


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


# ------------------------------------------------------------ metrics


def auc(scores, labels):
    """Probability that a random positive outranks a random negative (ties count 1/2)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape or s.ndim != 1:
        raise ShapeError(f"scores {s.shape} and labels {y.shape} must be equal-length vectors")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("AUC needs both classes present")
    ranks = kernels.midranks(np.ascontiguousarray(s))
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy(probabilities, labels, threshold=0.5):
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if p.size == 0:
        raise ShapeError("accuracy of an empty set")
    return float(np.mean((p >= threshold).astype(int) == y))


def count_parameters(params):
    return int(sum(p.size for p in params.named_params()))


@dataclass
class MetricsRecord:
    auc: list
    accuracy: list

    @staticmethod
    def _summary(values):
        v = np.asarray(values, dtype=np.float64)
        return float(v.mean()), float(v.std())

    @property
    def auc_mean(self):
        return self._summary(self.auc)[0]

    @property
    def auc_std(self):
        return self._summary(self.auc)[1]

    @property
    def acc_mean(self):
        return self._summary(self.accuracy)[0]

    @property
    def acc_std(self):
        return self._summary(self.accuracy)[1]

    def to_dict(self):
        return {
            "auc": [float(x) for x in self.auc],
            "accuracy": [float(x) for x in self.accuracy],
            "auc_mean": self.auc_mean, "auc_std": self.auc_std,
            "acc_mean": self.acc_mean, "acc_std": self.acc_std,
        }


def topk_occurrence(reports, k):
    """How often each instance's attention ranks within the top ``k``.

    Ties rank the lower instance index first. Returns counts in the shared
    instance enumeration order.
    """
    if not reports:
        raise ConfigError("topk_occurrence needs at least one report")
    ids = list(reports[0].instance_ids)
    for r in reports:
        if list(r.instance_ids) != ids or len(r.attention) != len(ids):
            raise ConfigError(f"report {r.scan_id} uses a different instance enumeration")
    n = len(ids)
    if not 1 <= k <= n:
        raise ConfigError(f"k must be in [1, {n}], got {k}")
    ids_arr = np.asarray(ids)
    counts = np.zeros(n, dtype=np.int64)
    for r in reports:
        a = np.asarray(r.attention, dtype=np.float64)
        order = np.lexsort((ids_arr, -a))
        counts[order[:k]] += 1
    return counts


# ------------------------------------------------------------ training loop


@dataclass
class TrainResult:
    params: object
    history: list
    best_epoch: int
    stopped_epoch: int


@dataclass
class BagData:
    """Stacked bags for a list of graphs, gathered once."""

    adjacency: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    graphs: list = field(repr=False)

    @classmethod
    def from_graphs(cls, graphs, layout):
        adj, feats = layout.gather(graphs)
        return cls(adj, feats, np.array([g.label for g in graphs], dtype=np.float64), list(graphs))

    def __len__(self):
        return self.labels.shape[0]


def _snapshot(params):
    return [p.data.copy() for p in params.named_params()]


def _restore(params, snap):
    for p, d in zip(params.named_params(), snap):
        p.data[...] = d


def predict(params, data, layout, batch_size=32):
    """Probabilities ``(S,)`` and attention ``(S, K)`` without recording a tape."""
    probs, attn = [], []
    for lo in range(0, len(data), batch_size):
        sl = slice(lo, lo + batch_size)
        a, _, _, p = forward_bags(data.adjacency[sl], data.features[sl], layout.mask, params)
        probs.append(p.data)
        attn.append(a.data)
    return np.concatenate(probs), np.concatenate(attn)


def _mean_loss(params, data, layout, pos_weight, batch_size=32):
    if len(data) == 0:
        return float("nan")
    p, _ = predict(params, data, layout, batch_size)
    return float(np.mean(bce_loss(p, data.labels, pos_weight).data))


def train_model(train_graphs, parc, instance_i, gcfg, mcfg, tcfg, val_graphs=None, seed=None,
                layout=None):
    """Adam on mean minibatch BCE; keeps the parameters with the best validation loss.

    Epoch 0 in the history is the untrained model. Without a validation set
    the final parameters are kept and early stopping is disabled.
    """
    tcfg.validate()
    if not train_graphs:
        raise ConfigError("training set is empty")
    layout = layout or BagLayout(parc, instance_i)
    train = BagData.from_graphs(train_graphs, layout)
    val = BagData.from_graphs(val_graphs, layout) if val_graphs else None
    seed = tcfg.seed if seed is None else seed
    init_seed, order_seed, drop_seed = nx.derive_seeds(seed, 3, purpose=2)
    n_time = train.features.shape[-1]
    params = init_model(gcfg, mcfg, n_time, layout.n_instances, init_seed)
    opt = Adam(params.named_params(), tcfg.learning_rate, tcfg.beta1, tcfg.beta2, tcfg.adam_eps)
    order_rng = nx.make_rng(order_seed)
    drop_rng = nx.make_rng(drop_seed)

    def val_loss():
        return _mean_loss(params, val, layout, tcfg.pos_weight) if val is not None else None

    history = [{"epoch": 0,
                "train_loss": _mean_loss(params, train, layout, tcfg.pos_weight),
                "val_loss": val_loss()}]
    best = history[0]["val_loss"] if val is not None else None
    best_epoch, best_snap, stale = 0, _snapshot(params), 0
    epoch = 0
    for epoch in range(1, tcfg.epochs + 1):
        order = order_rng.permutation(len(train))
        total = 0.0
        for lo in range(0, len(order), tcfg.batch_size):
            idx = np.sort(order[lo:lo + tcfg.batch_size])
            opt.zero_grad()
            with nx.Tape() as tape:
                _, _, _, prob = forward_bags(train.adjacency[idx], train.features[idx], layout.mask,
                                             params, training=True, rng=drop_rng)
                loss = nx.tmean(bce_loss(prob, train.labels[idx], tcfg.pos_weight))
                value = float(loss.data)
                if not math.isfinite(value):
                    raise DivergenceError("non-finite training loss", epoch)
                tape.backward(loss)
            if tcfg.learning_rate > 0:
                opt.step()
            total += value * len(idx)
        record = {"epoch": epoch, "train_loss": total / len(train), "val_loss": val_loss()}
        history.append(record)
        log.debug("epoch %d train %.5f val %s", epoch, record["train_loss"], record["val_loss"])
        if val is None:
            continue
        if not math.isfinite(record["val_loss"]):
            raise DivergenceError("non-finite validation loss", epoch)
        if record["val_loss"] < best:
            best, best_epoch, best_snap, stale = record["val_loss"], epoch, _snapshot(params), 0
        else:
            stale += 1
            if stale >= tcfg.patience:
                break
    if val is not None:
        _restore(params, best_snap)
    else:
        best_epoch = epoch
    return TrainResult(params, history, best_epoch, epoch)


# ------------------------------------------------------------ cross-validation


@dataclass
class SplitResult:
    plan: SplitPlan
    auc: float
    accuracy: float
    history: list
    best_epoch: int
    reports: list
    params: object = field(repr=False)


@dataclass
class CVResult:
    splits: list
    metrics: MetricsRecord
    n_params: int
    instance_labels: list


def attention_reports(graphs, probs, attn, layout):
    labels = layout.labels()
    subnets = [lab.split("&") for lab in labels]
    ids = [s.instance_index for s in layout.specs]
    return [AttentionReport(g.scan_id, g.subject_id, int(g.label), float(p), ids, subnets,
                            [float(x) for x in a])
            for g, p, a in zip(graphs, probs, attn)]


def cross_validate(scans, parc, instance_i, gcfg, mcfg, tcfg, graphs=None, progress=None):
    """Train and score one model per subject-level split."""
    graphs = graphs or [build_brain_graph(s, parc) for s in scans]
    layout = BagLayout(parc, instance_i)
    plans = make_splits(scans, tcfg)
    train_seeds = nx.derive_seeds(tcfg.seed, len(plans), purpose=3)
    results = []
    for j, (plan, seed) in enumerate(zip(plans, train_seeds)):
        tr, va = plan.indices(scans)
        tg, vg = [graphs[t] for t in tr], [graphs[v] for v in va]
        res = train_model(tg, parc, instance_i, gcfg, mcfg, tcfg, vg, seed=seed, layout=layout)
        vdata = BagData.from_graphs(vg, layout)
        probs, attn = predict(res.params, vdata, layout)
        split = SplitResult(plan, auc(probs, vdata.labels), accuracy(probs, vdata.labels),
                            res.history, res.best_epoch,
                            attention_reports(vg, probs, attn, layout), res.params)
        results.append(split)
        if progress is not None:
            progress(j, split)
    metrics = MetricsRecord([r.auc for r in results], [r.accuracy for r in results])
    return CVResult(results, metrics, count_parameters(results[0].params), layout.labels())
