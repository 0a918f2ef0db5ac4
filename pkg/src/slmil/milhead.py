"""Attention-based multiple-instance pooling and the diagnostic head."""
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ShapeError
from .gctrans import GctransConfig, encode_bags, encode_instance, init_gctrans_params


@dataclass
class MilConfig:
    hidden: int = 32
    gated: bool = False
    center: bool = True

    def validate(self):
        if self.hidden < 1:
            raise ConfigError(f"scorer hidden width must be >= 1, got {self.hidden}")
        return self

    def to_dict(self):
        return asdict(self)


@dataclass
class ModelParams:
    """Every learnable tensor of the model plus the shapes it was built for."""

    gctrans_config: GctransConfig
    mil_config: MilConfig
    n_time: int
    n_instances: int
    layers: list
    scorer: dict
    head: dict

    @property
    def embedding_length(self):
        return self.gctrans_config.output_length(self.n_time)

    def named_params(self):
        out = []
        for lp in self.layers:
            out.extend(lp[k] for k in lp)
        out.extend(self.scorer[k] for k in sorted(self.scorer))
        out.extend(self.head[k] for k in sorted(self.head))
        return out

    def zero_grad(self):
        for p in self.named_params():
            p.zero_grad()

    def metadata(self):
        return {
            "gctrans": self.gctrans_config.to_dict(),
            "mil": self.mil_config.to_dict(),
            "n_time": int(self.n_time),
            "n_instances": int(self.n_instances),
        }


def init_scorer(dim, cfg, rng):
    cfg.validate()
    s = {
        "w1": nx.glorot_init((dim, cfg.hidden), rng, "scorer.w1"),
        "b1": nx.ParamTensor(np.zeros(cfg.hidden), "scorer.b1"),
        "w2": nx.glorot_init((cfg.hidden, 1), rng, "scorer.w2"),
        "b2": nx.ParamTensor(np.zeros(1), "scorer.b2"),
    }
    if cfg.gated:
        s["wu"] = nx.glorot_init((dim, cfg.hidden), rng, "scorer.wu")
        s["bu"] = nx.ParamTensor(np.zeros(cfg.hidden), "scorer.bu")
    return s


def init_head(dim, rng):
    # Non-negative start: embeddings grow with aggregated connectivity, so the
    # first updates pull attention toward instances that rise above the bag
    # mean instead of settling on the weaker "avoid one instance" solution.
    w = nx.glorot_init((dim, 1), rng, "head.w")
    w.data = np.abs(w.data)
    return {
        "w": w,
        "b": nx.ParamTensor(np.zeros(1), "head.b"),
    }


def init_model(gcfg, mcfg, n_time, n_instances, seed):
    """Seeded parameters; the draw order is fixed so a seed pins every value."""
    gcfg.validate()
    mcfg.validate()
    rng = nx.make_rng(seed)
    layers = init_gctrans_params(gcfg, rng, n_instances)
    dim = gcfg.output_length(n_time)
    return ModelParams(gcfg, mcfg, int(n_time), int(n_instances), layers,
                       init_scorer(dim, mcfg, rng), init_head(dim, rng))


# ------------------------------------------------------------ MIL pieces


def center_bag(emb):
    """Subtract the bag mean over the instance axis (second to last).

    Scan-wide shifts in connectivity move every instance together; removing
    them leaves what distinguishes instances within the bag.
    """
    return nx.add(emb, nx.scale(nx.tmean(emb, axis=-2, keepdims=True), -1.0))


def _instance_scores(emb, scorer):
    """One scalar per instance: ``(..., K, D) -> (..., K)``."""
    hid = nx.tanh_map(nx.linear(emb, scorer["w1"], scorer["b1"]))
    if "wu" in scorer:
        hid = nx.mul(hid, nx.logistic(nx.linear(emb, scorer["wu"], scorer["bu"])))
    s = nx.linear(hid, scorer["w2"], scorer["b2"])
    return nx.reshape(s, s.shape[:-1])


def _as_bag(embeddings):
    if isinstance(embeddings, nx.Tensor):
        bag = embeddings
    else:
        if len(embeddings) == 0:
            raise ConfigError("empty bag")
        bag = nx.stack(list(embeddings), axis=0)
    if bag.ndim != 2 or bag.shape[0] == 0:
        raise ConfigError(f"bag must be a non-empty K x D stack, got {bag.shape}")
    return bag


def attention_scores(embeddings, scorer):
    """Softmax-normalized MLP scores over the ``K`` instance embeddings."""
    bag = _as_bag(embeddings)
    return nx.softmax(_instance_scores(bag, scorer), axis=-1)


def mil_pool(embeddings, a):
    """Attention-weighted sum of instance embeddings."""
    bag = _as_bag(embeddings)
    a = nx.as_tensor(a)
    if a.shape != (bag.shape[0],):
        raise ShapeError(f"attention length {a.shape} does not match bag of {bag.shape[0]}")
    fused = nx.matmul(nx.reshape(a, (1, -1)), bag)
    return nx.reshape(fused, (bag.shape[1],))


def classify(fused, head):
    """Return ``(logit, probability)`` tensors for a fused embedding."""
    fused = nx.as_tensor(fused)
    if fused.shape[-1] != head["w"].shape[0]:
        raise ShapeError(f"fused length {fused.shape[-1]} != head input {head['w'].shape[0]}")
    logit = nx.linear(fused, head["w"], head["b"])
    logit = nx.reshape(logit, logit.shape[:-1])
    return logit, nx.logistic(logit)


@dataclass
class MilOutput:
    attention: np.ndarray
    fused: np.ndarray
    logit: float
    probability: float
    tensors: dict = field(default=None, repr=False)


def forward_scan(instances, params):
    """Encode each instance, attend, pool and classify one scan's bag."""
    if not instances:
        raise ConfigError("forward_scan needs a non-empty bag")
    embs = [encode_instance(inst, params.layers, params.gctrans_config) for inst in instances]
    bag = nx.stack(embs, axis=0)
    if params.mil_config.center:
        bag = center_bag(bag)
    a = attention_scores(bag, params.scorer)
    fused = mil_pool(bag, a)
    logit, prob = classify(fused, params.head)
    return MilOutput(a.data.copy(), fused.data.copy(), float(logit.data), float(prob.data),
                     {"attention": a, "fused": fused, "logit": logit, "probability": prob})


def forward_bags(adj, feats, mask, params, training=False, rng=None):
    """Batched forward over stacked bags.

    Returns tensors ``(attention (B, K), fused (B, D), logit (B,), prob (B,))``.
    """
    emb = encode_bags(adj, feats, mask, params.layers, params.gctrans_config, training, rng)
    b, k, d = emb.shape
    if params.mil_config.center:
        emb = center_bag(emb)
    a = nx.softmax(_instance_scores(emb, params.scorer), axis=-1)
    fused = nx.reshape(nx.matmul(nx.reshape(a, (b, 1, k)), emb), (b, d))
    logit, prob = classify(fused, params.head)
    return a, fused, logit, prob


# ------------------------------------------------------------ attention report


@dataclass
class AttentionReport:
    scan_id: str
    subject_id: str
    label: int
    probability: float
    instance_ids: list
    subnets: list
    attention: list

    def to_json(self):
        return json.dumps({
            "scan_id": self.scan_id,
            "subject_id": self.subject_id,
            "label": int(self.label),
            "probability": float(self.probability),
            "instances": [
                {"instance_id": int(i), "subnets": list(s), "a": float(a)}
                for i, s, a in zip(self.instance_ids, self.subnets, self.attention)
            ],
        }, sort_keys=True)

    @classmethod
    def from_json(cls, line):
        d = json.loads(line)
        inst = d["instances"]
        return cls(d["scan_id"], d["subject_id"], int(d["label"]), float(d["probability"]),
                   [int(x["instance_id"]) for x in inst], [list(x["subnets"]) for x in inst],
                   [float(x["a"]) for x in inst])


def write_reports(path, reports):
    with open(path, "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")


def read_reports(path):
    with open(path, encoding="utf-8") as fh:
        return [AttentionReport.from_json(ln) for ln in fh if ln.strip()]
