"""GCTrans encoder: a temporal Transformer block inside a graph convolution.

One layer computes ``tanh(A @ T(H))`` where ``T`` encodes each instance's
node signals over time-point tokens and shortens the sequence by mean
pooling. Shapes inside the batched path are ``(B, K, M, T, ...)``: scans,
instances, padded nodes, time.

Token design: every node's scalar at time ``t`` is lifted to ``d_model`` with
shared weights and the lifted vectors are averaged over the instance's nodes,
giving one token per time point that summarizes the collective state. The
encoder block runs over these ``T`` tokens; each node then adds the block's
residual update to its own lifted stream and projects back to a scalar. Input
and output projections are thus the permutation-equivariant forms of a linear
``N_k -> d_model -> N_k`` map: one parameter set serves every instance size
and the layer is exactly node-permutation equivariant.
"""
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ShapeError

LAYER_KEYS = (
    "w_in", "b_in",
    "ln1_g", "ln1_b",
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
    "ln2_g", "ln2_b",
    "w_ff1", "b_ff1", "w_ff2", "b_ff2",
    "lnf_g", "lnf_b",
    "w_out", "b_out",
)

# The readout sums d_model coordinates that Adam moves in step, so it is scaled
# by 1 / d_model to keep its per-step change O(lr). It starts at zero weight
# and a positive bias: every layer then begins as tanh(c * A @ 1), a scaled
# node strength short of tanh saturation, whatever the seed.
READOUT_BIAS = 0.25


@dataclass
class GctransConfig:
    layers: int = 2
    d_model: int = 64
    heads: int = 4
    ff_width: int = 128
    shorten: int = 2
    dropout: float = 0.0
    prenorm: bool = True
    positional: bool = True
    share_weights: bool = True

    def validate(self):
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if self.d_model < 1 or self.heads < 1 or self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} must be a positive multiple of heads={self.heads}")
        if self.ff_width < 1:
            raise ConfigError(f"ff_width must be >= 1, got {self.ff_width}")
        if self.shorten < 1:
            raise ConfigError(f"shorten factor must be >= 1, got {self.shorten}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        return self

    def to_dict(self):
        return asdict(self)

    def output_length(self, n_time):
        t = int(n_time)
        for _ in range(self.layers):
            t = -(-t // self.shorten)
        return t


def _layer_shapes(cfg):
    d, f = cfg.d_model, cfg.ff_width
    shapes = {
        "w_in": (1, d), "b_in": (d,),
        "ln1_g": (d,), "ln1_b": (d,),
        "wq": (d, d), "bq": (d,), "wk": (d, d), "bk": (d,),
        "wv": (d, d), "bv": (d,), "wo": (d, d), "bo": (d,),
        "ln2_g": (d,), "ln2_b": (d,),
        "w_ff1": (d, f), "b_ff1": (f,), "w_ff2": (f, d), "b_ff2": (d,),
        "w_out": (d, 1), "b_out": (1,),
    }
    if cfg.prenorm:
        # final norm of the residual stream; post-norm already ends normalized
        shapes["lnf_g"] = (d,)
        shapes["lnf_b"] = (d,)
    return shapes


def init_gctrans_params(cfg, rng, n_instances=None):
    """Per-layer parameter dicts; unshared weights get a leading instance axis."""
    cfg.validate()
    if not cfg.share_weights and not n_instances:
        raise ConfigError("per-instance weights need n_instances")
    lead = () if cfg.share_weights else (int(n_instances),)
    layers = []
    for li in range(cfg.layers):
        params = {}
        for key, shape in _layer_shapes(cfg).items():
            name = f"gctrans.{li}.{key}"
            full = lead + shape
            if key == "w_out":
                params[key] = nx.ParamTensor(np.zeros(full), name)
            elif key.startswith("w"):
                params[key] = nx.glorot_init(full, rng, name)
            elif key == "b_out":
                params[key] = nx.ParamTensor(np.full(full, READOUT_BIAS), name)
            elif key.endswith("_g"):
                params[key] = nx.ParamTensor(np.ones(full), name)
            else:
                params[key] = nx.ParamTensor(np.zeros(full), name)
        layers.append(params)
    return layers


def positional_encoding(n_time, d_model):
    pos = np.arange(n_time)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def select_instance(layer_params, k):
    """Slice instance ``k`` out of per-instance weights (differentiably)."""
    out = {}
    for key, p in layer_params.items():
        n = p.shape[0]
        sel = np.zeros((1, n))
        sel[0, k] = 1.0
        flat = nx.reshape(p, (n, -1))
        out[key] = nx.reshape(nx.matmul(sel, flat), p.shape[1:])
    return out


def _view(p, nd, matrix):
    """Broadcast view of a parameter against an operand of rank ``nd``."""
    if p.ndim == (2 if matrix else 1):
        return p
    k = p.shape[0]
    if matrix:
        return nx.reshape(p, (k,) + (1,) * (nd - 4) + p.shape[1:])
    return nx.reshape(p, (k,) + (1,) * (nd - 3) + p.shape[1:])


def _lin(x, lp, w, b):
    nd = x.ndim
    return nx.linear(x, _view(lp[w], nd, True), _view(lp[b], nd, False))


def _ln(x, lp, g, b):
    nd = x.ndim
    return nx.layer_norm(x, _view(lp[g], nd, False), _view(lp[b], nd, False))


def _attention(z, lp, cfg):
    b, k, t, d = z.shape
    h = cfg.heads
    dh = d // h

    def heads(x):
        return nx.transpose(nx.reshape(x, (b, k, t, h, dh)), (0, 1, 3, 2, 4))

    q = heads(_lin(z, lp, "wq", "bq"))
    kt = nx.transpose(heads(_lin(z, lp, "wk", "bk")), (0, 1, 2, 4, 3))
    v = heads(_lin(z, lp, "wv", "bv"))
    probs = nx.softmax(nx.scale(nx.matmul(q, kt), 1.0 / math.sqrt(dh)), axis=-1)  # (B,K,h,T,T)
    o = nx.transpose(nx.matmul(probs, v), (0, 1, 3, 2, 4))
    return _lin(nx.reshape(o, (b, k, t, d)), lp, "wo", "bo")


def _feed_forward(z, lp):
    return _lin(nx.gelu(_lin(z, lp, "w_ff1", "b_ff1")), lp, "w_ff2", "b_ff2")


def _block(x, lp, cfg, rate, rng):
    if cfg.prenorm:
        x = nx.add(x, nx.dropout(_attention(_ln(x, lp, "ln1_g", "ln1_b"), lp, cfg), rate, rng))
        return nx.add(x, nx.dropout(_feed_forward(_ln(x, lp, "ln2_g", "ln2_b"), lp), rate, rng))
    x = _ln(nx.add(x, nx.dropout(_attention(x, lp, cfg), rate, rng)), lp, "ln1_g", "ln1_b")
    return _ln(nx.add(x, nx.dropout(_feed_forward(x, lp), rate, rng)), lp, "ln2_g", "ln2_b")


def encode_batch(feats, mask, lp, cfg, training=False, rng=None, positional=None):
    """Temporal encoder over stacked bags.

    ``feats`` is ``(B, K, M, T)``; returns ``(B, K, M, ceil(T / shorten))``.
    Node ``n``'s lifted stream is ``h_n(t) w_in + b_in + pe(t)``; its mean
    over real nodes is the time-``t`` token. After the block, node ``n``
    reads out ``token_out(t) + (h_n(t) - mean_h(t)) w_in . w_out`` where
    ``token_out`` is the (normalized) block output projected by ``w_out, b_out``.
    """
    feats = nx.as_tensor(feats)
    if feats.ndim != 4:
        raise ShapeError(f"encoder input must be (B, K, M, T), got {feats.shape}")
    b, k, m, t = feats.shape
    if mask.shape != (k, m):
        raise ShapeError(f"mask shape {mask.shape} does not match bag shape {(k, m)}")
    use_pe = cfg.positional if positional is None else positional
    rate = cfg.dropout if training and rng is not None else 0.0

    node_mask = mask[None, :, :, None]
    mean_h = nx.masked_mean(feats, node_mask, axis=2)  # (B,K,T)
    x = _lin(nx.reshape(mean_h, (b, k, t, 1)), lp, "w_in", "b_in")  # (B,K,T,d)
    if use_pe:
        x = nx.add(x, positional_encoding(t, cfg.d_model))
    z = _block(x, lp, cfg, rate, rng)
    if cfg.prenorm:
        z = _ln(z, lp, "lnf_g", "lnf_b")
    w_out = nx.scale(lp["w_out"], 1.0 / cfg.d_model)
    token_out = nx.linear(z, _view(w_out, z.ndim, True), _view(lp["b_out"], z.ndim, False))
    token_out = nx.reshape(token_out, (b, k, 1, t))
    gain = nx.matmul(lp["w_in"], w_out)  # (1, 1) or (K, 1, 1)
    dev = nx.add(feats, nx.scale(nx.reshape(mean_h, (b, k, 1, t)), -1.0))
    y = nx.add(token_out, nx.mul(dev, gain))
    return nx.time_pool(y, cfg.shorten)


def layer_batch(adj, feats, mask, lp, cfg, training=False, rng=None, positional=None):
    """``tanh(A @ T(H))`` over stacked bags; ``adj`` is ``(B, K, M, M)``."""
    enc = encode_batch(feats, mask, lp, cfg, training, rng, positional)
    return nx.tanh_map(nx.matmul(adj, enc))


def pool_batch(feats, mask):
    """Mean over real nodes: ``(B, K, M, T) -> (B, K, T)``."""
    return nx.masked_mean(feats, mask[None, :, :, None], axis=2)


def encode_bags(adj, feats, mask, layers, cfg, training=False, rng=None):
    """Instance embeddings ``(B, K, T_final)`` for stacked bags."""
    h = nx.as_tensor(feats)
    for lp in layers:
        h = layer_batch(adj, h, mask, lp, cfg, training, rng)
    return pool_batch(h, mask)


# ------------------------------------------------------------ single instance


def _single(lp, cfg, instance_index):
    if cfg.share_weights or lp["wq"].ndim == 2:
        return lp
    return select_instance(lp, instance_index)


def transformer_encode(feats, params, cfg, instance_index=0, positional=None):
    """Encode one instance's ``(N_k, T)`` node signals to ``(N_k, ceil(T / r))``."""
    feats = nx.as_tensor(feats)
    if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
        raise ShapeError(f"features must be a non-empty N_k x T matrix, got {feats.shape}")
    n, t = feats.shape
    out = encode_batch(nx.reshape(feats, (1, 1, n, t)), np.ones((1, n)),
                       _single(params, cfg, instance_index), cfg, positional=positional)
    return nx.reshape(out, out.shape[2:])


def gctrans_layer(adjacency, feats, params, cfg, instance_index=0):
    adjacency = nx.as_tensor(adjacency)
    feats = nx.as_tensor(feats)
    n = feats.shape[0]
    if adjacency.shape != (n, n):
        raise ShapeError(f"adjacency {adjacency.shape} does not match {n} nodes")
    return nx.tanh_map(nx.matmul(adjacency, transformer_encode(feats, params, cfg, instance_index)))


def graph_pool(feats):
    """Columnwise mean over nodes."""
    feats = nx.as_tensor(feats)
    if feats.ndim != 2 or feats.shape[0] == 0 or feats.shape[1] == 0:
        raise ConfigError(f"graph_pool needs a non-empty matrix, got {feats.shape}")
    return nx.tmean(feats, axis=0)


def encode_instance(instance, layers, cfg):
    """Embedding ``H_k^sub`` of one :class:`SubnetInstance`."""
    cfg.validate()
    k = instance.spec.instance_index
    h = nx.as_tensor(instance.features)
    for lp in layers:
        h = gctrans_layer(instance.adjacency, h, lp, cfg, k)
    return graph_pool(h)
