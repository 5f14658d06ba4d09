"""Learnable estimator mapping (scene graph, relation tuple) to a mixture of
object-anchored polar distributions, updated incrementally across tuples.

Node features (positional encoding, projected visual/referent/predicate
embeddings, compressed previous state) run through a stack of hybrid
message-passing + global-attention layers; five small MLP heads then read a
weight and polar parameters per object. Training is Adam on the combined
location/weight loss, with gradients from the tape in `autodiff`.

Forward code is written against the autodiff ops, so the same functions run
in three modes: taped (training), plain value (inference), and batched value
(finite-difference checking over many parameter perturbations at once).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from polarground import autodiff as ad
from polarground.autodiff import (
    add,
    atan2,
    concat,
    cos,
    div,
    exp,
    log,
    log_bessel_i0,
    matmul,
    maximum,
    mul,
    reduce_max,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    shape_of,
    softmax,
    softplus,
    sqrt,
    sub,
    swapaxes,
    take,
    tile_rows,
)
from polarground.parsing import D_TXT, RelationTuple
from polarground.polar import (
    KAPPA_MAX,
    MixtureComponent,
    PolarParams,
    SpatialMixture,
)
from polarground.scene import D_VIZ, SceneGraph

_LN_EPS = 1e-5
_WEIGHT_FLOOR = 1e-12

DEFAULT_WORKSPACE = (0.0, 1.0, 0.0, 1.0)


@dataclass(frozen=True)
class EstimatorConfig:
    """Architecture and training hyperparameters.

    freqs: number of sinusoid octaves in the positional encoding.
    width: projected width of each embedded feature block.
    layers: depth of the hybrid message-passing/attention stack.
    loss_mix: weight on the location loss vs. the weight-head loss.
    """

    freqs: int = 4
    width: int = 32
    layers: int = 2
    heads: int = 2
    loss_mix: float = 0.5
    seed: int = 0
    workspace: tuple[float, float, float, float] = DEFAULT_WORKSPACE

    def __post_init__(self):
        if self.freqs < 1 or self.width < 1 or self.layers < 1 or self.heads < 1:
            raise ValueError("freqs, width, layers, heads must be positive")
        if not 0.0 <= self.loss_mix <= 1.0:
            raise ValueError(f"loss_mix must be in [0, 1], got {self.loss_mix}")
        if self.node_width % self.heads != 0:
            raise ValueError(
                f"node width {self.node_width} not divisible by {self.heads} heads"
            )

    @property
    def encoding_width(self) -> int:
        return 2 * (2 * self.freqs + 1)

    @property
    def node_width(self) -> int:
        # Four projected blocks plus the positional encoding.
        return 4 * self.width + self.encoding_width


@dataclass(frozen=True)
class EstimatorState:
    """Per-node hidden vectors carried between consecutive tuples."""

    hidden: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return self.hidden.shape[0]

    def flattened(self) -> np.ndarray:
        return self.hidden.reshape(-1)


def zero_state(n_nodes: int, config: EstimatorConfig) -> EstimatorState:
    return EstimatorState(hidden=np.zeros((n_nodes, config.node_width)))


@dataclass(frozen=True)
class TrainingSample:
    """A scene, its relation tuples, and per-tuple ground truth."""

    scene: SceneGraph
    tuples: tuple[RelationTuple, ...]
    x_des: tuple[tuple[float, float], ...]
    w_des: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "tuples", tuple(self.tuples))
        object.__setattr__(self, "x_des", tuple(tuple(p) for p in self.x_des))
        object.__setattr__(
            self, "w_des", tuple(np.asarray(w, dtype=float) for w in self.w_des)
        )
        if not (len(self.tuples) == len(self.x_des) == len(self.w_des)):
            raise ValueError("tuples, x_des, w_des must have equal length")
        n = len(self.scene)
        for w in self.w_des:
            if w.shape != (n,):
                raise ValueError(f"w_des must have length {n}, got {w.shape}")
            if not (np.count_nonzero(w) == 1 and w.sum() == 1.0):
                raise ValueError("w_des must be one-hot")

    def hot_indices(self) -> list[int]:
        return [int(np.argmax(w)) for w in self.w_des]


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

HEAD_NAMES = ("weight", "dist_mean", "dist_var", "conc_inv", "angle")
_HEAD_OUT = {"weight": 1, "dist_mean": 1, "dist_var": 1, "conc_inv": 1, "angle": 2}


def _parameter_shapes(config: EstimatorConfig) -> dict[str, tuple]:
    d = config.width
    dn = config.node_width
    shapes: dict[str, tuple] = {
        "proj_viz": (d, D_VIZ),
        "proj_ref": (d, D_TXT),
        "proj_pred": (d, D_TXT),
        "proj_state": (d, dn),
        "proj_edge": (dn, D_TXT),
    }
    for l in range(config.layers):
        p = f"layer{l}."
        shapes[p + "gine_eps"] = ()
        shapes[p + "gine_w1"] = (dn, dn)
        shapes[p + "gine_b1"] = (dn,)
        shapes[p + "gine_w2"] = (dn, dn)
        shapes[p + "gine_b2"] = (dn,)
        for name in ("q", "k", "v", "o"):
            shapes[p + f"attn_w{name}"] = (dn, dn)
            shapes[p + f"attn_b{name}"] = (dn,)
        shapes[p + "norm1_gain"] = (dn,)
        shapes[p + "norm1_bias"] = (dn,)
        shapes[p + "ffn_w1"] = (2 * dn, dn)
        shapes[p + "ffn_b1"] = (2 * dn,)
        shapes[p + "ffn_w2"] = (dn, 2 * dn)
        shapes[p + "ffn_b2"] = (dn,)
        shapes[p + "norm2_gain"] = (dn,)
        shapes[p + "norm2_bias"] = (dn,)
    for head in HEAD_NAMES:
        shapes[f"head_{head}_w1"] = (dn, dn)
        shapes[f"head_{head}_b1"] = (dn,)
        shapes[f"head_{head}_w2"] = (_HEAD_OUT[head], dn)
        shapes[f"head_{head}_b2"] = (_HEAD_OUT[head],)
    return shapes


def init_parameters(config: EstimatorConfig) -> dict[str, np.ndarray]:
    """Weights uniform in +-1/sqrt(fan_in); biases and eps zero; norm gains 1."""
    rng = np.random.Generator(np.random.PCG64(config.seed))
    params: dict[str, np.ndarray] = {}
    for name, shape in _parameter_shapes(config).items():
        if name.endswith("_gain"):
            params[name] = np.ones(shape)
        elif name.endswith(("_bias", "_b1", "_b2", "bq", "bk", "bv", "bo", "eps")):
            params[name] = np.zeros(shape)
        elif len(shape) == 2:
            bound = 1.0 / math.sqrt(shape[-1])
            params[name] = rng.uniform(-bound, bound, size=shape)
        else:
            params[name] = np.zeros(shape)
    return params


@dataclass(frozen=True)
class EstimatorModel:
    config: EstimatorConfig
    params: dict[str, np.ndarray]

    def __post_init__(self):
        expected = _parameter_shapes(self.config)
        if set(self.params) != set(expected):
            missing = set(expected) - set(self.params)
            extra = set(self.params) - set(expected)
            raise ValueError(f"parameter mismatch: missing={missing}, extra={extra}")
        for name, shape in expected.items():
            got = np.asarray(self.params[name])
            if got.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {got.shape}")
            if not np.all(np.isfinite(got)):
                raise ValueError(f"{name}: non-finite values")


def new_model(config: EstimatorConfig) -> EstimatorModel:
    return EstimatorModel(config=config, params=init_parameters(config))


MODEL_FORMAT = "polarground-model-v1"


def model_to_json(model: EstimatorModel) -> str:
    cfg = model.config
    return json.dumps(
        {
            "format": MODEL_FORMAT,
            "config": {
                "freqs": cfg.freqs,
                "width": cfg.width,
                "layers": cfg.layers,
                "heads": cfg.heads,
                "loss_mix": cfg.loss_mix,
                "seed": cfg.seed,
                "workspace": list(cfg.workspace),
            },
            "params": {
                name: {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
                for name, arr in model.params.items()
            },
        },
        indent=1,
    )


def model_from_json(text: str) -> EstimatorModel:
    data = json.loads(text)
    if data.get("format") != MODEL_FORMAT:
        raise ValueError(f"unsupported model format: {data.get('format')!r}")
    raw_cfg = data["config"]
    config = EstimatorConfig(
        freqs=raw_cfg["freqs"],
        width=raw_cfg["width"],
        layers=raw_cfg["layers"],
        heads=raw_cfg["heads"],
        loss_mix=raw_cfg["loss_mix"],
        seed=raw_cfg["seed"],
        workspace=tuple(raw_cfg["workspace"]),
    )
    params = {
        name: np.asarray(entry["data"], dtype=float).reshape(entry["shape"])
        for name, entry in data["params"].items()
    }
    return EstimatorModel(config=config, params=params)


# ---------------------------------------------------------------------------
# Scene packing (constants reused across steps and training epochs)
# ---------------------------------------------------------------------------


def positional_encode(coord, freqs: int):
    """Sinusoidal encoding of a normalized coordinate pair.

    Per coordinate c: [c, sin(2^0 pi c), cos(2^0 pi c), ...,
    sin(2^(freqs-1) pi c), cos(2^(freqs-1) pi c)], concatenated over both
    coordinates, for a total width of 2(2*freqs + 1).
    """
    c = np.asarray(coord, dtype=float)
    parts = []
    for axis in range(2):
        v = c[..., axis]
        parts.append(v[..., None])
        for j in range(freqs):
            angle = (2.0**j) * math.pi * v
            parts.append(np.sin(angle)[..., None])
            parts.append(np.cos(angle)[..., None])
    return np.concatenate(parts, axis=-1)


@dataclass(frozen=True)
class ScenePack:
    """Precomputed constant tensors for one scene."""

    n_nodes: int
    node_ids: tuple[int, ...]
    anchors: np.ndarray  # (N, 2)
    encoded_coords: np.ndarray  # (N, encoding_width)
    viz: np.ndarray  # (N, D_VIZ)
    edge_src: np.ndarray  # (E,) gather indices (message senders)
    edge_scatter: np.ndarray  # (N, E) 0/1 scatter-to-receiver matrix
    edge_features: np.ndarray  # (E, D_TXT)


def _normalize_coords(coords: np.ndarray, workspace) -> np.ndarray:
    x_min, x_max, y_min, y_max = workspace
    out = np.empty_like(coords)
    out[..., 0] = 2.0 * (coords[..., 0] - x_min) / (x_max - x_min) - 1.0
    out[..., 1] = 2.0 * (coords[..., 1] - y_min) / (y_max - y_min) - 1.0
    return out


def pack_scene(scene: SceneGraph, config: EstimatorConfig) -> ScenePack:
    nodes = scene.ordered_nodes()
    if not nodes:
        raise ValueError("scene has no objects")
    index_of = {node.id: i for i, node in enumerate(nodes)}
    anchors = np.array([node.coord for node in nodes], dtype=float)
    encoded = positional_encode(_normalize_coords(anchors, config.workspace), config.freqs)
    viz = np.stack([node.viz for node in nodes])
    # Row-major edge order (by sender index, then receiver index) so that the
    # edge-feature rows line up with the adjacency matrix scan order.
    edges = sorted(
        scene.edges, key=lambda e: (index_of[e.subject_id], index_of[e.object_id])
    )
    edge_src = np.array([index_of[e.subject_id] for e in edges], dtype=int)
    edge_tgt = np.array([index_of[e.object_id] for e in edges], dtype=int)
    scatter = np.zeros((len(nodes), len(edges)))
    for col, tgt in enumerate(edge_tgt):
        scatter[tgt, col] = 1.0
    features = (
        np.stack([e.feature for e in edges])
        if edges
        else np.zeros((0, D_TXT))
    )
    return ScenePack(
        n_nodes=len(nodes),
        node_ids=tuple(node.id for node in nodes),
        anchors=anchors,
        encoded_coords=encoded,
        viz=viz,
        edge_src=edge_src,
        edge_scatter=scatter,
        edge_features=features,
    )


# ---------------------------------------------------------------------------
# Forward pieces (tape/value/batched polymorphic)
# ---------------------------------------------------------------------------


def _t(w):
    return swapaxes(w, -1, -2)


def _addrow(x, b):
    """Add a (..., d) bias to every row of a (..., n, d) matrix."""
    return add(x, _rowvec(b))


def _rowvec(b):
    """View a (..., d) vector as (..., 1, d) for row-wise broadcasting."""
    bshape = shape_of(b)
    return reshape(b, bshape[:-1] + (1, bshape[-1]))


def _matvec(m, v):
    """(..., out, in) @ (..., in) -> (..., out), batch-safe."""
    col = reshape(v, shape_of(v) + (1,))
    out = matmul(m, col)
    return reshape(out, shape_of(out)[:-1])


def _layernorm(x, gain, bias):
    mu = reduce_mean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = reduce_mean(mul(centered, centered), axis=-1, keepdims=True)
    normed = div(centered, sqrt(add(var, _LN_EPS)))
    return add(mul(normed, _rowvec(gain)), _rowvec(bias))


def assemble_features(pack: ScenePack, rel_ref, rel_pred, prev_state, params):
    """Build the initial node matrix (N, node_width) and edge matrix.

    Each node row concatenates its positional encoding, the projected visual
    feature, the projected referent/predicate embeddings (shared across
    nodes), and a compressed summary of the previous state (max-pool over
    nodes, then a linear map). Edge rows are projected predicate embeddings.
    """
    n = pack.n_nodes
    viz_proj = matmul(pack.viz, _t(params["proj_viz"]))  # (N, width)
    ref_proj = _matvec(params["proj_ref"], rel_ref)  # (width,)
    pred_proj = _matvec(params["proj_pred"], rel_pred)
    pooled = reduce_max(prev_state, axis=-2)  # (node_width,)
    state_proj = _matvec(params["proj_state"], pooled)  # (width,)
    x0 = concat(
        [
            pack.encoded_coords,
            viz_proj,
            tile_rows(ref_proj, n),
            tile_rows(pred_proj, n),
            tile_rows(state_proj, n),
        ],
        axis=-1,
    )
    e0 = matmul(pack.edge_features, _t(params["proj_edge"]))  # (E, node_width)
    return x0, e0


def _gine_branch(x, e, pack: ScenePack, params, prefix):
    # m_u = MLP((1 + eps) x_u + sum over incoming edges relu(x_src + e))
    gathered = take(x, pack.edge_src, axis=-2)  # (E, node_width)
    messages = relu(add(gathered, e))
    aggregated = matmul(pack.edge_scatter, messages)  # (N, node_width)
    pre = add(mul(add(1.0, params[prefix + "gine_eps"]), x), aggregated)
    h = relu(_addrow(matmul(pre, _t(params[prefix + "gine_w1"])), params[prefix + "gine_b1"]))
    return _addrow(matmul(h, _t(params[prefix + "gine_w2"])), params[prefix + "gine_b2"])


def _attention_branch(x, params, prefix, n_heads: int):
    q = _addrow(matmul(x, _t(params[prefix + "attn_wq"])), params[prefix + "attn_bq"])
    k = _addrow(matmul(x, _t(params[prefix + "attn_wk"])), params[prefix + "attn_bk"])
    v = _addrow(matmul(x, _t(params[prefix + "attn_wv"])), params[prefix + "attn_bv"])
    qshape = shape_of(q)
    n, width = qshape[-2], qshape[-1]
    head_dim = width // n_heads
    split = qshape[:-1] + (n_heads, head_dim)

    def heads_first(m):
        return swapaxes(reshape(m, split), -3, -2)  # (..., heads, N, head_dim)

    qh, kh, vh = heads_first(q), heads_first(k), heads_first(v)
    scores = div(matmul(qh, _t(kh)), math.sqrt(head_dim))
    attention = softmax(scores, axis=-1)
    mixed = swapaxes(matmul(attention, vh), -3, -2)  # (..., N, heads, head_dim)
    merged = reshape(mixed, qshape[:-1] + (width,))
    return _addrow(matmul(merged, _t(params[prefix + "attn_wo"])), params[prefix + "attn_bo"])


def _gps_forward(x, e, pack: ScenePack, params, prefix, n_heads: int):
    message = _gine_branch(x, e, pack, params, prefix)
    attended = _attention_branch(x, params, prefix, n_heads)
    h = _layernorm(
        add(add(x, message), attended),
        params[prefix + "norm1_gain"],
        params[prefix + "norm1_bias"],
    )
    ffn = _addrow(
        matmul(
            relu(_addrow(matmul(h, _t(params[prefix + "ffn_w1"])), params[prefix + "ffn_b1"])),
            _t(params[prefix + "ffn_w2"]),
        ),
        params[prefix + "ffn_b2"],
    )
    out = _layernorm(
        add(h, ffn), params[prefix + "norm2_gain"], params[prefix + "norm2_bias"]
    )
    return out, e  # edge features pass through unchanged


def gps_layer_forward(x, e, adjacency: np.ndarray, layer_params: dict, n_heads: int = 2):
    """One hybrid layer on explicit inputs.

    `adjacency` is the 0/1 node-order matrix; rows of `e` follow the
    row-major order of its nonzero entries. `layer_params` holds this
    layer's parameters under unprefixed names (gine_w1, attn_wq, ...).
    """
    adjacency = np.asarray(adjacency)
    pairs = np.argwhere(adjacency == 1)
    scatter = np.zeros((adjacency.shape[0], len(pairs)))
    for col, (_, tgt) in enumerate(pairs):
        scatter[tgt, col] = 1.0
    pack = ScenePack(
        n_nodes=adjacency.shape[0],
        node_ids=tuple(range(adjacency.shape[0])),
        anchors=np.zeros((adjacency.shape[0], 2)),
        encoded_coords=np.zeros((adjacency.shape[0], 0)),
        viz=np.zeros((adjacency.shape[0], D_VIZ)),
        edge_src=pairs[:, 0] if len(pairs) else np.zeros(0, dtype=int),
        edge_scatter=scatter,
        edge_features=np.zeros((len(pairs), D_TXT)),
    )
    return _gps_forward(x, e, pack, layer_params, "", n_heads)


def predict_heads(x_row, params):
    """Polar parameters and weight from final node vectors.

    Accepts (..., N, node_width); returns dict of (..., N, 1) outputs with
    all domain constraints guaranteed by construction: softplus for the
    non-negative parameters, the concentration head produces an inverse
    concentration, and the angle comes from an atan2 over a 2-D head.
    """

    def head(name):
        h = relu(_addrow(matmul(x_row, _t(params[f"head_{name}_w1"])), params[f"head_{name}_b1"]))
        return _addrow(matmul(h, _t(params[f"head_{name}_w2"])), params[f"head_{name}_b2"])

    weight = softplus(head("weight"))
    dist_mean = softplus(head("dist_mean"))
    dist_var = softplus(head("dist_var"))
    inv_conc = softplus(head("conc_inv"))
    concentration = div(1.0, maximum(inv_conc, 1.0 / KAPPA_MAX))
    angle_head = head("angle")
    angle = atan2(
        take(angle_head, [1], axis=-1), take(angle_head, [0], axis=-1)
    )
    return {
        "weight": weight,
        "dist_mean": dist_mean,
        "dist_var": dist_var,
        "concentration": concentration,
        "angle": angle,
    }


def forward_step(pack: ScenePack, rel_ref, rel_pred, prev_state, params, config):
    """One tuple through the stack; returns (head outputs, new state)."""
    x, e = assemble_features(pack, rel_ref, rel_pred, prev_state, params)
    for l in range(config.layers):
        x, e = _gps_forward(x, e, pack, params, f"layer{l}.", config.heads)
    return predict_heads(x, params), x


def forward_sequence(pack: ScenePack, tuple_feats, params, config):
    """All tuples in order, chaining the state; list of (heads, state)."""
    state = np.zeros((pack.n_nodes, config.node_width))
    outputs = []
    for rel_ref, rel_pred in tuple_feats:
        heads, state = forward_step(pack, rel_ref, rel_pred, state, params, config)
        outputs.append((heads, state))
    return outputs


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _polar_geometry(anchor, x_des) -> tuple[float, float]:
    dx = x_des[0] - anchor[0]
    dy = x_des[1] - anchor[1]
    d = math.hypot(dx, dy)
    phi = math.atan2(dy, dx) if d > 0.0 else 0.0
    return d, phi


def _step_loss(heads, pack: ScenePack, x_des, hot_index: int, loss_mix: float):
    """Taped combined loss for one tuple; returns (..., ) scalars.

    Location term: negative log of the hot component's polar density at the
    target. Weight term: cross-entropy of the normalized weights against the
    one-hot ground truth, averaged over nodes.
    """
    d, phi = _polar_geometry(pack.anchors[hot_index], x_des)
    mu_d = take(heads["dist_mean"], [hot_index], axis=-2)
    var_d = take(heads["dist_var"], [hot_index], axis=-2)
    kappa = take(heads["concentration"], [hot_index], axis=-2)
    mu_phi = take(heads["angle"], [hot_index], axis=-2)
    residual = sub(d, mu_d)
    log_gauss = sub(
        mul(-0.5, log(mul(2.0 * math.pi, var_d))),
        div(mul(residual, residual), mul(2.0, var_d)),
    )
    log_vm = sub(
        mul(kappa, cos(sub(phi, mu_phi))),
        add(math.log(2.0 * math.pi), log_bessel_i0(kappa)),
    )
    nll_location = mul(-1.0, add(log_gauss, log_vm))
    weights = heads["weight"]
    normalized = div(weights, reduce_sum(weights, axis=-2, keepdims=True))
    hot_weight = take(normalized, [hot_index], axis=-2)
    cross_entropy = mul(
        -1.0 / pack.n_nodes, log(maximum(hot_weight, _WEIGHT_FLOOR))
    )
    l1 = reduce_sum(nll_location, axis=(-1, -2))
    l2 = reduce_sum(cross_entropy, axis=(-1, -2))
    total = add(mul(loss_mix, l1), mul(1.0 - loss_mix, l2))
    return total, l1, l2


def loss_total(
    mixture: SpatialMixture,
    x_des: tuple[float, float],
    w_des: np.ndarray,
    loss_mix: float,
) -> tuple[float, float, float]:
    """Combined loss of a predicted mixture against one ground truth.

    Returns (total, location term, weight term). w_des must be one-hot.
    """
    if not 0.0 <= loss_mix <= 1.0:
        raise ValueError(f"loss_mix must be in [0, 1], got {loss_mix}")
    w_des = np.asarray(w_des, dtype=float)
    n = len(mixture.components)
    if w_des.shape != (n,):
        raise ValueError(f"w_des must have length {n}")
    if not (np.count_nonzero(w_des) == 1 and w_des.sum() == 1.0):
        raise ValueError("w_des must be one-hot")
    hot = int(np.argmax(w_des))
    comp = mixture.components[hot]
    from polarground.polar import polar_log_score

    l1 = -polar_log_score(x_des, comp)
    normalized = mixture.normalized_weights()
    l2 = -math.log(max(float(normalized[hot]), _WEIGHT_FLOOR)) / n
    total = loss_mix * l1 + (1.0 - loss_mix) * l2
    return total, l1, l2


def sequence_loss(pack, tuple_feats, targets, hot_indices, params, config):
    """Sum of per-tuple combined losses across the whole sequence."""
    outputs = forward_sequence(pack, tuple_feats, params, config)
    total = None
    for (heads, _), x_des, hot in zip(outputs, targets, hot_indices):
        step, _, _ = _step_loss(heads, pack, x_des, hot, config.loss_mix)
        total = step if total is None else add(total, step)
    return total


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def _heads_to_mixture(heads, pack: ScenePack) -> SpatialMixture:
    weight = np.asarray(ad.value_of(heads["weight"]))[..., 0]
    mu_d = np.asarray(ad.value_of(heads["dist_mean"]))[..., 0]
    var_d = np.asarray(ad.value_of(heads["dist_var"]))[..., 0]
    kappa = np.asarray(ad.value_of(heads["concentration"]))[..., 0]
    mu_phi = np.asarray(ad.value_of(heads["angle"]))[..., 0]
    components = tuple(
        MixtureComponent(
            weight=float(weight[j]),
            params=PolarParams(
                mu_d=float(mu_d[j]),
                var_d=float(var_d[j]),
                mu_phi=float(mu_phi[j]),
                kappa_phi=float(kappa[j]),
            ),
            anchor=(float(pack.anchors[j, 0]), float(pack.anchors[j, 1])),
            node_id=pack.node_ids[j],
        )
        for j in range(pack.n_nodes)
    )
    return SpatialMixture(components=components)


def estimate_sequence(
    scene: SceneGraph, tuples: list[RelationTuple], model: EstimatorModel
) -> list[tuple[SpatialMixture, EstimatorState]]:
    """Run the tuples in order, returning the mixture and state after each."""
    if not tuples:
        raise ValueError("need at least one relation tuple")
    pack = pack_scene(scene, model.config)
    feats = [(t.f_ref, t.f_pred) for t in tuples]
    outputs = forward_sequence(pack, feats, model.params, model.config)
    return [
        (_heads_to_mixture(heads, pack), EstimatorState(hidden=np.asarray(state)))
        for heads, state in outputs
    ]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


def train(
    data: list[TrainingSample],
    config: EstimatorConfig,
    epochs: int = 30,
    learning_rate: float = 1e-3,
    clip_norm: float = 5.0,
    weight_decay: float = 0.0,
    history: list | None = None,
) -> EstimatorModel:
    """Adam training, one update per sample, deterministic under config.seed.

    Per sample the whole tuple sequence runs forward and the summed loss is
    backpropagated through every step (including the state chain). Gradients
    are clipped at a global norm of `clip_norm`; `weight_decay` applies
    decoupled decay to the weight matrices (never to gains, biases, or the
    message-passing epsilon). Appends per-sample losses to `history` when
    given.
    """
    if not data:
        raise ValueError("training data must be nonempty")
    params = init_parameters(config)
    packs = [pack_scene(sample.scene, config) for sample in data]
    feats = [[(t.f_ref, t.f_pred) for t in sample.tuples] for sample in data]
    hots = [sample.hot_indices() for sample in data]
    rng = np.random.Generator(np.random.PCG64(config.seed + 1))
    adam_m = {k: np.zeros_like(v) for k, v in params.items()}
    adam_v = {k: np.zeros_like(v) for k, v in params.items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(data))
        for idx in order:
            sample = data[idx]
            taped = {k: ad.Tensor(v) for k, v in params.items()}
            loss = sequence_loss(
                packs[idx], feats[idx], sample.x_des, hots[idx], taped, config
            )
            loss_value = float(loss.value)
            if not math.isfinite(loss_value):
                raise DivergenceError(f"loss became {loss_value} at step {step}")
            if history is not None:
                history.append(loss_value)
            ad.backward(loss)
            grads = {
                k: (t.grad if t.grad is not None else np.zeros_like(t.value))
                for k, t in taped.items()
            }
            total_norm = math.sqrt(
                sum(float(np.sum(g * g)) for g in grads.values())
            )
            if total_norm > clip_norm:
                scale = clip_norm / total_norm
                grads = {k: g * scale for k, g in grads.items()}
            step += 1
            for k in params:
                adam_m[k] = beta1 * adam_m[k] + (1 - beta1) * grads[k]
                adam_v[k] = beta2 * adam_v[k] + (1 - beta2) * grads[k] ** 2
                m_hat = adam_m[k] / (1 - beta1**step)
                v_hat = adam_v[k] / (1 - beta2**step)
                if weight_decay and params[k].ndim == 2:
                    params[k] = params[k] * (1.0 - learning_rate * weight_decay)
                params[k] = params[k] - learning_rate * m_hat / (np.sqrt(v_hat) + eps)
    return EstimatorModel(config=config, params=params)


# ---------------------------------------------------------------------------
# Flat parameter views (finite-difference support)
# ---------------------------------------------------------------------------


def flatten_params(params: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(v).reshape(-1) for v in params.values()])


def unflatten_params(
    flat: np.ndarray, reference: dict[str, np.ndarray]
) -> dict[str, np.ndarray]:
    """Rebuild a parameter dict from a flat vector.

    `flat` may carry leading batch dimensions; each parameter then gains the
    same leading dimensions, which the forward code broadcasts through.
    """
    out = {}
    offset = 0
    lead = flat.shape[:-1]
    for name, ref in reference.items():
        size = int(np.prod(ref.shape)) if ref.shape else 1
        chunk = flat[..., offset : offset + size]
        # Scalars keep two trailing singleton axes in batched mode so they
        # broadcast against (..., N, D) activations.
        shape = lead + (ref.shape if ref.shape else ((1, 1) if lead else ()))
        out[name] = chunk.reshape(shape)
        offset += size
    return out
