"""Scene graphs: object nodes plus rule-derived spatial predicate edges.

Objects come in as named boxes with coordinates; pairwise "in"/"near" edges
are derived from box geometry. The graph round-trips through a JSON schema
whose floats are written in full-precision decimal text, so parsing back a
serialized graph reproduces it bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from polarground.parsing import D_TXT, embed_text

D_VIZ = D_TXT

EDGE_PREDICATES = ("near", "in")

DEFAULT_NEAR_FACTOR = 1.5


class SceneFormatError(ValueError):
    """Malformed scene JSON; the message names the offending field."""


@dataclass(frozen=True, eq=False)
class ObjectNode:
    """A detected object: label, center coordinate, box, visual feature."""

    id: int
    name: str
    coord: tuple[float, float]
    box: tuple[float, float, float, float]  # center-x, center-y, width, height
    viz: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if not isinstance(self.id, int) or self.id < 0:
            raise ValueError(f"node id must be a non-negative integer, got {self.id!r}")
        object.__setattr__(self, "coord", (float(self.coord[0]), float(self.coord[1])))
        if len(self.box) != 4:
            raise ValueError("box must be (cx, cy, w, h)")
        object.__setattr__(self, "box", tuple(float(v) for v in self.box))
        if not (self.box[2] > 0 and self.box[3] > 0):
            raise ValueError(f"box width/height must be positive, got {self.box}")
        viz = self.viz
        if viz is None:
            viz = embed_text(self.name)
        viz = np.asarray(viz, dtype=float)
        if viz.shape != (D_VIZ,):
            raise ValueError(f"viz must have shape ({D_VIZ},), got {viz.shape}")
        object.__setattr__(self, "viz", viz)

    @property
    def diagonal(self) -> float:
        return math.hypot(self.box[2], self.box[3])

    def __eq__(self, other):
        if not isinstance(other, ObjectNode):
            return NotImplemented
        return (
            self.id == other.id
            and self.name == other.name
            and self.coord == other.coord
            and self.box == other.box
            and np.array_equal(self.viz, other.viz)
        )

    def __hash__(self):
        return hash((self.id, self.name, self.coord, self.box))


@dataclass(frozen=True, eq=False)
class Edge:
    subject_id: int
    object_id: int
    predicate: str
    feature: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.subject_id == self.object_id:
            raise ValueError("edge endpoints must differ")
        if self.predicate not in EDGE_PREDICATES:
            raise ValueError(
                f"predicate must be one of {EDGE_PREDICATES}, got {self.predicate!r}"
            )
        feature = self.feature
        if feature is None:
            feature = embed_text(self.predicate)
        object.__setattr__(self, "feature", np.asarray(feature, dtype=float))

    def __eq__(self, other):
        if not isinstance(other, Edge):
            return NotImplemented
        return (
            self.subject_id == other.subject_id
            and self.object_id == other.object_id
            and self.predicate == other.predicate
            and np.array_equal(self.feature, other.feature)
        )


@dataclass(frozen=True, eq=False)
class SceneGraph:
    """Immutable node map plus ordered predicate edges."""

    nodes: dict[int, ObjectNode]
    edges: tuple[Edge, ...]

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple(self.edges))
        seen_pairs = set()
        for i, edge in enumerate(self.edges):
            for endpoint in (edge.subject_id, edge.object_id):
                if endpoint not in self.nodes:
                    raise SceneFormatError(
                        f"edge {i} references missing node id {endpoint}"
                    )
            pair = (edge.subject_id, edge.object_id)
            if pair in seen_pairs:
                raise SceneFormatError(f"duplicate edge for ordered pair {pair}")
            seen_pairs.add(pair)

    def ordered_nodes(self) -> list[ObjectNode]:
        return [self.nodes[i] for i in sorted(self.nodes)]

    def __len__(self):
        return len(self.nodes)

    def __eq__(self, other):
        if not isinstance(other, SceneGraph):
            return NotImplemented
        return self.nodes == other.nodes and self.edges == other.edges


def derive_predicate(
    u: ObjectNode, v: ObjectNode, near_factor: float = DEFAULT_NEAR_FACTOR
) -> str | None:
    """Spatial predicate from u to v, or None when they are unrelated.

    "in" when u's box lies entirely inside v's box (containment wins over
    proximity); otherwise "near" when the center distance is at most
    near_factor times the mean of the two box diagonals, boundary included.
    """
    ux, uy, uw, uh = u.box
    vx, vy, vw, vh = v.box
    inside = (
        ux - uw / 2 >= vx - vw / 2
        and ux + uw / 2 <= vx + vw / 2
        and uy - uh / 2 >= vy - vh / 2
        and uy + uh / 2 <= vy + vh / 2
    )
    if inside:
        return "in"
    distance = math.hypot(ux - vx, uy - vy)
    threshold = near_factor * 0.5 * (u.diagonal + v.diagonal)
    if distance <= threshold:
        return "near"
    return None


def build_scene_graph(
    objects: list[ObjectNode], near_factor: float = DEFAULT_NEAR_FACTOR
) -> SceneGraph:
    """One directed edge per ordered pair that satisfies a predicate rule."""
    nodes: dict[int, ObjectNode] = {}
    for obj in objects:
        if obj.id in nodes:
            raise ValueError(f"duplicate node id {obj.id}")
        nodes[obj.id] = obj
    edges = []
    for u in objects:
        for v in objects:
            if u.id == v.id:
                continue
            predicate = derive_predicate(u, v, near_factor)
            if predicate is not None:
                edges.append(Edge(subject_id=u.id, object_id=v.id, predicate=predicate))
    return SceneGraph(nodes=nodes, edges=tuple(edges))


def adjacency(graph: SceneGraph) -> np.ndarray:
    """Binary matrix with entry (u, v) = 1 iff edge u->v exists; rows and
    columns follow ascending node id."""
    order = {node_id: idx for idx, node_id in enumerate(sorted(graph.nodes))}
    matrix = np.zeros((len(order), len(order)), dtype=int)
    for edge in graph.edges:
        matrix[order[edge.subject_id], order[edge.object_id]] = 1
    return matrix


# ---------------------------------------------------------------------------
# JSON schema
# ---------------------------------------------------------------------------


def scene_to_dict(graph: SceneGraph) -> dict:
    return {
        "nodes": {
            str(node.id): {
                "name": node.name,
                "coord": list(node.coord),
                "box": list(node.box),
                "viz": [float(v) for v in node.viz],
            }
            for node in graph.ordered_nodes()
        },
        "edges": [[e.subject_id, e.predicate, e.object_id] for e in graph.edges],
    }


def scene_to_json(graph: SceneGraph) -> str:
    # json writes floats with repr's shortest round-trip text, so values
    # survive serialization bit for bit.
    return json.dumps(scene_to_dict(graph), indent=2)


def _require(data: dict, key: str, where: str):
    if key not in data:
        raise SceneFormatError(f"{where}: missing field {key!r}")
    return data[key]


def _float_pair(value, where: str) -> tuple[float, float]:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise SceneFormatError(f"{where}: expected [x, y], got {value!r}")
    return float(value[0]), float(value[1])


def scene_from_dict(data: dict) -> SceneGraph:
    if not isinstance(data, dict):
        raise SceneFormatError(f"scene must be an object, got {type(data).__name__}")
    raw_nodes = _require(data, "nodes", "scene")
    if not isinstance(raw_nodes, dict):
        raise SceneFormatError("scene.nodes must be a map of id -> node")
    nodes: dict[int, ObjectNode] = {}
    for key, raw in raw_nodes.items():
        where = f"nodes.{key}"
        try:
            node_id = int(key)
        except ValueError:
            raise SceneFormatError(f"{where}: id must be an integer") from None
        if not isinstance(raw, dict):
            raise SceneFormatError(f"{where}: node must be an object")
        name = _require(raw, "name", where)
        if not isinstance(name, str) or not name.strip():
            raise SceneFormatError(f"{where}.name: must be a nonempty string")
        coord = _float_pair(_require(raw, "coord", where), f"{where}.coord")
        box = _require(raw, "box", where)
        if not isinstance(box, (list, tuple)) or len(box) != 4:
            raise SceneFormatError(f"{where}.box: expected [cx, cy, w, h]")
        viz = raw.get("viz")
        if viz is not None:
            if not isinstance(viz, (list, tuple)) or len(viz) != D_VIZ:
                raise SceneFormatError(f"{where}.viz: expected {D_VIZ} numbers")
            viz = np.asarray(viz, dtype=float)
        try:
            node = ObjectNode(id=node_id, name=name, coord=coord, box=tuple(box), viz=viz)
        except ValueError as exc:
            raise SceneFormatError(f"{where}: {exc}") from None
        if node_id in nodes:
            raise SceneFormatError(f"{where}: duplicate node id")
        nodes[node_id] = node
    edges = []
    for i, raw in enumerate(data.get("edges", [])):
        where = f"edges[{i}]"
        if not isinstance(raw, (list, tuple)) or len(raw) != 3:
            raise SceneFormatError(f"{where}: expected [subject, predicate, object]")
        subject, predicate, obj = raw
        if not isinstance(predicate, str):
            raise SceneFormatError(f"{where}: predicate must be a string")
        try:
            edge = Edge(subject_id=int(subject), object_id=int(obj), predicate=predicate)
        except ValueError as exc:
            raise SceneFormatError(f"{where}: {exc}") from None
        edges.append(edge)
    try:
        return SceneGraph(nodes=nodes, edges=tuple(edges))
    except SceneFormatError:
        raise
    except ValueError as exc:
        raise SceneFormatError(str(exc)) from None


def scene_from_json(text: str) -> SceneGraph:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return scene_from_dict(data)


def roundtrip_serialize(graph: SceneGraph) -> SceneGraph:
    """Serialize to the JSON schema and parse back; identity on valid graphs."""
    return scene_from_json(scene_to_json(graph))
